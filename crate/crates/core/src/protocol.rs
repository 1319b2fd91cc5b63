//! Tag dialects spoken between the agent loop and the model.
//!
//! A [`Dialect`] fixes eight literal delimiters: reasoning, action (search
//! query), information (retrieved evidence) and answer. Parsing is total:
//! anything that does not form a complete, recognized tag pair is kept as
//! [`SegmentKind::Plain`] text so that sloppy model output never aborts an
//! episode.

use serde::{Deserialize, Serialize};

use crate::knowledge::{EvidenceKind, RetrievalResult};

/// Sentinel rendered in place of evidence when a retrieval returns nothing.
pub const NO_RESULTS: &str = "No results found.";

/// Default per-unit character budget for rendered evidence.
pub const DEFAULT_UNIT_CHAR_BUDGET: usize = 2000;

const TRUNCATION_MARKER: &str = " [truncated]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DialectName {
    /// `<think> <search> <information> <answer>`
    AngleTag,
    /// `<|begin_search_query|>` / `<|begin_search_result|>` family.
    PipeTag,
    /// `<think> <query> <knowledge> <answer>`
    QueryTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dialect {
    pub name: DialectName,
    pub think_open: &'static str,
    pub think_close: &'static str,
    pub action_open: &'static str,
    pub action_close: &'static str,
    pub info_open: &'static str,
    pub info_close: &'static str,
    pub answer_open: &'static str,
    pub answer_close: &'static str,
}

impl Dialect {
    pub const ANGLE: Dialect = Dialect {
        name: DialectName::AngleTag,
        think_open: "<think>",
        think_close: "</think>",
        action_open: "<search>",
        action_close: "</search>",
        info_open: "<information>",
        info_close: "</information>",
        answer_open: "<answer>",
        answer_close: "</answer>",
    };

    // The search and result delimiters are the ones the on-demand instruction
    // teaches. Reasoning and answer delimiters follow the same pipe style so
    // that angle-tag text never parses as anything but plain text here.
    pub const PIPE: Dialect = Dialect {
        name: DialectName::PipeTag,
        think_open: "<|begin_think|>",
        think_close: "<|end_think|>",
        action_open: "<|begin_search_query|>",
        action_close: "<|end_search_query|>",
        info_open: "<|begin_search_result|>",
        info_close: "<|end_search_result|>",
        answer_open: "<|begin_answer|>",
        answer_close: "<|end_answer|>",
    };

    pub const QUERY: Dialect = Dialect {
        name: DialectName::QueryTag,
        think_open: "<think>",
        think_close: "</think>",
        action_open: "<query>",
        action_close: "</query>",
        info_open: "<knowledge>",
        info_close: "</knowledge>",
        answer_open: "<answer>",
        answer_close: "</answer>",
    };

    pub fn from_name(name: DialectName) -> Dialect {
        match name {
            DialectName::AngleTag => Self::ANGLE,
            DialectName::PipeTag => Self::PIPE,
            DialectName::QueryTag => Self::QUERY,
        }
    }

    /// All eight delimiters, openers first.
    pub fn delimiters(&self) -> [&'static str; 8] {
        [
            self.think_open,
            self.action_open,
            self.info_open,
            self.answer_open,
            self.think_close,
            self.action_close,
            self.info_close,
            self.answer_close,
        ]
    }

    fn pairs(&self) -> [(SegmentKind, &'static str, &'static str); 4] {
        [
            (SegmentKind::Think, self.think_open, self.think_close),
            (SegmentKind::SearchQuery, self.action_open, self.action_close),
            (SegmentKind::Information, self.info_open, self.info_close),
            (SegmentKind::Answer, self.answer_open, self.answer_close),
        ]
    }

    fn delimiters_for(&self, kind: SegmentKind) -> Option<(&'static str, &'static str)> {
        self.pairs()
            .into_iter()
            .find(|(k, _, _)| *k == kind)
            .map(|(_, open, close)| (open, close))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Think,
    SearchQuery,
    Information,
    Answer,
    Plain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub text: String,
    /// Byte range in the parsed source, delimiters included.
    pub span: (usize, usize),
}

impl Segment {
    pub fn new(kind: SegmentKind, text: impl Into<String>) -> Self {
        Self {
            kind,
            text: text.into(),
            span: (0, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundaryKind {
    SearchIssued,
    AnswerIssued,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Boundary {
    pub kind: BoundaryKind,
    pub payload: String,
}

/// Splits model output into tagged segments in document order.
///
/// The scanner looks for the earliest opener of any kind; the block closes at
/// the first matching closer after it. An opener with no closer is demoted to
/// plain text and scanning resumes right after it. Whitespace-only text
/// between recognized blocks is left as a gap and produces no segment.
pub fn parse_segments(text: &str, dialect: &Dialect) -> Vec<Segment> {
    let pairs = dialect.pairs();
    let mut segments = Vec::new();
    // start of the pending plain run
    let mut plain_start = 0;
    let mut cursor = 0;

    while cursor < text.len() {
        let next = pairs
            .iter()
            .filter_map(|&(kind, open, close)| {
                text[cursor..]
                    .find(open)
                    .map(|off| (cursor + off, kind, open, close))
            })
            .min_by(|a, b| a.0.cmp(&b.0).then(b.2.len().cmp(&a.2.len())));
        let Some((open_at, kind, open, close)) = next else {
            break;
        };
        let body_start = open_at + open.len();
        match text[body_start..].find(close) {
            Some(off) => {
                let body_end = body_start + off;
                let block_end = body_end + close.len();
                push_plain(&mut segments, text, plain_start, open_at);
                let body = &text[body_start..body_end];
                let body = match kind {
                    SegmentKind::SearchQuery | SegmentKind::Answer => body.trim(),
                    _ => body,
                };
                segments.push(Segment {
                    kind,
                    text: body.to_string(),
                    span: (open_at, block_end),
                });
                cursor = block_end;
                plain_start = block_end;
            }
            None => {
                cursor = body_start;
            }
        }
    }
    push_plain(&mut segments, text, plain_start, text.len());
    segments
}

fn push_plain(segments: &mut Vec<Segment>, text: &str, start: usize, end: usize) {
    if start >= end {
        return;
    }
    let run = &text[start..end];
    if run.trim().is_empty() {
        return;
    }
    segments.push(Segment {
        kind: SegmentKind::Plain,
        text: run.to_string(),
        span: (start, end),
    });
}

/// Renders segments back into dialect text. Plain segments are emitted
/// verbatim; everything else is wrapped in its delimiters.
pub fn render_segments(segments: &[Segment], dialect: &Dialect) -> String {
    let mut out = String::new();
    for seg in segments {
        match dialect.delimiters_for(seg.kind) {
            Some((open, close)) => {
                out.push_str(open);
                out.push_str(&seg.text);
                out.push_str(close);
            }
            None => out.push_str(&seg.text),
        }
    }
    out
}

/// Reports the first complete action or answer tag in a (possibly partial)
/// completion.
pub fn detect_action_boundary(partial: &str, dialect: &Dialect) -> Option<Boundary> {
    parse_segments(partial, dialect)
        .into_iter()
        .find_map(|seg| match seg.kind {
            SegmentKind::SearchQuery => Some(Boundary {
                kind: BoundaryKind::SearchIssued,
                payload: seg.text,
            }),
            SegmentKind::Answer => Some(Boundary {
                kind: BoundaryKind::AnswerIssued,
                payload: seg.text,
            }),
            _ => None,
        })
}

/// Payload of the first complete answer tag. Pipe-tag transcripts also accept
/// a `\boxed{...}` answer.
pub fn extract_answer(trajectory_text: &str, dialect: &Dialect) -> Option<String> {
    let tagged = parse_segments(trajectory_text, dialect)
        .into_iter()
        .find(|s| s.kind == SegmentKind::Answer)
        .map(|s| s.text);
    if tagged.is_some() {
        return tagged;
    }
    if dialect.name == DialectName::PipeTag {
        return extract_boxed(trajectory_text);
    }
    None
}

/// Content of the first `\boxed{...}` with balanced braces.
pub fn extract_boxed(text: &str) -> Option<String> {
    const MARK: &str = "\\boxed{";
    let mut search_from = 0;
    while let Some(off) = text[search_from..].find(MARK) {
        let body_start = search_from + off + MARK.len();
        let mut depth = 1usize;
        for (i, c) in text[body_start..].char_indices() {
            match c {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        return Some(text[body_start..body_start + i].trim().to_string());
                    }
                }
                _ => {}
            }
        }
        search_from = body_start;
    }
    None
}

/// Formats evidence units as the body of an information block (no
/// delimiters). Chunk units render as `Doc i(Title: "..."): body`; graph
/// units render their serialized triple or path, one per line. Supporting
/// passages attached to graph results follow the graph lines.
pub fn format_evidence(results: &RetrievalResult, unit_char_budget: usize) -> String {
    if results.units.is_empty() && results.passages.is_empty() {
        return NO_RESULTS.to_string();
    }
    let mut lines = Vec::new();
    let mut doc_no = 0;
    for unit in &results.units {
        match unit.kind {
            EvidenceKind::Chunk => {
                doc_no += 1;
                lines.push(format!(
                    "Doc {}(Title: \"{}\"): {}",
                    doc_no,
                    unit.title,
                    truncate_chars(&unit.text, unit_char_budget)
                ));
            }
            EvidenceKind::GraphEdge | EvidenceKind::GraphPath => {
                lines.push(truncate_chars(&unit.text, unit_char_budget));
            }
        }
    }
    for passage in &results.passages {
        doc_no += 1;
        lines.push(format!(
            "Doc {}(Title: \"{}\"): {}",
            doc_no,
            passage.title,
            truncate_chars(&passage.text, unit_char_budget)
        ));
    }
    lines.join("\n")
}

/// Wraps formatted evidence in the dialect's information delimiters.
pub fn render_information(results: &RetrievalResult, dialect: &Dialect) -> String {
    render_information_with_budget(results, dialect, DEFAULT_UNIT_CHAR_BUDGET)
}

pub fn render_information_with_budget(
    results: &RetrievalResult,
    dialect: &Dialect,
    unit_char_budget: usize,
) -> String {
    wrap_information(&format_evidence(results, unit_char_budget), dialect)
}

pub fn wrap_information(body: &str, dialect: &Dialect) -> String {
    format!("{}{}{}", dialect.info_open, body, dialect.info_close)
}

fn truncate_chars(text: &str, budget: usize) -> String {
    match text.char_indices().nth(budget) {
        Some((cut, _)) => format!("{}{}", &text[..cut], TRUNCATION_MARKER),
        None => text.to_string(),
    }
}

/// True when a plain segment swallowed a delimiter, i.e. the model emitted a
/// tag that never formed a complete pair.
pub fn has_degraded_tags(segments: &[Segment], dialect: &Dialect) -> bool {
    let delims = dialect.delimiters();
    segments
        .iter()
        .filter(|s| s.kind == SegmentKind::Plain)
        .any(|s| delims.iter().any(|d| s.text.contains(d)))
}

/// Token boundaries used for masking and policy-surface alignment.
///
/// Every dialect delimiter is one token; the remaining text is split on
/// whitespace. Spans are byte offsets into `text`.
pub fn tokenize(text: &str, dialect: &Dialect) -> Vec<(usize, usize)> {
    let delims = dialect.delimiters();
    let mut tokens = Vec::new();
    let mut word_start: Option<usize> = None;
    let mut i = 0;
    while i < text.len() {
        if let Some(d) = delims.iter().find(|d| text[i..].starts_with(**d)) {
            if let Some(ws) = word_start.take() {
                tokens.push((ws, i));
            }
            tokens.push((i, i + d.len()));
            i += d.len();
            continue;
        }
        let c = text[i..].chars().next().expect("in-bounds char");
        if c.is_whitespace() {
            if let Some(ws) = word_start.take() {
                tokens.push((ws, i));
            }
        } else if word_start.is_none() {
            word_start = Some(i);
        }
        i += c.len_utf8();
    }
    if let Some(ws) = word_start {
        tokens.push((ws, text.len()));
    }
    tokens
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::{EvidenceUnit, Passage};

    fn kinds_texts(segs: &[Segment]) -> Vec<(SegmentKind, &str)> {
        segs.iter().map(|s| (s.kind, s.text.as_str())).collect()
    }

    #[test]
    fn parses_think_then_search() {
        let segs = parse_segments("<think>a</think><search>q1</search>", &Dialect::ANGLE);
        assert_eq!(
            kinds_texts(&segs),
            vec![(SegmentKind::Think, "a"), (SegmentKind::SearchQuery, "q1")]
        );
        assert_eq!(segs[0].span, (0, 16));
        assert_eq!(segs[1].span, (16, 35));
    }

    #[test]
    fn empty_input_has_no_segments() {
        assert!(parse_segments("", &Dialect::ANGLE).is_empty());
    }

    #[test]
    fn unclosed_think_degrades_to_plain() {
        let segs = parse_segments("<think>x<search>y</search>", &Dialect::ANGLE);
        assert_eq!(
            kinds_texts(&segs),
            vec![(SegmentKind::Plain, "<think>x"), (SegmentKind::SearchQuery, "y")]
        );
    }

    #[test]
    fn unclosed_trailing_tag_is_plain_residue() {
        let segs = parse_segments("<think>a</think><search>who di", &Dialect::ANGLE);
        assert_eq!(
            kinds_texts(&segs),
            vec![(SegmentKind::Think, "a"), (SegmentKind::Plain, "<search>who di")]
        );
    }

    #[test]
    fn first_close_wins_for_nested_tags() {
        let segs = parse_segments("<think>a<think>b</think>c</think>", &Dialect::ANGLE);
        assert_eq!(
            kinds_texts(&segs),
            vec![(SegmentKind::Think, "a<think>b"), (SegmentKind::Plain, "c</think>")]
        );
    }

    #[test]
    fn search_and_answer_are_trimmed_information_is_not() {
        let segs = parse_segments(
            "<search> q </search><information> raw </information><answer> No </answer>",
            &Dialect::ANGLE,
        );
        assert_eq!(
            kinds_texts(&segs),
            vec![
                (SegmentKind::SearchQuery, "q"),
                (SegmentKind::Information, " raw "),
                (SegmentKind::Answer, "No"),
            ]
        );
    }

    #[test]
    fn tags_are_case_sensitive() {
        let segs = parse_segments("<Answer>x</Answer>", &Dialect::ANGLE);
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].kind, SegmentKind::Plain);
    }

    #[test]
    fn boundary_on_closed_search() {
        let b = detect_action_boundary("<think>…</think><search>who died</search>", &Dialect::ANGLE)
            .unwrap();
        assert_eq!(b.kind, BoundaryKind::SearchIssued);
        assert_eq!(b.payload, "who died");
        assert!(detect_action_boundary("<think>…</think><search>who di", &Dialect::ANGLE).is_none());
    }

    #[test]
    fn answer_before_search_wins() {
        let b = detect_action_boundary("<answer>No</answer><search>x</search>", &Dialect::ANGLE)
            .unwrap();
        assert_eq!(b.kind, BoundaryKind::AnswerIssued);
        assert_eq!(b.payload, "No");
    }

    #[test]
    fn extract_answer_variants() {
        assert_eq!(
            extract_answer("<answer> No </answer>", &Dialect::ANGLE).as_deref(),
            Some("No")
        );
        assert_eq!(extract_answer("no tags here", &Dialect::ANGLE), None);
        assert_eq!(
            extract_answer("Please answer. \\boxed{Beijing}", &Dialect::PIPE).as_deref(),
            Some("Beijing")
        );
        // boxed form is pipe-dialect only
        assert_eq!(extract_answer("\\boxed{Beijing}", &Dialect::ANGLE), None);
        assert_eq!(
            extract_answer("<answer>a</answer><answer>b</answer>", &Dialect::ANGLE).as_deref(),
            Some("a")
        );
    }

    #[test]
    fn boxed_handles_nested_braces() {
        assert_eq!(extract_boxed("x \\boxed{a{b}c} y").as_deref(), Some("a{b}c"));
        assert_eq!(extract_boxed("\\boxed{unclosed"), None);
    }

    fn chunk_unit(id: &str, title: &str, text: &str) -> EvidenceUnit {
        EvidenceUnit {
            id: id.into(),
            doc_id: id.into(),
            title: title.into(),
            text: text.into(),
            score: 1.0,
            kind: EvidenceKind::Chunk,
            source_chunk_id: None,
        }
    }

    fn result(units: Vec<EvidenceUnit>) -> RetrievalResult {
        RetrievalResult {
            query: "q".into(),
            units,
            passages: Vec::new(),
            elapsed_ms: 0.0,
            backend_name: "test".into(),
        }
    }

    #[test]
    fn renders_chunk_evidence() {
        let r = result(vec![chunk_unit(
            "d1",
            "Laleli Mosque",
            "The Laleli Mosque is located in Laleli, Fatih, Istanbul.",
        )]);
        assert_eq!(
            render_information(&r, &Dialect::ANGLE),
            "<information>Doc 1(Title: \"Laleli Mosque\"): The Laleli Mosque is located in Laleli, Fatih, Istanbul.</information>"
        );
    }

    #[test]
    fn renders_empty_sentinel() {
        assert_eq!(
            render_information(&result(vec![]), &Dialect::ANGLE),
            "<information>No results found.</information>"
        );
    }

    #[test]
    fn renders_graph_edges_under_query_tag() {
        let edge = |id: &str, text: &str| EvidenceUnit {
            kind: EvidenceKind::GraphEdge,
            ..chunk_unit(id, "", text)
        };
        let r = result(vec![
            edge("e1", "(A, relation, B)"),
            edge("e2", "(B, relation, C)"),
        ]);
        let rendered = render_information(&r, &Dialect::QUERY);
        assert_eq!(
            rendered,
            "<knowledge>(A, relation, B)\n(B, relation, C)</knowledge>"
        );
        let segs = parse_segments(&rendered, &Dialect::QUERY);
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].kind, SegmentKind::Information);
        assert_eq!(segs[0].text, "(A, relation, B)\n(B, relation, C)");
    }

    #[test]
    fn passages_follow_graph_lines() {
        let mut r = result(vec![EvidenceUnit {
            kind: EvidenceKind::GraphEdge,
            ..chunk_unit("e1", "", "(A, born in, B)")
        }]);
        r.passages.push(Passage {
            chunk_id: "c1".into(),
            title: "T".into(),
            text: "A was born in B".into(),
        });
        assert_eq!(
            format_evidence(&r, 100),
            "(A, born in, B)\nDoc 1(Title: \"T\"): A was born in B"
        );
    }

    #[test]
    fn long_units_are_truncated() {
        let r = result(vec![chunk_unit("d", "t", &"x".repeat(30))]);
        let body = format_evidence(&r, 10);
        assert_eq!(body, format!("Doc 1(Title: \"t\"): {} [truncated]", "x".repeat(10)));
    }

    #[test]
    fn tokenizer_splits_delimiters() {
        let text = "<think>a b</think>\n<search>q</search>";
        let toks: Vec<&str> = tokenize(text, &Dialect::ANGLE)
            .into_iter()
            .map(|(s, e)| &text[s..e])
            .collect();
        assert_eq!(
            toks,
            vec!["<think>", "a", "b", "</think>", "<search>", "q", "</search>"]
        );
    }

    #[test]
    fn degraded_tag_detection() {
        let ok = parse_segments("<think>a</think><answer>b</answer>", &Dialect::ANGLE);
        assert!(!has_degraded_tags(&ok, &Dialect::ANGLE));
        let bad = parse_segments("<think>a<answer>b</answer>", &Dialect::ANGLE);
        assert!(has_degraded_tags(&bad, &Dialect::ANGLE));
    }

    #[test]
    fn dialect_delimiters_are_distinct() {
        for d in [Dialect::ANGLE, Dialect::PIPE, Dialect::QUERY] {
            let delims = d.delimiters();
            for (i, a) in delims.iter().enumerate() {
                assert!(!a.is_empty());
                for b in &delims[i + 1..] {
                    assert_ne!(a, b);
                }
            }
        }
    }
}
