//! Prompt templates shipped as text assets.
//!
//! Placeholders are `{name}`; literal braces are written `{{` and `}}`.

use std::collections::BTreeSet;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("template {template}: missing value for {{{name}}}")]
    Missing { template: &'static str, name: String },
    #[error("template {template}: unknown placeholder {{{name}}}")]
    Unknown { template: &'static str, name: String },
    #[error("template {template}: unbalanced brace at byte {at}")]
    Syntax { template: &'static str, at: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: &'static str,
    raw: &'static str,
}

macro_rules! asset {
    ($name:literal) => {
        PromptTemplate {
            name: $name,
            raw: include_str!(concat!("templates/", $name, ".txt")),
        }
    };
}

pub const SEARCH_O1: PromptTemplate = asset!("search_o1");
pub const REASON_IN_DOCUMENTS: PromptTemplate = asset!("reason_in_documents");
pub const OPEN_QA: PromptTemplate = asset!("open_qa");
pub const DECOMPOSE_TEXT: PromptTemplate = asset!("decompose_text");
pub const DECOMPOSE_TRIPLE: PromptTemplate = asset!("decompose_triple");
pub const VERIFY: PromptTemplate = asset!("verify");
pub const DEEP_ANSWER: PromptTemplate = asset!("deep_answer");
pub const EXPAND: PromptTemplate = asset!("expand");
pub const SEARCH_R1: PromptTemplate = asset!("search_r1");
pub const GRAPH_R1: PromptTemplate = asset!("graph_r1");
pub const SINGLE_SHOT: PromptTemplate = asset!("single_shot");

pub const ALL: [PromptTemplate; 11] = [
    SEARCH_O1,
    REASON_IN_DOCUMENTS,
    OPEN_QA,
    DECOMPOSE_TEXT,
    DECOMPOSE_TRIPLE,
    VERIFY,
    DEEP_ANSWER,
    EXPAND,
    SEARCH_R1,
    GRAPH_R1,
    SINGLE_SHOT,
];

/// Reasoning hint placed before the question for instruction-tuned models.
pub const COT_HINT: &str = "You should think step by step to solve it.";

enum Piece<'a> {
    Literal(&'a str),
    Slot(&'a str),
}

impl PromptTemplate {
    /// Template text with its single trailing newline removed.
    pub fn body(&self) -> &'static str {
        self.raw.strip_suffix('\n').unwrap_or(self.raw)
    }

    fn pieces(&self) -> Result<Vec<Piece<'static>>, TemplateError> {
        let body = self.body();
        let bytes = body.as_bytes();
        let mut out = Vec::new();
        let mut lit_start = 0;
        let mut i = 0;
        while i < bytes.len() {
            match bytes[i] {
                b'{' if bytes.get(i + 1) == Some(&b'{') => {
                    out.push(Piece::Literal(&body[lit_start..i + 1]));
                    i += 2;
                    lit_start = i;
                }
                b'}' if bytes.get(i + 1) == Some(&b'}') => {
                    out.push(Piece::Literal(&body[lit_start..i + 1]));
                    i += 2;
                    lit_start = i;
                }
                b'{' => {
                    let close = body[i..].find('}').ok_or(TemplateError::Syntax {
                        template: self.name,
                        at: i,
                    })?;
                    out.push(Piece::Literal(&body[lit_start..i]));
                    out.push(Piece::Slot(&body[i + 1..i + close]));
                    i += close + 1;
                    lit_start = i;
                }
                b'}' => {
                    return Err(TemplateError::Syntax {
                        template: self.name,
                        at: i,
                    })
                }
                _ => i += 1,
            }
        }
        out.push(Piece::Literal(&body[lit_start..]));
        Ok(out)
    }

    /// Placeholder names that must be supplied to [`render`](Self::render).
    pub fn required_placeholders(&self) -> BTreeSet<&'static str> {
        self.pieces()
            .expect("shipped templates are well formed")
            .into_iter()
            .filter_map(|p| match p {
                Piece::Slot(name) => Some(name),
                Piece::Literal(_) => None,
            })
            .collect()
    }

    /// Fills every placeholder. Values are inserted verbatim, so braces in
    /// values are never re-interpreted.
    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        for (name, _) in values {
            if !self.required_placeholders().contains(name) {
                return Err(TemplateError::Unknown {
                    template: self.name,
                    name: name.to_string(),
                });
            }
        }
        let mut out = String::with_capacity(self.raw.len());
        for piece in self.pieces()? {
            match piece {
                Piece::Literal(s) => out.push_str(s),
                Piece::Slot(name) => {
                    let value = values
                        .iter()
                        .find(|(n, _)| *n == name)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| TemplateError::Missing {
                            template: self.name,
                            name: name.to_string(),
                        })?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }
}

/// Inserts [`COT_HINT`] on its own line before the last `Question:` line.
pub fn with_cot_hint(prompt: &str) -> String {
    match prompt.rfind("Question:") {
        Some(at) => format!("{}{}\n{}", &prompt[..at], COT_HINT, &prompt[at..]),
        None => format!("{COT_HINT}\n{prompt}"),
    }
}
