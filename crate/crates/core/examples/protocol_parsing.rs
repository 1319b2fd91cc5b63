//! Parse model output in each tag dialect, detect where generation should
//! stop, and render evidence back into the context.

use agentic_search::knowledge::{EvidenceKind, EvidenceUnit, RetrievalResult};
use agentic_search::protocol::{
    detect_action_boundary, extract_answer, parse_segments, render_information, tokenize, Dialect,
};

fn main() {
    let samples = [
        (Dialect::ANGLE, "<think>I need the neighborhood.</think>\n<search> Esma Sultan Mansion location </search>"),
        (Dialect::PIPE, "Let me look it up.<|begin_search_query|> location of Laleli Mosque <|end_search_query|>"),
        (Dialect::QUERY, "<think>Compare both.</think>\n<query>\n{\"query\": \"Laleli Mosque neighborhood\"}\n</query>"),
        (Dialect::ANGLE, "<think>x<search>unclosed think</search> <answer> No </answer>"),
    ];
    for (dialect, text) in &samples {
        println!("{:?}", dialect.name);
        for seg in parse_segments(text, dialect) {
            println!("  {:?} {:?} at {:?}", seg.kind, seg.text, seg.span);
        }
        println!("  boundary: {:?}", detect_action_boundary(text, dialect));
        println!("  answer: {:?}", extract_answer(text, dialect));
        println!("  tokens: {}", tokenize(text, dialect).len());
    }

    println!("\n{:?}", extract_answer("So the answer is \\boxed{No}", &Dialect::PIPE));

    let result = RetrievalResult {
        units: vec![EvidenceUnit {
            id: "laleli".into(),
            doc_id: "laleli".into(),
            kind: EvidenceKind::Chunk,
            title: "Laleli Mosque".into(),
            text: "The Laleli Mosque is an 18th-century Ottoman imperial mosque in Laleli, Fatih, Istanbul, Turkey.".into(),
            score: 1.0,
            source_chunk_id: None,
        }],
        ..RetrievalResult::empty("Laleli Mosque", "dense-lexical")
    };
    println!("{}", render_information(&result, &Dialect::ANGLE));
    println!("{}", render_information(&RetrievalResult::empty("nothing", "dense-lexical"), &Dialect::ANGLE));
}
