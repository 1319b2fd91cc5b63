//! Agentic search over a knowledge corpus: retrieval backends, a tagged
//! reasoning protocol, agent workflows, group-relative policy optimisation
//! math and QA evaluation.

pub mod agent;
pub mod cli;
pub mod cost;
pub mod eval;
pub mod grpo;
pub mod http;
pub mod knowledge;
pub mod llm;
pub mod protocol;
pub mod text;
