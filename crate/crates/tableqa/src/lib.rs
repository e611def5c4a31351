//! Open-domain table question answering environment: corpus ingestion,
//! BM25+ table retrieval, sandboxed SQL execution, the tagged tool-call
//! protocol, multi-turn episode orchestration, GRPO loss mathematics, a
//! rollout scheduling simulator, and the evaluation harness.

pub mod agent;
pub mod corpus;
pub mod eval;
pub mod grpo;
pub mod retrieval;
pub mod protocol;
pub mod sandbox;
