//! Procedure-checklist assistant engine.
//!
//! A query is answered in fixed stages: hybrid retrieval over step-level
//! chunks, a topicality gate, prompt assembly around the matched procedure
//! and its linked graph facts, one chat completion, marker parsing and a
//! verbatim check against the source step. [`Engine`] ties the stages to
//! sessions and to durable ingestion.

pub mod embed;
pub mod graph;
pub mod llm;
pub mod procedure;
pub mod prompt;
pub mod reply;
pub mod retrieval;
pub mod session;
pub mod text;

pub use graph::{Edge, EdgeKind, GraphError, KnowledgeGraph, Node, NodeId, NodeKind};
pub use llm::{BackendConfig, BackendKind, ChatBackend, ChatMessage, CountingBackend, HttpConfig, LlmError};
pub use procedure::{parse_procedure_bundle, FigureRef, Procedure, ProcedureError, Step, Violation};
pub use prompt::{assemble_user_prompt, PromptBundle, PromptError, SYSTEM_PROMPT, USER_INSTRUCTION};
pub use reply::{parse_markers, topicality_gate, verify_verbatim, ParsedReply, VerbatimReport, VerbatimStatus};
pub use retrieval::{Execution, IndexedCorpus, RetrievalError, RetrievalResult};
pub use session::{
    Engine, EngineConfig, EngineError, EventPayload, IngestSummary, QueryOutcome, Session, SessionEvent,
};
