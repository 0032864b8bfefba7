//! Query orchestration, sessions and ingestion.
//!
//! Every query runs the same fixed pipeline: retrieve, gate, pick a
//! procedure, build prompts, complete, parse markers, verify, then update
//! the session and emit events. Procedures, the graph and the index form one
//! immutable [`Library`] snapshot that ingestion swaps atomically.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::{FairMutex, Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{EdgeKind, GraphError, KnowledgeGraph, Node, NodeId};
use crate::llm::{ChatBackend, ChatMessage, LlmError};
use crate::procedure::{parse_procedure_bundle, render_step_text, Procedure, ProcedureError};
use crate::prompt::{assemble_user_prompt, with_step_hint, PromptBundle, PromptError, SYSTEM_PROMPT};
use crate::reply::{
    parse_markers, topicality_gate, verify_verbatim, ParsedReply, TopicalityDecision, VerbatimReport, VerbatimStatus,
    REFUSAL_SENTENCE, TOPICALITY_THRESHOLD,
};
use crate::retrieval::{chunk_procedure, IndexedCorpus, RetrievalError, RetrievalResult};

pub const RETRIEVAL_K: usize = 5;
/// A session keeps its active procedure while that procedure's best chunk
/// scores at least this fraction of the top hit.
pub const ACTIVE_PROCEDURE_AFFINITY: f64 = 0.8;

const BUNDLE_FILE: &str = "procedure.json";
const GRAPH_FILE: &str = "graph.jsonl";
const INDEX_FILE: &str = "index.json";
const PROCEDURES_DIR: &str = "procedures";

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown procedure {0}")]
    UnknownProcedure(String),
    #[error("procedure {procedure} has no figure {figure}")]
    UnknownFigure { procedure: String, figure: u32 },
    #[error(transparent)]
    Procedure(#[from] ProcedureError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] LlmError),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
}

impl EngineError {
    /// Stable machine-readable code for API responses.
    pub fn code(&self) -> &'static str {
        match self {
            EngineError::EmptyQuery => "empty_query",
            EngineError::UnknownSession(_) => "unknown_session",
            EngineError::UnknownProcedure(_) => "unknown_procedure",
            EngineError::UnknownFigure { .. } => "unknown_figure",
            EngineError::Procedure(ProcedureError::MalformedBundle { .. }) => "malformed_bundle",
            EngineError::Procedure(ProcedureError::InvariantViolation(_)) => "invariant_violation",
            EngineError::Procedure(ProcedureError::PathEscape(_)) => "path_escape",
            EngineError::Procedure(ProcedureError::StepNotFound(_)) => "step_not_found",
            EngineError::Graph(GraphError::UnknownNode(_)) => "unknown_node",
            EngineError::Graph(_) => "graph_error",
            EngineError::Retrieval(_) => "retrieval_error",
            EngineError::Prompt(_) => "prompt_error",
            EngineError::Backend(LlmError::BackendUnavailable(_)) => "backend_unavailable",
            EngineError::Backend(_) => "backend_error",
            EngineError::Io { .. } => "io_error",
        }
    }

    pub fn is_retriable(&self) -> bool {
        matches!(self, EngineError::Backend(e) if e.is_retriable())
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> EngineError {
    let context = context.into();
    move |source| EngineError::Io { context, source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum EventPayload {
    StepDisplayed {
        procedure_id: String,
        step_number: u32,
        label: String,
        text: String,
    },
    ShowFigure {
        procedure_id: String,
        figure_number: u32,
        caption: String,
        media_path: String,
        media_url: String,
    },
    ConfidenceUpdate {
        results: Vec<ConfidenceEntry>,
    },
    Refusal {
        text: String,
        top_confidence: f64,
        threshold: f64,
    },
    VerbatimWarning {
        procedure_id: String,
        step_number: Option<u32>,
        expected: String,
        first_divergence: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceEntry {
    pub chunk_id: String,
    pub procedure_id: String,
    pub step_number: Option<u32>,
    pub label: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub payload: EventPayload,
}

impl SessionEvent {
    pub fn kind(&self) -> &'static str {
        match self.payload {
            EventPayload::StepDisplayed { .. } => "StepDisplayed",
            EventPayload::ShowFigure { .. } => "ShowFigure",
            EventPayload::ConfidenceUpdate { .. } => "ConfidenceUpdate",
            EventPayload::Refusal { .. } => "Refusal",
            EventPayload::VerbatimWarning { .. } => "VerbatimWarning",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HistoryEntry {
    pub query: String,
    pub reply: ParsedReply,
    pub report: VerbatimReport,
    pub decision: TopicalityDecision,
}

#[derive(Debug, Clone, Serialize)]
pub struct Session {
    pub session_id: String,
    pub active_procedure: Option<String>,
    pub last_announced_step: Option<u32>,
    pub history: Vec<HistoryEntry>,
    pub created_at: DateTime<Utc>,
    #[serde(skip)]
    events: Vec<SessionEvent>,
}

impl Session {
    fn new() -> Self {
        Session {
            session_id: format!("{:032x}", rand::random::<u128>()),
            active_procedure: None,
            last_announced_step: None,
            history: Vec::new(),
            created_at: Utc::now(),
            events: Vec::new(),
        }
    }

    pub fn events(&self) -> &[SessionEvent] {
        &self.events
    }

    fn push_events(&mut self, payloads: Vec<EventPayload>) -> Vec<SessionEvent> {
        let start = self.events.last().map_or(1, |e| e.seq + 1);
        let events: Vec<SessionEvent> =
            payloads.into_iter().zip(start..).map(|(payload, seq)| SessionEvent { seq, payload }).collect();
        self.events.extend(events.iter().cloned());
        events
    }
}

/// Receives events as they are emitted, while the session is still locked,
/// so deliveries for one session arrive in seq order.
pub trait EventSink: Send + Sync {
    fn publish(&self, session_id: &str, events: &[SessionEvent]);
}

#[derive(Debug, Clone, Serialize)]
pub struct QueryOutcome {
    pub reply: ParsedReply,
    pub report: VerbatimReport,
    pub decision: TopicalityDecision,
    pub events: Vec<SessionEvent>,
    pub procedure_id: Option<String>,
    pub results: Vec<RetrievalResult>,
    pub prompt: Option<PromptBundle>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IngestSummary {
    pub procedure_id: String,
    pub chunk_count: usize,
    pub graph_nodes_added: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProcedureSummary {
    pub id: String,
    pub title: String,
    pub last_updated: String,
    pub step_count: usize,
    pub figure_count: usize,
}

#[derive(Debug, Clone)]
struct StoredProcedure {
    procedure: Arc<Procedure>,
    /// Directory the procedure's media paths resolve against.
    dir: PathBuf,
}

/// Immutable snapshot of everything a query reads.
#[derive(Debug, Clone)]
pub struct Library {
    procedures: BTreeMap<String, StoredProcedure>,
    graph: KnowledgeGraph,
    corpus: IndexedCorpus,
}

impl Library {
    fn empty() -> Result<Self, EngineError> {
        Ok(Library { procedures: BTreeMap::new(), graph: KnowledgeGraph::new(), corpus: IndexedCorpus::build(&[])? })
    }

    pub fn graph(&self) -> &KnowledgeGraph {
        &self.graph
    }

    pub fn corpus(&self) -> &IndexedCorpus {
        &self.corpus
    }

    pub fn procedure(&self, id: &str) -> Option<&Arc<Procedure>> {
        self.procedures.get(id).map(|s| &s.procedure)
    }

    fn all_procedures(&self) -> Vec<Procedure> {
        self.procedures.values().map(|s| (*s.procedure).clone()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    /// Durable state directory; `None` keeps everything in memory.
    pub data_dir: Option<PathBuf>,
    pub retrieval_k: usize,
    pub topicality_threshold: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig { data_dir: None, retrieval_k: RETRIEVAL_K, topicality_threshold: TOPICALITY_THRESHOLD }
    }
}

pub struct Engine {
    config: EngineConfig,
    backend: Arc<dyn ChatBackend>,
    library: RwLock<Arc<Library>>,
    writer: Mutex<()>,
    sessions: RwLock<HashMap<String, Arc<FairMutex<Session>>>>,
    sink: RwLock<Option<Arc<dyn EventSink>>>,
}

impl Engine {
    pub fn in_memory(backend: Arc<dyn ChatBackend>) -> Result<Self, EngineError> {
        Self::with_config(EngineConfig::default(), backend)
    }

    /// Opens (or initializes) a data directory and reloads its procedures,
    /// graph and index.
    pub fn open(data_dir: impl Into<PathBuf>, backend: Arc<dyn ChatBackend>) -> Result<Self, EngineError> {
        Self::with_config(EngineConfig { data_dir: Some(data_dir.into()), ..EngineConfig::default() }, backend)
    }

    pub fn with_config(config: EngineConfig, backend: Arc<dyn ChatBackend>) -> Result<Self, EngineError> {
        let library = match &config.data_dir {
            Some(dir) => load_library(dir)?,
            None => Library::empty()?,
        };
        Ok(Engine {
            config,
            backend,
            library: RwLock::new(Arc::new(library)),
            writer: Mutex::new(()),
            sessions: RwLock::new(HashMap::new()),
            sink: RwLock::new(None),
        })
    }

    pub fn set_event_sink(&self, sink: Arc<dyn EventSink>) {
        *self.sink.write() = Some(sink);
    }

    pub fn data_dir(&self) -> Option<&Path> {
        self.config.data_dir.as_deref()
    }

    pub fn has_session(&self, id: &str) -> bool {
        self.sessions.read().contains_key(id)
    }

    pub fn backend(&self) -> &Arc<dyn ChatBackend> {
        &self.backend
    }

    pub fn snapshot(&self) -> Arc<Library> {
        self.library.read().clone()
    }

    pub fn ingest(&self, bundle_path: &Path) -> Result<IngestSummary, EngineError> {
        let raw = fs::read(bundle_path).map_err(io_err(format!("reading {}", bundle_path.display())))?;
        let base_dir = bundle_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let procedure = parse_procedure_bundle(&raw, &base_dir)?;

        let _guard = self.writer.lock();
        let current = self.snapshot();
        let dir = match &self.config.data_dir {
            Some(data) => store_bundle(data, &procedure, &raw, &base_dir)?,
            None => base_dir,
        };

        let mut graph = current.graph.clone();
        let graph_nodes_added = graph.link_procedure(&procedure)?;
        let mut procedures = current.procedures.clone();
        let summary = IngestSummary {
            procedure_id: procedure.id.clone(),
            chunk_count: chunk_procedure(&procedure).len(),
            graph_nodes_added,
        };
        procedures.insert(procedure.id.clone(), StoredProcedure { procedure: Arc::new(procedure), dir });
        let all: Vec<Procedure> = procedures.values().map(|s| (*s.procedure).clone()).collect();
        let corpus = IndexedCorpus::build(&all)?;

        if let Some(data) = &self.config.data_dir {
            graph.save(&data.join(GRAPH_FILE))?;
            corpus.save(&data.join(INDEX_FILE))?;
        }
        *self.library.write() = Arc::new(Library { procedures, graph, corpus });
        tracing::info!(procedure = %summary.procedure_id, chunks = summary.chunk_count, "ingested procedure");
        Ok(summary)
    }

    pub fn list_procedures(&self) -> Vec<ProcedureSummary> {
        self.snapshot()
            .procedures
            .values()
            .map(|s| ProcedureSummary {
                id: s.procedure.id.clone(),
                title: s.procedure.title.clone(),
                last_updated: s.procedure.last_updated.format("%Y-%m-%d").to_string(),
                step_count: s.procedure.steps.len(),
                figure_count: s.procedure.figures.len(),
            })
            .collect()
    }

    pub fn get_procedure(&self, id: &str) -> Result<Arc<Procedure>, EngineError> {
        self.snapshot().procedure(id).cloned().ok_or_else(|| EngineError::UnknownProcedure(id.to_string()))
    }

    /// Absolute path of a figure's image file.
    pub fn figure_path(&self, procedure_id: &str, figure: u32) -> Result<PathBuf, EngineError> {
        let lib = self.snapshot();
        let stored =
            lib.procedures.get(procedure_id).ok_or_else(|| EngineError::UnknownProcedure(procedure_id.to_string()))?;
        let fig = stored
            .procedure
            .figure(figure)
            .ok_or_else(|| EngineError::UnknownFigure { procedure: procedure_id.to_string(), figure })?;
        Ok(stored.dir.join(&fig.media_path))
    }

    pub fn graph_neighbors(&self, node: &str, kind: Option<EdgeKind>) -> Result<Vec<Node>, EngineError> {
        let lib = self.snapshot();
        Ok(lib.graph.neighbors(&NodeId::from(node), kind)?.into_iter().cloned().collect())
    }

    pub fn create_session(&self) -> Session {
        let session = Session::new();
        let snapshot = session.clone();
        self.sessions.write().insert(session.session_id.clone(), Arc::new(FairMutex::new(session)));
        snapshot
    }

    fn session_handle(&self, id: &str) -> Result<Arc<FairMutex<Session>>, EngineError> {
        self.sessions.read().get(id).cloned().ok_or_else(|| EngineError::UnknownSession(id.to_string()))
    }

    pub fn get_session(&self, id: &str) -> Result<Session, EngineError> {
        let handle = self.session_handle(id)?;
        let mut session = handle.lock();
        reconcile(&mut session, &self.snapshot());
        Ok(session.clone())
    }

    /// Events of a session with `seq` greater than `after`.
    pub fn events_since(&self, id: &str, after: u64) -> Result<Vec<SessionEvent>, EngineError> {
        let handle = self.session_handle(id)?;
        let session = handle.lock();
        Ok(session.events.iter().filter(|e| e.seq > after).cloned().collect())
    }

    pub fn handle_query(&self, session_id: &str, text: &str) -> Result<QueryOutcome, EngineError> {
        let text = text.trim();
        if text.is_empty() {
            return Err(EngineError::EmptyQuery);
        }
        let handle = self.session_handle(session_id)?;
        // Queries on one session run one at a time, in arrival order.
        let mut session = handle.lock();
        let lib = self.snapshot();
        reconcile(&mut session, &lib);

        let all = match lib.corpus.hybrid_retrieve(text, lib.corpus.len().max(1)) {
            Ok(r) => r,
            Err(RetrievalError::EmptyCorpus) => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let top: Vec<RetrievalResult> = all.iter().take(self.config.retrieval_k).cloned().collect();
        let decision = topicality_gate(&top, self.config.topicality_threshold);

        if !decision.proceed {
            let reply = parse_markers(REFUSAL_SENTENCE);
            let report = verify_verbatim(&reply, &placeholder_procedure());
            let events = self.emit(
                &mut session,
                vec![EventPayload::Refusal {
                    text: REFUSAL_SENTENCE.to_string(),
                    top_confidence: decision.top_confidence,
                    threshold: decision.threshold,
                }],
            );
            session.history.push(HistoryEntry {
                query: text.to_string(),
                reply: reply.clone(),
                report: report.clone(),
                decision,
            });
            return Ok(QueryOutcome {
                reply,
                report,
                decision,
                events,
                procedure_id: None,
                results: top,
                prompt: None,
            });
        }

        let procedure_id = select_procedure(&all, session.active_procedure.as_deref());
        let stored =
            lib.procedures.get(&procedure_id).ok_or_else(|| EngineError::UnknownProcedure(procedure_id.clone()))?;
        let procedure = &stored.procedure;

        let graph_info = match lib.graph.linked_info_block(&procedure_id) {
            Ok(block) => block,
            Err(GraphError::UnknownProcedure(_)) => String::new(),
            Err(e) => return Err(e.into()),
        };
        let same_procedure = session.active_procedure.as_deref() == Some(procedure_id.as_str());
        let question = match session.last_announced_step {
            Some(n) if same_procedure => with_step_hint(text, n),
            _ => text.to_string(),
        };
        let prompt = assemble_user_prompt(&question, &procedure.render_text(), &graph_info)?
            .with_provenance(procedure_id.clone(), top.iter().map(|r| r.chunk.chunk_id.clone()).collect());

        let raw =
            self.backend.complete(&[ChatMessage::system(SYSTEM_PROMPT), ChatMessage::user(prompt.user.clone())])?;
        let reply = parse_markers(&raw);
        let report = verify_verbatim(&reply, procedure);

        if !same_procedure {
            session.active_procedure = Some(procedure_id.clone());
            session.last_announced_step = None;
        }
        let mut payloads = Vec::new();
        match report.status {
            VerbatimStatus::Pass => {
                let step = procedure.lookup_step(reply.step_number.expect("pass implies a step"))?;
                session.last_announced_step = Some(step.number);
                payloads.push(EventPayload::StepDisplayed {
                    procedure_id: procedure_id.clone(),
                    step_number: step.number,
                    label: step.label.clone(),
                    text: render_step_text(step),
                });
            }
            VerbatimStatus::Fail => payloads.push(EventPayload::VerbatimWarning {
                procedure_id: procedure_id.clone(),
                step_number: reply.step_number,
                expected: report.expected.clone(),
                first_divergence: report.first_divergence,
            }),
            VerbatimStatus::NotApplicable => {}
        }
        if report.status != VerbatimStatus::Fail {
            for &n in &reply.figure_numbers {
                let Some(fig) = procedure.figure(n) else {
                    tracing::warn!(procedure = %procedure_id, figure = n, "reply references unknown figure");
                    continue;
                };
                payloads.push(EventPayload::ShowFigure {
                    procedure_id: procedure_id.clone(),
                    figure_number: n,
                    caption: fig.caption.clone(),
                    media_path: fig.media_path.clone(),
                    media_url: format!("/api/figures/{procedure_id}/{n}"),
                });
            }
        }
        payloads.push(EventPayload::ConfidenceUpdate { results: confidence_entries(&lib, &top) });

        let events = self.emit(&mut session, payloads);
        session.history.push(HistoryEntry {
            query: text.to_string(),
            reply: reply.clone(),
            report: report.clone(),
            decision,
        });
        Ok(QueryOutcome {
            reply,
            report,
            decision,
            events,
            procedure_id: Some(procedure_id),
            results: top,
            prompt: Some(prompt),
        })
    }

    fn emit(&self, session: &mut Session, payloads: Vec<EventPayload>) -> Vec<SessionEvent> {
        let events = session.push_events(payloads);
        if let Some(sink) = self.sink.read().as_ref() {
            sink.publish(&session.session_id, &events);
        }
        events
    }
}

/// Drops session position that a re-ingest made invalid.
fn reconcile(session: &mut Session, lib: &Library) {
    match session.active_procedure.as_deref().map(|id| lib.procedure(id)) {
        Some(None) => {
            session.active_procedure = None;
            session.last_announced_step = None;
        }
        Some(Some(p)) if session.last_announced_step.is_some_and(|n| p.lookup_step(n).is_err()) => {
            session.last_announced_step = None;
        }
        _ => {}
    }
}

/// Top hit's procedure, unless the session's active procedure scores close
/// enough to the top hit to treat the query as a follow-up.
fn select_procedure(ranked: &[RetrievalResult], active: Option<&str>) -> String {
    let top = &ranked[0];
    if let Some(active) = active {
        if let Some(best) = ranked.iter().find(|r| r.chunk.procedure_id == active) {
            if best.hybrid_score >= ACTIVE_PROCEDURE_AFFINITY * top.hybrid_score {
                return active.to_string();
            }
        }
    }
    top.chunk.procedure_id.clone()
}

fn confidence_entries(lib: &Library, results: &[RetrievalResult]) -> Vec<ConfidenceEntry> {
    results
        .iter()
        .map(|r| {
            let label = lib
                .procedure(&r.chunk.procedure_id)
                .map(|p| match r.chunk.step_number.and_then(|n| p.lookup_step(n).ok()) {
                    Some(step) => format!("{} - Step {}: {}", p.title, step.number, step.label),
                    None => p.title.clone(),
                })
                .unwrap_or_else(|| r.chunk.chunk_id.clone());
            ConfidenceEntry {
                chunk_id: r.chunk.chunk_id.clone(),
                procedure_id: r.chunk.procedure_id.clone(),
                step_number: r.chunk.step_number,
                label,
                confidence: r.confidence,
            }
        })
        .collect()
}

fn placeholder_procedure() -> Procedure {
    Procedure {
        id: "none".into(),
        title: String::new(),
        last_updated: chrono::NaiveDate::MIN,
        figures: Vec::new(),
        steps: Vec::new(),
    }
}

/// Copies the bundle and its media into `<data>/procedures/<id>/`, replacing
/// any previous copy. Returns the stored directory.
fn store_bundle(data: &Path, p: &Procedure, raw: &[u8], base_dir: &Path) -> Result<PathBuf, EngineError> {
    let root = data.join(PROCEDURES_DIR);
    let target = root.join(&p.id);
    let staging = root.join(format!(".{}.staging", p.id));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(io_err("clearing staging directory"))?;
    }
    fs::create_dir_all(&staging).map_err(io_err("creating staging directory"))?;
    fs::write(staging.join(BUNDLE_FILE), raw).map_err(io_err("writing bundle"))?;
    for fig in &p.figures {
        let src = base_dir.join(&fig.media_path);
        let dst = staging.join(&fig.media_path);
        if let Some(parent) = dst.parent() {
            fs::create_dir_all(parent).map_err(io_err("creating media directory"))?;
        }
        if let Err(e) = fs::copy(&src, &dst) {
            tracing::warn!(path = %src.display(), error = %e, "figure media not copied");
        }
    }
    if target.exists() {
        fs::remove_dir_all(&target).map_err(io_err("replacing stored bundle"))?;
    }
    fs::rename(&staging, &target).map_err(io_err("installing stored bundle"))?;
    Ok(target)
}

fn load_library(data: &Path) -> Result<Library, EngineError> {
    fs::create_dir_all(data).map_err(io_err(format!("creating {}", data.display())))?;
    let mut procedures = BTreeMap::new();
    let root = data.join(PROCEDURES_DIR);
    if root.is_dir() {
        let mut dirs: Vec<PathBuf> = fs::read_dir(&root)
            .map_err(io_err("listing procedures"))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir() && !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
            .collect();
        dirs.sort();
        for dir in dirs {
            let raw = fs::read(dir.join(BUNDLE_FILE)).map_err(io_err(format!("reading {}", dir.display())))?;
            let p = parse_procedure_bundle(&raw, &dir)?;
            procedures.insert(p.id.clone(), StoredProcedure { procedure: Arc::new(p), dir });
        }
    }

    let graph_path = data.join(GRAPH_FILE);
    let mut graph = if graph_path.exists() { KnowledgeGraph::load(&graph_path)? } else { KnowledgeGraph::new() };
    let before = graph.clone();
    for stored in procedures.values() {
        graph.link_procedure(&stored.procedure)?;
    }
    if graph != before {
        graph.save(&graph_path)?;
    }

    let all: Vec<Procedure> = procedures.values().map(|s| (*s.procedure).clone()).collect();
    let index_path = data.join(INDEX_FILE);
    let embedder: Arc<dyn crate::embed::Embedder> = Arc::new(crate::embed::HashingEmbedder::default());
    let corpus = match IndexedCorpus::load(&index_path, embedder) {
        Ok(c) if c.is_consistent_with(&all) => c,
        _ => {
            let c = IndexedCorpus::build(&all)?;
            c.save(&index_path)?;
            c
        }
    };
    Ok(Library { procedures, graph, corpus })
}

impl Library {
    /// True when both snapshots hold the same procedures, graph and index.
    pub fn same_content(&self, other: &Library) -> bool {
        self.all_procedures() == other.all_procedures() && self.graph == other.graph && self.corpus == other.corpus
    }
}
