//! Typed property graph linking procedures to their figures, metadata and keywords.
//!
//! Node ids are derived from content (`<kind>:<slug>`), so ingesting the same
//! procedure twice produces the same nodes. The graph is persisted as
//! line-delimited JSON, one node or edge per line.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::procedure::Procedure;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("edge endpoint {0} does not exist")]
    DanglingEndpoint(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("no procedure node for {0:?}")]
    UnknownProcedure(String),
    #[error("invalid node: {0}")]
    InvalidNode(String),
    #[error("graph file corrupt at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn for_procedure(procedure_id: &str) -> Self {
        NodeId(format!("{}:{}", NodeKind::ProcedureDoc.prefix(), slug(procedure_id)))
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    ProcedureDoc,
    Figure,
    Metadata,
    Keyword,
}

impl NodeKind {
    fn prefix(self) -> &'static str {
        match self {
            NodeKind::ProcedureDoc => "procedure",
            NodeKind::Figure => "figure",
            NodeKind::Metadata => "metadata",
            NodeKind::Keyword => "keyword",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EdgeKind {
    HasFigure,
    HasMetadata,
    HasKeyword,
    References,
}

impl std::str::FromStr for EdgeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "HasFigure" => Ok(EdgeKind::HasFigure),
            "HasMetadata" => Ok(EdgeKind::HasMetadata),
            "HasKeyword" => Ok(EdgeKind::HasKeyword),
            "References" => Ok(EdgeKind::References),
            other => Err(format!("unknown edge kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    pub attributes: IndexMap<String, String>,
}

/// Attribute key carrying the image path of a figure node.
pub const IMAGE_ATTRIBUTE: &str = "Image";
pub const PROCEDURE_ID_ATTRIBUTE: &str = "procedure_id";

impl Node {
    /// Builds a node, deriving its id from the kind's primary attribute:
    /// `procedure_id` for procedures, the image path for figures, and the
    /// first key/value pair otherwise.
    pub fn new<K, V>(kind: NodeKind, attributes: impl IntoIterator<Item = (K, V)>) -> Result<Self, GraphError>
    where
        K: Into<String>,
        V: Into<String>,
    {
        let attributes: IndexMap<String, String> = attributes.into_iter().map(|(k, v)| (k.into(), v.into())).collect();
        let id = derive_id(kind, &attributes)?;
        Ok(Node { id, kind, attributes })
    }
}

fn derive_id(kind: NodeKind, attributes: &IndexMap<String, String>) -> Result<NodeId, GraphError> {
    if attributes.is_empty() {
        return Err(GraphError::InvalidNode(format!("{kind:?} node without attributes")));
    }
    for (k, v) in attributes {
        if k.trim().is_empty() || k.contains(['\n', '\r', ':']) || v.contains(['\n', '\r']) {
            return Err(GraphError::InvalidNode(format!("attribute {k:?} cannot be rendered as a single line")));
        }
    }
    let primary = match kind {
        NodeKind::ProcedureDoc => attributes
            .get(PROCEDURE_ID_ATTRIBUTE)
            .cloned()
            .ok_or_else(|| GraphError::InvalidNode("procedure node without procedure_id".into()))?,
        NodeKind::Figure if attributes.contains_key(IMAGE_ATTRIBUTE) => attributes[IMAGE_ATTRIBUTE].clone(),
        _ => {
            let (k, v) = attributes.first().expect("nonempty");
            format!("{k} {v}")
        }
    };
    let s = slug(&primary);
    if s.is_empty() {
        return Err(GraphError::InvalidNode(format!("primary attribute {primary:?} has an empty slug")));
    }
    Ok(NodeId(format!("{}:{s}", kind.prefix())))
}

/// Lowercase alphanumeric runs joined by single dashes.
pub fn slug(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        if c.is_alphanumeric() {
            out.extend(c.to_lowercase());
        } else if !out.is_empty() && !out.ends_with('-') {
            out.push('-');
        }
    }
    while out.ends_with('-') {
        out.pop();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub from: NodeId,
    pub to: NodeId,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnowledgeGraph {
    nodes: BTreeMap<NodeId, Node>,
    edges: BTreeSet<Edge>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
enum GraphLine {
    Node(Node),
    Edge(Edge),
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn node(&self, id: &NodeId) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.iter()
    }

    /// Inserts or updates a node. Re-inserting an identical node is a no-op.
    pub fn add_node(&mut self, node: Node) -> Result<NodeId, GraphError> {
        let expected = derive_id(node.kind, &node.attributes)?;
        if expected != node.id {
            return Err(GraphError::InvalidNode(format!("id {} does not match content ({expected})", node.id)));
        }
        let id = node.id.clone();
        self.nodes.insert(id.clone(), node);
        Ok(id)
    }

    /// Adds an edge; duplicates are ignored.
    pub fn add_edge(&mut self, edge: Edge) -> Result<(), GraphError> {
        for end in [&edge.from, &edge.to] {
            if !self.nodes.contains_key(end) {
                return Err(GraphError::DanglingEndpoint(end.clone()));
            }
        }
        self.edges.insert(edge);
        Ok(())
    }

    /// Nodes one outgoing edge away from `id`, sorted by id.
    pub fn neighbors(&self, id: &NodeId, kind_filter: Option<EdgeKind>) -> Result<Vec<&Node>, GraphError> {
        if !self.nodes.contains_key(id) {
            return Err(GraphError::UnknownNode(id.clone()));
        }
        let targets: BTreeSet<&NodeId> =
            self.outgoing(id).filter(|e| kind_filter.is_none_or(|k| e.kind == k)).map(|e| &e.to).collect();
        Ok(targets.into_iter().map(|t| &self.nodes[t]).collect())
    }

    fn outgoing<'a>(&'a self, id: &'a NodeId) -> impl Iterator<Item = &'a Edge> + 'a {
        self.edges.iter().filter(move |e| &e.from == id)
    }

    /// `key: value` lines for every attribute of every node linked directly
    /// to the procedure, ordered by node id then attribute order.
    pub fn linked_info_block(&self, procedure_id: &str) -> Result<String, GraphError> {
        let id = NodeId::for_procedure(procedure_id);
        if !self.nodes.contains_key(&id) {
            return Err(GraphError::UnknownProcedure(procedure_id.to_string()));
        }
        let lines: Vec<String> = self
            .neighbors(&id, None)?
            .into_iter()
            .flat_map(|n| n.attributes.iter().map(|(k, v)| format!("{k}: {v}")))
            .collect();
        Ok(lines.join("\n"))
    }

    /// Creates the procedure node and links its metadata and figures,
    /// replacing whatever the procedure was previously linked to. Returns the
    /// number of nodes written, which is the same on every re-link.
    pub fn link_procedure(&mut self, p: &Procedure) -> Result<usize, GraphError> {
        let doc =
            Node::new(NodeKind::ProcedureDoc, [(PROCEDURE_ID_ATTRIBUTE, p.id.clone()), ("Title", p.title.clone())])?;
        let doc_id = doc.id.clone();
        if self.nodes.contains_key(&doc_id) {
            self.detach(&doc_id);
        }
        self.add_node(doc)?;

        let meta = Node::new(NodeKind::Metadata, [("Last update", p.display_date())])?;
        let meta_id = self.add_node(meta)?;
        self.add_edge(Edge { from: doc_id.clone(), to: meta_id, kind: EdgeKind::HasMetadata })?;

        for fig in &p.figures {
            let node = Node::new(
                NodeKind::Figure,
                [
                    (format!("Figure {}", fig.number), fig.caption.clone()),
                    (IMAGE_ATTRIBUTE.to_string(), format!("{}/{}", p.id, fig.media_path)),
                ],
            )?;
            let fig_id = self.add_node(node)?;
            self.add_edge(Edge { from: doc_id.clone(), to: fig_id, kind: EdgeKind::HasFigure })?;
        }
        Ok(2 + p.figures.len())
    }

    /// Drops the outgoing edges of `id`, then any non-procedure node left
    /// without incoming edges.
    fn detach(&mut self, id: &NodeId) {
        self.edges.retain(|e| &e.from != id);
        loop {
            let referenced: BTreeSet<&NodeId> = self.edges.iter().map(|e| &e.to).collect();
            let orphans: Vec<NodeId> = self
                .nodes
                .values()
                .filter(|n| n.kind != NodeKind::ProcedureDoc && !referenced.contains(&n.id))
                .map(|n| n.id.clone())
                .collect();
            if orphans.is_empty() {
                break;
            }
            for o in orphans {
                self.nodes.remove(&o);
                self.edges.retain(|e| e.from != o);
            }
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let lines = self
            .nodes
            .values()
            .map(|n| GraphLine::Node(n.clone()))
            .chain(self.edges.iter().map(|e| GraphLine::Edge(e.clone())));
        for line in lines {
            out.push_str(&serde_json::to_string(&line).expect("graph lines serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, GraphError> {
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let corrupt = |reason: String| GraphError::Corrupt { line: i + 1, reason };
            match serde_json::from_str::<GraphLine>(line).map_err(|e| corrupt(e.to_string()))? {
                GraphLine::Node(n) => nodes.push((i + 1, n)),
                GraphLine::Edge(e) => edges.push((i + 1, e)),
            }
        }
        let mut g = KnowledgeGraph::new();
        for (line, n) in nodes {
            g.add_node(n).map_err(|e| GraphError::Corrupt { line, reason: e.to_string() })?;
        }
        for (line, e) in edges {
            g.add_edge(e).map_err(|e| GraphError::Corrupt { line, reason: e.to_string() })?;
        }
        Ok(g)
    }

    /// Writes `graph.jsonl` atomically (temp file + rename).
    pub fn save(&self, path: &Path) -> Result<(), GraphError> {
        write_atomic(path, self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GraphError> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}
