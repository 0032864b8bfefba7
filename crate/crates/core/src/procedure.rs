//! Procedure bundles: the on-disk checklist format and its validated in-memory form.
//!
//! A bundle is a single JSON document describing one procedure. Parsing is
//! strict (unknown keys are rejected) and every structural invariant is
//! checked before a [`Procedure`] is handed out, so downstream code can rely
//! on contiguous step numbering and resolvable figure references.

use std::fmt;
use std::path::{Component, Path};

use chrono::NaiveDate;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Reserved prompt delimiter; procedure text must never contain it.
pub(crate) const DELIMITER: &str = "'''";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProcedureError {
    #[error("malformed bundle (line {line}): {reason}")]
    MalformedBundle { reason: String, line: usize },
    #[error("invariant violation: {0}")]
    InvariantViolation(Violation),
    #[error("media path escapes bundle directory: {0}")]
    PathEscape(String),
    #[error("step {0} not found")]
    StepNotFound(u32),
}

/// Which procedure invariant a bundle broke.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    InvalidId(String),
    InvalidTitle,
    NoSteps,
    StepGap { expected: u32, found: u32 },
    DuplicateFigure(u32),
    DanglingFigureRef { step: u32, figure: u32 },
    EmptyLabel { step: u32 },
    EmptyBody { step: u32 },
    BlankLine { step: u32 },
    MultiLineText { step: u32 },
    ReservedDelimiter,
    EmptyMediaPath { figure: u32 },
    MultiLineFigure { figure: u32 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::InvalidId(id) => write!(f, "procedure id {id:?} is not a [a-z0-9-] slug"),
            Violation::InvalidTitle => write!(f, "title must be a single nonempty line"),
            Violation::NoSteps => write!(f, "procedure has no steps"),
            Violation::StepGap { expected, found } => {
                write!(f, "step gap: expected step {expected}, found {found}")
            }
            Violation::DuplicateFigure(n) => write!(f, "figure {n} defined more than once"),
            Violation::DanglingFigureRef { step, figure } => {
                write!(f, "step {step} references undefined figure {figure}")
            }
            Violation::EmptyLabel { step } => write!(f, "step {step} has an empty label"),
            Violation::EmptyBody { step } => write!(f, "step {step} has no body lines"),
            Violation::BlankLine { step } => write!(f, "step {step} has a blank body line"),
            Violation::MultiLineText { step } => {
                write!(f, "step {step} has a label or body line containing a line break")
            }
            Violation::ReservedDelimiter => {
                write!(f, "procedure text contains the reserved delimiter {DELIMITER}")
            }
            Violation::EmptyMediaPath { figure } => write!(f, "figure {figure} has no media path"),
            Violation::MultiLineFigure { figure } => {
                write!(f, "figure {figure} has a caption or media path containing a line break")
            }
        }
    }
}

impl From<Violation> for ProcedureError {
    fn from(v: Violation) -> Self {
        ProcedureError::InvariantViolation(v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Procedure {
    pub id: String,
    pub title: String,
    #[serde(serialize_with = "serialize_iso_date")]
    pub last_updated: NaiveDate,
    pub figures: Vec<FigureRef>,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Step {
    pub number: u32,
    pub label: String,
    #[serde(rename = "body")]
    pub body_lines: Vec<String>,
    #[serde(rename = "figures")]
    pub figure_refs: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FigureRef {
    pub number: u32,
    pub caption: String,
    #[serde(rename = "media")]
    pub media_path: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBundle {
    id: String,
    title: String,
    #[serde(deserialize_with = "deserialize_iso_date")]
    last_updated: NaiveDate,
    #[serde(default)]
    figures: Vec<RawFigure>,
    steps: Vec<RawStep>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFigure {
    number: u32,
    caption: String,
    media: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStep {
    number: u32,
    label: String,
    body: Vec<String>,
    #[serde(default)]
    figures: Vec<u32>,
}

fn deserialize_iso_date<'de, D: Deserializer<'de>>(d: D) -> Result<NaiveDate, D::Error> {
    let s = String::deserialize(d)?;
    if s.len() != 10 {
        return Err(serde::de::Error::custom(format!("date {s:?} is not YYYY-MM-DD")));
    }
    NaiveDate::parse_from_str(&s, "%Y-%m-%d")
        .map_err(|e| serde::de::Error::custom(format!("date {s:?} is not YYYY-MM-DD: {e}")))
}

fn serialize_iso_date<S: Serializer>(date: &NaiveDate, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&date.format("%Y-%m-%d").to_string())
}

/// Parses a procedure bundle. `base_dir` is the directory the bundle's media
/// paths are relative to.
pub fn parse_procedure_bundle(raw: &[u8], base_dir: &Path) -> Result<Procedure, ProcedureError> {
    let text = std::str::from_utf8(raw).map_err(|e| {
        let line = raw[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count() + 1;
        ProcedureError::MalformedBundle { reason: format!("invalid UTF-8: {e}"), line }
    })?;
    let bundle: RawBundle = serde_json::from_str(text)
        .map_err(|e| ProcedureError::MalformedBundle { reason: e.to_string(), line: e.line() })?;
    validate(bundle, base_dir)
}

fn is_slug(id: &str) -> bool {
    !id.is_empty() && id.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
}

fn validate(bundle: RawBundle, base_dir: &Path) -> Result<Procedure, ProcedureError> {
    if !is_slug(&bundle.id) {
        return Err(Violation::InvalidId(bundle.id).into());
    }
    if bundle.title.trim().is_empty() || bundle.title.contains(['\n', '\r']) {
        return Err(Violation::InvalidTitle.into());
    }
    if bundle.steps.is_empty() {
        return Err(Violation::NoSteps.into());
    }

    let mut figures = Vec::with_capacity(bundle.figures.len());
    for fig in bundle.figures {
        if figures.iter().any(|f: &FigureRef| f.number == fig.number) {
            return Err(Violation::DuplicateFigure(fig.number).into());
        }
        if fig.caption.contains(['\n', '\r']) || fig.media.contains(['\n', '\r']) {
            return Err(Violation::MultiLineFigure { figure: fig.number }.into());
        }
        if fig.media.is_empty() {
            return Err(Violation::EmptyMediaPath { figure: fig.number }.into());
        }
        check_media_path(&fig.media, base_dir)?;
        figures.push(FigureRef { number: fig.number, caption: fig.caption, media_path: fig.media });
    }

    let mut steps = Vec::with_capacity(bundle.steps.len());
    for (i, raw) in bundle.steps.into_iter().enumerate() {
        let expected = i as u32 + 1;
        if raw.number != expected {
            return Err(Violation::StepGap { expected, found: raw.number }.into());
        }
        let label = raw.label.trim().to_string();
        if label.is_empty() {
            return Err(Violation::EmptyLabel { step: raw.number }.into());
        }
        if raw.body.is_empty() {
            return Err(Violation::EmptyBody { step: raw.number }.into());
        }
        if label.contains(['\n', '\r']) || raw.body.iter().any(|l| l.contains(['\n', '\r'])) {
            return Err(Violation::MultiLineText { step: raw.number }.into());
        }
        let body_lines: Vec<String> = raw.body.iter().map(|l| l.trim_end().to_string()).collect();
        if body_lines.iter().any(|l| l.trim().is_empty()) {
            return Err(Violation::BlankLine { step: raw.number }.into());
        }
        for &figure in &raw.figures {
            if !figures.iter().any(|f| f.number == figure) {
                return Err(Violation::DanglingFigureRef { step: raw.number, figure }.into());
            }
        }
        steps.push(Step { number: raw.number, label, body_lines, figure_refs: raw.figures });
    }

    let procedure = Procedure {
        id: bundle.id,
        title: bundle.title.trim().to_string(),
        last_updated: bundle.last_updated,
        figures,
        steps,
    };
    if procedure.texts().any(|t| t.contains(DELIMITER)) {
        return Err(Violation::ReservedDelimiter.into());
    }
    Ok(procedure)
}

fn check_media_path(media: &str, base_dir: &Path) -> Result<(), ProcedureError> {
    let path = Path::new(media);
    let lexically_inside = path.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir));
    if !lexically_inside {
        return Err(ProcedureError::PathEscape(media.to_string()));
    }
    // Symlinks can still point outside; resolve when the file is present.
    let joined = base_dir.join(path);
    if let (Ok(resolved), Ok(base)) = (joined.canonicalize(), base_dir.canonicalize()) {
        if !resolved.starts_with(&base) {
            return Err(ProcedureError::PathEscape(media.to_string()));
        }
    }
    Ok(())
}

impl Procedure {
    pub fn lookup_step(&self, n: u32) -> Result<&Step, ProcedureError> {
        // Numbering is contiguous from 1, so the index is direct.
        n.checked_sub(1).and_then(|i| self.steps.get(i as usize)).ok_or(ProcedureError::StepNotFound(n))
    }

    pub fn figure(&self, n: u32) -> Option<&FigureRef> {
        self.figures.iter().find(|f| f.number == n)
    }

    /// Last-updated date in the long form used for display, e.g. "09 April 2015".
    pub fn display_date(&self) -> String {
        display_date(self.last_updated)
    }

    /// Full procedure text as placed inside a prompt: the title line, then
    /// each step introduced by a `Step <n> - ` header followed by its
    /// canonical text.
    pub fn render_text(&self) -> String {
        let mut out = self.title.clone();
        for step in &self.steps {
            out.push('\n');
            out.push_str(&format!("Step {} - ", step.number));
            out.push_str(&render_step_text(step));
        }
        out
    }

    /// Serializes back to the bundle format.
    pub fn to_bundle_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("procedure serialization is infallible")
    }

    fn texts(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.title.as_str()).chain(self.figures.iter().map(|f| f.caption.as_str())).chain(
            self.steps
                .iter()
                .flat_map(|s| std::iter::once(s.label.as_str()).chain(s.body_lines.iter().map(String::as_str))),
        )
    }
}

pub fn display_date(date: NaiveDate) -> String {
    date.format("%d %B %Y").to_string()
}

/// Canonical text of a step: `LABEL:` on the first line, then the body
/// lines joined by single newlines. This is the reference string for
/// verbatim checks.
pub fn render_step_text(step: &Step) -> String {
    let mut out =
        String::with_capacity(step.label.len() + 1 + step.body_lines.iter().map(|l| l.len() + 1).sum::<usize>());
    out.push_str(&step.label);
    out.push(':');
    for line in &step.body_lines {
        out.push('\n');
        out.push_str(line);
    }
    out
}
