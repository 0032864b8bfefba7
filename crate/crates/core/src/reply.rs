//! Structured reply handling: marker parsing, verbatim verification against
//! the source procedure, and the pre-model topicality gate.
//!
//! Marker grammar (case-sensitive, 1 to 9 ASCII digits, value > 0):
//!
//! ```text
//! marker := "<<STEP " digits ">>" | "<<SHOW FIGURE " digits ">>"
//! ```
//!
//! Anything else, including marker-like fragments such as `<<STEP >>`, is
//! plain text. Parsing never fails.

use serde::Serialize;

use crate::procedure::{render_step_text, Procedure};
use crate::retrieval::RetrievalResult;

pub const REFUSAL_SENTENCE: &str = "I can only answer questions about the provided procedures.";
pub const TOPICALITY_THRESHOLD: f64 = 0.35;

const STEP_OPEN: &str = "<<STEP ";
const FIGURE_OPEN: &str = "<<SHOW FIGURE ";
const CLOSE: &str = ">>";
const MAX_DIGITS: usize = 9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Segment {
    Text { text: String },
    Step { number: u32, raw: String },
    Figure { number: u32, raw: String },
}

impl Segment {
    /// The exact source text this segment was parsed from.
    pub fn source(&self) -> &str {
        match self {
            Segment::Text { text } => text,
            Segment::Step { raw, .. } | Segment::Figure { raw, .. } => raw,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParsedReply {
    pub step_number: Option<u32>,
    pub figure_numbers: Vec<u32>,
    pub body: String,
    pub segments: Vec<Segment>,
}

impl ParsedReply {
    pub fn to_source(&self) -> String {
        self.segments.iter().map(Segment::source).collect()
    }

    /// Reply text with every marker replaced by a single space.
    pub fn plain_text(&self) -> String {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Text { text } => text.as_str(),
                _ => " ",
            })
            .collect()
    }
}

/// Tries to read a marker at the start of `s`, returning (segment, byte length).
fn marker_at(s: &str) -> Option<(Segment, usize)> {
    let (open, is_step) = if s.starts_with(STEP_OPEN) {
        (STEP_OPEN, true)
    } else if s.starts_with(FIGURE_OPEN) {
        (FIGURE_OPEN, false)
    } else {
        return None;
    };
    let rest = &s[open.len()..];
    let digits = rest.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 || digits > MAX_DIGITS || !rest[digits..].starts_with(CLOSE) {
        return None;
    }
    let number: u32 = rest[..digits].parse().ok().filter(|&n| n > 0)?;
    let len = open.len() + digits + CLOSE.len();
    let raw = s[..len].to_string();
    let seg = if is_step { Segment::Step { number, raw } } else { Segment::Figure { number, raw } };
    Some((seg, len))
}

pub fn parse_markers(raw: &str) -> ParsedReply {
    let mut segments = Vec::new();
    let mut text_start = 0;
    let mut i = 0;
    while let Some(offset) = raw[i..].find("<<") {
        let at = i + offset;
        match marker_at(&raw[at..]) {
            Some((seg, len)) => {
                if at > text_start {
                    segments.push(Segment::Text { text: raw[text_start..at].to_string() });
                }
                segments.push(seg);
                i = at + len;
                text_start = i;
            }
            // '<' is one byte, so stepping by one stays on a char boundary.
            None => i = at + 1,
        }
    }
    if text_start < raw.len() {
        segments.push(Segment::Text { text: raw[text_start..].to_string() });
    }

    let steps: Vec<u32> = segments
        .iter()
        .filter_map(|s| if let Segment::Step { number, .. } = s { Some(*number) } else { None })
        .collect();
    let mut figure_numbers = Vec::new();
    for s in &segments {
        if let Segment::Figure { number, .. } = s {
            if !figure_numbers.contains(number) {
                figure_numbers.push(*number);
            }
        }
    }
    ParsedReply {
        step_number: if steps.len() == 1 { Some(steps[0]) } else { None },
        figure_numbers,
        body: raw.to_string(),
        segments,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum VerbatimStatus {
    Pass,
    Fail,
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VerbatimReport {
    pub status: VerbatimStatus,
    /// Normalized canonical step text the reply was checked against.
    pub expected: String,
    pub found_span: Option<String>,
    /// Index of the first token of `expected` not matched in order from the start.
    pub first_divergence: Option<usize>,
}

impl VerbatimReport {
    fn not_applicable() -> Self {
        VerbatimReport {
            status: VerbatimStatus::NotApplicable,
            expected: String::new(),
            found_span: None,
            first_divergence: None,
        }
    }
}

/// Collapses every whitespace run (newlines included) to one space and trims.
pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn verify_verbatim(reply: &ParsedReply, procedure: &Procedure) -> VerbatimReport {
    let Some(n) = reply.step_number else {
        return VerbatimReport::not_applicable();
    };
    let Ok(step) = procedure.lookup_step(n) else {
        return VerbatimReport {
            status: VerbatimStatus::Fail,
            expected: String::new(),
            found_span: None,
            first_divergence: None,
        };
    };
    let expected = normalize_whitespace(&render_step_text(step));
    let tokens: Vec<&str> = expected.split(' ').collect();
    let padded = format!(" {} ", normalize_whitespace(&reply.plain_text()));
    let contains = |k: usize| k == 0 || padded.contains(&format!(" {} ", tokens[..k].join(" ")));

    if contains(tokens.len()) {
        return VerbatimReport {
            status: VerbatimStatus::Pass,
            found_span: Some(expected.clone()),
            expected,
            first_divergence: None,
        };
    }

    // Longest run of leading step tokens that occurs as whole tokens in the
    // reply. Occurrence is monotone in the run length, so binary search.
    let (mut lo, mut hi) = (0usize, tokens.len() - 1);
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if contains(mid) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    VerbatimReport {
        status: VerbatimStatus::Fail,
        first_divergence: Some(lo),
        found_span: (lo > 0).then(|| tokens[..lo].join(" ")),
        expected,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TopicalityDecision {
    pub proceed: bool,
    pub top_confidence: f64,
    pub threshold: f64,
}

pub fn topicality_gate(results: &[RetrievalResult], threshold: f64) -> TopicalityDecision {
    let top_confidence = results.first().map_or(0.0, |r| r.confidence);
    TopicalityDecision { proceed: !results.is_empty() && top_confidence >= threshold, top_confidence, threshold }
}
