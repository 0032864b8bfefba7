//! Deterministic backend that carries out the prompt's instructions.
//!
//! It reads the procedure back out of the `'''` enclosure, picks the step the
//! question asks for (explicit number or ordinal, else the step after the
//! session hint, else step 1) and answers with the step marker, the step text
//! verbatim and one figure marker per figure the step mentions. Questions
//! naming a graph key ("last updated") get a one-sentence answer instead.

use super::{last_user, validate_messages, ChatBackend, ChatMessage, LlmError};
use crate::prompt::{split_enclosure, STEP_HINT_PREFIX};
use crate::reply::REFUSAL_SENTENCE;

#[derive(Debug, Clone, Copy, Default)]
pub struct OracleBackend;

impl ChatBackend for OracleBackend {
    fn name(&self) -> &str {
        "oracle"
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<String, LlmError> {
        oracle_complete(messages)
    }
}

struct EnclosedStep {
    number: u32,
    text: String,
}

struct Enclosure {
    title: String,
    steps: Vec<EnclosedStep>,
    graph: Vec<(String, String)>,
}

fn parse_enclosure(inside: &str) -> Option<Enclosure> {
    let mut lines = inside.split('\n');
    let title = lines.next()?.to_string();
    let mut steps: Vec<EnclosedStep> = Vec::new();
    let mut graph = Vec::new();
    let mut in_graph = false;
    for line in lines {
        if in_graph {
            if let Some((k, v)) = line.split_once(": ") {
                graph.push((k.to_string(), v.to_string()));
            }
            continue;
        }
        if line.is_empty() {
            in_graph = true;
            continue;
        }
        let next = steps.len() as u32 + 1;
        if let Some(rest) = line.strip_prefix(&format!("Step {next} - ")) {
            steps.push(EnclosedStep { number: next, text: rest.to_string() });
        } else {
            let current = steps.last_mut()?;
            current.text.push('\n');
            current.text.push_str(line);
        }
    }
    (!steps.is_empty()).then_some(Enclosure { title, steps, graph })
}

const ORDINALS: &[&str] = &[
    "first",
    "second",
    "third",
    "fourth",
    "fifth",
    "sixth",
    "seventh",
    "eighth",
    "ninth",
    "tenth",
    "eleventh",
    "twelfth",
    "thirteenth",
    "fourteenth",
    "fifteenth",
    "sixteenth",
    "seventeenth",
    "eighteenth",
    "nineteenth",
    "twentieth",
];
const CARDINALS: &[&str] = &[
    "one",
    "two",
    "three",
    "four",
    "five",
    "six",
    "seven",
    "eight",
    "nine",
    "ten",
    "eleven",
    "twelve",
    "thirteen",
    "fourteen",
    "fifteen",
    "sixteen",
    "seventeen",
    "eighteen",
    "nineteen",
    "twenty",
];

fn words(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase).collect()
}

fn position_of(list: &[&str], w: &str) -> Option<u32> {
    list.iter().position(|x| *x == w).map(|i| i as u32 + 1)
}

/// Step number named explicitly: "fourth step", "step 4", "step four", "4th step", "last step".
fn explicit_step(words: &[String], step_count: u32) -> Option<u32> {
    for (i, w) in words.iter().enumerate() {
        if let Some(n) = position_of(ORDINALS, w) {
            return Some(n);
        }
        if let Some(digits) =
            w.strip_suffix("st").or(w.strip_suffix("nd")).or(w.strip_suffix("rd")).or(w.strip_suffix("th"))
        {
            if let Ok(n) = digits.parse::<u32>() {
                return Some(n);
            }
        }
        if w == "step" {
            if let Some(next) = words.get(i + 1) {
                if let Ok(n) = next.parse::<u32>() {
                    return Some(n);
                }
                if let Some(n) = position_of(CARDINALS, next) {
                    return Some(n);
                }
            }
            if i > 0 && words[i - 1] == "last" {
                return Some(step_count);
            }
        }
    }
    None
}

/// Graph line whose key words all appear in the question (alphabetic key
/// words may match as prefixes, so "update" matches "updated").
fn matching_graph_line<'a>(question: &[String], graph: &'a [(String, String)]) -> Option<&'a (String, String)> {
    let mut best: Option<(&(String, String), usize)> = None;
    for entry in graph {
        let key = words(&entry.0);
        let all_match = !key.is_empty()
            && key.iter().all(|k| {
                question.iter().any(|q| {
                    if k.chars().all(|c| c.is_ascii_digit()) {
                        q == k
                    } else {
                        q.starts_with(k.as_str())
                    }
                })
            });
        if all_match && best.is_none_or(|(_, n)| key.len() > n) {
            best = Some((entry, key.len()));
        }
    }
    best.map(|(e, _)| e)
}

fn figure_mentions(text: &str) -> Vec<u32> {
    let mut found = Vec::new();
    let mut rest = text;
    while let Some(i) = rest.find("Figure ") {
        rest = &rest[i + "Figure ".len()..];
        let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
        if let Ok(n) = digits.parse::<u32>() {
            if !found.contains(&n) {
                found.push(n);
            }
        }
    }
    found
}

fn lowercase_first(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_lowercase().chain(c).collect(),
        None => String::new(),
    }
}

pub fn oracle_complete(messages: &[ChatMessage]) -> Result<String, LlmError> {
    validate_messages(messages)?;
    let user = last_user(messages).ok_or(LlmError::MalformedPrompt)?;
    let (inside, tail) = split_enclosure(user).ok_or(LlmError::MalformedPrompt)?;
    let enclosure = parse_enclosure(&inside).ok_or(LlmError::MalformedPrompt)?;

    let mut hint = None;
    let mut question_lines = Vec::new();
    for line in tail.split('\n') {
        match line.strip_prefix(STEP_HINT_PREFIX).and_then(|n| n.trim().parse::<u32>().ok()) {
            Some(n) => hint = Some(n),
            None => question_lines.push(line),
        }
    }
    let question = words(&question_lines.join("\n"));
    let step_count = enclosure.steps.len() as u32;

    let requested = if let Some(n) = explicit_step(&question, step_count) {
        n
    } else if let Some((key, value)) = matching_graph_line(&question, &enclosure.graph) {
        return Ok(format!("The {} for the {} procedure is {value}.", lowercase_first(key), enclosure.title));
    } else if let Some(current) = hint {
        let stay = question.iter().any(|w| matches!(w.as_str(), "repeat" | "again" | "current"));
        if stay {
            current
        } else {
            current + 1
        }
    } else {
        1
    };

    let Some(step) = enclosure.steps.iter().find(|s| s.number == requested) else {
        return Ok(REFUSAL_SENTENCE.to_string());
    };
    let mut reply = format!("<<STEP {}>> - {}", step.number, step.text);
    for fig in figure_mentions(&step.text) {
        reply.push_str(&format!(" <<SHOW FIGURE {fig}>>"));
    }
    Ok(reply)
}
