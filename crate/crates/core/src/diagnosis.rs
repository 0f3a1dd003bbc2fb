//! Conclusive-diagnosis extraction: a pattern-built shortlist of candidate
//! entities, then a pluggable selector that picks one of them verbatim.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::ClientError;
use crate::corpus::{Category, Corpus, Document};
use crate::text::{normalize_term, word_tokens};

/// Selector answer meaning "the note reports no diagnosis".
pub const NO_DIAGNOSIS: &str = "no diagnosis";

/// System prompt for diagnosis selection, one line per printed line.
pub const SELECTION_SYSTEM_PROMPT: &str = "You are a clinical assistant.
Your job is to extract the conclusive
diagnosis from a clinical note written by
an experienced physician.
The diagnosis is a medical condition
identified by a health care provider.
To complete the task, you are aided by a
list of possible diagnoses.
Here are your guidelines:
1. The diagnosis is always contained in
the list of potential diagnoses.
2. Your goal is to extract only the
diagnosis, ignoring everything else.
3. Respond with a json containing the
extracted diagnosis and a short motivation
{\u{201c}motivation\u{201d}: \u{201c}motivation for the
extracted diagnosis\u{201d}, \u{201c}diagnosis\u{201d}:
\u{201c}extracted diagnosis\u{201d}}.
4. If no diagnosis is reported,
respond with \u{201c}no diagnosis.\u{201d}

CAUTION: Notes may contain diagnoses
made in the past with respect to
the current clinical situation.
Only extract diagnoses related to the current
situation.";

const NOTE_HEADER: &str = "\"clinical note\":";
const CANDIDATES_HEADER: &str = "\"potential diagnosis\":";
const ANSWER_HEADER: &str = "\"answer\":";
const EXAMPLE_HEADER: &str = "### Example ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ShortlistSource {
    Pattern,
    AllEntities,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub span_id: String,
    pub surface: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosisShortlist {
    pub doc_id: String,
    pub candidates: Vec<Candidate>,
    pub source: ShortlistSource,
}

impl DiagnosisShortlist {
    pub fn surfaces(&self) -> Vec<String> {
        self.candidates.iter().map(|c| c.surface.clone()).collect()
    }

    pub fn contains(&self, surface: &str) -> bool {
        self.candidates.iter().any(|c| c.surface == surface)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosisResult {
    pub doc_id: String,
    pub diagnosis: Option<String>,
    pub motivation: String,
    pub selector: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosisConfig {
    /// How many tokens after a `diagnos-` token an entity may start.
    pub window: usize,
    /// Lowercase token prefixes per language code. Languages missing here
    /// use the `en` entry.
    pub prefixes: BTreeMap<String, Vec<String>>,
    /// Fall back to the deterministic rule when the selector backend is down.
    pub fallback_on_unavailable: bool,
    pub max_in_flight: usize,
}

impl Default for DiagnosisConfig {
    fn default() -> Self {
        let stem = vec!["diagnos".to_string()];
        Self {
            window: 10,
            prefixes: BTreeMap::from([("en".to_string(), stem.clone()), ("it".to_string(), stem)]),
            fallback_on_unavailable: true,
            max_in_flight: 4,
        }
    }
}

impl DiagnosisConfig {
    fn prefixes_for(&self, language: &str) -> &[String] {
        self.prefixes
            .get(language)
            .or_else(|| self.prefixes.get("en"))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

pub fn build_shortlist(doc: &Document, config: &DiagnosisConfig) -> DiagnosisShortlist {
    let mut entities: Vec<_> = doc.spans_of(Category::ClinicalEntity).collect();
    entities.sort_by_key(|s| (s.start, s.end));

    let prefixes = config.prefixes_for(&doc.language);
    let tokens = word_tokens(&doc.text);
    let mut pattern_hits = Vec::new();
    for (i, tok) in tokens.iter().enumerate() {
        if !prefixes.iter().any(|p| tok.text.starts_with(p.as_str())) {
            continue;
        }
        let last = (i + config.window).min(tokens.len() - 1);
        if last == i {
            continue;
        }
        let window_end = tokens[last].end;
        for ent in &entities {
            if ent.start >= tok.end && ent.start < window_end {
                pattern_hits.push(*ent);
            }
        }
    }
    pattern_hits.sort_by_key(|s| (s.start, s.end));

    let (pool, source) = if pattern_hits.is_empty() {
        (entities, ShortlistSource::AllEntities)
    } else {
        (pattern_hits, ShortlistSource::Pattern)
    };
    let mut seen = HashSet::new();
    let candidates = pool
        .into_iter()
        .filter(|s| seen.insert(normalize_term(&s.surface)))
        .map(|s| Candidate {
            span_id: s.id.clone(),
            surface: s.surface.clone(),
        })
        .collect();
    DiagnosisShortlist {
        doc_id: doc.id.clone(),
        candidates,
        source,
    }
}

/// A worked example shown to the selector before the target note.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shot {
    pub note: String,
    pub candidates: Vec<String>,
    pub motivation: String,
    pub diagnosis: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionRequest {
    pub system_prompt: String,
    pub shots: Vec<Shot>,
    pub note: String,
    pub candidates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectorResponse {
    pub motivation: String,
    pub diagnosis: String,
}

/// Backend that picks a diagnosis from a shortlist.
pub trait SelectorClient: Send + Sync {
    fn name(&self) -> &str;
    fn select(&self, request: &SelectionRequest) -> Result<SelectorResponse, ClientError>;
}

/// Offline selector: always the first candidate.
#[derive(Debug, Clone, Copy, Default)]
pub struct FirstCandidateSelector;

impl SelectorClient for FirstCandidateSelector {
    fn name(&self) -> &str {
        "stub-first-candidate"
    }

    fn select(&self, request: &SelectionRequest) -> Result<SelectorResponse, ClientError> {
        Ok(match request.candidates.first() {
            Some(c) => SelectorResponse {
                motivation: "first listed candidate".into(),
                diagnosis: c.clone(),
            },
            None => SelectorResponse {
                motivation: "no candidates".into(),
                diagnosis: NO_DIAGNOSIS.into(),
            },
        })
    }
}

#[derive(Debug, Error)]
pub enum DiagnosisError {
    #[error("selector unavailable for document {doc_id}: {source}")]
    SelectorUnavailable {
        doc_id: String,
        #[source]
        source: ClientError,
    },
}

fn is_no_diagnosis(answer: &str) -> bool {
    let a = answer.trim().trim_end_matches('.').trim().to_lowercase();
    a.is_empty() || a == NO_DIAGNOSIS
}

fn deterministic_fallback(shortlist: &DiagnosisShortlist) -> Option<String> {
    match shortlist.source {
        ShortlistSource::Pattern => shortlist.candidates.first().map(|c| c.surface.clone()),
        ShortlistSource::AllEntities => None,
    }
}

pub fn selection_request(
    doc: &Document,
    shortlist: &DiagnosisShortlist,
    shots: &[Shot],
) -> SelectionRequest {
    SelectionRequest {
        system_prompt: SELECTION_SYSTEM_PROMPT.to_string(),
        shots: shots.to_vec(),
        note: doc.text.clone(),
        candidates: shortlist.surfaces(),
    }
}

/// Ask the selector for a verbatim shortlist candidate. An answer outside
/// the shortlist is retried once, then replaced by the deterministic rule
/// (first pattern candidate, else no diagnosis).
pub fn select_diagnosis(
    doc: &Document,
    shortlist: &DiagnosisShortlist,
    selector: &dyn SelectorClient,
    shots: &[Shot],
    config: &DiagnosisConfig,
) -> Result<DiagnosisResult, DiagnosisError> {
    let result = |diagnosis: Option<String>, motivation: String, selector: &str| DiagnosisResult {
        doc_id: doc.id.clone(),
        diagnosis,
        motivation,
        selector: selector.to_string(),
    };
    if shortlist.candidates.is_empty() {
        return Ok(result(None, "empty shortlist".into(), selector.name()));
    }

    let request = selection_request(doc, shortlist, shots);
    for attempt in 0..2 {
        match selector.select(&request) {
            Ok(resp) if is_no_diagnosis(&resp.diagnosis) => {
                return Ok(result(None, resp.motivation, selector.name()));
            }
            Ok(resp) if shortlist.contains(&resp.diagnosis) => {
                return Ok(result(
                    Some(resp.diagnosis),
                    resp.motivation,
                    selector.name(),
                ));
            }
            Ok(resp) => {
                tracing::warn!(doc = %doc.id, attempt, answer = %resp.diagnosis, "selector answer not in shortlist");
            }
            Err(ClientError::InvalidResponse { message, .. }) => {
                tracing::warn!(doc = %doc.id, attempt, %message, "unparseable selector response");
            }
            Err(err) => {
                if !config.fallback_on_unavailable {
                    return Err(DiagnosisError::SelectorUnavailable {
                        doc_id: doc.id.clone(),
                        source: err,
                    });
                }
                tracing::warn!(doc = %doc.id, %err, "selector unavailable, using fallback");
                break;
            }
        }
    }
    Ok(result(
        deterministic_fallback(shortlist),
        "deterministic fallback".into(),
        "fallback-first-pattern",
    ))
}

/// Shortlist and select for every document, keyed by document id.
pub fn diagnose_corpus(
    corpus: &Corpus,
    selector: &dyn SelectorClient,
    shots: &[Shot],
    config: &DiagnosisConfig,
) -> Result<BTreeMap<String, DiagnosisResult>, DiagnosisError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.max_in_flight.max(1))
        .build()
        .expect("thread pool");
    let results: Result<Vec<_>, _> = pool.install(|| {
        corpus
            .documents()
            .par_iter()
            .map(|doc| {
                let shortlist = build_shortlist(doc, config);
                select_diagnosis(doc, &shortlist, selector, shots, config)
            })
            .collect()
    });
    Ok(results?
        .into_iter()
        .map(|r| (r.doc_id.clone(), r))
        .collect())
}

fn push_block(out: &mut String, note: &str, candidates: &[String]) {
    out.push_str(NOTE_HEADER);
    out.push_str(note);
    out.push('\n');
    out.push_str(CANDIDATES_HEADER);
    out.push('\n');
    for c in candidates {
        out.push_str("- ");
        out.push_str(c);
        out.push('\n');
    }
}

/// Render the full selection prompt: system prompt, worked examples, then
/// the target note with its candidate list.
pub fn build_selection_prompt(request: &SelectionRequest) -> String {
    let mut out = String::with_capacity(request.system_prompt.len() + request.note.len() + 256);
    out.push_str(&request.system_prompt);
    out.push_str("\n\n");
    for (i, shot) in request.shots.iter().enumerate() {
        out.push_str(&format!("{EXAMPLE_HEADER}{}\n", i + 1));
        push_block(&mut out, &shot.note, &shot.candidates);
        let answer =
            serde_json::json!({"motivation": shot.motivation, "diagnosis": shot.diagnosis});
        out.push_str(ANSWER_HEADER);
        out.push_str(&answer.to_string());
        out.push_str("\n\n");
    }
    push_block(&mut out, &request.note, &request.candidates);
    out
}

/// Prompt text after the system prompt, as sent in the user turn.
pub fn build_selection_user_message(request: &SelectionRequest) -> String {
    let full = build_selection_prompt(request);
    full[request.system_prompt.len() + 2..].to_string()
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("malformed selection prompt: {0}")]
pub struct PromptParseError(String);

/// Inverse of [`build_selection_prompt`] given the system prompt that was used.
pub fn parse_selection_prompt(
    prompt: &str,
    system_prompt: &str,
) -> Result<SelectionRequest, PromptParseError> {
    let err = |m: &str| PromptParseError(m.to_string());
    let mut rest = prompt
        .strip_prefix(system_prompt)
        .and_then(|r| r.strip_prefix("\n\n"))
        .ok_or_else(|| err("missing system prompt"))?;

    fn block(
        rest: &str,
        until_answer: bool,
    ) -> Result<(String, Vec<String>, &str), PromptParseError> {
        let err = |m: &str| PromptParseError(m.to_string());
        let body = rest
            .strip_prefix(NOTE_HEADER)
            .ok_or_else(|| err("missing note header"))?;
        let marker = format!("\n{CANDIDATES_HEADER}\n");
        let at = body
            .find(&marker)
            .ok_or_else(|| err("missing candidate header"))?;
        let note = body[..at].to_string();
        let mut tail = &body[at + marker.len()..];
        let mut candidates = Vec::new();
        while let Some(line_rest) = tail.strip_prefix("- ") {
            let nl = line_rest
                .find('\n')
                .ok_or_else(|| err("unterminated candidate"))?;
            candidates.push(line_rest[..nl].to_string());
            tail = &line_rest[nl + 1..];
        }
        if !until_answer && !tail.is_empty() {
            return Err(err("trailing text after candidates"));
        }
        Ok((note, candidates, tail))
    }

    let mut shots = Vec::new();
    while let Some(after) = rest.strip_prefix(EXAMPLE_HEADER) {
        let nl = after.find('\n').ok_or_else(|| err("bad example header"))?;
        let (note, candidates, tail) = block(&after[nl + 1..], true)?;
        let answer_line = tail
            .strip_prefix(ANSWER_HEADER)
            .ok_or_else(|| err("missing answer"))?;
        let end = answer_line
            .find("\n\n")
            .ok_or_else(|| err("unterminated answer"))?;
        let answer: SelectorResponse = serde_json::from_str(&answer_line[..end])
            .map_err(|e| PromptParseError(e.to_string()))?;
        shots.push(Shot {
            note,
            candidates,
            motivation: answer.motivation,
            diagnosis: answer.diagnosis,
        });
        rest = &answer_line[end + 2..];
    }
    let (note, candidates, _) = block(rest, false)?;
    Ok(SelectionRequest {
        system_prompt: system_prompt.to_string(),
        shots,
        note,
        candidates,
    })
}

/// Parse a chat answer into a selector response. Accepts a bare
/// "no diagnosis." as well as the JSON object, optionally fenced.
pub fn parse_selector_answer(content: &str) -> Result<SelectorResponse, String> {
    let trimmed = content.trim();
    if is_no_diagnosis(trimmed) {
        return Ok(SelectorResponse {
            motivation: String::new(),
            diagnosis: NO_DIAGNOSIS.into(),
        });
    }
    let start = trimmed.find('{').ok_or("no JSON object in answer")?;
    let end = trimmed.rfind('}').ok_or("no JSON object in answer")?;
    let object = &trimmed[start..=end];
    serde_json::from_str(object).or_else(|e| {
        // typographic quotes used as JSON delimiters
        let normalized = object.replace(['\u{201c}', '\u{201d}'], "\"");
        serde_json::from_str(&normalized).map_err(|_| e.to_string())
    })
}
