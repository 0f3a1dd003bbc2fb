//! E3C ingest from brat standoff exports (`<id>.txt` + `<id>.ann`).
//!
//! Recognized `.ann` records (fields shown as spaces are tabs):
//!
//! ```text
//! T1  CLINENTITY 10 16  nausea
//! A1  Polarity T1 NEG
//! R1  PERTAINSTO Arg1:T3 Arg2:T4
//! ```
//!
//! Span types other than clinical entity, body part, RML and event are
//! dropped, as are relations other than `PERTAINS_TO` and relations whose
//! endpoints were dropped. Span surfaces are always taken from the text.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{
    io_err, AnnotationSpan, AttributeSet, Category, CorpusError, Document, Modality, Permanence,
    Polarity, Relation, RelationType, Split,
};
use crate::text::CharIndex;

#[derive(Debug, Clone, Default)]
pub struct AdapterOptions {
    /// ISO 639-1 code for every document. When unset, the language is read
    /// from the document id prefix (`EN100668` → `en`).
    pub language: Option<String>,
}

fn map_category(kind: &str) -> Option<Category> {
    let k: String = kind
        .chars()
        .filter(|c| c.is_alphanumeric())
        .collect::<String>()
        .to_ascii_uppercase();
    match k.as_str() {
        "CLINENTITY" | "CLINICALENTITY" => Some(Category::ClinicalEntity),
        "BODYPART" => Some(Category::BodyPart),
        "RML" => Some(Category::Rml),
        "EVENT" => Some(Category::Event),
        _ => None,
    }
}

fn is_pertains_to(kind: &str) -> bool {
    let k: String = kind
        .chars()
        .filter(|c| c.is_alphanumeric())
        .collect::<String>()
        .to_ascii_uppercase();
    k == "PERTAINSTO"
}

fn infer_language(doc_id: &str) -> String {
    let prefix: String = doc_id
        .chars()
        .take_while(|c| c.is_ascii_alphabetic())
        .collect();
    if prefix.len() == 2 {
        prefix.to_ascii_lowercase()
    } else {
        "und".to_string()
    }
}

#[derive(Default)]
struct RawAttrs {
    polarity: Option<String>,
    modality: Option<String>,
    permanence: Option<String>,
}

fn attribute_set(raw: &RawAttrs) -> AttributeSet {
    let norm = |v: &Option<String>| v.as_deref().map(|s| s.trim().to_ascii_uppercase());
    let polarity = match norm(&raw.polarity).as_deref() {
        Some("POS" | "POSITIVE") => Polarity::Positive,
        Some("NEG" | "NEGATIVE") => Polarity::Negative,
        _ => Polarity::Missing,
    };
    let contextual_modality = match norm(&raw.modality).as_deref() {
        Some("ACTUAL") => Modality::Actual,
        Some("HYPOTHETICAL") => Modality::Hypothetical,
        Some("HEDGED") => Modality::Hedged,
        // GENERIC has no value in the history rendering table.
        _ => Modality::Missing,
    };
    let permanence = match norm(&raw.permanence).as_deref() {
        Some("PERMANENT") => Permanence::Permanent,
        Some("FINITE") => Permanence::Finite,
        _ => Permanence::Missing,
    };
    AttributeSet {
        polarity,
        contextual_modality,
        permanence,
    }
}

/// Parse one brat document. `ann_path` is only used for error messages.
pub(crate) fn parse_brat(
    id: &str,
    language: &str,
    text: String,
    ann: &str,
    ann_path: &Path,
) -> Result<Document, CorpusError> {
    let chars = CharIndex::new(&text);
    let mut spans: Vec<AnnotationSpan> = Vec::new();
    let mut attrs: HashMap<String, RawAttrs> = HashMap::new();
    let mut raw_relations: Vec<(String, String, String)> = Vec::new();

    for (i, raw) in ann.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        let parse_err = |message: &str| CorpusError::Parse {
            path: ann_path.to_path_buf(),
            line: i + 1,
            message: message.to_string(),
        };
        let mut cols = line.splitn(3, '\t');
        let (Some(rec_id), Some(body)) = (cols.next(), cols.next()) else {
            continue;
        };
        match rec_id.chars().next() {
            Some('T') => {
                let (kind, offsets) = body
                    .split_once(' ')
                    .ok_or_else(|| parse_err("text-bound record without offsets"))?;
                let Some(category) = map_category(kind) else {
                    continue;
                };
                let mut start = usize::MAX;
                let mut end = 0;
                for frag in offsets.split(';') {
                    let mut nums = frag.split_whitespace().map(str::parse::<usize>);
                    match (nums.next(), nums.next()) {
                        (Some(Ok(s)), Some(Ok(e))) => {
                            start = start.min(s);
                            end = end.max(e);
                        }
                        _ => return Err(parse_err("malformed offsets")),
                    }
                }
                let surface = chars.slice(start, end).unwrap_or_default().to_string();
                spans.push(AnnotationSpan {
                    id: rec_id.to_string(),
                    category,
                    start,
                    end,
                    surface,
                    attributes: None,
                });
            }
            Some('A') | Some('M') => {
                let mut parts = body.split_whitespace();
                let (Some(name), Some(target)) = (parts.next(), parts.next()) else {
                    return Err(parse_err("malformed attribute record"));
                };
                let value = parts.next().map(str::to_string);
                let slot = attrs.entry(target.to_string()).or_default();
                let name = name.to_ascii_lowercase();
                if name.contains("polarity") {
                    slot.polarity = value;
                } else if name.contains("modality") {
                    slot.modality = value;
                } else if name.contains("permanence") {
                    slot.permanence = value;
                }
            }
            Some('R') => {
                let mut parts = body.split_whitespace();
                let kind = parts.next().unwrap_or_default();
                if !is_pertains_to(kind) {
                    continue;
                }
                let args: Vec<&str> = parts
                    .filter_map(|a| a.split_once(':').map(|(_, v)| v))
                    .collect();
                let [a, b] = args[..] else {
                    return Err(parse_err("relation needs two arguments"));
                };
                raw_relations.push((rec_id.to_string(), a.to_string(), b.to_string()));
            }
            _ => {}
        }
    }

    for span in &mut spans {
        if span.category == Category::ClinicalEntity {
            let raw = attrs.get(&span.id);
            span.attributes = Some(raw.map(attribute_set).unwrap_or_default());
        }
    }

    let category_of: HashMap<&str, Category> =
        spans.iter().map(|s| (s.id.as_str(), s.category)).collect();
    let relations = raw_relations
        .into_iter()
        .filter_map(|(rid, a, b)| {
            let (ca, cb) = (category_of.get(a.as_str())?, category_of.get(b.as_str())?);
            // orient RML → measured span regardless of argument order
            let (source, target) = match (ca, cb) {
                (Category::Rml, Category::Event | Category::ClinicalEntity) => (a, b),
                (Category::Event | Category::ClinicalEntity, Category::Rml) => (b, a),
                _ => return None,
            };
            Some(Relation {
                id: rid,
                kind: RelationType::PertainsTo,
                source,
                target,
            })
        })
        .collect();

    spans.sort_by_key(|x| (x.start, x.end));
    Ok(Document {
        id: id.to_string(),
        language: language.to_string(),
        text,
        spans,
        relations,
        split: Split::Unassigned,
    })
}

/// Load every `<id>.txt` with a sibling `<id>.ann` from `dir`, ordered by id.
pub fn load_brat_dir(dir: &Path, options: &AdapterOptions) -> Result<Vec<Document>, CorpusError> {
    let mut stems: Vec<String> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    stems.sort();

    let mut docs = Vec::with_capacity(stems.len());
    for stem in stems {
        let txt_path = dir.join(format!("{stem}.txt"));
        let ann_path = dir.join(format!("{stem}.ann"));
        if !ann_path.exists() {
            tracing::warn!(doc = %stem, "no .ann file, skipping");
            continue;
        }
        let text = fs::read_to_string(&txt_path).map_err(io_err(&txt_path))?;
        let ann = fs::read_to_string(&ann_path).map_err(io_err(&ann_path))?;
        let language = options
            .language
            .clone()
            .unwrap_or_else(|| infer_language(&stem));
        docs.push(parse_brat(&stem, &language, text, &ann, &ann_path)?);
    }
    Ok(docs)
}
