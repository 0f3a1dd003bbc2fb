//! Normalized standoff data model for annotated clinical case corpora.
//!
//! A [`Corpus`] is an ordered list of [`Document`]s. Each document carries its
//! full text plus annotation spans and `PERTAINS_TO` relations indexed into it.
//! Offsets are char (Unicode scalar value) indices, end-exclusive.
//!
//! Two on-disk formats are supported by [`load_corpus`]:
//!
//! * [`CorpusFormat::NativeJson`]: one JSON document object per line, field
//!   names exactly as the Rust structs below serialize them.
//! * [`CorpusFormat::E3cAdapter`]: a directory of brat standoff `.txt`/`.ann`
//!   pairs as exported from E3C. Only clinical entities, body parts, RMLs,
//!   events and their `PERTAINS_TO` links are kept.

mod brat;
mod split;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{word_tokens, CharIndex};

pub use brat::{load_brat_dir, AdapterOptions};
pub use split::{load_split_manifest, parse_split_manifest, SplitManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Category {
    ClinicalEntity,
    BodyPart,
    Rml,
    Event,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::ClinicalEntity,
        Category::BodyPart,
        Category::Rml,
        Category::Event,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::ClinicalEntity => "CLINICAL_ENTITY",
            Category::BodyPart => "BODY_PART",
            Category::Rml => "RML",
            Category::Event => "EVENT",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Polarity {
    Positive,
    Negative,
    #[default]
    Missing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Modality {
    Actual,
    Hypothetical,
    Hedged,
    #[default]
    Missing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Permanence {
    Permanent,
    Finite,
    #[default]
    Missing,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Positive, Polarity::Negative, Polarity::Missing];
}

impl Modality {
    pub const ALL: [Modality; 4] = [
        Modality::Actual,
        Modality::Hypothetical,
        Modality::Hedged,
        Modality::Missing,
    ];
}

impl Permanence {
    pub const ALL: [Permanence; 3] = [
        Permanence::Permanent,
        Permanence::Finite,
        Permanence::Missing,
    ];
}

/// Clinical-entity attributes. Absent annotations are `MISSING`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct AttributeSet {
    #[serde(default)]
    pub polarity: Polarity,
    #[serde(default)]
    pub contextual_modality: Modality,
    #[serde(default)]
    pub permanence: Permanence,
}

impl AttributeSet {
    pub fn new(polarity: Polarity, contextual_modality: Modality, permanence: Permanence) -> Self {
        Self {
            polarity,
            contextual_modality,
            permanence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSpan {
    pub id: String,
    pub category: Category,
    pub start: usize,
    pub end: usize,
    pub surface: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<AttributeSet>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RelationType {
    PertainsTo,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub id: String,
    #[serde(rename = "type")]
    pub kind: RelationType,
    pub source: String,
    pub target: String,
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    #[default]
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub language: String,
    pub text: String,
    #[serde(default)]
    pub spans: Vec<AnnotationSpan>,
    #[serde(default)]
    pub relations: Vec<Relation>,
    #[serde(default)]
    pub split: Split,
}

impl Document {
    pub fn span(&self, id: &str) -> Option<&AnnotationSpan> {
        self.spans.iter().find(|s| s.id == id)
    }

    pub fn spans_of(&self, category: Category) -> impl Iterator<Item = &AnnotationSpan> {
        self.spans.iter().filter(move |s| s.category == category)
    }

    /// Set `MISSING` attributes on clinical entities that carry none.
    fn normalize_attributes(&mut self) {
        for span in &mut self.spans {
            if span.category == Category::ClinicalEntity && span.attributes.is_none() {
                span.attributes = Some(AttributeSet::default());
            }
        }
    }
}

/// Which invariant a [`Violation`] breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Rule {
    DuplicateDocumentId,
    DuplicateSpanId,
    DuplicateRelationId,
    EmptySpan,
    SpanOutOfBounds,
    SurfaceMismatch,
    DanglingRelation,
    SourceNotRml,
    InvalidTarget,
}

impl Rule {
    pub fn description(self) -> &'static str {
        match self {
            Rule::DuplicateDocumentId => "document id must be unique within a corpus",
            Rule::DuplicateSpanId => "span id must be unique within a document",
            Rule::DuplicateRelationId => "relation id must be unique within a document",
            Rule::EmptySpan => "span start must be < end",
            Rule::SpanOutOfBounds => "span out of text bounds",
            Rule::SurfaceMismatch => "surface mismatch",
            Rule::DanglingRelation => "relation references an unknown span id",
            Rule::SourceNotRml => "PERTAINS_TO source must be RML",
            Rule::InvalidTarget => "PERTAINS_TO target must be EVENT or CLINICAL_ENTITY",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub document: String,
    /// Id of the offending span, relation or document.
    pub entity: String,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}: {}",
            self.document,
            self.entity,
            self.rule.description()
        )?;
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("corpus failed validation with {} violation(s): {}", .0.len(), summarize(.0))]
    Validation(Vec<Violation>),
    #[error("{path}:{line}: document id `{id}` listed more than once")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },
}

fn summarize(violations: &[Violation]) -> String {
    let mut parts: Vec<String> = violations.iter().take(5).map(|v| v.to_string()).collect();
    if violations.len() > 5 {
        parts.push(format!("... {} more", violations.len() - 5));
    }
    parts.join("; ")
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Check every document-level invariant; an empty list means the document is valid.
pub fn validate_document(doc: &Document) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |entity: &str, rule: Rule, detail: String| {
        out.push(Violation {
            document: doc.id.clone(),
            entity: entity.to_string(),
            rule,
            detail,
        })
    };

    let chars = CharIndex::new(&doc.text);
    let mut span_ids: HashMap<&str, Category> = HashMap::new();
    for span in &doc.spans {
        if span_ids.insert(&span.id, span.category).is_some() {
            push(&span.id, Rule::DuplicateSpanId, String::new());
        }
        if span.start >= span.end {
            push(
                &span.id,
                Rule::EmptySpan,
                format!("[{}, {})", span.start, span.end),
            );
            continue;
        }
        match chars.slice(span.start, span.end) {
            None => push(
                &span.id,
                Rule::SpanOutOfBounds,
                format!(
                    "[{}, {}) vs text length {}",
                    span.start,
                    span.end,
                    chars.len()
                ),
            ),
            Some(slice) if slice != span.surface => push(
                &span.id,
                Rule::SurfaceMismatch,
                format!("surface {:?} but text has {:?}", span.surface, slice),
            ),
            Some(_) => {}
        }
    }

    let mut rel_ids = HashSet::new();
    for rel in &doc.relations {
        if !rel_ids.insert(rel.id.as_str()) {
            push(&rel.id, Rule::DuplicateRelationId, String::new());
        }
        match span_ids.get(rel.source.as_str()) {
            None => push(
                &rel.id,
                Rule::DanglingRelation,
                format!("source `{}`", rel.source),
            ),
            Some(Category::Rml) => {}
            Some(other) => push(&rel.id, Rule::SourceNotRml, format!("source is {other}")),
        }
        match span_ids.get(rel.target.as_str()) {
            None => push(
                &rel.id,
                Rule::DanglingRelation,
                format!("target `{}`", rel.target),
            ),
            Some(Category::Event | Category::ClinicalEntity) => {}
            Some(other) => push(&rel.id, Rule::InvalidTarget, format!("target is {other}")),
        }
    }
    out
}

/// A validated, immutable list of documents in source order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    documents: Vec<Document>,
}

impl Corpus {
    /// Validate and wrap documents. Every violation across the corpus is reported.
    pub fn new(mut documents: Vec<Document>) -> Result<Self, CorpusError> {
        let mut violations = Vec::new();
        let mut seen = HashSet::new();
        for doc in &mut documents {
            doc.normalize_attributes();
            if !seen.insert(doc.id.clone()) {
                violations.push(Violation {
                    document: doc.id.clone(),
                    entity: doc.id.clone(),
                    rule: Rule::DuplicateDocumentId,
                    detail: String::new(),
                });
            }
            violations.extend(validate_document(doc));
        }
        if violations.is_empty() {
            Ok(Self { documents })
        } else {
            Err(CorpusError::Validation(violations))
        }
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.id == id)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Document> {
        self.documents.iter()
    }

    /// Copy of the corpus with `split` set from the manifest. Returns the
    /// manifest ids that are absent from the corpus as warnings.
    pub fn with_splits(&self, manifest: &SplitManifest) -> (Corpus, Vec<String>) {
        let mut documents = self.documents.clone();
        for doc in &mut documents {
            doc.split = manifest.split_of(&doc.id);
        }
        let known: HashSet<&str> = self.documents.iter().map(|d| d.id.as_str()).collect();
        let unknown = manifest
            .ids()
            .filter(|id| !known.contains(id))
            .map(str::to_string)
            .collect();
        (Corpus { documents }, unknown)
    }

    pub fn stats(&self) -> CorpusStats {
        CorpusStats::compute(self)
    }
}

impl<'a> IntoIterator for &'a Corpus {
    type Item = &'a Document;
    type IntoIter = std::slice::Iter<'a, Document>;

    fn into_iter(self) -> Self::IntoIter {
        self.documents.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    NativeJson,
    E3cAdapter,
}

impl std::str::FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "native_json" | "native" => Ok(CorpusFormat::NativeJson),
            "e3c_adapter" | "e3c" | "brat" => Ok(CorpusFormat::E3cAdapter),
            other => Err(format!("unknown corpus format `{other}`")),
        }
    }
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus, CorpusError> {
    load_corpus_with(path, format, &AdapterOptions::default())
}

pub fn load_corpus_with(
    path: &Path,
    format: CorpusFormat,
    options: &AdapterOptions,
) -> Result<Corpus, CorpusError> {
    let documents = match format {
        CorpusFormat::NativeJson => read_native(path)?,
        CorpusFormat::E3cAdapter => load_brat_dir(path, options)?,
    };
    Corpus::new(documents)
}

fn read_native(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: format!("column {}: {e}", e.column()),
        })?;
        docs.push(doc);
    }
    Ok(docs)
}

/// Serialize to the native line-delimited format.
pub fn write_native<W: Write>(corpus: &Corpus, mut out: W) -> std::io::Result<()> {
    for doc in corpus {
        serde_json::to_writer(&mut out, doc)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_native(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    let mut buf = Vec::new();
    write_native(corpus, &mut buf).map_err(io_err(path))?;
    fs::write(path, buf).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub documents: usize,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub documents: usize,
    pub spans: BTreeMap<Category, usize>,
    pub relations: usize,
    pub splits: BTreeMap<Split, SplitStats>,
}

impl CorpusStats {
    fn compute(corpus: &Corpus) -> Self {
        let mut spans: BTreeMap<Category, usize> = Category::ALL.iter().map(|c| (*c, 0)).collect();
        let mut splits: BTreeMap<Split, SplitStats> = BTreeMap::new();
        let mut relations = 0;
        for doc in corpus {
            for span in &doc.spans {
                *spans.entry(span.category).or_default() += 1;
            }
            relations += doc.relations.len();
            let entry = splits.entry(doc.split).or_insert(SplitStats {
                documents: 0,
                tokens: 0,
            });
            entry.documents += 1;
            entry.tokens += word_tokens(&doc.text).len();
        }
        Self {
            documents: corpus.len(),
            spans,
            relations,
            splits,
        }
    }
}
