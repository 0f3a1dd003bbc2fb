//! Document similarity graph.
//!
//! Every clinical term is augmented with up to five related terms from a
//! synonym table (non-English terms are translated first). Each pair of
//! documents then gets three features:
//!
//! * `d`: cosine similarity between embeddings of the augmented diagnoses,
//! * `e`: shared augmented clinical-entity terms over the smaller term set,
//! * `b`: the same ratio over body-part terms (only when the corpus has them),
//!
//! combined into the edge weight `s = 3d + e` ([`WeightFormula::General`]) or
//! `s = 3d + (e + b) / 2` ([`WeightFormula::E3c`]).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clients::ClientError;
use crate::corpus::{Category, Corpus, Document};
use crate::diagnosis::DiagnosisResult;
use crate::text::{normalize_term, word_tokens};

/// Upper bound on related terms appended to one base term.
pub const MAX_RELATED: usize = 5;
const EMBEDDING_SEPARATOR: &str = "; ";

/// Related-concept lookup standing in for a terminology server.
///
/// File format: `term<TAB>related1<TAB>...<TAB>relatedN`, one term per line.
/// Lookups are case-insensitive after whitespace normalization; repeated
/// terms append to the same entry in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynonymTable {
    entries: HashMap<String, Vec<String>>,
}

impl SynonymTable {
    pub fn parse(content: &str) -> Self {
        let mut entries: HashMap<String, Vec<String>> = HashMap::new();
        for line in content.lines() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            let Some(term) = cols.next() else { continue };
            let related = entries.entry(normalize_term(term)).or_default();
            related.extend(
                cols.map(str::trim)
                    .filter(|c| !c.is_empty())
                    .map(str::to_string),
            );
        }
        Self { entries }
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        Ok(Self::parse(&fs::read_to_string(path)?))
    }

    pub fn related(&self, term: &str) -> &[String] {
        self.entries
            .get(&normalize_term(term))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedTerm {
    pub base: String,
    pub related: Vec<String>,
    pub language: String,
}

impl AugmentedTerm {
    /// Base followed by related terms, normalized.
    pub fn normalized_terms(&self) -> impl Iterator<Item = String> + '_ {
        std::iter::once(&self.base)
            .chain(&self.related)
            .map(|t| normalize_term(t))
    }

    /// Text sent to the embedder: `base; rel1; rel2; ...`.
    pub fn embedding_input(&self) -> String {
        std::iter::once(self.base.as_str())
            .chain(self.related.iter().map(String::as_str))
            .collect::<Vec<_>>()
            .join(EMBEDDING_SEPARATOR)
    }
}

/// Append the first `min(k, 5)` distinct related terms (never the base itself).
pub fn augment_term(term: &str, language: &str, table: &SynonymTable, k: usize) -> AugmentedTerm {
    let k = k.min(MAX_RELATED);
    let base_key = normalize_term(term);
    let mut seen = BTreeSet::from([base_key]);
    let related = table
        .related(term)
        .iter()
        .filter(|r| seen.insert(normalize_term(r)))
        .take(k)
        .cloned()
        .collect();
    AugmentedTerm {
        base: term.to_string(),
        related,
        language: language.to_string(),
    }
}

pub trait TranslatorClient: Send + Sync {
    fn name(&self) -> &str;
    /// Render `term` from `source_language` into English.
    fn translate(&self, term: &str, source_language: &str) -> Result<String, ClientError>;
}

/// Offline translator backed by a `source<TAB>english` table; unknown terms
/// pass through unchanged.
#[derive(Debug, Clone, Default)]
pub struct DictionaryTranslator {
    entries: HashMap<String, String>,
}

impl DictionaryTranslator {
    pub fn new<I, S>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, S)>,
        S: Into<String>,
    {
        Self {
            entries: pairs
                .into_iter()
                .map(|(k, v)| (normalize_term(&k.into()), v.into()))
                .collect(),
        }
    }

    pub fn parse(content: &str) -> Self {
        Self::new(
            content
                .lines()
                .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
                .filter_map(|l| l.split_once('\t'))
                .map(|(a, b)| (a.to_string(), b.trim().to_string())),
        )
    }
}

impl TranslatorClient for DictionaryTranslator {
    fn name(&self) -> &str {
        "stub-dictionary"
    }

    fn translate(&self, term: &str, _source_language: &str) -> Result<String, ClientError> {
        Ok(self
            .entries
            .get(&normalize_term(term))
            .cloned()
            .unwrap_or_else(|| term.to_string()))
    }
}

fn is_english(language: &str) -> bool {
    language.eq_ignore_ascii_case("en")
}

/// English rendering of a term; English input is returned as is.
pub fn translate_term(
    term: &str,
    source_language: &str,
    translator: &dyn TranslatorClient,
) -> Result<String, ClientError> {
    if is_english(source_language) {
        return Ok(term.to_string());
    }
    translator.translate(term, source_language)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Translation {
    pub text: String,
    pub warning: Option<String>,
}

/// [`translate_term`] that keeps the original term when the backend fails.
pub fn translate_or_keep(
    term: &str,
    source_language: &str,
    translator: &dyn TranslatorClient,
) -> Translation {
    match translate_term(term, source_language, translator) {
        Ok(text) => Translation {
            text,
            warning: None,
        },
        Err(err) => {
            tracing::warn!(%term, %err, "translation failed, keeping original term");
            Translation {
                text: term.to_string(),
                warning: Some(format!("{term}: {err}")),
            }
        }
    }
}

/// `|A ∩ B| / min(|A|, |B|)`, zero when either set is empty.
pub fn entity_share_ratio(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let smaller = a.len().min(b.len());
    if smaller == 0 {
        return 0.0;
    }
    let shared = if a.len() <= b.len() {
        a.iter().filter(|t| b.contains(*t)).count()
    } else {
        b.iter().filter(|t| a.contains(*t)).count()
    };
    shared as f64 / smaller as f64
}

pub trait EmbeddingClient: Send + Sync {
    fn name(&self) -> &str;
    /// One vector per input, all of the same dimension.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ClientError>;
}

/// Offline embedder: seeded hashed bag of lowercase word tokens.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    pub dimension: usize,
    pub seed: u64,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self {
            dimension: 256,
            seed: 0,
        }
    }
}

impl HashEmbedder {
    fn vector(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0f32; self.dimension];
        for tok in word_tokens(text) {
            let mut h = Sha256::new();
            h.update(self.seed.to_le_bytes());
            h.update(tok.text.as_bytes());
            let digest = h.finalize();
            let idx = u64::from_le_bytes(digest[..8].try_into().unwrap()) % self.dimension as u64;
            let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
            v[idx as usize] += sign;
        }
        v
    }
}

impl EmbeddingClient for HashEmbedder {
    fn name(&self) -> &str {
        "stub-hash-bow"
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ClientError> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

/// Cosine similarity in f64, clamped to [-1, 1]; zero vectors give 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

pub fn diagnosis_similarity(
    a: &AugmentedTerm,
    b: &AugmentedTerm,
    embedder: &dyn EmbeddingClient,
) -> Result<f64, ClientError> {
    let (ia, ib) = (a.embedding_input(), b.embedding_input());
    if ia == ib {
        return Ok(1.0);
    }
    let vectors = embedder.embed(&[ia, ib])?;
    match vectors.as_slice() {
        [va, vb] => Ok(cosine(va, vb)),
        _ => Err(ClientError::InvalidResponse {
            backend: embedder.name().to_string(),
            message: format!("expected 2 vectors, got {}", vectors.len()),
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WeightFormula {
    /// `s = 3d + e`
    #[default]
    General,
    /// `s = 3d + (e + b) / 2`
    E3c,
}

impl std::str::FromStr for WeightFormula {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "GENERAL" => Ok(WeightFormula::General),
            "E3C" => Ok(WeightFormula::E3c),
            other => Err(format!("unknown weight formula `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairFeatures {
    pub d: f64,
    pub e: f64,
    pub b: Option<f64>,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("the E3C weight formula needs the body-part ratio `b`")]
    MissingFeature,
    #[error("{0}")]
    Client(#[from] ClientError),
    #[error("edge list {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
}

pub fn pair_similarity(f: &PairFeatures, formula: WeightFormula) -> Result<f64, GraphError> {
    match formula {
        WeightFormula::General => Ok(3.0 * f.d + f.e),
        WeightFormula::E3c => {
            let b = f.b.ok_or(GraphError::MissingFeature)?;
            Ok(3.0 * f.d + (f.e + b) / 2.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: String,
    pub b: String,
    pub features: PairFeatures,
    pub s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityGraph {
    pub nodes: Vec<String>,
    /// Sorted by node position of `(a, b)` with `a` before `b`.
    pub edges: Vec<Edge>,
    pub weight_formula: WeightFormula,
    pub pairs_evaluated: usize,
}

impl SimilarityGraph {
    pub fn node_index(&self) -> HashMap<&str, usize> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect()
    }

    pub fn edge(&self, a: &str, b: &str) -> Option<&Edge> {
        self.edges
            .iter()
            .find(|e| (e.a == a && e.b == b) || (e.a == b && e.b == a))
    }

    /// Tab-separated edge list preceded by `# key=value` and `# node=<id>` lines.
    pub fn to_edge_list(&self, meta: &BTreeMap<String, String>) -> String {
        let mut out = String::new();
        for (k, v) in meta {
            let _ = writeln!(out, "# {k}={v}");
        }
        let formula = match self.weight_formula {
            WeightFormula::General => "GENERAL",
            WeightFormula::E3c => "E3C",
        };
        let _ = writeln!(out, "# weight_formula={formula}");
        let _ = writeln!(out, "# pairs_evaluated={}", self.pairs_evaluated);
        for n in &self.nodes {
            let _ = writeln!(out, "# node={n}");
        }
        for e in &self.edges {
            let b = e.features.b.map(|b| b.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                e.a, e.b, e.features.d, e.features.e, b, e.s
            );
        }
        out
    }

    /// Parse [`to_edge_list`](Self::to_edge_list) output; returns the graph and
    /// the remaining metadata.
    pub fn from_edge_list(
        content: &str,
        path: &str,
    ) -> Result<(Self, BTreeMap<String, String>), GraphError> {
        let mut meta = BTreeMap::new();
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        let mut formula = WeightFormula::General;
        let mut pairs_evaluated = 0;
        for (i, line) in content.lines().enumerate() {
            let err = |message: String| GraphError::Parse {
                path: path.to_string(),
                line: i + 1,
                message,
            };
            if let Some(h) = line.strip_prefix("# ") {
                let (k, v) = h.split_once('=').ok_or_else(|| err("bad header".into()))?;
                match k {
                    "node" => nodes.push(v.to_string()),
                    "weight_formula" => formula = v.parse().map_err(err)?,
                    "pairs_evaluated" => {
                        pairs_evaluated = v.parse().map_err(|e| err(format!("{e}")))?
                    }
                    _ => {
                        meta.insert(k.to_string(), v.to_string());
                    }
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let [a, b, d, e, bp, s] = cols[..] else {
                return Err(err(format!("expected 6 columns, got {}", cols.len())));
            };
            let num = |x: &str| x.parse::<f64>().map_err(|e| err(format!("{x:?}: {e}")));
            edges.push(Edge {
                a: a.to_string(),
                b: b.to_string(),
                features: PairFeatures {
                    d: num(d)?,
                    e: num(e)?,
                    b: if bp.is_empty() { None } else { Some(num(bp)?) },
                },
                s: num(s)?,
            });
        }
        Ok((
            SimilarityGraph {
                nodes,
                edges,
                weight_formula: formula,
                pairs_evaluated,
            },
            meta,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub formula: WeightFormula,
    pub related_k: usize,
    /// Edges with `s` below this are not stored.
    pub floor: f64,
    pub embed_batch_size: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            formula: WeightFormula::General,
            related_k: MAX_RELATED,
            floor: 0.0,
            embed_batch_size: 32,
        }
    }
}

pub struct GraphClients<'a> {
    pub synonyms: &'a SynonymTable,
    pub embedder: &'a dyn EmbeddingClient,
    pub translator: &'a dyn TranslatorClient,
}

struct DocTerms {
    entities: BTreeSet<String>,
    body_parts: BTreeSet<String>,
    diagnosis: Option<String>,
}

/// Build the full pairwise graph. Documents without a diagnosis get `d = 0`
/// on every incident pair but keep their `e` and `b`.
pub fn build_graph(
    corpus: &Corpus,
    diagnoses: &BTreeMap<String, DiagnosisResult>,
    config: &GraphConfig,
    clients: &GraphClients<'_>,
) -> Result<SimilarityGraph, GraphError> {
    let has_body_parts = corpus
        .iter()
        .any(|d| d.spans_of(Category::BodyPart).next().is_some());

    // translate every distinct (language, term) once
    let mut to_translate: BTreeSet<(String, String)> = BTreeSet::new();
    for doc in corpus {
        if is_english(&doc.language) {
            continue;
        }
        for s in &doc.spans {
            if matches!(s.category, Category::ClinicalEntity | Category::BodyPart) {
                to_translate.insert((doc.language.clone(), s.surface.clone()));
            }
        }
        if let Some(d) = diagnoses.get(&doc.id).and_then(|r| r.diagnosis.clone()) {
            to_translate.insert((doc.language.clone(), d));
        }
    }
    let translations: HashMap<(String, String), String> = to_translate
        .into_par_iter()
        .map(|(lang, term)| {
            let t = translate_or_keep(&term, &lang, clients.translator);
            ((lang, term), t.text)
        })
        .collect();
    let english = |doc: &Document, term: &str| -> String {
        translations
            .get(&(doc.language.clone(), term.to_string()))
            .cloned()
            .unwrap_or_else(|| term.to_string())
    };

    let augmented_set = |doc: &Document, category: Category| -> BTreeSet<String> {
        doc.spans_of(category)
            .flat_map(|s| {
                augment_term(
                    &english(doc, &s.surface),
                    "en",
                    clients.synonyms,
                    config.related_k,
                )
                .normalized_terms()
                .collect::<Vec<_>>()
            })
            .collect()
    };

    let terms: Vec<DocTerms> = corpus
        .iter()
        .map(|doc| DocTerms {
            entities: augmented_set(doc, Category::ClinicalEntity),
            body_parts: augmented_set(doc, Category::BodyPart),
            diagnosis: diagnoses
                .get(&doc.id)
                .and_then(|r| r.diagnosis.as_deref())
                .map(|d| {
                    augment_term(&english(doc, d), "en", clients.synonyms, config.related_k)
                        .embedding_input()
                }),
        })
        .collect();

    let unique_inputs: Vec<String> = terms
        .iter()
        .filter_map(|t| t.diagnosis.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut embeddings: HashMap<String, Vec<f32>> = HashMap::new();
    for chunk in unique_inputs.chunks(config.embed_batch_size.max(1)) {
        let vectors = clients.embedder.embed(chunk)?;
        if vectors.len() != chunk.len() {
            return Err(ClientError::InvalidResponse {
                backend: clients.embedder.name().to_string(),
                message: format!("expected {} vectors, got {}", chunk.len(), vectors.len()),
            }
            .into());
        }
        embeddings.extend(chunk.iter().cloned().zip(vectors));
    }

    let n = terms.len();
    let docs = corpus.documents();
    let rows: Vec<Vec<Edge>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row = Vec::new();
            for j in i + 1..n {
                let (ti, tj) = (&terms[i], &terms[j]);
                let d = match (&ti.diagnosis, &tj.diagnosis) {
                    (Some(a), Some(b)) if a == b => 1.0,
                    (Some(a), Some(b)) => cosine(&embeddings[a], &embeddings[b]),
                    _ => 0.0,
                };
                let features = PairFeatures {
                    d,
                    e: entity_share_ratio(&ti.entities, &tj.entities),
                    b: has_body_parts.then(|| entity_share_ratio(&ti.body_parts, &tj.body_parts)),
                };
                let s = pair_similarity(&features, config.formula)?;
                if s >= config.floor {
                    row.push(Edge {
                        a: docs[i].id.clone(),
                        b: docs[j].id.clone(),
                        features,
                        s,
                    });
                }
            }
            Ok(row)
        })
        .collect::<Result<_, GraphError>>()?;

    Ok(SimilarityGraph {
        nodes: docs.iter().map(|d| d.id.clone()).collect(),
        edges: rows.into_iter().flatten().collect(),
        weight_formula: config.formula,
        pairs_evaluated: n * n.saturating_sub(1) / 2,
    })
}
