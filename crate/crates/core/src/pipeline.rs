//! End-to-end orchestration and on-disk artifacts.
//!
//! Artifact directory layout:
//!
//! ```text
//! manifest.json            config hash, config echo, sha256 of every file
//! corpus.jsonl             validated corpus with splits applied
//! corpus_stats.json
//! diagnoses.jsonl
//! graph.tsv                edge list
//! partition.tsv
//! templates/group_<g>.json
//! filled/<doc_id>.json
//! answer_inventory.txt
//! group_stats.json
//! dataset_shape.json
//! split_filter.json        history items removed by the split filter
//! ```
//!
//! Every JSON artifact carries a top-level `config_hash`, every TSV/text
//! artifact a `# config_hash=` header line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clients::{
    CachedEmbedder, CachedSelector, CachedSuggester, CachedTranslator, ClientSpec, DiskCache,
    HttpEmbedder, HttpSelector, HttpSuggester, HttpTranslator,
};
use crate::cluster::{louvain_traced, seed_components, ClusterConfig, Partition};
use crate::corpus::{
    load_corpus_with, load_split_manifest, AdapterOptions, Corpus, CorpusFormat, Document, Split,
};
use crate::crfgen::{
    answer_inventory, apply_history_split_filter, dataset_shape, generate_crfs, group_stats,
    ConceptMap, CrfTemplate, FilledCrf, GeneratedCrfs,
};
use crate::diagnosis::{
    diagnose_corpus, DiagnosisConfig, DiagnosisResult, FirstCandidateSelector, SelectorClient, Shot,
};
use crate::eval::{
    baseline_fill, build_eval_prompt, item_section, score, BaselineConfig, PredictionSet,
    ScoreConfig, ScoreReport,
};
use crate::revise::{propose_merges, session_path, MapSuggester, ReviewSession, SuggesterClient};
use crate::simgraph::{
    build_graph, DictionaryTranslator, EmbeddingClient, GraphClients, GraphConfig, HashEmbedder,
    SimilarityGraph, SynonymTable, TranslatorClient,
};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientsConfig {
    #[serde(default)]
    pub selector: ClientSpec,
    #[serde(default)]
    pub embedder: ClientSpec,
    #[serde(default)]
    pub translator: ClientSpec,
    #[serde(default)]
    pub suggester: ClientSpec,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviseConfig {
    /// Create a review session per group after generation.
    #[serde(default)]
    pub bootstrap: bool,
    /// Where session logs live. Kept outside the artifact directory so a
    /// rerun never discards reviewer decisions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sessions_dir: Option<PathBuf>,
    /// `label<TAB>target label` table for the stub suggester.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suggestions: Option<PathBuf>,
}

fn default_format() -> CorpusFormat {
    CorpusFormat::NativeJson
}

/// Run configuration, read from TOML. Relative paths resolve against the
/// config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: PathBuf,
    #[serde(default = "default_format")]
    pub format: CorpusFormat,
    /// Language for every document of a brat corpus; inferred from ids when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub splits: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synonyms: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept_map: Option<PathBuf>,
    /// `term<TAB>english` table for the stub translator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translations: Option<PathBuf>,
    /// JSON list of worked examples for the diagnosis selector.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shots: Option<PathBuf>,
    pub output: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub clients: ClientsConfig,
    #[serde(default)]
    pub diagnosis: DiagnosisConfig,
    #[serde(default)]
    pub graph: GraphConfig,
    #[serde(default)]
    pub cluster: ClusterSection,
    #[serde(default)]
    pub revise: ReviseConfig,
    #[serde(skip)]
    base_dir: PathBuf,
}

/// Cluster settings; the seed comes from [`RunConfig::rng_seed`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub d_seed_threshold: f64,
    pub resolution: f64,
    pub min_group_size: usize,
}

impl Default for ClusterSection {
    fn default() -> Self {
        let c = ClusterConfig::default();
        Self {
            d_seed_threshold: c.d_seed_threshold,
            resolution: c.resolution,
            min_group_size: c.min_group_size,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("{path} belongs to run {found}, expected {expected}")]
    MixedRuns {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}: {message}")]
    Artifact { path: PathBuf, message: String },
}

fn stage_err<E: std::error::Error + Send + Sync + 'static>(
    stage: &'static str,
) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        source: Box::new(e),
    }
}

fn artifact_err(path: &Path, message: impl ToString) -> PipelineError {
    PipelineError::Artifact {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

impl RunConfig {
    pub fn from_toml(content: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut config: RunConfig = toml::from_str(content).map_err(|e| PipelineError::Config {
            path: base_dir.to_path_buf(),
            message: e.to_string(),
        })?;
        config.base_dir = base_dir.to_path_buf();
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let content = fs::read_to_string(path).map_err(|e| PipelineError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&content, &base).map_err(|e| match e {
            PipelineError::Config { message, .. } => PipelineError::Config {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output)
    }

    pub fn cluster_config(&self) -> ClusterConfig {
        ClusterConfig {
            d_seed_threshold: self.cluster.d_seed_threshold,
            resolution: self.cluster.resolution,
            rng_seed: self.rng_seed,
            min_group_size: self.cluster.min_group_size,
        }
    }

    fn inputs(&self) -> Vec<(&'static str, PathBuf)> {
        let mut out = vec![("corpus", self.resolve(&self.corpus))];
        let optional = [
            ("splits", &self.splits),
            ("synonyms", &self.synonyms),
            ("concept_map", &self.concept_map),
            ("translations", &self.translations),
            ("shots", &self.shots),
            ("suggestions", &self.revise.suggestions),
        ];
        for (name, p) in optional {
            if let Some(p) = p {
                out.push((name, self.resolve(p)));
            }
        }
        out
    }

    /// Every referenced input must exist.
    pub fn check_inputs(&self) -> Result<(), PipelineError> {
        for (name, p) in self.inputs() {
            if !p.exists() {
                return Err(PipelineError::Config {
                    path: p,
                    message: format!("{name} input does not exist"),
                });
            }
        }
        Ok(())
    }

    /// The config without output, cache and session locations.
    pub fn echo(&self) -> RunConfig {
        let mut echo = self.clone();
        echo.output = PathBuf::new();
        echo.cache_dir = None;
        echo.revise.sessions_dir = None;
        echo
    }

    /// SHA-256 over the serialized config and the bytes of every input,
    /// including existing review sessions. Output, cache and session
    /// locations are left out so a run can be reproduced elsewhere.
    pub fn config_hash(&self) -> Result<String, PipelineError> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.echo()).expect("serializable config"));
        let mut inputs = self.inputs();
        if let Some(dir) = &self.revise.sessions_dir {
            let dir = self.resolve(dir);
            if dir.is_dir() {
                inputs.push(("sessions", dir));
            }
        }
        for (name, p) in inputs {
            h.update(name.as_bytes());
            hash_path(&mut h, &p).map_err(|e| PipelineError::Config {
                path: p.clone(),
                message: e.to_string(),
            })?;
        }
        Ok(hex::encode(h.finalize()))
    }
}

fn hash_path(h: &mut Sha256, p: &Path) -> std::io::Result<()> {
    if p.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(p)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .collect();
        entries.sort();
        for e in entries {
            h.update(
                e.file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default(),
            );
            hash_path(h, &e)?;
        }
    } else {
        h.update(fs::read(p)?);
    }
    Ok(())
}

/// A serialized artifact with the run's config hash alongside its fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_hash: String,
    #[serde(flatten)]
    pub body: T,
}

/// Backends chosen by the config, wrapped in the disk cache when one is set.
pub struct Clients {
    pub selector: Box<dyn SelectorClient>,
    pub embedder: Box<dyn EmbeddingClient>,
    pub translator: Box<dyn TranslatorClient>,
    pub suggester: Box<dyn SuggesterClient>,
}

impl Clients {
    pub fn from_config(config: &RunConfig) -> Result<Self, PipelineError> {
        let read = |p: &Option<PathBuf>| -> Result<Option<String>, PipelineError> {
            p.as_ref()
                .map(|p| {
                    let p = config.resolve(p);
                    fs::read_to_string(&p).map_err(|e| PipelineError::Config {
                        path: p,
                        message: e.to_string(),
                    })
                })
                .transpose()
        };
        let cache = config
            .cache_dir
            .as_ref()
            .map(|d| DiskCache::new(config.resolve(d)));
        let c = &config.clients;

        let selector: Box<dyn SelectorClient> = match &c.selector {
            ClientSpec::Stub(_) => Box::new(FirstCandidateSelector),
            ClientSpec::Http(e) => {
                let inner = Box::new(HttpSelector::new(e.clone()));
                match &cache {
                    Some(cache) => Box::new(CachedSelector::new(inner, cache.clone())),
                    None => inner,
                }
            }
        };
        let embedder: Box<dyn EmbeddingClient> = match &c.embedder {
            ClientSpec::Stub(_) => Box::new(HashEmbedder {
                seed: config.rng_seed,
                ..HashEmbedder::default()
            }),
            ClientSpec::Http(e) => {
                let inner = Box::new(HttpEmbedder::new(e.clone()));
                match &cache {
                    Some(cache) => Box::new(CachedEmbedder::new(inner, cache.clone())),
                    None => inner,
                }
            }
        };
        let translator: Box<dyn TranslatorClient> = match &c.translator {
            ClientSpec::Stub(_) => Box::new(DictionaryTranslator::parse(
                &read(&config.translations)?.unwrap_or_default(),
            )),
            ClientSpec::Http(e) => {
                let inner = Box::new(HttpTranslator::new(e.clone()));
                match &cache {
                    Some(cache) => Box::new(CachedTranslator::new(inner, cache.clone())),
                    None => inner,
                }
            }
        };
        let suggester: Box<dyn SuggesterClient> = match &c.suggester {
            ClientSpec::Stub(_) => {
                let table = read(&config.revise.suggestions)?.unwrap_or_default();
                Box::new(MapSuggester::new(
                    table
                        .lines()
                        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
                        .filter_map(|l| l.split_once('\t'))
                        .map(|(a, b)| {
                            (
                                crate::text::normalize_label(a),
                                crate::text::normalize_label(b),
                            )
                        }),
                ))
            }
            ClientSpec::Http(e) => {
                let inner = Box::new(HttpSuggester::new(e.clone()));
                match &cache {
                    Some(cache) => Box::new(CachedSuggester::new(inner, cache.clone())),
                    None => inner,
                }
            }
        };
        Ok(Self {
            selector,
            embedder,
            translator,
            suggester,
        })
    }
}

pub const MANIFEST: &str = "manifest.json";
pub const CORPUS: &str = "corpus.jsonl";
pub const DIAGNOSES: &str = "diagnoses.jsonl";
pub const GRAPH: &str = "graph.tsv";
pub const PARTITION: &str = "partition.tsv";
pub const TEMPLATES: &str = "templates";
pub const FILLED: &str = "filled";

fn write(path: &Path, content: &[u8]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| artifact_err(parent, e))?;
    }
    fs::write(path, content).map_err(|e| artifact_err(path, e))
}

fn read(path: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(path).map_err(|e| artifact_err(path, e))
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable artifact");
    v.push(b'\n');
    v
}

/// Stages of one run, reading and writing artifacts under `dir`.
pub struct Pipeline {
    pub config: RunConfig,
    pub hash: String,
    pub dir: PathBuf,
}

impl Pipeline {
    pub fn new(config: RunConfig, dir: PathBuf) -> Result<Self, PipelineError> {
        config.check_inputs()?;
        let hash = config.config_hash()?;
        Ok(Self { config, hash, dir })
    }

    fn stamp<T: Serialize>(&self, body: T) -> Stamped<T> {
        Stamped {
            config_hash: self.hash.clone(),
            body,
        }
    }

    fn header(&self) -> BTreeMap<String, String> {
        BTreeMap::from([("config_hash".to_string(), self.hash.clone())])
    }

    fn check_hash(&self, path: &Path, found: &str) -> Result<(), PipelineError> {
        if found != self.hash {
            return Err(PipelineError::MixedRuns {
                path: path.to_path_buf(),
                expected: self.hash.clone(),
                found: found.to_string(),
            });
        }
        Ok(())
    }

    fn read_jsonl<T: DeserializeOwned>(&self, name: &str) -> Result<Vec<T>, PipelineError> {
        let path = self.dir.join(name);
        let mut out = Vec::new();
        for (i, line) in read(&path)?.lines().enumerate() {
            let s: Stamped<T> = serde_json::from_str(line)
                .map_err(|e| artifact_err(&path, format!("line {}: {e}", i + 1)))?;
            self.check_hash(&path, &s.config_hash)?;
            out.push(s.body);
        }
        Ok(out)
    }

    fn write_jsonl<T: Serialize>(
        &self,
        name: &str,
        rows: impl IntoIterator<Item = T>,
    ) -> Result<(), PipelineError> {
        let mut buf = Vec::new();
        for row in rows {
            serde_json::to_writer(&mut buf, &self.stamp(row)).expect("serializable artifact");
            buf.push(b'\n');
        }
        write(&self.dir.join(name), &buf)
    }

    fn read_tsv_meta(&self, name: &str) -> Result<(PathBuf, String), PipelineError> {
        let path = self.dir.join(name);
        let content = read(&path)?;
        let hash = content
            .lines()
            .find_map(|l| l.strip_prefix("# config_hash="))
            .ok_or_else(|| artifact_err(&path, "missing config_hash header"))?;
        self.check_hash(&path, hash)?;
        Ok((path, content))
    }

    pub fn ingest(&self) -> Result<Corpus, PipelineError> {
        let c = &self.config;
        let options = AdapterOptions {
            language: c.language.clone(),
        };
        let mut corpus = load_corpus_with(&c.resolve(&c.corpus), c.format, &options)
            .map_err(stage_err("ingest"))?;
        if let Some(splits) = &c.splits {
            let manifest = load_split_manifest(&c.resolve(splits)).map_err(stage_err("ingest"))?;
            let (with, unknown) = corpus.with_splits(&manifest);
            if !unknown.is_empty() {
                tracing::warn!(
                    count = unknown.len(),
                    "split manifest names unknown documents"
                );
            }
            corpus = with;
        }
        if corpus.is_empty() {
            return Err(PipelineError::EmptyCorpus);
        }
        self.write_jsonl(CORPUS, corpus.iter())?;
        write(
            &self.dir.join("corpus_stats.json"),
            &pretty(&self.stamp(corpus.stats())),
        )?;
        Ok(corpus)
    }

    pub fn load_corpus(&self) -> Result<Corpus, PipelineError> {
        Corpus::new(self.read_jsonl(CORPUS)?).map_err(stage_err("load corpus"))
    }

    pub fn diagnose(
        &self,
        corpus: &Corpus,
        clients: &Clients,
    ) -> Result<BTreeMap<String, DiagnosisResult>, PipelineError> {
        let shots: Vec<Shot> = match &self.config.shots {
            Some(p) => {
                let p = self.config.resolve(p);
                serde_json::from_str(&read(&p)?).map_err(|e| artifact_err(&p, e))?
            }
            None => Vec::new(),
        };
        let results = diagnose_corpus(
            corpus,
            clients.selector.as_ref(),
            &shots,
            &self.config.diagnosis,
        )
        .map_err(stage_err("diagnose"))?;
        self.write_jsonl(DIAGNOSES, results.values())?;
        Ok(results)
    }

    pub fn load_diagnoses(&self) -> Result<BTreeMap<String, DiagnosisResult>, PipelineError> {
        Ok(self
            .read_jsonl::<DiagnosisResult>(DIAGNOSES)?
            .into_iter()
            .map(|r| (r.doc_id.clone(), r))
            .collect())
    }

    pub fn graph(
        &self,
        corpus: &Corpus,
        diagnoses: &BTreeMap<String, DiagnosisResult>,
        clients: &Clients,
    ) -> Result<SimilarityGraph, PipelineError> {
        let synonyms = match &self.config.synonyms {
            Some(p) => SynonymTable::parse(&read(&self.config.resolve(p))?),
            None => SynonymTable::default(),
        };
        let graph = build_graph(
            corpus,
            diagnoses,
            &self.config.graph,
            &GraphClients {
                synonyms: &synonyms,
                embedder: clients.embedder.as_ref(),
                translator: clients.translator.as_ref(),
            },
        )
        .map_err(stage_err("graph"))?;
        let mut meta = self.header();
        meta.insert("embedder".into(), clients.embedder.name().into());
        write(&self.dir.join(GRAPH), graph.to_edge_list(&meta).as_bytes())?;
        Ok(graph)
    }

    pub fn load_graph(&self) -> Result<SimilarityGraph, PipelineError> {
        let (path, content) = self.read_tsv_meta(GRAPH)?;
        let (graph, _) = SimilarityGraph::from_edge_list(&content, &path.to_string_lossy())
            .map_err(stage_err("load graph"))?;
        Ok(graph)
    }

    pub fn cluster(&self, graph: &SimilarityGraph) -> Result<Partition, PipelineError> {
        let config = self.config.cluster_config();
        let seed = seed_components(graph, config.d_seed_threshold);
        let run = louvain_traced(graph, &seed, &config);
        let mut meta = self.header();
        meta.insert(
            "d_seed_threshold".into(),
            config.d_seed_threshold.to_string(),
        );
        meta.insert("resolution".into(), config.resolution.to_string());
        meta.insert("rng_seed".into(), config.rng_seed.to_string());
        meta.insert("min_group_size".into(), config.min_group_size.to_string());
        meta.insert("seed_groups".into(), seed.num_groups().to_string());
        meta.insert("modularity".into(), format!("{:.6}", run.modularity));
        meta.insert("groups".into(), run.partition.num_groups().to_string());
        meta.insert(
            "unassigned".into(),
            run.partition.unassigned().len().to_string(),
        );
        write(
            &self.dir.join(PARTITION),
            run.partition.to_tsv(&meta).as_bytes(),
        )?;
        Ok(run.partition)
    }

    pub fn load_partition(&self) -> Result<Partition, PipelineError> {
        let (path, content) = self.read_tsv_meta(PARTITION)?;
        let (partition, _) = Partition::from_tsv(&content).map_err(|e| artifact_err(&path, e))?;
        Ok(partition)
    }

    /// Templates and gold fillings, optional review-session bootstrap, then
    /// the history split filter. Reviewed sessions replace the generated
    /// template of their group when they were started from it.
    pub fn generate(
        &self,
        corpus: &Corpus,
        partition: &Partition,
        diagnoses: &BTreeMap<String, DiagnosisResult>,
        clients: &Clients,
    ) -> Result<GeneratedCrfs, PipelineError> {
        let map = match &self.config.concept_map {
            Some(p) => ConceptMap::parse(&read(&self.config.resolve(p))?),
            None => ConceptMap::default(),
        };
        let dx: BTreeMap<String, Option<String>> = diagnoses
            .iter()
            .map(|(k, v)| (k.clone(), v.diagnosis.clone()))
            .collect();
        let mut generated = generate_crfs(corpus, partition, &dx, &map);
        self.apply_sessions(&mut generated, clients)?;

        let splits: BTreeMap<String, Split> =
            corpus.iter().map(|d| (d.id.clone(), d.split)).collect();
        let removed =
            apply_history_split_filter(&mut generated.templates, &mut generated.filled, &splits);

        let _ = fs::remove_dir_all(self.dir.join(TEMPLATES));
        let _ = fs::remove_dir_all(self.dir.join(FILLED));
        for t in &generated.templates {
            write(
                &self
                    .dir
                    .join(TEMPLATES)
                    .join(format!("group_{}.json", t.group_id)),
                &pretty(&self.stamp(t)),
            )?;
        }
        for f in &generated.filled {
            write(
                &self.dir.join(FILLED).join(format!("{}.json", f.doc_id)),
                &pretty(&self.stamp(f)),
            )?;
        }
        let mut inventory = format!("# config_hash={}\n", self.hash);
        for v in answer_inventory() {
            inventory.push_str(&v);
            inventory.push('\n');
        }
        write(&self.dir.join("answer_inventory.txt"), inventory.as_bytes())?;
        let stats: Vec<_> = generated
            .templates
            .iter()
            .map(|t| group_stats(t, &generated.filled, &splits))
            .collect();
        write(
            &self.dir.join("group_stats.json"),
            &pretty(&self.stamp(BTreeMap::from([("groups", stats)]))),
        )?;
        write(
            &self.dir.join("dataset_shape.json"),
            &pretty(&self.stamp(BTreeMap::from([(
                "splits",
                dataset_shape(&generated.filled, &splits),
            )]))),
        )?;
        write(
            &self.dir.join("split_filter.json"),
            &pretty(&self.stamp(BTreeMap::from([("removed", removed)]))),
        )?;
        Ok(generated)
    }

    fn apply_sessions(
        &self,
        generated: &mut GeneratedCrfs,
        clients: &Clients,
    ) -> Result<(), PipelineError> {
        let Some(dir) = &self.config.revise.sessions_dir else {
            return Ok(());
        };
        let dir = self.config.resolve(dir);
        for template in generated.templates.iter_mut() {
            let id = format!("group_{}", template.group_id);
            let path = session_path(&dir, &id);
            if path.exists() {
                let session = ReviewSession::open(&path).map_err(stage_err("revise"))?;
                if session.initial_template != *template {
                    tracing::warn!(session = %id, "session was started from a different template, ignoring it");
                    continue;
                }
                *template = session.template.clone();
                let by_doc: BTreeMap<&str, &FilledCrf> = session
                    .filled
                    .iter()
                    .map(|f| (f.doc_id.as_str(), f))
                    .collect();
                for f in generated.filled.iter_mut() {
                    if let Some(rev) = by_doc.get(f.doc_id.as_str()) {
                        *f = (*rev).clone();
                    }
                }
            } else if self.config.revise.bootstrap {
                let proposals = match propose_merges(template, clients.suggester.as_ref()) {
                    Ok(p) => p.proposals,
                    Err(e) => {
                        tracing::warn!(session = %id, error = %e, "suggester unavailable, session starts without proposals");
                        Vec::new()
                    }
                };
                let mut session =
                    ReviewSession::new(&id, template.clone(), generated.filled.clone(), proposals);
                fs::create_dir_all(&dir).map_err(|e| artifact_err(&dir, e))?;
                session.create_log(&path).map_err(stage_err("revise"))?;
            }
        }
        Ok(())
    }

    pub fn load_templates(&self) -> Result<Vec<CrfTemplate>, PipelineError> {
        self.load_dir(TEMPLATES)
    }

    pub fn load_filled(&self) -> Result<Vec<FilledCrf>, PipelineError> {
        self.load_dir(FILLED)
    }

    fn load_dir<T: DeserializeOwned>(&self, name: &str) -> Result<Vec<T>, PipelineError> {
        let dir = self.dir.join(name);
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| artifact_err(&dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        paths
            .iter()
            .map(|p| {
                let s: Stamped<T> =
                    serde_json::from_str(&read(p)?).map_err(|e| artifact_err(p, e))?;
                self.check_hash(p, &s.config_hash)?;
                Ok(s.body)
            })
            .collect()
    }

    /// Write `manifest.json` listing every other file with its SHA-256.
    pub fn write_manifest(&self) -> Result<String, PipelineError> {
        let files = file_hashes(&self.dir)?;
        let manifest = serde_json::json!({
            "config_hash": self.hash,
            "config": self.config.echo(),
            "files": files,
        });
        let bytes = pretty(&manifest);
        write(&self.dir.join(MANIFEST), &bytes)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    /// Baseline predictions for every filled CRF.
    pub fn baseline(&self, config: &BaselineConfig) -> Result<PredictionSet, PipelineError> {
        let corpus = self.load_corpus()?;
        let templates: BTreeMap<usize, CrfTemplate> = self
            .load_templates()?
            .into_iter()
            .map(|t| (t.group_id, t))
            .collect();
        let mut preds = PredictionSet::new();
        for f in self.load_filled()? {
            let (Some(doc), Some(t)) = (corpus.get(&f.doc_id), templates.get(&f.group_id)) else {
                continue;
            };
            for p in baseline_fill(doc, t, config) {
                preds.insert(p).map_err(stage_err("baseline"))?;
            }
        }
        Ok(preds)
    }

    /// One evaluation prompt per (document, item), as stamped JSON lines.
    pub fn prompts(&self, language: Option<&str>) -> Result<String, PipelineError> {
        #[derive(Serialize)]
        struct PromptRow<'a> {
            doc_id: &'a str,
            item_id: &'a str,
            section: crate::crfgen::Section,
            language: &'a str,
            prompt: String,
        }
        let corpus = self.load_corpus()?;
        let templates: BTreeMap<usize, CrfTemplate> = self
            .load_templates()?
            .into_iter()
            .map(|t| (t.group_id, t))
            .collect();
        let mut out = Vec::new();
        for f in self.load_filled()? {
            let (Some(doc), Some(t)) = (corpus.get(&f.doc_id), templates.get(&f.group_id)) else {
                continue;
            };
            let lang = language.unwrap_or(&doc.language);
            for item in &t.items {
                let prompt = build_eval_prompt(item.section, &doc.text, &item.label, lang)
                    .map_err(stage_err("prompts"))?;
                let row = PromptRow {
                    doc_id: &doc.id,
                    item_id: &item.id,
                    section: item.section,
                    language: lang,
                    prompt,
                };
                serde_json::to_writer(&mut out, &self.stamp(row)).expect("serializable prompt");
                out.push(b'\n');
            }
        }
        Ok(String::from_utf8(out).expect("utf-8 json"))
    }
}

fn file_hashes(dir: &Path) -> Result<BTreeMap<String, String>, PipelineError> {
    fn walk(
        root: &Path,
        dir: &Path,
        out: &mut BTreeMap<String, String>,
    ) -> Result<(), PipelineError> {
        for entry in fs::read_dir(dir).map_err(|e| artifact_err(dir, e))? {
            let p = entry.map_err(|e| artifact_err(dir, e))?.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                let rel = p
                    .strip_prefix(root)
                    .expect("under root")
                    .to_string_lossy()
                    .replace('\\', "/");
                if rel != MANIFEST {
                    let bytes = fs::read(&p).map_err(|e| artifact_err(&p, e))?;
                    out.insert(rel, hex::encode(Sha256::digest(&bytes)));
                }
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

/// Run every stage into a scratch directory next to the output, then move
/// it into place. On failure the scratch directory is removed and any
/// previous output is left untouched. Returns the output directory.
pub fn run_pipeline(config: &RunConfig) -> Result<PathBuf, PipelineError> {
    let out = config.output_dir();
    let parent = out.parent().map(Path::to_path_buf).unwrap_or_default();
    let name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let scratch = parent.join(format!(".{name}.partial-{}", std::process::id()));
    let _ = fs::remove_dir_all(&scratch);
    fs::create_dir_all(&scratch).map_err(|e| artifact_err(&scratch, e))?;

    let result = (|| {
        let p = Pipeline::new(config.clone(), scratch.clone())?;
        let clients = Clients::from_config(config)?;
        let corpus = p.ingest()?;
        let diagnoses = p.diagnose(&corpus, &clients)?;
        let graph = p.graph(&corpus, &diagnoses, &clients)?;
        let partition = p.cluster(&graph)?;
        p.generate(&corpus, &partition, &diagnoses, &clients)?;
        p.write_manifest()
    })();
    match result {
        Ok(_) => {
            if out.exists() {
                fs::remove_dir_all(&out).map_err(|e| artifact_err(&out, e))?;
            }
            fs::rename(&scratch, &out).map_err(|e| artifact_err(&out, e))?;
            Ok(out)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&scratch);
            Err(e)
        }
    }
}

#[derive(Debug, Deserialize)]
struct ManifestHead {
    config_hash: String,
}

/// Score a predictions file against the gold CRFs of an artifact directory,
/// optionally restricted to documents in one language.
/// Every gold file must belong to the manifest's run, and so must any
/// prediction line that carries a `config_hash`.
pub fn run_eval(
    gold_dir: &Path,
    predictions: &Path,
    config: &ScoreConfig,
    language: Option<&str>,
) -> Result<ScoreReport, PipelineError> {
    let manifest_path = gold_dir.join(MANIFEST);
    let head: ManifestHead = serde_json::from_str(&read(&manifest_path)?)
        .map_err(|e| artifact_err(&manifest_path, e))?;
    let check = |path: &Path, found: &str| -> Result<(), PipelineError> {
        if found != head.config_hash {
            return Err(PipelineError::MixedRuns {
                path: path.to_path_buf(),
                expected: head.config_hash.clone(),
                found: found.to_string(),
            });
        }
        Ok(())
    };

    let filled_dir = gold_dir.join(FILLED);
    let mut paths: Vec<PathBuf> = fs::read_dir(&filled_dir)
        .map_err(|e| artifact_err(&filled_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut gold = Vec::new();
    for p in &paths {
        let s: Stamped<FilledCrf> =
            serde_json::from_str(&read(p)?).map_err(|e| artifact_err(p, e))?;
        check(p, &s.config_hash)?;
        gold.push(s.body);
    }

    let content = read(predictions)?;
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| artifact_err(predictions, format!("line {}: {e}", i + 1)))?;
        if let Some(h) = v.get("config_hash").and_then(|h| h.as_str()) {
            check(predictions, h)?;
        }
        if let Some(item) = v.get("item_id").and_then(|x| x.as_str()) {
            item_section(item)
                .map_err(|e| artifact_err(predictions, format!("line {}: {e}", i + 1)))?;
        }
    }
    let mut preds = crate::eval::parse_predictions(
        &content,
        predictions,
        crate::eval::PredictionSource::External,
    )
    .map_err(stage_err("score"))?;

    if let Some(language) = language {
        let corpus_path = gold_dir.join(CORPUS);
        let mut docs = std::collections::BTreeSet::new();
        for (i, line) in read(&corpus_path)?.lines().enumerate() {
            let s: Stamped<Document> = serde_json::from_str(line)
                .map_err(|e| artifact_err(&corpus_path, format!("line {}: {e}", i + 1)))?;
            check(&corpus_path, &s.config_hash)?;
            if s.body.language == language {
                docs.insert(s.body.id);
            }
        }
        gold.retain(|f| docs.contains(&f.doc_id));
        let mut kept = PredictionSet::new();
        for p in preds.iter().filter(|p| docs.contains(&p.doc_id)) {
            kept.insert(p.clone()).map_err(stage_err("score"))?;
        }
        preds = kept;
    }
    score(&gold, &preds, config).map_err(stage_err("score"))
}

/// Report JSON with the mode echoed, plus the flat table.
pub fn write_report(report: &ScoreReport, path: &Path) -> Result<(), PipelineError> {
    write(path, &pretty(report))?;
    write(&path.with_extension("tsv"), report.table().as_bytes())
}

/// Stamped JSON lines for a prediction set.
pub fn predictions_jsonl(p: &Pipeline, preds: &PredictionSet) -> String {
    #[derive(Serialize)]
    struct Row<'a> {
        doc_id: &'a str,
        item_id: &'a str,
        answer: &'a str,
    }
    let mut out = Vec::new();
    for pr in preds.iter() {
        let row = Row {
            doc_id: &pr.doc_id,
            item_id: &pr.item_id,
            answer: &pr.raw_answer,
        };
        serde_json::to_writer(&mut out, &p.stamp(row)).expect("serializable prediction");
        out.push(b'\n');
    }
    String::from_utf8(out).expect("utf-8 json")
}
