//! On-disk response cache. Entries are JSON files named by the SHA-256 of
//! the backend name and the serialized request, so reruns skip backend
//! calls that already succeeded. Errors are never cached.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::ClientError;
use crate::diagnosis::{SelectionRequest, SelectorClient, SelectorResponse};
use crate::revise::{SuggesterClient, Suggestion, SuggestionRequest};
use crate::simgraph::{EmbeddingClient, TranslatorClient};

#[derive(Debug, Clone)]
pub struct DiskCache {
    dir: PathBuf,
}

impl DiskCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(backend: &str, request: &impl Serialize) -> String {
        let mut h = Sha256::new();
        h.update(backend.as_bytes());
        h.update([0]);
        h.update(serde_json::to_vec(request).expect("serializable request"));
        hex::encode(h.finalize())
    }

    fn path(&self, namespace: &str, key: &str) -> PathBuf {
        self.dir.join(namespace).join(format!("{key}.json"))
    }

    pub fn get<T: DeserializeOwned>(&self, namespace: &str, key: &str) -> Option<T> {
        let bytes = fs::read(self.path(namespace, key)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    /// Write through a temp file so readers never see partial entries.
    /// Failures are logged and otherwise ignored.
    pub fn put<T: Serialize>(&self, namespace: &str, key: &str, value: &T) {
        let path = self.path(namespace, key);
        let result = (|| -> std::io::Result<()> {
            fs::create_dir_all(path.parent().expect("namespaced path"))?;
            let tmp = path.with_extension(format!("tmp{}", std::process::id()));
            fs::write(
                &tmp,
                serde_json::to_vec(value).expect("serializable response"),
            )?;
            fs::rename(&tmp, &path)
        })();
        if let Err(e) = result {
            tracing::warn!(path = %path.display(), error = %e, "cache write failed");
        }
    }

    pub fn len(&self, namespace: &str) -> usize {
        fs::read_dir(self.dir.join(namespace))
            .map(|d| {
                d.filter_map(|e| e.ok())
                    .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
                    .count()
            })
            .unwrap_or(0)
    }

    fn cached<Q: Serialize, R: Serialize + DeserializeOwned>(
        &self,
        namespace: &str,
        backend: &str,
        request: &Q,
        call: impl FnOnce() -> Result<R, ClientError>,
    ) -> Result<R, ClientError> {
        let key = Self::key(backend, request);
        if let Some(hit) = self.get(namespace, &key) {
            return Ok(hit);
        }
        let value = call()?;
        self.put(namespace, &key, &value);
        Ok(value)
    }
}

pub struct CachedSelector {
    inner: Box<dyn SelectorClient>,
    cache: DiskCache,
}

impl CachedSelector {
    pub fn new(inner: Box<dyn SelectorClient>, cache: DiskCache) -> Self {
        Self { inner, cache }
    }
}

impl SelectorClient for CachedSelector {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn select(&self, request: &SelectionRequest) -> Result<SelectorResponse, ClientError> {
        self.cache
            .cached("selector", self.inner.name(), request, || {
                self.inner.select(request)
            })
    }
}

pub struct CachedTranslator {
    inner: Box<dyn TranslatorClient>,
    cache: DiskCache,
}

impl CachedTranslator {
    pub fn new(inner: Box<dyn TranslatorClient>, cache: DiskCache) -> Self {
        Self { inner, cache }
    }
}

impl TranslatorClient for CachedTranslator {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn translate(&self, term: &str, source_language: &str) -> Result<String, ClientError> {
        self.cache.cached(
            "translator",
            self.inner.name(),
            &(term, source_language),
            || self.inner.translate(term, source_language),
        )
    }
}

pub struct CachedSuggester {
    inner: Box<dyn SuggesterClient>,
    cache: DiskCache,
}

impl CachedSuggester {
    pub fn new(inner: Box<dyn SuggesterClient>, cache: DiskCache) -> Self {
        Self { inner, cache }
    }
}

impl SuggesterClient for CachedSuggester {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn suggest(&self, request: &SuggestionRequest) -> Result<Option<Suggestion>, ClientError> {
        self.cache
            .cached("suggester", self.inner.name(), request, || {
                self.inner.suggest(request)
            })
    }
}

/// Caches per input text; one backend call covers all misses of a batch.
pub struct CachedEmbedder {
    inner: Box<dyn EmbeddingClient>,
    cache: DiskCache,
}

impl CachedEmbedder {
    pub fn new(inner: Box<dyn EmbeddingClient>, cache: DiskCache) -> Self {
        Self { inner, cache }
    }
}

impl EmbeddingClient for CachedEmbedder {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ClientError> {
        let keys: Vec<String> = texts
            .iter()
            .map(|t| DiskCache::key(self.inner.name(), t))
            .collect();
        let mut out: Vec<Option<Vec<f32>>> =
            keys.iter().map(|k| self.cache.get("embedder", k)).collect();
        let misses: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
        if !misses.is_empty() {
            let batch: Vec<String> = misses.iter().map(|&i| texts[i].clone()).collect();
            let vectors = self.inner.embed(&batch)?;
            for (&i, v) in misses.iter().zip(vectors) {
                self.cache.put("embedder", &keys[i], &v);
                out[i] = Some(v);
            }
        }
        Ok(out.into_iter().map(|v| v.unwrap_or_default()).collect())
    }
}
