use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{io_err, CorpusError, Split};

/// Train/test assignment read from a `doc_id<TAB>train|test` file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitManifest {
    entries: BTreeMap<String, Split>,
}

impl SplitManifest {
    /// Unlisted documents are `unassigned`.
    pub fn split_of(&self, doc_id: &str) -> Split {
        self.entries.get(doc_id).copied().unwrap_or_default()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn load_split_manifest(path: &Path) -> Result<SplitManifest, CorpusError> {
    let content = fs::read_to_string(path).map_err(io_err(path))?;
    parse_split_manifest(&content, path)
}

pub fn parse_split_manifest(content: &str, path: &Path) -> Result<SplitManifest, CorpusError> {
    let mut entries = BTreeMap::new();
    for (i, raw) in content.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| CorpusError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let mut cols = line.split('\t');
        let (Some(id), Some(split), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(parse_err("expected `doc_id<TAB>train|test`".into()));
        };
        let split = match split.trim() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(parse_err(format!(
                    "split must be train or test, got `{other}`"
                )))
            }
        };
        let id = id.trim().to_string();
        if entries.contains_key(&id) {
            return Err(CorpusError::DuplicateId {
                path: path.to_path_buf(),
                line: i + 1,
                id,
            });
        }
        entries.insert(id, split);
    }
    Ok(SplitManifest { entries })
}
