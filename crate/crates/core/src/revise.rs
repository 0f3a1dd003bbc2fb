//! Merge proposals and human review of CRF items.
//!
//! A [`SuggesterClient`] proposes mapping one item onto another item of the
//! same section. Nothing is merged until a reviewer approves. A
//! [`ReviewSession`] persists as a JSON-lines file: a header line with the
//! initial state, then one line per decision. Reopening the file replays the
//! decisions.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::ClientError;
use crate::crfgen::{
    split_values, CrfItem, CrfTemplate, FilledCrf, MULTI_ANSWER_JOIN, NOT_AVAILABLE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ProposalStatus {
    Pending,
    Approved,
    Rejected,
    Stale,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeProposal {
    pub id: String,
    pub group_id: usize,
    pub source_item: String,
    pub target_item: String,
    pub justification: String,
    pub status: ProposalStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuggestionRequest {
    pub group_id: usize,
    pub item: CrfItem,
    /// Other items of the same section.
    pub candidates: Vec<CrfItem>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Suggestion {
    pub target_item: String,
    pub justification: String,
}

pub trait SuggesterClient: Send + Sync {
    fn name(&self) -> &str;
    /// `Ok(None)` when the item maps to nothing.
    fn suggest(&self, request: &SuggestionRequest) -> Result<Option<Suggestion>, ClientError>;
}

/// Offline suggester answering from a fixed label → label table.
#[derive(Debug, Clone, Default)]
pub struct MapSuggester {
    map: BTreeMap<String, String>,
}

impl MapSuggester {
    pub fn new<I, S>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, S)>,
        S: Into<String>,
    {
        Self {
            map: pairs
                .into_iter()
                .map(|(a, b)| (a.into(), b.into()))
                .collect(),
        }
    }
}

impl SuggesterClient for MapSuggester {
    fn name(&self) -> &str {
        "stub-map"
    }

    fn suggest(&self, request: &SuggestionRequest) -> Result<Option<Suggestion>, ClientError> {
        Ok(self.map.get(&request.item.label).map(|target| Suggestion {
            target_item: crate::crfgen::item_id(request.item.section, target),
            justification: format!(
                "\"{}\" and \"{}\" name the same concept",
                request.item.label, target
            ),
        }))
    }
}

#[derive(Debug, Error)]
pub enum ReviseError {
    #[error("unknown proposal {0}")]
    UnknownProposal(String),
    #[error("proposal {id} is {status:?}, not pending")]
    ProposalNotPending { id: String, status: ProposalStatus },
    #[error("proposal {0} refers to an item that no longer exists")]
    StaleProposal(String),
    #[error(transparent)]
    Suggester(#[from] ClientError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Proposals {
    pub proposals: Vec<MergeProposal>,
    pub warnings: Vec<String>,
}

/// Ask the suggester about every item. Suggestions naming an unknown item,
/// the item itself, or an item of another section are dropped with a warning.
pub fn propose_merges(
    template: &CrfTemplate,
    suggester: &dyn SuggesterClient,
) -> Result<Proposals, ClientError> {
    let mut out = Proposals::default();
    for item in &template.items {
        let request = SuggestionRequest {
            group_id: template.group_id,
            item: item.clone(),
            candidates: template
                .section(item.section)
                .filter(|c| c.id != item.id)
                .cloned()
                .collect(),
        };
        let Some(s) = suggester.suggest(&request)? else {
            continue;
        };
        let valid = request.candidates.iter().any(|c| c.id == s.target_item);
        if !valid {
            let w = format!(
                "{}: suggestion for {} names unusable item {}",
                suggester.name(),
                item.id,
                s.target_item
            );
            tracing::warn!("{w}");
            out.warnings.push(w);
            continue;
        }
        out.proposals.push(MergeProposal {
            id: format!("g{}-p{}", template.group_id, out.proposals.len()),
            group_id: template.group_id,
            source_item: item.id.clone(),
            target_item: s.target_item,
            justification: s.justification,
            status: ProposalStatus::Pending,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Decision {
    Approved,
    Rejected,
}

impl std::str::FromStr for Decision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "APPROVED" | "APPROVE" => Ok(Decision::Approved),
            "REJECTED" | "REJECT" => Ok(Decision::Rejected),
            _ => Err(format!("unknown decision {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub proposal_id: String,
    pub decision: Decision,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub reviewer: String,
}

/// Fold `source` into `target`: aliases and provenance move over, and each
/// document's values are reconciled. Both filled → joined (identical parts
/// once), one filled → that one.
pub fn merge_items(
    template: &mut CrfTemplate,
    filled: &mut [FilledCrf],
    source: &str,
    target: &str,
) {
    let Some(pos) = template.items.iter().position(|i| i.id == source) else {
        return;
    };
    let removed = template.items.remove(pos);
    if let Some(t) = template.items.iter_mut().find(|i| i.id == target) {
        t.aliases.extend(removed.aliases);
    }
    if let Some(docs) = template.provenance.remove(source) {
        template
            .provenance
            .entry(target.to_string())
            .or_default()
            .extend(docs);
    }
    for f in filled
        .iter_mut()
        .filter(|f| f.group_id == template.group_id)
    {
        let s = f.values.remove(source);
        let t = f
            .values
            .entry(target.to_string())
            .or_insert_with(|| NOT_AVAILABLE.to_string());
        if let Some(s) = s.filter(|s| s != NOT_AVAILABLE) {
            if t == NOT_AVAILABLE {
                *t = s;
            } else {
                let mut parts: Vec<&str> = split_values(t);
                for p in split_values(&s) {
                    if !parts.contains(&p) {
                        parts.push(p);
                    }
                }
                *t = parts.join(MULTI_ANSWER_JOIN);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewSession {
    pub session_id: String,
    pub group_id: usize,
    pub initial_template: CrfTemplate,
    pub initial_filled: Vec<FilledCrf>,
    pub initial_proposals: Vec<MergeProposal>,
    pub template: CrfTemplate,
    pub filled: Vec<FilledCrf>,
    pub proposals: Vec<MergeProposal>,
    pub decision_log: Vec<DecisionRecord>,
    #[serde(skip)]
    log_path: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogLine {
    Session {
        session_id: String,
        group_id: usize,
        template: CrfTemplate,
        filled: Vec<FilledCrf>,
        proposals: Vec<MergeProposal>,
    },
    Decision(DecisionRecord),
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

impl ReviewSession {
    /// In-memory session. `filled` is narrowed to the template's group.
    pub fn new(
        session_id: &str,
        template: CrfTemplate,
        filled: Vec<FilledCrf>,
        proposals: Vec<MergeProposal>,
    ) -> Self {
        let filled: Vec<FilledCrf> = filled
            .into_iter()
            .filter(|f| f.group_id == template.group_id)
            .collect();
        Self {
            session_id: session_id.to_string(),
            group_id: template.group_id,
            initial_template: template.clone(),
            initial_filled: filled.clone(),
            initial_proposals: proposals.clone(),
            template,
            filled,
            proposals,
            decision_log: Vec::new(),
            log_path: None,
        }
    }

    pub fn template_version(&self) -> u64 {
        self.template.version
    }

    /// Write the header of a new log file and attach it to the session.
    pub fn create_log(&mut self, path: &Path) -> Result<(), ReviseError> {
        let io = |source| ReviseError::Io {
            path: path.to_path_buf(),
            source,
        };
        let header = LogLine::Session {
            session_id: self.session_id.clone(),
            group_id: self.group_id,
            template: self.initial_template.clone(),
            filled: self.initial_filled.clone(),
            proposals: self.initial_proposals.clone(),
        };
        let mut f = File::create(path).map_err(io)?;
        writeln!(
            f,
            "{}",
            serde_json::to_string(&header).expect("serializable")
        )
        .map_err(io)?;
        for rec in &self.decision_log {
            writeln!(
                f,
                "{}",
                serde_json::to_string(&LogLine::Decision(rec.clone())).expect("serializable")
            )
            .map_err(io)?;
        }
        f.sync_data().map_err(io)?;
        self.log_path = Some(path.to_path_buf());
        Ok(())
    }

    /// Reopen a session log, replaying its decisions.
    pub fn open(path: &Path) -> Result<Self, ReviseError> {
        let io = |source| ReviseError::Io {
            path: path.to_path_buf(),
            source,
        };
        let reader = BufReader::new(File::open(path).map_err(io)?);
        let mut session: Option<ReviewSession> = None;
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let parse = |message: String| ReviseError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            match serde_json::from_str::<LogLine>(&line).map_err(|e| parse(e.to_string()))? {
                LogLine::Session {
                    session_id,
                    template,
                    filled,
                    proposals,
                    ..
                } if session.is_none() => {
                    session = Some(ReviewSession::new(&session_id, template, filled, proposals));
                }
                LogLine::Decision(rec) => {
                    let s = session
                        .as_mut()
                        .ok_or_else(|| parse("decision before session header".into()))?;
                    s.apply(&rec).map_err(|e| parse(e.to_string()))?;
                }
                LogLine::Session { .. } => return Err(parse("second session header".into())),
            }
        }
        let mut s = session.ok_or_else(|| ReviseError::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "empty session log".into(),
        })?;
        s.log_path = Some(path.to_path_buf());
        Ok(s)
    }

    /// Rebuild from the initial state and a decision log.
    pub fn replay(&self) -> Result<Self, ReviseError> {
        let mut s = ReviewSession::new(
            &self.session_id,
            self.initial_template.clone(),
            self.initial_filled.clone(),
            self.initial_proposals.clone(),
        );
        for rec in &self.decision_log {
            s.apply(rec)?;
        }
        Ok(s)
    }

    fn check(&mut self, proposal_id: &str) -> Result<usize, ReviseError> {
        let idx = self
            .proposals
            .iter()
            .position(|p| p.id == proposal_id)
            .ok_or_else(|| ReviseError::UnknownProposal(proposal_id.to_string()))?;
        let p = &self.proposals[idx];
        match p.status {
            ProposalStatus::Stale => return Err(ReviseError::StaleProposal(p.id.clone())),
            ProposalStatus::Pending => {}
            status => {
                return Err(ReviseError::ProposalNotPending {
                    id: p.id.clone(),
                    status,
                })
            }
        }
        if self.template.item(&p.source_item).is_none()
            || self.template.item(&p.target_item).is_none()
        {
            let id = p.id.clone();
            self.proposals[idx].status = ProposalStatus::Stale;
            return Err(ReviseError::StaleProposal(id));
        }
        Ok(idx)
    }

    fn apply(&mut self, rec: &DecisionRecord) -> Result<(), ReviseError> {
        let idx = self.check(&rec.proposal_id)?;
        match rec.decision {
            Decision::Rejected => self.proposals[idx].status = ProposalStatus::Rejected,
            Decision::Approved => {
                let (source, target) = (
                    self.proposals[idx].source_item.clone(),
                    self.proposals[idx].target_item.clone(),
                );
                merge_items(&mut self.template, &mut self.filled, &source, &target);
                self.template.version += 1;
                self.proposals[idx].status = ProposalStatus::Approved;
                for p in &mut self.proposals {
                    if p.status == ProposalStatus::Pending
                        && (p.source_item == source || p.target_item == source)
                    {
                        p.status = ProposalStatus::Stale;
                    }
                }
            }
        }
        self.decision_log.push(rec.clone());
        Ok(())
    }

    /// Record a reviewer decision. With an attached log file the record is
    /// appended and synced before the in-memory state changes. Returns the
    /// template version afterwards.
    pub fn apply_decision(
        &mut self,
        proposal_id: &str,
        decision: Decision,
        reviewer: &str,
    ) -> Result<u64, ReviseError> {
        self.check(proposal_id)?;
        let rec = DecisionRecord {
            proposal_id: proposal_id.to_string(),
            decision,
            timestamp: now(),
            reviewer: reviewer.to_string(),
        };
        if let Some(path) = &self.log_path {
            let io = |source| ReviseError::Io {
                path: path.clone(),
                source,
            };
            let mut f = OpenOptions::new().append(true).open(path).map_err(io)?;
            writeln!(
                f,
                "{}",
                serde_json::to_string(&LogLine::Decision(rec.clone())).expect("serializable")
            )
            .map_err(io)?;
            f.sync_data().map_err(io)?;
        }
        self.apply(&rec)?;
        Ok(self.template.version)
    }

    /// Pending proposals in creation order.
    pub fn list_pending(&self) -> Vec<&MergeProposal> {
        self.proposals
            .iter()
            .filter(|p| p.status == ProposalStatus::Pending)
            .filter(|p| {
                self.template.item(&p.source_item).is_some()
                    && self.template.item(&p.target_item).is_some()
            })
            .collect()
    }

    pub fn reviewers(&self) -> BTreeSet<&str> {
        self.decision_log
            .iter()
            .map(|r| r.reviewer.as_str())
            .collect()
    }
}

/// Session log file for `session_id` under `dir`.
pub fn session_path(dir: &Path, session_id: &str) -> PathBuf {
    dir.join(format!("{session_id}.jsonl"))
}

/// Ids of the session logs in `dir`, sorted.
pub fn list_sessions(dir: &Path) -> std::io::Result<Vec<String>> {
    let mut ids: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    ids.sort();
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crfgen::{Section, NOT_AVAILABLE};

    fn template(labels: &[&str]) -> CrfTemplate {
        let items: Vec<CrfItem> = labels
            .iter()
            .map(|l| CrfItem::new(Section::History, l))
            .collect();
        CrfTemplate {
            group_id: 0,
            version: 0,
            provenance: items
                .iter()
                .map(|i| (i.id.clone(), BTreeSet::from(["a".to_string()])))
                .collect(),
            items,
        }
    }

    fn filled(doc: &str, vals: &[(&str, &str)]) -> FilledCrf {
        FilledCrf {
            doc_id: doc.into(),
            group_id: 0,
            values: vals
                .iter()
                .map(|(k, v)| (format!("HISTORY:{k}"), v.to_string()))
                .collect(),
        }
    }

    fn leg_session() -> ReviewSession {
        let t = template(&["leg", "lower limb"]);
        let p = propose_merges(&t, &MapSuggester::new([("leg", "lower limb")])).unwrap();
        let f = vec![
            filled(
                "a",
                &[("leg", "Yes, chronic"), ("lower limb", NOT_AVAILABLE)],
            ),
            filled(
                "b",
                &[("leg", NOT_AVAILABLE), ("lower limb", "No, chronic")],
            ),
        ];
        ReviewSession::new("s", t, f, p.proposals)
    }

    #[test]
    fn no_mapping_means_no_proposals() {
        let t = template(&["leg", "arm"]);
        assert!(propose_merges(&t, &MapSuggester::default())
            .unwrap()
            .proposals
            .is_empty());
    }

    #[test]
    fn unknown_target_is_dropped_with_warning() {
        let t = template(&["leg"]);
        let p = propose_merges(&t, &MapSuggester::new([("leg", "lower limb")])).unwrap();
        assert!(p.proposals.is_empty());
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn approval_folds_source_into_target() {
        let mut s = leg_session();
        assert_eq!(s.list_pending().len(), 1);
        assert!(!s.proposals[0].justification.is_empty());
        let v = s
            .apply_decision("g0-p0", Decision::Approved, "rev")
            .unwrap();
        assert_eq!(v, 1);
        assert_eq!(s.template.len(), 1);
        let target = s.template.item("HISTORY:lower limb").unwrap();
        assert_eq!(target.aliases.len(), 2);
        assert_eq!(s.filled[0].values["HISTORY:lower limb"], "Yes, chronic");
        assert_eq!(s.filled[1].values["HISTORY:lower limb"], "No, chronic");
        assert!(s
            .filled
            .iter()
            .all(|f| !f.values.contains_key("HISTORY:leg")));
        assert_eq!(s.replay().unwrap().template, s.template);
    }

    #[test]
    fn rejection_only_logs() {
        let mut s = leg_session();
        let before = s.template.clone();
        s.apply_decision("g0-p0", Decision::Rejected, "rev")
            .unwrap();
        assert_eq!(s.template, before);
        assert_eq!(s.decision_log.len(), 1);
        assert!(matches!(
            s.apply_decision("g0-p0", Decision::Approved, "rev"),
            Err(ReviseError::ProposalNotPending { .. })
        ));
    }

    #[test]
    fn approval_stales_proposals_on_removed_item() {
        let t = template(&["leg", "lower limb", "limb"]);
        let p = propose_merges(
            &t,
            &MapSuggester::new([("leg", "lower limb"), ("limb", "leg")]),
        )
        .unwrap();
        let mut s = ReviewSession::new("s", t, vec![], p.proposals);
        assert_eq!(s.list_pending().len(), 2);
        s.apply_decision("g0-p0", Decision::Approved, "rev")
            .unwrap();
        assert!(s.list_pending().is_empty());
        assert!(matches!(
            s.apply_decision("g0-p1", Decision::Approved, "rev"),
            Err(ReviseError::StaleProposal(_))
        ));
    }

    #[test]
    fn both_filled_values_are_joined() {
        let mut t = template(&["hb", "haemoglobin"]);
        for i in &mut t.items {
            i.section = Section::Exams;
            i.id = crate::crfgen::item_id(Section::Exams, &i.label);
        }
        let mut f = vec![FilledCrf {
            doc_id: "a".into(),
            group_id: 0,
            values: BTreeMap::from([
                ("EXAMS:hb".to_string(), "10".to_string()),
                (
                    "EXAMS:haemoglobin".to_string(),
                    "12 [\\MULTI_ANSWER] 10".to_string(),
                ),
            ]),
        }];
        merge_items(&mut t, &mut f, "EXAMS:hb", "EXAMS:haemoglobin");
        assert_eq!(f[0].values["EXAMS:haemoglobin"], "12 [\\MULTI_ANSWER] 10");
    }

    #[test]
    fn log_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = session_path(dir.path(), "s");
        let mut s = leg_session();
        s.create_log(&path).unwrap();
        s.apply_decision("g0-p0", Decision::Approved, "rev")
            .unwrap();
        let reopened = ReviewSession::open(&path).unwrap();
        assert_eq!(reopened.template, s.template);
        assert_eq!(reopened.decision_log, s.decision_log);
        assert_eq!(list_sessions(dir.path()).unwrap(), ["s"]);
    }
}
