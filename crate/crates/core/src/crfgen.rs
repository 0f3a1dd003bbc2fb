//! CRF templates per group and gold filled CRFs per document.
//!
//! Items come from three sources: the extracted diagnosis, clinical
//! entities (history, valued by their attributes) and spans measured by an
//! RML (exams, valued by the RML surfaces). Item identity is the normalized
//! label; a concept map can collapse equivalent labels before merging.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::Partition;
use crate::corpus::{
    AttributeSet, Category, Corpus, Document, Modality, Permanence, Polarity, Split,
};
use crate::text::{capitalize_first, normalize_label};

pub const NOT_AVAILABLE: &str = "not available";
pub const MULTI_ANSWER_SEPARATOR: &str = "[\\MULTI_ANSWER]";
/// Separator as it appears between values.
pub const MULTI_ANSWER_JOIN: &str = " [\\MULTI_ANSWER] ";
pub const DIAGNOSIS_YES: &str = "yes";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Section {
    Diagnosis,
    History,
    Exams,
}

impl Section {
    pub const ALL: [Section; 3] = [Section::Diagnosis, Section::History, Section::Exams];

    pub fn as_str(self) -> &'static str {
        match self {
            Section::Diagnosis => "DIAGNOSIS",
            Section::History => "HISTORY",
            Section::Exams => "EXAMS",
        }
    }
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Section {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "DIAGNOSIS" => Ok(Section::Diagnosis),
            "HISTORY" => Ok(Section::History),
            "EXAMS" => Ok(Section::Exams),
            _ => Err(format!("unknown section {s:?}")),
        }
    }
}

pub fn item_id(section: Section, label: &str) -> String {
    format!("{}:{}", section.as_str(), label)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrfItem {
    pub id: String,
    pub section: Section,
    pub label: String,
    /// Normalized surfaces answering to this item, label included.
    pub aliases: BTreeSet<String>,
}

impl CrfItem {
    /// Panics if `label` normalizes to the empty string.
    pub fn new(section: Section, label: &str) -> Self {
        let label = normalize_label(label);
        assert!(!label.is_empty(), "item label must not be empty");
        Self {
            id: item_id(section, &label),
            section,
            aliases: BTreeSet::from([label.clone()]),
            label,
        }
    }

    pub fn answers_to(&self, surface: &str) -> bool {
        self.aliases.contains(&normalize_label(surface))
    }
}

/// An item produced by one document together with its gold value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldItem {
    pub item: CrfItem,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DocItems {
    pub doc_id: String,
    pub items: Vec<GoldItem>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrfTemplate {
    pub group_id: usize,
    /// Bumped on every approved merge.
    pub version: u64,
    pub items: Vec<CrfItem>,
    /// Item id → documents that produced the item.
    pub provenance: BTreeMap<String, BTreeSet<String>>,
}

impl CrfTemplate {
    pub fn item(&self, id: &str) -> Option<&CrfItem> {
        self.items.iter().find(|i| i.id == id)
    }

    pub fn item_ids(&self) -> BTreeSet<&str> {
        self.items.iter().map(|i| i.id.as_str()).collect()
    }

    pub fn section(&self, section: Section) -> impl Iterator<Item = &CrfItem> {
        self.items.iter().filter(move |i| i.section == section)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// The item in `section` answering to `surface`.
    pub fn find(&self, section: Section, surface: &str) -> Option<&CrfItem> {
        let key = normalize_label(surface);
        self.section(section).find(|i| i.aliases.contains(&key))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilledCrf {
    pub doc_id: String,
    pub group_id: usize,
    pub values: BTreeMap<String, String>,
}

impl FilledCrf {
    pub fn filled(&self) -> usize {
        self.values
            .values()
            .filter(|v| v.as_str() != NOT_AVAILABLE)
            .count()
    }
}

/// Word tables for rendering clinical-entity attributes as history answers.
#[derive(Debug, Clone, Copy, Default)]
pub struct HistoryValueTable;

impl HistoryValueTable {
    /// A missing polarity reads as present.
    pub fn polarity(p: Polarity) -> &'static str {
        match p {
            Polarity::Positive | Polarity::Missing => "yes",
            Polarity::Negative => "no",
        }
    }

    pub fn modality(m: Modality) -> &'static str {
        match m {
            Modality::Actual => "Certainly",
            Modality::Hypothetical => "Possibly",
            Modality::Hedged => "Probably",
            Modality::Missing => "",
        }
    }

    pub fn permanence(p: Permanence) -> &'static str {
        match p {
            Permanence::Permanent => "chronic",
            Permanence::Finite => "certainly not chronic",
            Permanence::Missing => "possibly chronic",
        }
    }
}

/// `"{modality} {polarity}, {permanence}"` with empty parts dropped and the
/// first letter capitalized.
pub fn render_history_value(attrs: &AttributeSet) -> String {
    let modality = HistoryValueTable::modality(attrs.contextual_modality);
    let polarity = HistoryValueTable::polarity(attrs.polarity);
    let head = if modality.is_empty() {
        polarity.to_string()
    } else {
        format!("{modality} {polarity}")
    };
    capitalize_first(&format!(
        "{head}, {}",
        HistoryValueTable::permanence(attrs.permanence)
    ))
}

/// Every distinct renderable history answer, in table order.
pub fn answer_inventory() -> Vec<String> {
    let mut out = Vec::new();
    for p in [Polarity::Positive, Polarity::Negative] {
        for m in Modality::ALL {
            for perm in Permanence::ALL {
                out.push(render_history_value(&AttributeSet::new(p, m, perm)));
            }
        }
    }
    out
}

pub fn join_values<'a>(values: impl IntoIterator<Item = &'a str>) -> String {
    values
        .into_iter()
        .collect::<Vec<_>>()
        .join(MULTI_ANSWER_JOIN)
}

/// Split a value on the multi-answer separator, trimming each part.
pub fn split_values(value: &str) -> Vec<&str> {
    value.split(MULTI_ANSWER_SEPARATOR).map(str::trim).collect()
}

/// One item per span measured by at least one RML. Spans sharing a label
/// within the document fold into one item.
pub fn generate_exam_items(doc: &Document) -> Vec<GoldItem> {
    // label → (first target position, [(rml start, rml id, rml surface)])
    type Rmls<'a> = Vec<(usize, &'a str, &'a str)>;
    let mut by_label: HashMap<String, (usize, Rmls)> = HashMap::new();
    for rel in &doc.relations {
        let (Some(rml), Some(target)) = (doc.span(&rel.source), doc.span(&rel.target)) else {
            continue;
        };
        let label = normalize_label(&target.surface);
        if label.is_empty() {
            continue;
        }
        let entry = by_label.entry(label).or_insert((target.start, Vec::new()));
        entry.0 = entry.0.min(target.start);
        if !entry.1.iter().any(|(_, id, _)| *id == rml.id) {
            entry.1.push((rml.start, &rml.id, &rml.surface));
        }
    }
    let mut groups: Vec<_> = by_label.into_iter().collect();
    groups.sort_by(|a, b| (a.1 .0, &a.0).cmp(&(b.1 .0, &b.0)));
    groups
        .into_iter()
        .map(|(label, (_, mut rmls))| {
            rmls.sort();
            GoldItem {
                item: CrfItem::new(Section::Exams, &label),
                value: join_values(rmls.iter().map(|(_, _, s)| *s)),
            }
        })
        .collect()
}

/// One item per distinct clinical-entity label; the first mention supplies
/// the value.
pub fn generate_history_items(doc: &Document) -> Vec<GoldItem> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let mut entities: Vec<_> = doc.spans_of(Category::ClinicalEntity).collect();
    entities.sort_by_key(|s| (s.start, s.end));
    for span in entities {
        let label = normalize_label(&span.surface);
        if label.is_empty() || !seen.insert(label.clone()) {
            continue;
        }
        out.push(GoldItem {
            item: CrfItem::new(Section::History, &label),
            value: render_history_value(&span.attributes.unwrap_or_default()),
        });
    }
    out
}

/// One item per distinct diagnosis among `docs`.
pub fn generate_diagnosis_items<'a>(
    docs: impl IntoIterator<Item = &'a str>,
    diagnoses: &BTreeMap<String, Option<String>>,
) -> Vec<CrfItem> {
    let mut seen = BTreeSet::new();
    docs.into_iter()
        .filter_map(|d| diagnoses.get(d).cloned().flatten())
        .filter_map(|dx| {
            let label = normalize_label(&dx);
            (!label.is_empty() && seen.insert(label.clone()))
                .then(|| CrfItem::new(Section::Diagnosis, &label))
        })
        .collect()
}

/// All gold items a document contributes.
pub fn document_items(doc: &Document, diagnosis: Option<&str>) -> DocItems {
    let mut items = Vec::new();
    if let Some(dx) = diagnosis.filter(|d| !normalize_label(d).is_empty()) {
        items.push(GoldItem {
            item: CrfItem::new(Section::Diagnosis, dx),
            value: DIAGNOSIS_YES.to_string(),
        });
    }
    items.extend(generate_history_items(doc));
    items.extend(generate_exam_items(doc));
    DocItems {
        doc_id: doc.id.clone(),
        items,
    }
}

/// Surface → canonical term map, resolved transitively.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConceptMap {
    map: BTreeMap<String, String>,
}

impl ConceptMap {
    pub fn new<I, S>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, S)>,
        S: AsRef<str>,
    {
        let map = pairs
            .into_iter()
            .map(|(a, b)| (normalize_label(a.as_ref()), normalize_label(b.as_ref())))
            .filter(|(a, b)| !a.is_empty() && !b.is_empty() && a != b)
            .collect();
        Self { map }
    }

    /// `surface<TAB>canonical` lines; `#` comments and blank lines skipped.
    pub fn parse(content: &str) -> Self {
        Self::new(
            content
                .lines()
                .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
                .filter_map(|l| l.split_once('\t')),
        )
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Follow the map to a fixed point. On a cycle the smallest member wins.
    pub fn canonical(&self, surface: &str) -> String {
        let mut current = normalize_label(surface);
        let mut path = vec![current.clone()];
        while let Some(next) = self.map.get(&current) {
            if let Some(pos) = path.iter().position(|p| p == next) {
                return path[pos..].iter().min().cloned().unwrap_or_default();
            }
            path.push(next.clone());
            current = next.clone();
        }
        current
    }
}

/// Collapse items whose canonical labels collide, accumulating aliases.
/// Output keeps first-appearance order.
pub fn normalize_items(items: Vec<CrfItem>, map: &ConceptMap) -> Vec<CrfItem> {
    let mut order: Vec<(Section, String)> = Vec::new();
    let mut merged: HashMap<(Section, String), CrfItem> = HashMap::new();
    for item in items {
        let key = (item.section, map.canonical(&item.label));
        let slot = merged.entry(key.clone()).or_insert_with(|| {
            order.push(key.clone());
            CrfItem::new(key.0, &key.1)
        });
        slot.aliases.extend(item.aliases);
    }
    order
        .into_iter()
        .map(|k| merged.remove(&k).expect("key recorded"))
        .collect()
}

/// Union of a group's per-document items after normalization. Items are
/// ordered by section, then label.
pub fn merge_group_items(per_doc: &[DocItems], group_id: usize, map: &ConceptMap) -> CrfTemplate {
    let all: Vec<CrfItem> = per_doc
        .iter()
        .flat_map(|d| d.items.iter().map(|g| g.item.clone()))
        .collect();
    let mut items = normalize_items(all, map);
    items.sort_by(|a, b| (a.section, &a.label).cmp(&(b.section, &b.label)));
    let mut provenance: BTreeMap<String, BTreeSet<String>> = items
        .iter()
        .map(|i| (i.id.clone(), BTreeSet::new()))
        .collect();
    for doc in per_doc {
        for g in &doc.items {
            if let Some(item) = items
                .iter()
                .find(|i| i.section == g.item.section && i.answers_to(&g.item.label))
            {
                provenance
                    .entry(item.id.clone())
                    .or_default()
                    .insert(doc.doc_id.clone());
            }
        }
    }
    CrfTemplate {
        group_id,
        version: 0,
        items,
        provenance,
    }
}

/// Combine several values a document gives the same item.
fn reconcile(section: Section, values: &[&str]) -> String {
    match values {
        [] => NOT_AVAILABLE.to_string(),
        [one] => one.to_string(),
        _ => match section {
            Section::History => values[0].to_string(),
            Section::Diagnosis => DIAGNOSIS_YES.to_string(),
            Section::Exams => join_values(values.iter().flat_map(|v| split_values(v))),
        },
    }
}

/// Gold values of one document over every template item.
pub fn fill_crf(template: &CrfTemplate, doc: &DocItems) -> FilledCrf {
    let values = template
        .items
        .iter()
        .map(|item| {
            let matched: Vec<&str> = doc
                .items
                .iter()
                .filter(|g| g.item.section == item.section && item.answers_to(&g.item.label))
                .map(|g| g.value.as_str())
                .collect();
            (item.id.clone(), reconcile(item.section, &matched))
        })
        .collect();
    FilledCrf {
        doc_id: doc.doc_id.clone(),
        group_id: template.group_id,
        values,
    }
}

/// Drop history items whose filled values come only from test documents.
/// Returns the removed `(group, item id)` pairs. Unassigned documents count
/// as non-test.
pub fn apply_history_split_filter(
    templates: &mut [CrfTemplate],
    filled: &mut [FilledCrf],
    splits: &BTreeMap<String, Split>,
) -> Vec<(usize, String)> {
    let mut removed = Vec::new();
    for template in templates.iter_mut() {
        let gid = template.group_id;
        let doomed: BTreeSet<String> = template
            .section(Section::History)
            .filter(|item| {
                let fillers: Vec<Split> = filled
                    .iter()
                    .filter(|f| f.group_id == gid)
                    .filter(|f| f.values.get(&item.id).is_some_and(|v| v != NOT_AVAILABLE))
                    .map(|f| splits.get(&f.doc_id).copied().unwrap_or_default())
                    .collect();
                !fillers.is_empty() && fillers.iter().all(|s| *s == Split::Test)
            })
            .map(|i| i.id.clone())
            .collect();
        if doomed.is_empty() {
            continue;
        }
        template.items.retain(|i| !doomed.contains(&i.id));
        template.provenance.retain(|id, _| !doomed.contains(id));
        for f in filled.iter_mut().filter(|f| f.group_id == gid) {
            f.values.retain(|id, _| !doomed.contains(id));
        }
        removed.extend(doomed.into_iter().map(|id| (gid, id)));
    }
    removed
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GeneratedCrfs {
    pub templates: Vec<CrfTemplate>,
    /// One per grouped document, ordered by doc id.
    pub filled: Vec<FilledCrf>,
    pub doc_items: Vec<DocItems>,
}

/// Templates and gold fillings for every group of `partition`. Unassigned
/// documents get no CRF.
pub fn generate_crfs(
    corpus: &Corpus,
    partition: &Partition,
    diagnoses: &BTreeMap<String, Option<String>>,
    map: &ConceptMap,
) -> GeneratedCrfs {
    use rayon::prelude::*;
    let doc_items: Vec<DocItems> = corpus
        .documents()
        .par_iter()
        .map(|d| document_items(d, diagnoses.get(&d.id).and_then(|x| x.as_deref())))
        .collect();
    let by_id: HashMap<&str, &DocItems> =
        doc_items.iter().map(|d| (d.doc_id.as_str(), d)).collect();

    let mut templates = Vec::new();
    let mut filled = Vec::new();
    for (gid, members) in partition.groups().iter().enumerate() {
        let group_items: Vec<DocItems> = members
            .iter()
            .filter_map(|m| by_id.get(m.as_str()).map(|d| (*d).clone()))
            .collect();
        let template = merge_group_items(&group_items, gid, map);
        filled.extend(group_items.iter().map(|d| fill_crf(&template, d)));
        templates.push(template);
    }
    filled.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    GeneratedCrfs {
        templates,
        filled,
        doc_items,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FillStats {
    pub documents: usize,
    /// Template slots across documents.
    pub values: usize,
    pub filled: usize,
}

impl FillStats {
    pub fn ratio(&self) -> f64 {
        if self.values == 0 {
            0.0
        } else {
            self.filled as f64 / self.values as f64
        }
    }

    fn add(&mut self, f: &FilledCrf) {
        self.documents += 1;
        self.values += f.values.len();
        self.filled += f.filled();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub group_id: usize,
    pub items: BTreeMap<Section, usize>,
    pub by_split: BTreeMap<Split, FillStats>,
}

impl GroupStats {
    pub fn mean_filled(&self, split: Split) -> f64 {
        self.by_split
            .get(&split)
            .filter(|s| s.documents > 0)
            .map_or(0.0, |s| s.filled as f64 / s.documents as f64)
    }
}

pub fn group_stats(
    template: &CrfTemplate,
    filled: &[FilledCrf],
    splits: &BTreeMap<String, Split>,
) -> GroupStats {
    let mut items: BTreeMap<Section, usize> = Section::ALL.iter().map(|s| (*s, 0)).collect();
    for i in &template.items {
        *items.entry(i.section).or_default() += 1;
    }
    let mut by_split: BTreeMap<Split, FillStats> = BTreeMap::new();
    for f in filled.iter().filter(|f| f.group_id == template.group_id) {
        by_split
            .entry(splits.get(&f.doc_id).copied().unwrap_or_default())
            .or_default()
            .add(f);
    }
    GroupStats {
        group_id: template.group_id,
        items,
        by_split,
    }
}

/// Fill ratio per split over all filled CRFs.
pub fn dataset_shape(
    filled: &[FilledCrf],
    splits: &BTreeMap<String, Split>,
) -> BTreeMap<Split, FillStats> {
    let mut out: BTreeMap<Split, FillStats> = BTreeMap::new();
    for f in filled {
        out.entry(splits.get(&f.doc_id).copied().unwrap_or_default())
            .or_default()
            .add(f);
    }
    out
}
