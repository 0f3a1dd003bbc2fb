//! Slot-filling evaluation: a pattern-matching baseline, answer
//! normalization, outcome rules, scoring and prompts for external models.
//!
//! Positivity per section:
//!
//! | section   | gold positive       | accepted answers                          |
//! |-----------|---------------------|-------------------------------------------|
//! | DIAGNOSIS | `yes`               | `yes`, `no`, `not available`              |
//! | HISTORY   | any non-NA value    | history inventory, `yes`, `no`, NA        |
//! | EXAMS     | any non-NA value    | anything                                  |
//!
//! Answers outside the accepted set are format violations and always count
//! as a false positive. Closed answer sets match case-insensitively.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Document;
use crate::crfgen::{
    answer_inventory, split_values, CrfTemplate, FilledCrf, Section, DIAGNOSIS_YES, NOT_AVAILABLE,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("duplicate prediction for ({doc_id}, {item_id})")]
    DuplicatePrediction { doc_id: String, item_id: String },
    #[error("cannot tell the section of item {0:?}")]
    UnknownTask(String),
    #[error("no prompt template for language {0:?}")]
    MissingTemplate(String),
    #[error("{path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PredictionSource {
    Baseline,
    #[default]
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub doc_id: String,
    pub item_id: String,
    pub raw_answer: String,
    pub source: PredictionSource,
}

impl Prediction {
    pub fn answer(&self) -> String {
        normalize_answer(&self.raw_answer)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PredictionSet {
    by_key: BTreeMap<(String, String), Prediction>,
}

impl PredictionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, p: Prediction) -> Result<(), EvalError> {
        let key = (p.doc_id.clone(), p.item_id.clone());
        if self.by_key.contains_key(&key) {
            return Err(EvalError::DuplicatePrediction {
                doc_id: key.0,
                item_id: key.1,
            });
        }
        self.by_key.insert(key, p);
        Ok(())
    }

    pub fn get(&self, doc_id: &str, item_id: &str) -> Option<&Prediction> {
        self.by_key.get(&(doc_id.to_string(), item_id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.by_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_key.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Prediction> {
        self.by_key.values()
    }

    pub fn doc_ids(&self) -> BTreeSet<&str> {
        self.by_key.keys().map(|(d, _)| d.as_str()).collect()
    }
}

impl FromIterator<Prediction> for PredictionSet {
    /// Later duplicates replace earlier ones.
    fn from_iter<T: IntoIterator<Item = Prediction>>(iter: T) -> Self {
        Self {
            by_key: iter
                .into_iter()
                .map(|p| ((p.doc_id.clone(), p.item_id.clone()), p))
                .collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct PredictionRow {
    doc_id: String,
    item_id: String,
    answer: String,
}

/// Read `{doc_id, item_id, answer}` lines. Answers keep their raw form;
/// [`Prediction::answer`] gives the normalized one.
pub fn load_predictions(path: &Path) -> Result<PredictionSet, EvalError> {
    let content = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_predictions(&content, path, PredictionSource::External)
}

pub fn parse_predictions(
    content: &str,
    path: &Path,
    source: PredictionSource,
) -> Result<PredictionSet, EvalError> {
    let mut set = PredictionSet::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: PredictionRow = serde_json::from_str(line).map_err(|e| EvalError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        set.insert(Prediction {
            doc_id: row.doc_id,
            item_id: row.item_id,
            raw_answer: row.answer,
            source,
        })?;
    }
    Ok(set)
}

pub fn predictions_to_jsonl(set: &PredictionSet) -> String {
    let mut out = String::new();
    for p in set.iter() {
        let row = PredictionRow {
            doc_id: p.doc_id.clone(),
            item_id: p.item_id.clone(),
            answer: p.raw_answer.clone(),
        };
        out.push_str(&serde_json::to_string(&row).expect("serializable"));
        out.push('\n');
    }
    out
}

fn is_quote(c: char) -> bool {
    matches!(c, '"' | '\'' | '`' | '“' | '”' | '‘' | '’')
}

/// Trim whitespace, surrounding quotes and trailing `.,;:!?`; an answer
/// starting with "not available" (or "not_available") becomes exactly
/// "not available". Casing is preserved.
pub fn normalize_answer(raw: &str) -> String {
    let mut s = raw;
    loop {
        let next = s
            .trim()
            .trim_start_matches(is_quote)
            .trim_end_matches(|c: char| {
                is_quote(c) || crate::text::is_trailing_punct(c) || c.is_whitespace()
            });
        if next == s {
            break;
        }
        s = next;
    }
    let lower = s.to_lowercase();
    if lower.starts_with(NOT_AVAILABLE) || lower.starts_with("not_available") {
        return NOT_AVAILABLE.to_string();
    }
    s.to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HistoryMode {
    #[default]
    Strict,
    /// Every positive history answer collapses to `yes` or `no`.
    Simplified,
}

impl std::str::FromStr for HistoryMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "strict" => Ok(HistoryMode::Strict),
            "simplified" => Ok(HistoryMode::Simplified),
            _ => Err(format!("unknown history mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub mode: HistoryMode,
    /// Exact matching of open answers (exams) is case-sensitive.
    pub case_sensitive: bool,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            mode: HistoryMode::Strict,
            case_sensitive: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OutcomeKind {
    #[serde(rename = "TP")]
    Tp,
    #[serde(rename = "FP")]
    Fp,
    #[serde(rename = "FN")]
    Fn,
    #[serde(rename = "TN")]
    Tn,
    /// Wrong positive answer to a positive item: one FP and one FN.
    #[serde(rename = "FP+FN")]
    FpFn,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub kind: OutcomeKind,
    pub reason: &'static str,
}

impl Outcome {
    fn new(kind: OutcomeKind, reason: &'static str) -> Self {
        Self { kind, reason }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Counts {
    pub fn add(&mut self, kind: OutcomeKind) {
        match kind {
            OutcomeKind::Tp => self.tp += 1,
            OutcomeKind::Fp => self.fp += 1,
            OutcomeKind::Fn => self.fn_ += 1,
            OutcomeKind::Tn => self.tn += 1,
            OutcomeKind::FpFn => {
                self.fp += 1;
                self.fn_ += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    /// Precision, recall and F1 in percent; 0 on empty denominators.
    pub fn prf(&self) -> (f64, f64, f64) {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                100.0 * num as f64 / den as f64
            }
        };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        (p, r, f1(p, r))
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Closed answer sets and the simplified-mode polarity of each answer.
#[derive(Debug, Clone)]
pub struct AnswerSpace {
    history: HashMap<String, (String, &'static str)>,
}

impl Default for AnswerSpace {
    fn default() -> Self {
        Self::new(&answer_inventory())
    }
}

impl AnswerSpace {
    pub fn new(inventory: &[String]) -> Self {
        let mut history = HashMap::new();
        for v in inventory {
            let polarity = if v.to_lowercase().split([' ', ',']).any(|w| w == "no") {
                "no"
            } else {
                "yes"
            };
            history.insert(v.to_lowercase(), (v.clone(), polarity));
        }
        for bare in ["yes", "no"] {
            history.insert(bare.to_string(), (bare.to_string(), bare));
        }
        Self { history }
    }

    /// Canonical form and simplified polarity of a history answer.
    pub fn history(&self, answer: &str) -> Option<(&str, &'static str)> {
        self.history
            .get(&answer.to_lowercase())
            .map(|(c, p)| (c.as_str(), *p))
    }
}

fn is_negative(answer: &str) -> bool {
    answer.is_empty() || answer == NOT_AVAILABLE
}

/// Parts of an answer, canonicalized for the section. Empty and "not
/// available" parts are dropped. `None` marks a format violation.
fn parts(
    answer: &str,
    section: Section,
    space: &AnswerSpace,
    config: &ScoreConfig,
) -> Option<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for part in split_values(answer) {
        let p = normalize_answer(part);
        if is_negative(&p) {
            continue;
        }
        let canon = match section {
            Section::Diagnosis => {
                let l = p.to_lowercase();
                (l == "yes" || l == "no").then_some(l)?
            }
            Section::History => {
                let (c, polarity) = space.history(&p)?;
                match config.mode {
                    HistoryMode::Strict => c.to_string(),
                    HistoryMode::Simplified => polarity.to_string(),
                }
            }
            Section::Exams if config.case_sensitive => p,
            Section::Exams => p.to_lowercase(),
        };
        out.insert(canon);
    }
    Some(out)
}

/// Outcome of one (gold, prediction) pair. Both are normalized first.
pub fn classify_outcome(
    gold: &str,
    pred: &str,
    section: Section,
    space: &AnswerSpace,
    config: &ScoreConfig,
) -> Outcome {
    use OutcomeKind::*;
    let gold = normalize_answer(gold);
    let pred = normalize_answer(pred);

    let gold_parts = parts(&gold, section, space, config).filter(|g| !g.is_empty());
    let gold_pos = match section {
        Section::Diagnosis => gold_parts
            .as_ref()
            .is_some_and(|g| g.contains(DIAGNOSIS_YES)),
        _ => gold_parts.is_some(),
    };

    let negative = |gold_pos: bool| {
        if gold_pos {
            Outcome::new(Fn, "missed")
        } else {
            Outcome::new(Tn, "both negative")
        }
    };
    if is_negative(&pred) {
        return negative(gold_pos);
    }
    let Some(pred_parts) = parts(&pred, section, space, config) else {
        return if gold_pos {
            Outcome::new(FpFn, "format violation")
        } else {
            Outcome::new(Fp, "format violation")
        };
    };
    if pred_parts.is_empty() {
        return negative(gold_pos);
    }
    let pred_pos = match section {
        Section::Diagnosis => pred_parts.contains(DIAGNOSIS_YES),
        _ => true,
    };
    let gold_parts = gold_parts.unwrap_or_default();
    match (gold_pos, pred_pos) {
        (false, false) => Outcome::new(Tn, "both negative"),
        (true, false) => Outcome::new(Fn, "missed"),
        (false, true) => Outcome::new(Fp, "spurious"),
        (true, true) if gold_parts == pred_parts => Outcome::new(Tp, "match"),
        (true, true) if gold_parts.len() > 1 => {
            if pred_parts.len() > gold_parts.len() {
                Outcome::new(Fp, "extra values")
            } else if pred_parts.len() < gold_parts.len() {
                Outcome::new(Fn, "fewer values")
            } else {
                Outcome::new(FpFn, "different values")
            }
        }
        (true, true) => Outcome::new(FpFn, "mismatch"),
    }
}

/// The section encoded in an item id (`SECTION:label`).
pub fn item_section(item_id: &str) -> Result<Section, EvalError> {
    item_id
        .split_once(':')
        .and_then(|(s, _)| s.parse().ok())
        .ok_or_else(|| EvalError::UnknownTask(item_id.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
    /// Scored (document, item) pairs.
    pub pairs: usize,
}

impl TaskScore {
    fn from_counts(counts: Counts, pairs: usize) -> Self {
        let (precision, recall, f1) = counts.prf();
        Self {
            precision,
            recall,
            f1,
            counts,
            pairs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub mode: HistoryMode,
    pub case_sensitive: bool,
    pub tasks: BTreeMap<Section, TaskScore>,
    /// F1 from TP/FP/FN summed over tasks.
    pub pooled_micro_f1: f64,
    /// Unweighted mean of the task F1s.
    pub mean_task_f1: f64,
    /// Task F1s weighted by scored pairs.
    pub item_weighted_f1: f64,
    /// Gold pairs without a prediction, scored as "not available".
    pub missing_predictions: usize,
    /// Predictions that match no gold pair.
    pub unmatched_predictions: usize,
}

impl ScoreReport {
    /// `task<TAB>P<TAB>R<TAB>F1` rows plus the aggregates, one decimal.
    pub fn table(&self) -> String {
        let mut out = String::from("task\tprecision\trecall\tf1\n");
        for (s, t) in &self.tasks {
            out.push_str(&format!(
                "{s}\t{:.1}\t{:.1}\t{:.1}\n",
                t.precision, t.recall, t.f1
            ));
        }
        out.push_str(&format!(
            "pooled_micro_f1\t\t\t{:.1}\n",
            self.pooled_micro_f1
        ));
        out.push_str(&format!("mean_task_f1\t\t\t{:.1}\n", self.mean_task_f1));
        out.push_str(&format!(
            "item_weighted_f1\t\t\t{:.1}\n",
            self.item_weighted_f1
        ));
        out
    }
}

/// Score predictions against gold fillings. Every gold pair is scored once;
/// a missing prediction counts as "not available".
pub fn score(
    gold: &[FilledCrf],
    preds: &PredictionSet,
    config: &ScoreConfig,
) -> Result<ScoreReport, EvalError> {
    score_with(gold, preds, config, &AnswerSpace::default())
}

pub fn score_with(
    gold: &[FilledCrf],
    preds: &PredictionSet,
    config: &ScoreConfig,
    space: &AnswerSpace,
) -> Result<ScoreReport, EvalError> {
    let mut counts: BTreeMap<Section, Counts> = Section::ALL
        .iter()
        .map(|s| (*s, Counts::default()))
        .collect();
    let mut pairs: BTreeMap<Section, usize> = Section::ALL.iter().map(|s| (*s, 0)).collect();
    let mut missing = 0;
    let mut seen: BTreeSet<(&str, &str)> = BTreeSet::new();
    for f in gold {
        for (item, value) in &f.values {
            let section = item_section(item)?;
            let pred = match preds.get(&f.doc_id, item) {
                Some(p) => p.raw_answer.as_str(),
                None => {
                    missing += 1;
                    NOT_AVAILABLE
                }
            };
            seen.insert((f.doc_id.as_str(), item.as_str()));
            let outcome = classify_outcome(value, pred, section, space, config);
            counts
                .get_mut(&section)
                .expect("all sections")
                .add(outcome.kind);
            *pairs.get_mut(&section).expect("all sections") += 1;
        }
    }
    if missing > 0 {
        tracing::warn!(
            missing,
            "gold pairs without a prediction scored as not available"
        );
    }
    let unmatched = preds
        .iter()
        .filter(|p| !seen.contains(&(p.doc_id.as_str(), p.item_id.as_str())))
        .count();

    let tasks: BTreeMap<Section, TaskScore> = counts
        .iter()
        .map(|(s, c)| (*s, TaskScore::from_counts(*c, pairs[s])))
        .collect();
    let mut pooled = Counts::default();
    for c in counts.values() {
        pooled.merge(c);
    }
    let mean_task_f1 = tasks.values().map(|t| t.f1).sum::<f64>() / tasks.len() as f64;
    let total_pairs: usize = pairs.values().sum();
    let item_weighted_f1 = if total_pairs == 0 {
        0.0
    } else {
        tasks.values().map(|t| t.f1 * t.pairs as f64).sum::<f64>() / total_pairs as f64
    };
    Ok(ScoreReport {
        mode: config.mode,
        case_sensitive: config.case_sensitive,
        tasks,
        pooled_micro_f1: pooled.prf().2,
        mean_task_f1,
        item_weighted_f1,
        missing_predictions: missing,
        unmatched_predictions: unmatched,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BaselineConfig {
    /// Keep only the bare number, dropping attached unit characters.
    pub truncate_units: bool,
}

fn mention(text: &str, aliases: &BTreeSet<String>) -> Option<(usize, usize)> {
    aliases
        .iter()
        .filter_map(|a| {
            let re = Regex::new(&format!("(?i){}", regex::escape(a))).ok()?;
            re.find(text).map(|m| (m.start(), m.end()))
        })
        .min()
}

/// Pattern-matching predictions for every template item.
pub fn baseline_fill(
    doc: &Document,
    template: &CrfTemplate,
    config: &BaselineConfig,
) -> Vec<Prediction> {
    let number = Regex::new(if config.truncate_units {
        r"\d+(?:[.,]\d+)?"
    } else {
        r"\d+(?:[.,]\d+)?\S*"
    })
    .expect("valid pattern");
    template
        .items
        .iter()
        .map(|item| {
            let found = mention(&doc.text, &item.aliases);
            let answer = match (item.section, found) {
                (_, None) => NOT_AVAILABLE.to_string(),
                (Section::Diagnosis | Section::History, Some(_)) => "yes".to_string(),
                (Section::Exams, Some((_, end))) => number
                    .find(&doc.text[end..])
                    .map_or(NOT_AVAILABLE.to_string(), |m| m.as_str().to_string()),
            };
            Prediction {
                doc_id: doc.id.clone(),
                item_id: item.id.clone(),
                raw_answer: answer,
                source: PredictionSource::Baseline,
            }
        })
        .collect()
}

const SYSTEM_EN: &str = "You are an expert clinical doctor. You have to answer a question on \"{task_description}\" about a patient. To do it, you are given the patient clinical history.";

const HISTORY_EN: &str = "The answer is composed by three components: polarity, contextual modality, and permanence. You must combine these three components together to answer the question.
- contextual modality can be:
a)'{VALUE_1}' if the answer is certain,
b)'{VALUE_2}' if the answer is hypothetical,
c)'{VALUE_3}' if the answer is probable.
- polarity can be:
a)'{VALUE_4}' if the answer is affirmative,
b)'{VALUE_5}' if the answer is negative.
- permanence can be:
a)'{VALUE_6}' if the object of the question is certainly permanent forever,
b)'{VALUE_7}' if the object of the question is temporary or transitory,
c)'{VALUE_8}' otherwise.

These three components must be combined in order: \"contextual modality polarity, permanence\". For example, if the question is \"Does the patient have a history of diabetes?\", the answer could be: \"{EXAMPLE_1}\", or \"{EXAMPLE_2}\".

If the information is not contained in the clinical history, answer with 'not_available'.
Do not add any preamble to the answer.";

const EXAMS_EN: &str = "The answer can assume three different formats.
-if the test/exam has been performed only once, answer with the results of the test/exam.
-if the test/exam has been performed more than once, report all the results separated by the special token [\\MULTI_ANSWER] (for example \"RESULT_1 [\\MULTI_ANSWER] RESULT_2\").
-if the information is not contained in the clinical history, answer with 'not_available'";

const DIAGNOSIS_EN: &str = "Answer 'Yes' if the patient's definitive diagnosis is the one indicated. If the information is not contained in the clinical history, answer with 'not_available'.";

const SYSTEM_IT: &str = "Sei un medico clinico esperto. Devi rispondere a una domanda su \"{task_description}\" riguardo a un paziente. Per farlo, ti viene fornita la storia clinica del paziente.";

const HISTORY_IT: &str = "La risposta è composta da tre componenti: polarità, modalità contestuale e permanenza. Devi combinare queste tre componenti per rispondere alla domanda.
- la modalità contestuale può essere:
a)'{VALUE_1}' se la risposta è certa,
b)'{VALUE_2}' se la risposta è ipotetica,
c)'{VALUE_3}' se la risposta è probabile.
- la polarità può essere:
a)'{VALUE_4}' se la risposta è affermativa,
b)'{VALUE_5}' se la risposta è negativa.
- la permanenza può essere:
a)'{VALUE_6}' se l'oggetto della domanda è certamente permanente,
b)'{VALUE_7}' se l'oggetto della domanda è temporaneo o transitorio,
c)'{VALUE_8}' altrimenti.

Queste tre componenti devono essere combinate nell'ordine: \"modalità contestuale polarità, permanenza\". Per esempio, se la domanda è \"Il paziente ha una storia di diabete?\", la risposta potrebbe essere: \"{EXAMPLE_1}\", oppure \"{EXAMPLE_2}\".

Se l'informazione non è contenuta nella storia clinica, rispondi con 'not_available'.
Non aggiungere alcun preambolo alla risposta.";

const EXAMS_IT: &str = "La risposta può assumere tre formati diversi.
-se il test/esame è stato eseguito una sola volta, rispondi con i risultati del test/esame.
-se il test/esame è stato eseguito più di una volta, riporta tutti i risultati separati dal token speciale [\\MULTI_ANSWER] (per esempio \"RESULT_1 [\\MULTI_ANSWER] RESULT_2\").
-se l'informazione non è contenuta nella storia clinica, rispondi con 'not_available'";

const DIAGNOSIS_IT: &str = "Rispondi 'Yes' se la diagnosi definitiva del paziente è quella indicata. Se l'informazione non è contenuta nella storia clinica, rispondi con 'not_available'.";

struct PromptTemplates {
    system: &'static str,
    history: &'static str,
    exams: &'static str,
    diagnosis: &'static str,
    task: [&'static str; 3],
    questions: [&'static str; 3],
}

fn templates(language: &str) -> Option<PromptTemplates> {
    match language {
        "en" => Some(PromptTemplates {
            system: SYSTEM_EN,
            history: HISTORY_EN,
            exams: EXAMS_EN,
            diagnosis: DIAGNOSIS_EN,
            task: ["diagnosis", "clinical history", "exams"],
            questions: [
                "Is the definitive diagnosis {item}?",
                "Does the patient have a history of {item}?",
                "What are the results and measures of {item}?",
            ],
        }),
        "it" => Some(PromptTemplates {
            system: SYSTEM_IT,
            history: HISTORY_IT,
            exams: EXAMS_IT,
            diagnosis: DIAGNOSIS_IT,
            task: ["diagnosi", "storia clinica", "esami"],
            questions: [
                "La diagnosi definitiva è {item}?",
                "Il paziente ha una storia di {item}?",
                "Quali sono i risultati e le misure di {item}?",
            ],
        }),
        _ => None,
    }
}

fn history_guidelines(template: &str) -> String {
    use crate::corpus::{AttributeSet, Modality as M, Permanence as P, Polarity};
    use crate::crfgen::{render_history_value, HistoryValueTable as T};
    let example_1 = render_history_value(&AttributeSet::new(
        Polarity::Positive,
        M::Actual,
        P::Permanent,
    ));
    let example_2 = render_history_value(&AttributeSet::new(
        Polarity::Negative,
        M::Hedged,
        P::Missing,
    ));
    template
        .replace("{VALUE_1}", T::modality(M::Actual))
        .replace("{VALUE_2}", T::modality(M::Hypothetical))
        .replace("{VALUE_3}", T::modality(M::Hedged))
        .replace("{VALUE_4}", T::polarity(Polarity::Positive))
        .replace("{VALUE_5}", T::polarity(Polarity::Negative))
        .replace("{VALUE_6}", T::permanence(P::Permanent))
        .replace("{VALUE_7}", T::permanence(P::Finite))
        .replace("{VALUE_8}", T::permanence(P::Missing))
        .replace("{EXAMPLE_1}", &example_1)
        .replace("{EXAMPLE_2}", &example_2)
}

/// System prompt, answering guidelines, clinical case and question, separated
/// by blank lines. The item label is inserted verbatim.
pub fn build_eval_prompt(
    section: Section,
    note: &str,
    item: &str,
    language: &str,
) -> Result<String, EvalError> {
    let t = templates(language).ok_or_else(|| EvalError::MissingTemplate(language.to_string()))?;
    let idx = Section::ALL
        .iter()
        .position(|s| *s == section)
        .expect("known section");
    let guidelines = match section {
        Section::Diagnosis => t.diagnosis.to_string(),
        Section::History => history_guidelines(t.history),
        Section::Exams => t.exams.to_string(),
    };
    Ok([
        t.system.replace("{task_description}", t.task[idx]),
        guidelines,
        note.to_string(),
        t.questions[idx].replace("{item}", item),
    ]
    .join("\n\n"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::doc;
    use crate::crfgen::{CrfItem, CrfTemplate};

    fn classify(gold: &str, pred: &str, section: Section) -> OutcomeKind {
        classify_outcome(
            gold,
            pred,
            section,
            &AnswerSpace::default(),
            &ScoreConfig::default(),
        )
        .kind
    }

    #[test]
    fn normalization_cases() {
        assert_eq!(normalize_answer("yes."), "yes");
        assert_eq!(
            normalize_answer("not available, because the note lacks it"),
            NOT_AVAILABLE
        );
        assert_eq!(normalize_answer("Not_available."), NOT_AVAILABLE);
        assert_eq!(normalize_answer("38g/dl"), "38g/dl");
        assert_eq!(normalize_answer("  \"Yes, chronic.\" "), "Yes, chronic");
        assert_eq!(normalize_answer("'yes'."), "yes");
    }

    #[test]
    fn outcome_rules() {
        use OutcomeKind::*;
        assert_eq!(classify("yes", "yes", Section::Diagnosis), Tp);
        assert_eq!(classify("yes", "Yes.", Section::Diagnosis), Tp);
        assert_eq!(classify("yes", "no", Section::Diagnosis), Fn);
        assert_eq!(classify(NOT_AVAILABLE, "maybe", Section::Diagnosis), Fp);
        assert_eq!(classify(NOT_AVAILABLE, "no", Section::Diagnosis), Tn);
        assert_eq!(classify(NOT_AVAILABLE, "120", Section::Exams), Fp);
        assert_eq!(classify("10 [\\MULTI_ANSWER] 12", "10", Section::Exams), Fn);
        assert_eq!(
            classify(
                "10 [\\MULTI_ANSWER] 12",
                "12 [\\MULTI_ANSWER] 10",
                Section::Exams
            ),
            Tp
        );
        assert_eq!(
            classify(
                "10 [\\MULTI_ANSWER] 12",
                "10 [\\MULTI_ANSWER] 12 [\\MULTI_ANSWER] 9",
                Section::Exams
            ),
            Fp
        );
        assert_eq!(
            classify(
                "10 [\\MULTI_ANSWER] 12",
                "10 [\\MULTI_ANSWER] 9",
                Section::Exams
            ),
            FpFn
        );
        assert_eq!(classify("38g/dl", "38 g/dl", Section::Exams), FpFn);
        assert_eq!(
            classify(
                "Certainly yes, chronic",
                "certainly yes, chronic",
                Section::History
            ),
            Tp
        );
        assert_eq!(
            classify("Certainly yes, chronic", "yes", Section::History),
            FpFn
        );
        assert_eq!(
            classify("Certainly yes, chronic", "sure", Section::History),
            FpFn
        );
        assert_eq!(classify(NOT_AVAILABLE, "definitely", Section::History), Fp);
        assert_eq!(
            classify("No, chronic", "not available", Section::History),
            Fn
        );
    }

    #[test]
    fn simplified_history_collapses_to_polarity() {
        let config = ScoreConfig {
            mode: HistoryMode::Simplified,
            ..Default::default()
        };
        let space = AnswerSpace::default();
        let c = |g, p| classify_outcome(g, p, Section::History, &space, &config).kind;
        assert_eq!(c("Certainly yes, chronic", "yes"), OutcomeKind::Tp);
        assert_eq!(
            c("Probably no, possibly chronic", "No, chronic"),
            OutcomeKind::Tp
        );
        assert_eq!(
            c("Probably no, possibly chronic", "Yes, chronic"),
            OutcomeKind::FpFn
        );
    }

    fn filled(doc: &str, vals: &[(&str, &str)]) -> FilledCrf {
        FilledCrf {
            doc_id: doc.into(),
            group_id: 0,
            values: vals
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    fn pred(doc: &str, item: &str, answer: &str) -> Prediction {
        Prediction {
            doc_id: doc.into(),
            item_id: item.into(),
            raw_answer: answer.into(),
            source: PredictionSource::External,
        }
    }

    #[test]
    fn perfect_predictions_score_100() {
        let gold = vec![filled(
            "a",
            &[
                ("DIAGNOSIS:x", "yes"),
                ("HISTORY:y", "No, chronic"),
                ("EXAMS:z", "5"),
            ],
        )];
        let preds: PredictionSet = gold[0]
            .values
            .iter()
            .map(|(k, v)| pred("a", k, v))
            .collect();
        let r = score(&gold, &preds, &ScoreConfig::default()).unwrap();
        for t in r.tasks.values() {
            assert_eq!((t.precision, t.recall, t.f1), (100.0, 100.0, 100.0));
        }
        assert_eq!(r.mean_task_f1, 100.0);
    }

    #[test]
    fn two_one_one_gives_two_thirds() {
        let c = Counts {
            tp: 2,
            fp: 1,
            fn_: 1,
            tn: 0,
        };
        let (p, r, f) = c.prf();
        assert!((p - 200.0 / 3.0).abs() < 1e-9);
        assert!((r - 200.0 / 3.0).abs() < 1e-9);
        assert!((f - 200.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn missing_predictions_are_counted() {
        let gold = vec![filled("a", &[("EXAMS:z", "5"), ("EXAMS:w", NOT_AVAILABLE)])];
        let r = score(&gold, &PredictionSet::new(), &ScoreConfig::default()).unwrap();
        assert_eq!(r.missing_predictions, 2);
        assert_eq!(
            r.tasks[&Section::Exams].counts,
            Counts {
                tp: 0,
                fp: 0,
                fn_: 1,
                tn: 1
            }
        );
        let bad = vec![filled("a", &[("OTHER:z", "5")])];
        assert!(matches!(
            score(&bad, &PredictionSet::new(), &ScoreConfig::default()),
            Err(EvalError::UnknownTask(_))
        ));
    }

    #[test]
    fn duplicate_predictions_rejected() {
        let text = "{\"doc_id\":\"a\",\"item_id\":\"EXAMS:z\",\"answer\":\"Yes.\"}\n";
        let set = parse_predictions(text, Path::new("p"), PredictionSource::External).unwrap();
        assert_eq!(set.get("a", "EXAMS:z").unwrap().answer(), "Yes");
        let twice = format!("{text}{text}");
        assert!(matches!(
            parse_predictions(&twice, Path::new("p"), PredictionSource::External),
            Err(EvalError::DuplicatePrediction { .. })
        ));
        assert!(
            parse_predictions("", Path::new("p"), PredictionSource::External)
                .unwrap()
                .is_empty()
        );
    }

    fn template(items: &[(Section, &str)]) -> CrfTemplate {
        let items: Vec<CrfItem> = items.iter().map(|(s, l)| CrfItem::new(*s, l)).collect();
        CrfTemplate {
            group_id: 0,
            version: 0,
            provenance: BTreeMap::new(),
            items,
        }
    }

    #[test]
    fn baseline_rules() {
        let d = doc(
            "a",
            "Signs of Sepsis; haemoglobin was 38g/dl, later 40.",
            vec![],
            vec![],
        );
        let t = template(&[
            (Section::Diagnosis, "sepsis"),
            (Section::History, "fever"),
            (Section::Exams, "haemoglobin"),
        ]);
        let out = baseline_fill(&d, &t, &BaselineConfig::default());
        let answers: Vec<&str> = out.iter().map(|p| p.raw_answer.as_str()).collect();
        assert_eq!(answers, ["yes", NOT_AVAILABLE, "38g/dl,"]);
        assert_eq!(out[2].answer(), "38g/dl");
        let truncated = baseline_fill(
            &d,
            &t,
            &BaselineConfig {
                truncate_units: true,
            },
        );
        assert_eq!(truncated[2].raw_answer, "38");
    }

    #[test]
    fn prompts_contain_question_and_guidelines() {
        let p = build_eval_prompt(Section::History, "note", "diabetes", "en").unwrap();
        assert!(p.ends_with("Does the patient have a history of diabetes?"));
        assert!(p.contains("'Certainly' if the answer is certain"));
        assert!(p.contains("\"clinical history\""));
        let e = build_eval_prompt(Section::Exams, "note", "haemoglobin", "en").unwrap();
        assert!(e.contains("[\\MULTI_ANSWER]"));
        let d = build_eval_prompt(Section::Diagnosis, "note", "sepsis", "en").unwrap();
        assert!(d.ends_with("Is the definitive diagnosis sepsis?"));
        assert!(build_eval_prompt(Section::Diagnosis, "nota", "sepsi", "it").is_ok());
        assert!(matches!(
            build_eval_prompt(Section::Diagnosis, "n", "x", "fr"),
            Err(EvalError::MissingTemplate(_))
        ));
    }
}
