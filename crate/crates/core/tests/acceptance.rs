//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion.
//!
//! Criteria that need the released E3C-derived data read run configs from
//! `$CRF_E3C_DATA/en.toml` and `$CRF_E3C_DATA/it.toml`. Without them those
//! lines report `FAIL (blocked)` and do not fail the test binary; every
//! other criterion must pass.

mod support;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crfforge::cluster::{louvain_traced, modularity, seed_components, ClusterConfig, Partition};
use crfforge::corpus::{AttributeSet, Modality, Permanence, Polarity};
use crfforge::crfgen::{answer_inventory, render_history_value, FilledCrf, Section};
use crfforge::eval::{
    score, BaselineConfig, HistoryMode, Prediction, PredictionSet, PredictionSource, ScoreConfig,
    ScoreReport,
};
use crfforge::pipeline::{run_pipeline, Pipeline, RunConfig};
use crfforge::simgraph::{
    entity_share_ratio, pair_similarity, Edge, PairFeatures, SimilarityGraph, WeightFormula,
};

use support::*;

enum Verdict {
    Pass(String),
    Fail(String),
    Blocked(String),
}

const DATA_ENV: &str = "CRF_E3C_DATA";

// -------------------------------------------------------------------------
// metrics oracle

const EXAM_POOL: [&str; 8] = [
    "6 mmol/L",
    "positive",
    "Negative",
    "38g/dl",
    "4.2",
    "88%",
    "bilateral infiltrates",
    "normal",
];
const JUNK: [&str; 4] = ["maybe", "Sometimes yes", "unknown", "yes and no"];

fn gold_value(rng: &mut ChaCha8Rng, task: Task) -> String {
    let roll: f64 = rng.random();
    match task {
        Task::Diagnosis => {
            if roll < 0.4 {
                "yes".into()
            } else if roll < 0.95 {
                NA.into()
            } else {
                "no".into()
            }
        }
        Task::History => {
            if roll < 0.55 {
                NA.into()
            } else if roll < 0.92 {
                HISTORY_ANSWERS.choose(rng).unwrap().to_string()
            } else {
                let a = HISTORY_ANSWERS
                    .choose_multiple(rng, 2)
                    .copied()
                    .collect::<Vec<_>>();
                a.join(&format!(" {SEPARATOR} "))
            }
        }
        Task::Exams => {
            if roll < 0.55 {
                NA.into()
            } else if roll < 0.85 {
                EXAM_POOL.choose(rng).unwrap().to_string()
            } else {
                let k = rng.random_range(2..=3);
                let a = EXAM_POOL
                    .choose_multiple(rng, k)
                    .copied()
                    .collect::<Vec<_>>();
                a.join(&format!(" {SEPARATOR} "))
            }
        }
    }
}

fn other_valid(rng: &mut ChaCha8Rng, task: Task) -> String {
    match task {
        Task::Diagnosis => ["yes", "no", "Yes", "NO"].choose(rng).unwrap().to_string(),
        Task::History => HISTORY_ANSWERS
            .iter()
            .copied()
            .chain(["yes", "No"])
            .collect::<Vec<_>>()
            .choose(rng)
            .unwrap()
            .to_string(),
        Task::Exams => EXAM_POOL.choose(rng).unwrap().to_string(),
    }
}

/// A prediction derived from the gold value, or `None` for a missing one.
fn predicted(rng: &mut ChaCha8Rng, gold: &str, task: Task) -> Option<String> {
    let parts: Vec<&str> = gold.split(SEPARATOR).map(str::trim).collect();
    let roll: f64 = rng.random();
    let out = if roll < 0.08 {
        return None;
    } else if roll < 0.35 {
        gold.to_string()
    } else if roll < 0.48 {
        [
            "not available",
            "Not available.",
            "not_available",
            "",
            "  ",
            "\"not available\"",
            "Not available: no mention",
        ]
        .choose(rng)
        .unwrap()
        .to_string()
    } else if roll < 0.58 {
        if rng.random() {
            gold.to_uppercase()
        } else {
            gold.to_lowercase()
        }
    } else if roll < 0.68 {
        let (open, close) = *[
            ("\"", "\""),
            ("'", "'."),
            ("  ", " ;"),
            ("\u{201c}", "\u{201d}!"),
            ("`", "`?"),
        ]
        .choose(rng)
        .unwrap();
        format!("{open}{gold}{close}")
    } else if roll < 0.80 {
        other_valid(rng, task)
    } else if roll < 0.86 {
        JUNK.choose(rng).unwrap().to_string()
    } else if roll < 0.90 {
        format!(
            "{} {SEPARATOR} {}",
            other_valid(rng, task),
            JUNK.choose(rng).unwrap()
        )
    } else {
        // multi-value manipulations
        let mut p: Vec<String> = parts.iter().map(|s| s.to_string()).collect();
        match rng.random_range(0..5) {
            0 => p.shuffle(rng),
            1 if p.len() > 1 => {
                p.pop();
            }
            2 => p.push(other_valid(rng, task)),
            3 => {
                let first = p[0].clone();
                p.push(first);
            }
            _ => p.push(String::new()),
        }
        p.join(&format!(" {SEPARATOR} "))
    };
    Some(out)
}

type Case = (Vec<GoldPair>, BTreeMap<(String, String), String>);

fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let budget = rng.random_range(1..=200);
    let mut gold = Vec::new();
    let mut preds = BTreeMap::new();
    let docs = rng.random_range(1..=8);
    let mut used = BTreeSet::new();
    while gold.len() < budget {
        let doc = format!("D{}", rng.random_range(0..docs));
        let task = *[Task::Diagnosis, Task::History, Task::Exams]
            .choose(rng)
            .unwrap();
        let label = format!("item {}", rng.random_range(0..40));
        if !used.insert((doc.clone(), task, label.clone())) {
            if used.len() >= docs * 120 {
                break;
            }
            continue;
        }
        let value = gold_value(rng, task);
        if let Some(p) = predicted(rng, &value, task) {
            preds.insert((doc.clone(), format!("{}:{label}", task.prefix())), p);
        }
        gold.push((doc, task, label, value));
    }
    (gold, preds)
}

fn to_crate(case: &Case) -> (Vec<FilledCrf>, PredictionSet) {
    let mut by_doc: BTreeMap<&str, BTreeMap<String, String>> = BTreeMap::new();
    for (doc, task, label, value) in &case.0 {
        by_doc
            .entry(doc)
            .or_default()
            .insert(format!("{}:{label}", task.prefix()), value.clone());
    }
    let gold = by_doc
        .into_iter()
        .map(|(doc, values)| FilledCrf {
            doc_id: doc.to_string(),
            group_id: 0,
            values,
        })
        .collect();
    let mut preds = PredictionSet::new();
    for ((doc, item), answer) in &case.1 {
        preds
            .insert(Prediction {
                doc_id: doc.clone(),
                item_id: item.clone(),
                raw_answer: answer.clone(),
                source: PredictionSource::External,
            })
            .unwrap();
    }
    (gold, preds)
}

fn section(task: Task) -> Section {
    match task {
        Task::Diagnosis => Section::Diagnosis,
        Task::History => Section::History,
        Task::Exams => Section::Exams,
    }
}

fn agrees(report: &ScoreReport, reference: &RefReport) -> Result<(), String> {
    let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
    for (task, (counts, pairs)) in &reference.tasks {
        let t = &report.tasks[&section(*task)];
        let got = (t.counts.tp, t.counts.fp, t.counts.fn_, t.counts.tn, t.pairs);
        let want = (counts.tp, counts.fp, counts.fn_, counts.tn, *pairs);
        if got != want || !close(t.f1, counts.f1()) {
            return Err(format!(
                "{task:?}: got {got:?} f1 {}, want {want:?} f1 {}",
                t.f1,
                counts.f1()
            ));
        }
    }
    if !close(report.pooled_micro_f1, reference.pooled)
        || !close(report.mean_task_f1, reference.mean)
        || !close(report.item_weighted_f1, reference.weighted)
    {
        return Err(format!(
            "aggregates ({}, {}, {}) vs ({}, {}, {})",
            report.pooled_micro_f1,
            report.mean_task_f1,
            report.item_weighted_f1,
            reference.pooled,
            reference.mean,
            reference.weighted
        ));
    }
    Ok(())
}

fn metrics_oracle() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20240601);
    let mut pairs = 0;
    for i in 0..1000 {
        let case = random_case(&mut rng);
        pairs += case.0.len();
        let (gold, preds) = to_crate(&case);
        let simplified = i % 2 == 1;
        let case_sensitive = i % 3 != 0;
        let config = ScoreConfig {
            mode: if simplified {
                HistoryMode::Simplified
            } else {
                HistoryMode::Strict
            },
            case_sensitive,
        };
        let report = score(&gold, &preds, &config).unwrap();
        let reference = reference_score(&case.0, &case.1, simplified, case_sensitive);
        if let Err(e) = agrees(&report, &reference) {
            return Verdict::Fail(format!("set {i}: {e}"));
        }
    }
    let elapsed = started.elapsed();
    if elapsed > Duration::from_secs(30) {
        return Verdict::Fail(format!("took {elapsed:.1?}"));
    }
    Verdict::Pass(format!(
        "1000 sets, {pairs} pairs, identical counts and F1s in {elapsed:.2?}"
    ))
}

// -------------------------------------------------------------------------
// Louvain

fn graph(n: usize, edges: &Edges) -> SimilarityGraph {
    SimilarityGraph {
        nodes: (0..n).map(|i| format!("n{i:02}")).collect(),
        edges: edges
            .iter()
            .map(|&(a, b, w)| Edge {
                a: format!("n{a:02}"),
                b: format!("n{b:02}"),
                features: PairFeatures {
                    d: 0.0,
                    e: 0.0,
                    b: None,
                },
                s: w,
            })
            .collect(),
        weight_formula: WeightFormula::General,
        pairs_evaluated: n * n.saturating_sub(1) / 2,
    }
}

fn singletons(g: &SimilarityGraph) -> Partition {
    Partition::new(g.nodes.clone(), (0..g.nodes.len()).map(Some).collect())
}

fn random_graph(rng: &mut ChaCha8Rng) -> (usize, Edges) {
    let n = rng.random_range(2..=30);
    let density: f64 = rng.random_range(0.05..0.6);
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.random::<f64>() < density {
                // a few negative weights exercise clamping
                let w = if rng.random::<f64>() < 0.05 {
                    -rng.random::<f64>()
                } else {
                    rng.random_range(0.01..4.0)
                };
                edges.push((a, b, w));
            }
        }
    }
    (n, edges)
}

fn louvain_correctness() -> Verdict {
    let config = ClusterConfig {
        min_group_size: 1,
        ..ClusterConfig::default()
    };
    // two disjoint triangles
    let tri: Edges = vec![
        (0, 1, 1.0),
        (1, 2, 1.0),
        (0, 2, 1.0),
        (3, 4, 1.0),
        (4, 5, 1.0),
        (3, 5, 1.0),
    ];
    let g = graph(6, &tri);
    let run = louvain_traced(&g, &singletons(&g), &config);
    let (best, best_labels) = exhaustive_best(6, &tri, 1.0);
    if run.partition.labels() != [Some(0), Some(0), Some(0), Some(1), Some(1), Some(1)] {
        return Verdict::Fail(format!("triangles partition {:?}", run.partition.labels()));
    }
    let q = modularity(&g, &run.partition);
    if q != 0.5 || best != 0.5 || !same_grouping(run.partition.labels(), &best_labels) {
        return Verdict::Fail(format!("triangles Q = {q}, exhaustive best {best}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut passes = 0;
    for i in 0..100 {
        let (n, edges) = random_graph(&mut rng);
        let g = graph(n, &edges);
        let cfg = ClusterConfig {
            rng_seed: i,
            resolution: [1.0, 0.5, 1.5][i as usize % 3],
            ..config.clone()
        };
        let seed = seed_components(&g, cfg.d_seed_threshold);
        let run = louvain_traced(&g, &seed, &cfg);
        passes += run.pass_modularity.len();
        if run.pass_modularity.windows(2).any(|w| w[1] < w[0] - 1e-12) {
            return Verdict::Fail(format!(
                "graph {i}: modularity decreased {:?}",
                run.pass_modularity
            ));
        }
        let labels: Vec<usize> = run.partition.labels().iter().map(|l| l.unwrap()).collect();
        let reference = reference_modularity(n, &edges, &labels, cfg.resolution);
        if (reference - run.modularity).abs() > 1e-9 {
            return Verdict::Fail(format!(
                "graph {i}: reported Q {} but reference {reference}",
                run.modularity
            ));
        }
        if n <= 9 {
            let (best, _) = exhaustive_best(n, &edges, cfg.resolution);
            if run.modularity > best + 1e-9 {
                return Verdict::Fail(format!(
                    "graph {i}: Q {} above exhaustive optimum {best}",
                    run.modularity
                ));
            }
        }
        let again = louvain_traced(&g, &seed, &cfg);
        if again.partition != run.partition || again.moves != run.moves {
            return Verdict::Fail(format!("graph {i}: same seed, different result"));
        }
    }
    Verdict::Pass(format!(
        "triangles Q = 0.5 (exhaustive optimum over {} partitions); 100 random graphs, {passes} passes, Q non-decreasing, reproducible",
        all_partitions(6).len()
    ))
}

// -------------------------------------------------------------------------
// similarity

fn set(items: &[&str]) -> BTreeSet<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn similarity_formulas() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let vocab: Vec<String> = (0..12).map(|i| format!("t{i}")).collect();
    for _ in 0..2000 {
        let a: BTreeSet<String> = vocab
            .iter()
            .filter(|_| rng.random::<f64>() < 0.4)
            .cloned()
            .collect();
        let b: BTreeSet<String> = vocab
            .iter()
            .filter(|_| rng.random::<f64>() < 0.4)
            .cloned()
            .collect();
        let e = entity_share_ratio(&a, &b);
        let brute = if a.is_empty() || b.is_empty() {
            0.0
        } else {
            a.intersection(&b).count() as f64 / a.len().min(b.len()) as f64
        };
        if !(0.0..=1.0).contains(&e) || e != entity_share_ratio(&b, &a) || e != brute {
            return Verdict::Fail(format!("e({a:?}, {b:?}) = {e}, expected {brute}"));
        }
        if !a.is_empty() && entity_share_ratio(&a, &a) != 1.0 {
            return Verdict::Fail("identity is not 1".into());
        }
    }
    if entity_share_ratio(&set(&["a", "b"]), &set(&["c"])) != 0.0 {
        return Verdict::Fail("disjoint sets are not 0".into());
    }
    let general =
        |d, e| pair_similarity(&PairFeatures { d, e, b: None }, WeightFormula::General).unwrap();
    let e3c =
        |d, e, b| pair_similarity(&PairFeatures { d, e, b: Some(b) }, WeightFormula::E3c).unwrap();
    let spots = [
        (general(1.0, 1.0), 4.0),
        (general(0.5, 0.25), 1.75),
        (general(0.0, 0.0), 0.0),
        (e3c(1.0, 1.0, 1.0), 4.0),
        (e3c(0.5, 0.5, 0.0), 1.75),
        (e3c(0.2, 0.0, 1.0), 1.1),
    ];
    for (i, (got, want)) in spots.iter().enumerate() {
        if (got - want).abs() > 1e-12 {
            return Verdict::Fail(format!("spot check {i}: {got} != {want}"));
        }
    }
    for step in 0..100 {
        let d = step as f64 / 100.0;
        let (lo, hi) = (step as f64 / 200.0, step as f64 / 200.0 + 0.01);
        if general(d, lo) > general(d, hi) || e3c(d, lo, 0.3) > e3c(d, hi, 0.3) {
            return Verdict::Fail("s is not monotone in e".into());
        }
    }
    if pair_similarity(
        &PairFeatures {
            d: 1.0,
            e: 1.0,
            b: None,
        },
        WeightFormula::E3c,
    )
    .is_ok()
    {
        return Verdict::Fail("E3C formula accepted a missing body-part ratio".into());
    }

    // end to end
    let tmp = tempfile::tempdir().unwrap();
    let mut outs = Vec::new();
    for run in ["first", "second"] {
        let mut c = RunConfig::load(&fixture("e2e3").join("run.toml")).unwrap();
        c.output = tmp.path().join(run);
        match run_pipeline(&c) {
            Ok(p) => outs.push(tree(&p)),
            Err(e) => return Verdict::Fail(format!("fixture run failed: {e}")),
        }
    }
    if outs[0] != outs[1] {
        let differing: Vec<&String> = outs[0]
            .keys()
            .filter(|k| outs[0].get(*k) != outs[1].get(*k))
            .collect();
        return Verdict::Fail(format!("end-to-end output differs in {differing:?}"));
    }
    Verdict::Pass(format!(
        "e property suite (2000 random pairs), 6 spot checks, monotone in e; 3-document run byte-identical across {} files",
        outs[0].len()
    ))
}

// -------------------------------------------------------------------------
// history mapping

fn history_table() -> Verdict {
    let mut i = 0;
    let mut checked = 0;
    for p in [Polarity::Positive, Polarity::Negative] {
        for m in [
            Modality::Actual,
            Modality::Hypothetical,
            Modality::Hedged,
            Modality::Missing,
        ] {
            for perm in [
                Permanence::Permanent,
                Permanence::Finite,
                Permanence::Missing,
            ] {
                let got = render_history_value(&AttributeSet::new(p, m, perm));
                if got != HISTORY_ANSWERS[i] {
                    return Verdict::Fail(format!(
                        "{p:?}/{m:?}/{perm:?} renders {got:?}, expected {:?}",
                        HISTORY_ANSWERS[i]
                    ));
                }
                i += 1;
                checked += 1;
            }
        }
    }
    // a missing polarity renders like a positive one
    for m in [Modality::Actual, Modality::Missing] {
        for perm in [Permanence::Permanent, Permanence::Missing] {
            let missing = render_history_value(&AttributeSet::new(Polarity::Missing, m, perm));
            let positive = render_history_value(&AttributeSet::new(Polarity::Positive, m, perm));
            if missing != positive {
                return Verdict::Fail(format!("missing polarity renders {missing:?}"));
            }
        }
    }
    let inventory: BTreeSet<String> = answer_inventory().into_iter().collect();
    let expected: BTreeSet<String> = HISTORY_ANSWERS.iter().map(|s| s.to_string()).collect();
    if inventory != expected {
        return Verdict::Fail("emitted inventory differs from the table".into());
    }
    // fixture output is drawn from the inventory
    let tmp = tempfile::tempdir().unwrap();
    let mut c = RunConfig::load(&fixture("mini").join("run.toml")).unwrap();
    c.output = tmp.path().join("out");
    let out = run_pipeline(&c).unwrap();
    let p = Pipeline::new(c, out).unwrap();
    if let Err(v) = history_values_in_inventory(&p.load_filled().unwrap(), &inventory) {
        return Verdict::Fail(format!("fixture history value {v:?} not in inventory"));
    }
    Verdict::Pass(format!(
        "{checked} attribute combinations match the table; inventory has {} answers",
        inventory.len()
    ))
}

fn history_values_in_inventory(
    filled: &[FilledCrf],
    inventory: &BTreeSet<String>,
) -> Result<usize, String> {
    let mut n = 0;
    for f in filled {
        for (item, value) in &f.values {
            if !item.starts_with("HISTORY:") || value == NA {
                continue;
            }
            for part in value.split(SEPARATOR).map(str::trim) {
                if !inventory.contains(part) {
                    return Err(part.to_string());
                }
                n += 1;
            }
        }
    }
    Ok(n)
}

// -------------------------------------------------------------------------
// data-dependent criteria

struct LanguageRun {
    filled: Vec<FilledCrf>,
    splits: BTreeMap<String, crfforge::corpus::Split>,
    report: ScoreReport,
    baseline_time: Duration,
}

fn data_config(lang: &str) -> Option<PathBuf> {
    let dir = std::env::var_os(DATA_ENV)?;
    let p = Path::new(&dir).join(format!("{lang}.toml"));
    p.is_file().then_some(p)
}

fn language_run(lang: &'static str) -> Result<&'static LanguageRun, String> {
    static EN: OnceLock<Result<LanguageRun, String>> = OnceLock::new();
    static IT: OnceLock<Result<LanguageRun, String>> = OnceLock::new();
    let cell = if lang == "en" { &EN } else { &IT };
    cell.get_or_init(|| {
        let path = data_config(lang)
            .ok_or_else(|| format!("blocked: ${DATA_ENV}/{lang}.toml not available"))?;
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut c = RunConfig::load(&path).map_err(|e| e.to_string())?;
        c.output = tmp.path().join("out");
        let out = run_pipeline(&c).map_err(|e| e.to_string())?;
        let p = Pipeline::new(c, out).map_err(|e| e.to_string())?;
        let started = Instant::now();
        let preds = p
            .baseline(&BaselineConfig::default())
            .map_err(|e| e.to_string())?;
        let filled = p.load_filled().map_err(|e| e.to_string())?;
        let config = ScoreConfig {
            mode: HistoryMode::Simplified,
            ..ScoreConfig::default()
        };
        let report = score(&filled, &preds, &config).map_err(|e| e.to_string())?;
        let baseline_time = started.elapsed();
        let splits = p
            .load_corpus()
            .map_err(|e| e.to_string())?
            .iter()
            .map(|d| (d.id.clone(), d.split))
            .collect();
        Ok(LanguageRun {
            filled,
            splits,
            report,
            baseline_time,
        })
    })
    .as_ref()
    .map_err(Clone::clone)
}

fn from_run<T>(lang: &'static str, f: impl FnOnce(&LanguageRun) -> T) -> Result<T, Verdict> {
    match language_run(lang) {
        Ok(r) => Ok(f(r)),
        Err(e) if e.starts_with("blocked") => Err(Verdict::Blocked(e)),
        Err(e) => Err(Verdict::Fail(e)),
    }
}

const PUBLISHED_EN: [(Section, f64, f64, f64); 3] = [
    (Section::Diagnosis, 84.6, 53.7, 65.7),
    (Section::History, 87.5, 13.2, 23.0),
    (Section::Exams, 0.0, 0.0, 0.0),
];
const PUBLISHED_IT_F1: [(Section, f64); 3] = [
    (Section::Diagnosis, 61.5),
    (Section::History, 20.4),
    (Section::Exams, 12.0),
];
const MICRO_COLUMN: [(&str, f64); 2] = [("it", 31.3), ("en", 29.6)];

fn tolerance(s: Section) -> f64 {
    if s == Section::Exams {
        5.0
    } else {
        1.0
    }
}

fn baseline_reproduction() -> Verdict {
    let mut notes = Vec::new();
    for (lang, targets) in [
        (
            "en",
            PUBLISHED_EN
                .iter()
                .map(|(s, _, _, f)| (*s, *f))
                .collect::<Vec<_>>(),
        ),
        ("it", PUBLISHED_IT_F1.to_vec()),
    ] {
        let checked = from_run(lang, |r| {
            let mut misses = Vec::new();
            for (s, want) in &targets {
                let got = r.report.tasks[s].f1;
                if (got - want).abs() > tolerance(*s) {
                    misses.push(format!("{lang} {s} F1 {got:.1} vs {want}"));
                }
            }
            if r.baseline_time > Duration::from_secs(60) {
                misses.push(format!("{lang} baseline took {:.1?}", r.baseline_time));
            }
            (misses, r.baseline_time)
        });
        match checked {
            Ok((misses, _)) if !misses.is_empty() => return Verdict::Fail(misses.join("; ")),
            Ok((_, t)) => notes.push(format!("{lang} within tolerance in {t:.1?}")),
            Err(v) => return v,
        }
    }
    Verdict::Pass(notes.join(", "))
}

fn aggregate_reconciliation() -> Verdict {
    // the published task F1s alone already determine the published column
    let published = [
        ("it", PUBLISHED_IT_F1.iter().map(|x| x.1).sum::<f64>() / 3.0),
        ("en", PUBLISHED_EN.iter().map(|x| x.3).sum::<f64>() / 3.0),
    ];
    for ((lang, mean), (_, micro)) in published.iter().zip(MICRO_COLUMN) {
        if (mean - micro).abs() > 0.2 {
            return Verdict::Fail(format!(
                "{lang}: mean of published task F1s {mean:.2} vs {micro}"
            ));
        }
    }
    let mut notes = Vec::new();
    for (lang, micro) in MICRO_COLUMN {
        match from_run(lang, |r| r.report.mean_task_f1) {
            Ok(m) if (m - micro).abs() > 0.2 => {
                return Verdict::Fail(format!("{lang} mean_task_f1 {m:.2} vs {micro}"))
            }
            Ok(m) => notes.push(format!("{lang} {m:.2}")),
            Err(Verdict::Blocked(e)) => {
                return Verdict::Blocked(format!(
                    "{e} (offline: mean of published task F1s gives {:.2} / {:.2})",
                    published[0].1, published[1].1
                ))
            }
            Err(v) => return v,
        }
    }
    Verdict::Pass(notes.join(", "))
}

fn ratio(filled: &[&FilledCrf]) -> f64 {
    let values: usize = filled.iter().map(|f| f.values.len()).sum();
    let set: usize = filled
        .iter()
        .map(|f| f.values.values().filter(|v| v.as_str() != NA).count())
        .sum();
    if values == 0 {
        0.0
    } else {
        100.0 * set as f64 / values as f64
    }
}

fn dataset_shape() -> Verdict {
    use crfforge::corpus::Split;
    let targets = [("it", 14.0, 10.0), ("en", 16.0, 11.0)];
    let mut notes = Vec::new();
    for (lang, train, test) in targets {
        let got = from_run(lang, |r| {
            let pick = |s: Split| -> Vec<&FilledCrf> {
                r.filled
                    .iter()
                    .filter(|f| r.splits.get(&f.doc_id) == Some(&s))
                    .collect()
            };
            (ratio(&pick(Split::Train)), ratio(&pick(Split::Test)))
        });
        match got {
            Ok((tr, te)) if (tr - train).abs() > 2.0 || (te - test).abs() > 2.0 => {
                return Verdict::Fail(format!(
                    "{lang}: train {tr:.1}% vs {train}%, test {te:.1}% vs {test}%"
                ))
            }
            Ok((tr, te)) => notes.push(format!("{lang} train {tr:.1}% test {te:.1}%")),
            Err(v) => return v,
        }
    }
    Verdict::Pass(notes.join(", "))
}

fn e3c_inventory_membership() -> Verdict {
    let inventory: BTreeSet<String> = answer_inventory().into_iter().collect();
    let mut n = 0;
    for lang in ["en", "it"] {
        match from_run(lang, |r| history_values_in_inventory(&r.filled, &inventory)) {
            Ok(Ok(k)) => n += k,
            Ok(Err(v)) => return Verdict::Fail(format!("{lang}: {v:?} not in inventory")),
            Err(v) => return v,
        }
    }
    Verdict::Pass(format!("{n} gold history values, all in the inventory"))
}

type Criterion = (&'static str, fn() -> Verdict);

#[test]
fn acceptance() {
    let criteria: Vec<Criterion> = vec![
        ("baseline reproduction", baseline_reproduction),
        ("aggregate reconciliation", aggregate_reconciliation),
        ("metrics oracle", metrics_oracle),
        ("louvain correctness", louvain_correctness),
        ("similarity formulas", similarity_formulas),
        ("history mapping: table", history_table),
        (
            "history mapping: regenerated gold in inventory",
            e3c_inventory_membership,
        ),
        ("dataset shape", dataset_shape),
    ];
    let mut failed = Vec::new();
    println!();
    for (name, check) in criteria {
        match check() {
            Verdict::Pass(detail) => println!("PASS {name}: {detail}"),
            Verdict::Blocked(detail) => println!("FAIL (blocked) {name}: {detail}"),
            Verdict::Fail(detail) => {
                println!("FAIL {name}: {detail}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
