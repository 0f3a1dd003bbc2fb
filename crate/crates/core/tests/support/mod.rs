//! Independent reference implementations used as test oracles. Nothing here
//! calls into the scoring or clustering code under test.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn fixture(name: &str) -> PathBuf {
    workspace_root().join("fixtures").join(name)
}

/// Every history answer, one literal string per attribute combination.
/// Order: polarity yes/no, then modality actual/hypothetical/hedged/missing,
/// then permanence permanent/finite/missing.
pub const HISTORY_ANSWERS: [&str; 24] = [
    "Certainly yes, chronic",
    "Certainly yes, certainly not chronic",
    "Certainly yes, possibly chronic",
    "Possibly yes, chronic",
    "Possibly yes, certainly not chronic",
    "Possibly yes, possibly chronic",
    "Probably yes, chronic",
    "Probably yes, certainly not chronic",
    "Probably yes, possibly chronic",
    "Yes, chronic",
    "Yes, certainly not chronic",
    "Yes, possibly chronic",
    "Certainly no, chronic",
    "Certainly no, certainly not chronic",
    "Certainly no, possibly chronic",
    "Possibly no, chronic",
    "Possibly no, certainly not chronic",
    "Possibly no, possibly chronic",
    "Probably no, chronic",
    "Probably no, certainly not chronic",
    "Probably no, possibly chronic",
    "No, chronic",
    "No, certainly not chronic",
    "No, possibly chronic",
];

pub const SEPARATOR: &str = "[\\MULTI_ANSWER]";
pub const NA: &str = "not available";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Task {
    Diagnosis,
    History,
    Exams,
}

impl Task {
    pub fn prefix(self) -> &'static str {
        match self {
            Task::Diagnosis => "DIAGNOSIS",
            Task::History => "HISTORY",
            Task::Exams => "EXAMS",
        }
    }
}

fn quote(c: char) -> bool {
    "\"'`\u{201c}\u{201d}\u{2018}\u{2019}".contains(c)
}

fn closing(c: char) -> bool {
    quote(c) || c.is_whitespace() || ".,;:!?".contains(c)
}

/// Answer cleanup, written char by char.
pub fn reference_normalize(raw: &str) -> String {
    let chars: Vec<char> = raw.chars().collect();
    let (mut lo, mut hi) = (0, chars.len());
    loop {
        let (l0, h0) = (lo, hi);
        while lo < hi && (chars[lo].is_whitespace() || quote(chars[lo])) {
            lo += 1;
        }
        while hi > lo && closing(chars[hi - 1]) {
            hi -= 1;
        }
        if (lo, hi) == (l0, h0) {
            break;
        }
    }
    let s: String = chars[lo..hi].iter().collect();
    let low = s.to_lowercase();
    if low.starts_with("not available") || low.starts_with("not_available") {
        NA.to_string()
    } else {
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RefCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl RefCounts {
    pub fn f1(&self) -> f64 {
        let p = if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        };
        let r = if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        };
        if p + r == 0.0 {
            0.0
        } else {
            100.0 * 2.0 * p * r / (p + r)
        }
    }
}

/// Canonical parts of an answer; `None` on a format violation.
fn canonical(
    raw: &str,
    task: Task,
    simplified: bool,
    case_sensitive: bool,
) -> Option<BTreeSet<String>> {
    let whole = reference_normalize(raw);
    let mut out = BTreeSet::new();
    if whole.is_empty() || whole == NA {
        return Some(out);
    }
    for piece in whole.split(SEPARATOR) {
        let p = reference_normalize(piece.trim());
        if p.is_empty() || p == NA {
            continue;
        }
        let lower = p.to_lowercase();
        let c = match task {
            Task::Diagnosis => {
                if lower != "yes" && lower != "no" {
                    return None;
                }
                lower
            }
            Task::History => {
                let hit = HISTORY_ANSWERS
                    .iter()
                    .copied()
                    .chain(["yes", "no"])
                    .find(|a| a.to_lowercase() == lower)?;
                if simplified {
                    let neg =
                        hit.to_lowercase().starts_with("no") || hit.contains(" no,") || hit == "no";
                    if neg { "no" } else { "yes" }.to_string()
                } else {
                    hit.to_string()
                }
            }
            Task::Exams => {
                if case_sensitive {
                    p
                } else {
                    lower
                }
            }
        };
        out.insert(c);
    }
    Some(out)
}

/// Adds one pair to the counts.
pub fn reference_classify(
    gold: &str,
    pred: &str,
    task: Task,
    simplified: bool,
    case_sensitive: bool,
    c: &mut RefCounts,
) {
    let g = canonical(gold, task, simplified, case_sensitive).unwrap_or_default();
    let positive = |s: &BTreeSet<String>| match task {
        Task::Diagnosis => s.contains("yes"),
        _ => !s.is_empty(),
    };
    let gp = positive(&g);
    let Some(p) = canonical(pred, task, simplified, case_sensitive) else {
        c.fp += 1;
        if gp {
            c.fn_ += 1;
        }
        return;
    };
    let pp = positive(&p);
    match (gp, pp) {
        (false, false) => c.tn += 1,
        (true, false) => c.fn_ += 1,
        (false, true) => c.fp += 1,
        (true, true) => {
            if g == p {
                c.tp += 1;
            } else if g.len() > 1 && p.len() > g.len() {
                c.fp += 1;
            } else if g.len() > 1 && p.len() < g.len() {
                c.fn_ += 1;
            } else {
                c.fp += 1;
                c.fn_ += 1;
            }
        }
    }
}

/// One gold pair: (doc, task, label, gold value).
pub type GoldPair = (String, Task, String, String);

#[derive(Debug, Clone)]
pub struct RefReport {
    pub tasks: BTreeMap<Task, (RefCounts, usize)>,
    pub pooled: f64,
    pub mean: f64,
    pub weighted: f64,
}

pub fn reference_score(
    gold: &[GoldPair],
    preds: &BTreeMap<(String, String), String>,
    simplified: bool,
    case_sensitive: bool,
) -> RefReport {
    let mut tasks: BTreeMap<Task, (RefCounts, usize)> =
        [Task::Diagnosis, Task::History, Task::Exams]
            .into_iter()
            .map(|t| (t, Default::default()))
            .collect();
    for (doc, task, label, value) in gold {
        let id = format!("{}:{}", task.prefix(), label);
        let pred = preds.get(&(doc.clone(), id)).map_or(NA, String::as_str);
        let entry = tasks.get_mut(task).unwrap();
        reference_classify(value, pred, *task, simplified, case_sensitive, &mut entry.0);
        entry.1 += 1;
    }
    let mut all = RefCounts::default();
    for (c, _) in tasks.values() {
        all.tp += c.tp;
        all.fp += c.fp;
        all.fn_ += c.fn_;
        all.tn += c.tn;
    }
    let mean = tasks.values().map(|(c, _)| c.f1()).sum::<f64>() / 3.0;
    let n: usize = tasks.values().map(|(_, n)| n).sum();
    let weighted = if n == 0 {
        0.0
    } else {
        tasks.values().map(|(c, k)| c.f1() * *k as f64).sum::<f64>() / n as f64
    };
    RefReport {
        tasks,
        pooled: all.f1(),
        mean,
        weighted,
    }
}

/// Undirected weighted edge list over nodes `0..n`.
pub type Edges = Vec<(usize, usize, f64)>;

/// Newman modularity with resolution `gamma`; non-positive weights are ignored.
pub fn reference_modularity(n: usize, edges: &Edges, labels: &[usize], gamma: f64) -> f64 {
    let mut degree = vec![0.0; n];
    let mut total = 0.0;
    let mut inside: BTreeMap<usize, f64> = BTreeMap::new();
    for &(a, b, w) in edges {
        if w <= 0.0 {
            continue;
        }
        total += w;
        degree[a] += w;
        degree[b] += w;
        if labels[a] == labels[b] {
            *inside.entry(labels[a]).or_default() += w;
        }
    }
    if total == 0.0 {
        return 0.0;
    }
    let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
    for i in 0..n {
        *sums.entry(labels[i]).or_default() += degree[i];
    }
    sums.iter()
        .map(|(c, s)| {
            inside.get(c).copied().unwrap_or(0.0) / total - gamma * (s / (2.0 * total)).powi(2)
        })
        .sum()
}

/// Every set partition of `0..n` as restricted growth strings.
pub fn all_partitions(n: usize) -> Vec<Vec<usize>> {
    fn grow(prefix: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        let next = prefix.iter().max().map_or(0, |m| m + 1);
        for label in 0..=next {
            prefix.push(label);
            grow(prefix, n, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    grow(&mut Vec::new(), n, &mut out);
    out
}

/// Best modularity over all partitions, with one maximizing labeling.
pub fn exhaustive_best(n: usize, edges: &Edges, gamma: f64) -> (f64, Vec<usize>) {
    all_partitions(n)
        .into_iter()
        .map(|p| (reference_modularity(n, edges, &p, gamma), p))
        .fold((f64::NEG_INFINITY, Vec::new()), |best, cur| {
            if cur.0 > best.0 {
                cur
            } else {
                best
            }
        })
}

/// Whether two labelings induce the same grouping.
pub fn same_grouping(a: &[Option<usize>], b: &[usize]) -> bool {
    let mut fwd = BTreeMap::new();
    let mut back = BTreeMap::new();
    a.iter()
        .zip(b)
        .all(|(x, y)| *fwd.entry(*x).or_insert(*y) == *y && *back.entry(*y).or_insert(*x) == *x)
}
