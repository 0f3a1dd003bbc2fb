//! Seeded Louvain community detection over a [`SimilarityGraph`].
//!
//! Seeds are the connected components of the subgraph of edges whose
//! diagnosis similarity `d` reaches a threshold. Louvain then alternates
//! local node moves with community aggregation, starting from that seed.
//! Negative combined weights are clamped to zero before clustering.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simgraph::SimilarityGraph;

/// Minimum modularity gain for a move to be accepted.
pub const MOVE_TOLERANCE: f64 = 1e-9;
const MAX_LEVELS: usize = 64;
const MAX_PASSES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub d_seed_threshold: f64,
    pub resolution: f64,
    pub rng_seed: u64,
    pub min_group_size: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            d_seed_threshold: 0.8,
            resolution: 1.0,
            rng_seed: 0,
            min_group_size: 2,
        }
    }
}

/// Group assignment for every graph node. Group ids are dense, numbered by
/// first appearance in node order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Partition {
    nodes: Vec<String>,
    labels: Vec<Option<usize>>,
}

impl Partition {
    pub fn new(nodes: Vec<String>, labels: Vec<Option<usize>>) -> Self {
        assert_eq!(nodes.len(), labels.len(), "one label per node");
        let mut remap: HashMap<usize, usize> = HashMap::new();
        let labels = labels
            .into_iter()
            .map(|l| {
                l.map(|g| {
                    let next = remap.len();
                    *remap.entry(g).or_insert(next)
                })
            })
            .collect();
        Self { nodes, labels }
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    /// `None` when the node is unknown, `Some(None)` when unassigned.
    pub fn group_of(&self, node: &str) -> Option<Option<usize>> {
        self.nodes
            .iter()
            .position(|n| n == node)
            .map(|i| self.labels[i])
    }

    pub fn num_groups(&self) -> usize {
        self.labels.iter().flatten().max().map_or(0, |m| m + 1)
    }

    /// Members of each group, in node order.
    pub fn groups(&self) -> Vec<Vec<String>> {
        let mut out = vec![Vec::new(); self.num_groups()];
        for (n, l) in self.nodes.iter().zip(&self.labels) {
            if let Some(g) = l {
                out[*g].push(n.clone());
            }
        }
        out
    }

    pub fn unassigned(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .zip(&self.labels)
            .filter(|(_, l)| l.is_none())
            .map(|(n, _)| n.as_str())
            .collect()
    }

    pub fn assignment(&self) -> BTreeMap<&str, Option<usize>> {
        self.nodes
            .iter()
            .map(String::as_str)
            .zip(self.labels.iter().copied())
            .collect()
    }

    pub fn to_tsv(&self, meta: &BTreeMap<String, String>) -> String {
        let mut out = String::new();
        for (k, v) in meta {
            let _ = writeln!(out, "# {k}={v}");
        }
        for (n, l) in self.nodes.iter().zip(&self.labels) {
            match l {
                Some(g) => {
                    let _ = writeln!(out, "{n}\t{g}");
                }
                None => {
                    let _ = writeln!(out, "{n}\tUNASSIGNED");
                }
            }
        }
        out
    }

    pub fn from_tsv(
        content: &str,
    ) -> Result<(Self, BTreeMap<String, String>), PartitionParseError> {
        let mut meta = BTreeMap::new();
        let mut nodes = Vec::new();
        let mut labels = Vec::new();
        for (i, line) in content.lines().enumerate() {
            let err = |m: &str| PartitionParseError {
                line: i + 1,
                message: m.to_string(),
            };
            if let Some(h) = line.strip_prefix("# ") {
                let (k, v) = h.split_once('=').ok_or_else(|| err("bad header"))?;
                meta.insert(k.to_string(), v.to_string());
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let (id, g) = line
                .split_once('\t')
                .ok_or_else(|| err("expected two columns"))?;
            nodes.push(id.to_string());
            labels.push(match g {
                "UNASSIGNED" => None,
                g => Some(
                    g.parse()
                        .map_err(|_| err("group id must be an integer or UNASSIGNED"))?,
                ),
            });
        }
        Ok((Partition::new(nodes, labels), meta))
    }
}

#[derive(Debug, Error)]
#[error("partition line {line}: {message}")]
pub struct PartitionParseError {
    pub line: usize,
    pub message: String,
}

/// Undirected weighted graph over node indices with optional self-loops.
#[derive(Debug, Clone)]
struct WeightedGraph {
    adj: Vec<Vec<(usize, f64)>>,
    self_loops: Vec<f64>,
    degree: Vec<f64>,
    total: f64,
}

impl WeightedGraph {
    fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Self {
        let mut adj: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        let mut self_loops = vec![0.0; n];
        for (a, b, w) in edges {
            if w <= 0.0 {
                continue;
            }
            if a == b {
                self_loops[a] += w;
            } else {
                *adj[a].entry(b).or_default() += w;
                *adj[b].entry(a).or_default() += w;
            }
        }
        let adj: Vec<Vec<(usize, f64)>> =
            adj.into_iter().map(|m| m.into_iter().collect()).collect();
        let degree: Vec<f64> = adj
            .iter()
            .zip(&self_loops)
            .map(|(nbrs, sl)| nbrs.iter().map(|(_, w)| w).sum::<f64>() + 2.0 * sl)
            .collect();
        let total = degree.iter().sum::<f64>() / 2.0;
        Self {
            adj,
            self_loops,
            degree,
            total,
        }
    }

    fn from_similarity(graph: &SimilarityGraph) -> Self {
        let index = graph.node_index();
        Self::from_edges(
            graph.nodes.len(),
            graph
                .edges
                .iter()
                .map(|e| (index[e.a.as_str()], index[e.b.as_str()], e.s.max(0.0))),
        )
    }

    fn len(&self) -> usize {
        self.adj.len()
    }

    fn modularity(&self, labels: &[usize], resolution: f64) -> f64 {
        if self.total <= 0.0 {
            return 0.0;
        }
        let mut intra: HashMap<usize, f64> = HashMap::new();
        let mut strength: HashMap<usize, f64> = HashMap::new();
        for i in 0..self.len() {
            let c = labels[i];
            *strength.entry(c).or_default() += self.degree[i];
            *intra.entry(c).or_default() += self.self_loops[i];
            for &(j, w) in &self.adj[i] {
                if j > i && labels[j] == c {
                    *intra.entry(c).or_default() += w;
                }
            }
        }
        let w = self.total;
        strength
            .iter()
            .map(|(c, s)| {
                intra.get(c).copied().unwrap_or(0.0) / w - resolution * (s / (2.0 * w)).powi(2)
            })
            .sum()
    }

    fn aggregate(&self, labels: &[usize], groups: usize) -> Self {
        let mut edges = Vec::new();
        for i in 0..self.len() {
            edges.push((labels[i], labels[i], self.self_loops[i]));
            for &(j, w) in &self.adj[i] {
                if j > i {
                    edges.push((labels[i], labels[j], w));
                }
            }
        }
        Self::from_edges(groups, edges)
    }
}

/// Labels with unassigned nodes turned into singletons.
fn dense_labels(partition: &Partition) -> Vec<usize> {
    let mut next = partition.num_groups();
    partition
        .labels
        .iter()
        .map(|l| {
            l.unwrap_or_else(|| {
                next += 1;
                next - 1
            })
        })
        .collect()
}

/// Weighted modularity `Σ_c [W_c/W − (S_c/2W)²]` over non-negative weights.
/// Unassigned nodes count as singleton communities; an edgeless graph has Q = 0.
pub fn modularity(graph: &SimilarityGraph, partition: &Partition) -> f64 {
    let wg = WeightedGraph::from_similarity(graph);
    let by_node: HashMap<&str, usize> = partition
        .nodes
        .iter()
        .map(String::as_str)
        .zip(dense_labels(partition))
        .collect();
    let mut next = by_node.values().max().map_or(0, |m| m + 1);
    let labels: Vec<usize> = graph
        .nodes
        .iter()
        .map(|n| {
            by_node.get(n.as_str()).copied().unwrap_or_else(|| {
                next += 1;
                next - 1
            })
        })
        .collect();
    wg.modularity(&labels, 1.0)
}

/// Connected components over edges with `d >= threshold`.
pub fn seed_components(graph: &SimilarityGraph, threshold: f64) -> Partition {
    let n = graph.nodes.len();
    let index = graph.node_index();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for e in &graph.edges {
        if e.features.d >= threshold {
            let (a, b) = (index[e.a.as_str()], index[e.b.as_str()]);
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
    }
    let labels = (0..n).map(|i| Some(find(&mut parent, i))).collect();
    Partition::new(graph.nodes.clone(), labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoveRecord {
    pub level: usize,
    /// Node index in the level's (possibly aggregated) graph.
    pub node: usize,
    pub from: usize,
    pub to: usize,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LouvainRun {
    pub partition: Partition,
    /// Modularity (at the configured resolution) after each local-move pass.
    pub pass_modularity: Vec<f64>,
    pub moves: Vec<MoveRecord>,
    /// Modularity of the final grouping before small groups were unassigned.
    pub modularity: f64,
}

pub fn louvain(graph: &SimilarityGraph, seed: &Partition, config: &ClusterConfig) -> Partition {
    louvain_traced(graph, seed, config).partition
}

/// Louvain with its pass and move log.
pub fn louvain_traced(
    graph: &SimilarityGraph,
    seed: &Partition,
    config: &ClusterConfig,
) -> LouvainRun {
    let n = graph.nodes.len();
    let gamma = config.resolution;
    let mut level_graph = WeightedGraph::from_similarity(graph);
    let w = level_graph.total;

    let seed_by_node: HashMap<&str, Option<usize>> = seed
        .nodes
        .iter()
        .map(String::as_str)
        .zip(seed.labels.iter().copied())
        .collect();
    let seed_partition = Partition::new(
        graph.nodes.clone(),
        graph
            .nodes
            .iter()
            .map(|id| seed_by_node.get(id.as_str()).copied().flatten())
            .collect(),
    );

    let mut comm = dense_labels(&seed_partition);
    // original node -> node of the current level graph
    let mut node_of: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut pass_modularity = Vec::new();
    let mut moves = Vec::new();

    for level in 0..MAX_LEVELS {
        let m = level_graph.len();
        if m == 0 || w <= 0.0 {
            break;
        }
        let started_singleton = {
            let mut seen = vec![false; m];
            comm.iter().all(|&c| !std::mem::replace(&mut seen[c], true))
        };
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);

        let mut tot = vec![0.0; m];
        let mut size = vec![0usize; m];
        for i in 0..m {
            tot[comm[i]] += level_graph.degree[i];
            size[comm[i]] += 1;
        }

        let mut level_moved = false;
        for _ in 0..MAX_PASSES {
            let mut moved = false;
            for &i in &order {
                let ci = comm[i];
                let ki = level_graph.degree[i];
                let mut links: BTreeMap<usize, f64> = BTreeMap::new();
                for &(j, wij) in &level_graph.adj[i] {
                    *links.entry(comm[j]).or_default() += wij;
                }
                tot[ci] -= ki;
                size[ci] -= 1;
                let gain = |c: usize, link: f64, tot: &[f64]| {
                    link / w - gamma * tot[c] * ki / (2.0 * w * w)
                };
                let stay = gain(ci, links.get(&ci).copied().unwrap_or(0.0), &tot);

                let mut candidates: Vec<(usize, f64)> = links
                    .iter()
                    .filter(|(c, _)| **c != ci)
                    .map(|(&c, &l)| (c, gain(c, l, &tot)))
                    .collect();
                if size[ci] > 0 {
                    if let Some(empty) = size.iter().position(|&s| s == 0) {
                        candidates.push((empty, 0.0));
                    }
                }
                candidates.sort_by_key(|(c, _)| *c);

                let mut best: Option<(usize, f64)> = None;
                for (c, g) in candidates {
                    if best.is_none_or(|(_, bg)| g > bg + 1e-15) {
                        best = Some((c, g));
                    }
                }
                let target = match best {
                    Some((c, g)) if g - stay > MOVE_TOLERANCE => {
                        moves.push(MoveRecord {
                            level,
                            node: i,
                            from: ci,
                            to: c,
                            gain: g - stay,
                        });
                        moved = true;
                        c
                    }
                    _ => ci,
                };
                comm[i] = target;
                tot[target] += ki;
                size[target] += 1;
            }
            pass_modularity.push(level_graph.modularity(&comm, gamma));
            level_moved |= moved;
            if !moved {
                break;
            }
        }

        if !level_moved && started_singleton {
            break;
        }
        // relabel densely in first-seen order and aggregate
        let mut remap: HashMap<usize, usize> = HashMap::new();
        let dense: Vec<usize> = comm
            .iter()
            .map(|c| {
                let next = remap.len();
                *remap.entry(*c).or_insert(next)
            })
            .collect();
        for v in node_of.iter_mut() {
            *v = dense[*v];
        }
        level_graph = level_graph.aggregate(&dense, remap.len());
        comm = (0..remap.len()).collect();
    }

    let final_labels: Vec<usize> = node_of.iter().map(|&v| comm[v]).collect();
    let modularity = WeightedGraph::from_similarity(graph).modularity(&final_labels, gamma);
    let mut sizes: HashMap<usize, usize> = HashMap::new();
    for &l in &final_labels {
        *sizes.entry(l).or_default() += 1;
    }
    let labels = final_labels
        .iter()
        .map(|l| (sizes[l] >= config.min_group_size).then_some(*l))
        .collect();
    LouvainRun {
        partition: Partition::new(graph.nodes.clone(), labels),
        pass_modularity,
        moves,
        modularity,
    }
}

#[cfg(test)]
pub(crate) mod test_graphs {
    use crate::simgraph::{Edge, PairFeatures, SimilarityGraph, WeightFormula};

    pub fn graph(n: usize, edges: &[(usize, usize, f64, f64)]) -> SimilarityGraph {
        SimilarityGraph {
            nodes: (0..n).map(|i| format!("n{i}")).collect(),
            edges: edges
                .iter()
                .map(|&(a, b, d, s)| Edge {
                    a: format!("n{a}"),
                    b: format!("n{b}"),
                    features: PairFeatures { d, e: 0.0, b: None },
                    s,
                })
                .collect(),
            weight_formula: WeightFormula::General,
            pairs_evaluated: n * n.saturating_sub(1) / 2,
        }
    }

    pub fn two_triangles() -> SimilarityGraph {
        graph(
            6,
            &[
                (0, 1, 0.0, 1.0),
                (1, 2, 0.0, 1.0),
                (0, 2, 0.0, 1.0),
                (3, 4, 0.0, 1.0),
                (4, 5, 0.0, 1.0),
                (3, 5, 0.0, 1.0),
            ],
        )
    }
}
