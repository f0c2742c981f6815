//! Deterministic generators of (query, {graphs}, answer) problems with
//! exact brute-force label oracles.
//!
//! Three families: per-task monochromatic-edge detection on a single graph,
//! shared colored-edge-motif detection on a graph pair, and type-1-path
//! detection with decoy relations. Node features are one-hot colors.

use crate::graph::{AttributedGraph, DatasetInstance, DatasetSchema, Edge, Query};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("task spec: {0}")]
    Config(String),
    #[error("instance {instance}: could not hit label {desired} within {tries} tries")]
    Infeasible {
        instance: usize,
        desired: usize,
        tries: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    /// One graph; query is a task index k; label 1 iff some edge joins two
    /// color-k nodes.
    SingleGraphMultitask,
    /// Two graphs; label 1 iff they share an edge color-pair motif.
    GraphPairInteraction,
    /// One graph with decoy relations; label 1 iff a type-1 path of length
    /// 2 connects two distinct same-colored nodes.
    RelationTypeSensitivity,
}

impl TaskFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskFamily::SingleGraphMultitask => "multitask",
            TaskFamily::GraphPairInteraction => "pair",
            TaskFamily::RelationTypeSensitivity => "relation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "multitask" => Some(TaskFamily::SingleGraphMultitask),
            "pair" => Some(TaskFamily::GraphPairInteraction),
            "relation" => Some(TaskFamily::RelationTypeSensitivity),
            _ => None,
        }
    }
}

/// Generation parameters; identical (spec, seed) means identical output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: TaskFamily,
    pub nodes_min: usize,
    pub nodes_max: usize,
    /// Color/feature alphabet size; also the task count for the multitask
    /// family.
    pub alphabet: usize,
    pub relations: usize,
    pub positive_rate: f64,
    pub instances: usize,
    pub seed: u64,
    /// Pair family only: emit a dense color-histogram query instead of a
    /// constant token.
    #[serde(default)]
    pub side_info: bool,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.nodes_min < 2 || self.nodes_max < self.nodes_min {
            return Err(SynthError::Config(format!(
                "node count range {}..{} invalid (min >= 2)",
                self.nodes_min, self.nodes_max
            )));
        }
        if self.alphabet < 2 {
            return Err(SynthError::Config("alphabet must be >= 2".into()));
        }
        if self.instances == 0 {
            return Err(SynthError::Config("instance count must be >= 1".into()));
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return Err(SynthError::Config(format!(
                "positive rate {} outside (0, 1)",
                self.positive_rate
            )));
        }
        let min_relations = match self.family {
            TaskFamily::RelationTypeSensitivity => 2,
            _ => 1,
        };
        if self.relations < min_relations {
            return Err(SynthError::Config(format!(
                "family {} needs at least {} relation types",
                self.family.as_str(),
                min_relations
            )));
        }
        if self.side_info && self.family != TaskFamily::GraphPairInteraction {
            return Err(SynthError::Config(
                "side-information queries only apply to the pair family".into(),
            ));
        }
        Ok(())
    }

    /// Dataset header implied by this spec.
    pub fn schema(&self) -> DatasetSchema {
        let (tasks, query_dim) = match self.family {
            TaskFamily::SingleGraphMultitask => (self.alphabet, 0),
            TaskFamily::GraphPairInteraction if self.side_info => (0, 2 * self.alphabet),
            _ => (1, 0),
        };
        DatasetSchema {
            d_x: self.alphabet,
            relations: self.relations,
            classes: 2,
            tasks,
            query_dim,
        }
    }

    fn graphs_per_instance(&self) -> usize {
        match self.family {
            TaskFamily::GraphPairInteraction => 2,
            _ => 1,
        }
    }

    fn mean_degree(&self) -> f64 {
        match self.family {
            TaskFamily::SingleGraphMultitask => 2.2,
            TaskFamily::GraphPairInteraction => 1.6,
            TaskFamily::RelationTypeSensitivity => 2.6,
        }
    }
}

const REJECTION_TRIES: usize = 5000;

fn one_hot(color: usize, alphabet: usize) -> Vec<f64> {
    let mut f = vec![0.0; alphabet];
    f[color] = 1.0;
    f
}

fn color_of(features: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in features.iter().enumerate() {
        if *v > features[best] {
            best = i;
        }
    }
    best
}

fn sample_graph(spec: &TaskSpec, rng: &mut ChaCha20Rng) -> AttributedGraph {
    let m = rng.gen_range(spec.nodes_min..=spec.nodes_max);
    let nodes: Vec<Vec<f64>> = (0..m)
        .map(|_| one_hot(rng.gen_range(0..spec.alphabet), spec.alphabet))
        .collect();
    let p = (spec.mean_degree() / (m - 1) as f64).min(1.0);
    let mut edges = Vec::new();
    for i in 0..m {
        for j in (i + 1)..m {
            if rng.gen::<f64>() < p {
                edges.push(Edge {
                    r: rng.gen_range(1..=spec.relations),
                    i,
                    j,
                    directed: false,
                    feat: None,
                });
            }
        }
    }
    AttributedGraph { nodes, edges }
}

fn sample_query(spec: &TaskSpec, graphs: &[AttributedGraph], rng: &mut ChaCha20Rng) -> Query {
    match spec.family {
        TaskFamily::SingleGraphMultitask => Query::Task(rng.gen_range(0..spec.alphabet)),
        TaskFamily::GraphPairInteraction if spec.side_info => {
            // normalized color histogram of each graph, concatenated
            let mut v = Vec::with_capacity(2 * spec.alphabet);
            for g in graphs {
                let mut hist = vec![0.0; spec.alphabet];
                for n in &g.nodes {
                    hist[color_of(n)] += 1.0;
                }
                let total = g.nodes.len() as f64;
                v.extend(hist.into_iter().map(|c| c / total));
            }
            Query::Dense(v)
        }
        _ => Query::Task(0),
    }
}

/// Exhaustive label computation, independent of generation bookkeeping.
/// Edges are read as undirected connections; self-loops are ignored.
pub fn oracle_label(family: TaskFamily, graphs: &[AttributedGraph], query: &Query) -> usize {
    match family {
        TaskFamily::SingleGraphMultitask => {
            let k = match query {
                Query::Task(k) => *k,
                Query::Dense(_) => panic!("multitask oracle needs a task index query"),
            };
            let g = &graphs[0];
            let hit = g.edges.iter().any(|e| {
                e.i != e.j && color_of(&g.nodes[e.i]) == k && color_of(&g.nodes[e.j]) == k
            });
            usize::from(hit)
        }
        TaskFamily::GraphPairInteraction => {
            let motifs = |g: &AttributedGraph| {
                let mut set = std::collections::BTreeSet::new();
                for e in &g.edges {
                    if e.i == e.j {
                        continue;
                    }
                    let a = color_of(&g.nodes[e.i]);
                    let b = color_of(&g.nodes[e.j]);
                    set.insert((a.min(b), a.max(b)));
                }
                set
            };
            let a = motifs(&graphs[0]);
            let b = motifs(&graphs[1]);
            usize::from(a.intersection(&b).next().is_some())
        }
        TaskFamily::RelationTypeSensitivity => {
            let g = &graphs[0];
            let m = g.nodes.len();
            let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); m];
            for e in &g.edges {
                if e.r != 1 || e.i == e.j {
                    continue;
                }
                neighbors[e.i].push(e.j);
                neighbors[e.j].push(e.i);
            }
            for mid in 0..m {
                let n = &neighbors[mid];
                for (x, &a) in n.iter().enumerate() {
                    for &c in &n[x + 1..] {
                        if a != c && color_of(&g.nodes[a]) == color_of(&g.nodes[c]) {
                            return 1;
                        }
                    }
                }
            }
            0
        }
    }
}

/// Generates a dataset whose labels all come from [`oracle_label`], with
/// the class balance pinned to the target rate by rejection sampling.
pub fn generate(spec: &TaskSpec) -> Result<(DatasetSchema, Vec<DatasetInstance>), SynthError> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let positives = ((spec.instances as f64) * spec.positive_rate).round() as usize;
    let mut desired: Vec<usize> = (0..spec.instances)
        .map(|i| usize::from(i < positives))
        .collect();
    desired.shuffle(&mut rng);

    let mut out = Vec::with_capacity(spec.instances);
    for (idx, want) in desired.into_iter().enumerate() {
        let mut found = None;
        for _ in 0..REJECTION_TRIES {
            let graphs: Vec<AttributedGraph> = (0..spec.graphs_per_instance())
                .map(|_| sample_graph(spec, &mut rng))
                .collect();
            let query = sample_query(spec, &graphs, &mut rng);
            let label = oracle_label(spec.family, &graphs, &query);
            if label == want {
                found = Some(DatasetInstance {
                    query,
                    graphs,
                    label,
                });
                break;
            }
        }
        match found {
            Some(inst) => out.push(inst),
            None => {
                return Err(SynthError::Infeasible {
                    instance: idx,
                    desired: want,
                    tries: REJECTION_TRIES,
                })
            }
        }
    }
    Ok((spec.schema(), out))
}
