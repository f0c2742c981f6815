//! Attributed multi-relational graphs, dataset records, and adjacency
//! normalization.
//!
//! Datasets are JSON Lines: a header record first, then one instance per
//! line. Graphs and normalized adjacencies are immutable after construction
//! and safe to share across readers.

use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("missing header record on the first line")]
    MissingHeader,
    #[error("instance {instance}, graph {graph}, edge {edge}: node index {index} out of range for {nodes} nodes")]
    DanglingEdge {
        instance: usize,
        graph: usize,
        edge: usize,
        index: usize,
        nodes: usize,
    },
    #[error("instance {instance}, graph {graph}, edge {edge}: relation type {relation} outside 1..={relations}")]
    UnknownRelation {
        instance: usize,
        graph: usize,
        edge: usize,
        relation: usize,
        relations: usize,
    },
    #[error("instance {instance}, graph {graph}, node {node}: feature dimension {got} != declared {expected}")]
    FeatureDim {
        instance: usize,
        graph: usize,
        node: usize,
        got: usize,
        expected: usize,
    },
    #[error("instance {instance}: graph {graph} has no nodes")]
    EmptyGraph { instance: usize, graph: usize },
    #[error("instance {instance}: no graphs")]
    NoGraphs { instance: usize },
    #[error("instance {instance}: label {label} outside class set 0..{classes}")]
    LabelRange {
        instance: usize,
        label: usize,
        classes: usize,
    },
    #[error("instance {instance}: task index {task} outside 0..{tasks}")]
    TaskRange {
        instance: usize,
        task: usize,
        tasks: usize,
    },
    #[error("instance {instance}: dense query length {got} != declared {expected}")]
    QueryDim {
        instance: usize,
        got: usize,
        expected: usize,
    },
    #[error("split fractions {0:?} must be nonnegative and sum to 1")]
    Fractions((f64, f64, f64)),
}

/// Typed, optionally-featured edge. Relation types are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub r: usize,
    pub i: usize,
    pub j: usize,
    #[serde(default)]
    pub directed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feat: Option<Vec<f64>>,
}

/// Nodes with feature vectors plus typed edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributedGraph {
    pub nodes: Vec<Vec<f64>>,
    pub edges: Vec<Edge>,
}

impl AttributedGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Node feature matrix with one column per node (`d_x x M`).
    pub fn feature_matrix(&self) -> Tensor {
        Tensor::from_columns(&self.nodes).expect("validated graph")
    }
}

/// Query part of an instance: a task index or a dense side-information vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Query {
    #[serde(rename = "task")]
    Task(usize),
    #[serde(rename = "vec")]
    Dense(Vec<f64>),
}

/// One `(query, {graphs}, answer)` record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInstance {
    pub query: Query,
    pub graphs: Vec<AttributedGraph>,
    pub label: usize,
}

/// Dataset-wide declarations carried by the header record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    /// Node feature dimension.
    pub d_x: usize,
    /// Number of relation types.
    pub relations: usize,
    /// Number of classes.
    pub classes: usize,
    /// Number of discrete tasks; 0 means dense-query mode.
    pub tasks: usize,
    /// Dense query length; 0 in discrete mode.
    #[serde(default)]
    pub query_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct HeaderRecord {
    header: DatasetSchema,
}

/// Per-relation column-normalized adjacency matrices of one graph.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    matrices: Vec<Tensor>,
}

impl NormalizedAdjacency {
    pub fn per_relation(&self) -> &[Tensor] {
        &self.matrices
    }
}

/// Column-normalizes the per-relation adjacency of a graph.
///
/// Undirected edges contribute to both orientations before normalization;
/// zero-sum columns (nodes isolated for that relation) stay zero.
pub fn normalize_adjacency(graph: &AttributedGraph, relations: usize) -> NormalizedAdjacency {
    let m = graph.node_count();
    let mut mats = vec![vec![0.0f64; m * m]; relations];
    for e in &graph.edges {
        let a = &mut mats[e.r - 1];
        a[e.i * m + e.j] += 1.0;
        if !e.directed {
            a[e.j * m + e.i] += 1.0;
        }
    }
    let matrices = mats
        .into_iter()
        .map(|mut a| {
            for j in 0..m {
                let mut col_sum = 0.0;
                for i in 0..m {
                    col_sum += a[i * m + j];
                }
                if col_sum > 0.0 {
                    for i in 0..m {
                        a[i * m + j] /= col_sum;
                    }
                }
            }
            Tensor::new(m, m, a).expect("square adjacency")
        })
        .collect();
    NormalizedAdjacency { matrices }
}

/// Validates one instance against the schema. `instance` is the 0-based
/// position used in error messages.
pub fn validate_instance(
    instance: usize,
    inst: &DatasetInstance,
    schema: &DatasetSchema,
) -> Result<(), DataError> {
    if inst.graphs.is_empty() {
        return Err(DataError::NoGraphs { instance });
    }
    for (gi, g) in inst.graphs.iter().enumerate() {
        if g.nodes.is_empty() {
            return Err(DataError::EmptyGraph {
                instance,
                graph: gi,
            });
        }
        for (ni, feat) in g.nodes.iter().enumerate() {
            if feat.len() != schema.d_x {
                return Err(DataError::FeatureDim {
                    instance,
                    graph: gi,
                    node: ni,
                    got: feat.len(),
                    expected: schema.d_x,
                });
            }
        }
        let m = g.node_count();
        for (ei, e) in g.edges.iter().enumerate() {
            if e.i >= m || e.j >= m {
                return Err(DataError::DanglingEdge {
                    instance,
                    graph: gi,
                    edge: ei,
                    index: e.i.max(e.j),
                    nodes: m,
                });
            }
            if e.r == 0 || e.r > schema.relations {
                return Err(DataError::UnknownRelation {
                    instance,
                    graph: gi,
                    edge: ei,
                    relation: e.r,
                    relations: schema.relations,
                });
            }
        }
    }
    if inst.label >= schema.classes {
        return Err(DataError::LabelRange {
            instance,
            label: inst.label,
            classes: schema.classes,
        });
    }
    match &inst.query {
        Query::Task(t) => {
            if *t >= schema.tasks {
                return Err(DataError::TaskRange {
                    instance,
                    task: *t,
                    tasks: schema.tasks,
                });
            }
        }
        Query::Dense(v) => {
            if v.len() != schema.query_dim {
                return Err(DataError::QueryDim {
                    instance,
                    got: v.len(),
                    expected: schema.query_dim,
                });
            }
        }
    }
    Ok(())
}

/// Loads and validates a JSONL dataset file.
pub fn load_dataset(path: &Path) -> Result<(DatasetSchema, Vec<DatasetInstance>), DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_dataset_reader(BufReader::new(file))
}

/// Loads a dataset from any reader; line numbers in errors are 1-based.
pub fn load_dataset_reader<R: BufRead>(
    reader: R,
) -> Result<(DatasetSchema, Vec<DatasetInstance>), DataError> {
    let mut lines = reader.lines().enumerate();
    let schema = match lines.next() {
        Some((_, Ok(line))) => {
            let rec: HeaderRecord =
                serde_json::from_str(&line).map_err(|e| DataError::Parse {
                    line: 1,
                    message: format!("header: {e}"),
                })?;
            rec.header
        }
        Some((_, Err(e))) => {
            return Err(DataError::Parse {
                line: 1,
                message: e.to_string(),
            })
        }
        None => return Err(DataError::MissingHeader),
    };
    let mut instances = Vec::new();
    for (lineno, line) in lines {
        let line = line.map_err(|e| DataError::Parse {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: DatasetInstance = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        validate_instance(instances.len(), &inst, &schema)?;
        instances.push(inst);
    }
    Ok((schema, instances))
}

/// Writes a dataset in the JSONL format read back by [`load_dataset`].
pub fn save_dataset(
    path: &Path,
    schema: &DatasetSchema,
    instances: &[DatasetInstance],
) -> Result<(), DataError> {
    let file = File::create(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let header = HeaderRecord { header: *schema };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header json")).map_err(io_err)?;
    for inst in instances {
        writeln!(w, "{}", serde_json::to_string(inst).expect("instance json")).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Deterministic label-stratified split into (train, valid, test).
pub fn split_dataset(
    instances: Vec<DatasetInstance>,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<DatasetInstance>, Vec<DatasetInstance>, Vec<DatasetInstance>), DataError> {
    let (ft, fv, fe) = fractions;
    if ft < 0.0 || fv < 0.0 || fe < 0.0 || (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(DataError::Fractions(fractions));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let max_label = instances.iter().map(|i| i.label).max().unwrap_or(0);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); max_label + 1];
    for (idx, inst) in instances.iter().enumerate() {
        groups[inst.label].push(idx);
    }
    let mut train_idx = Vec::new();
    let mut valid_idx = Vec::new();
    let mut test_idx = Vec::new();
    for group in &mut groups {
        group.shuffle(&mut rng);
        let n = group.len();
        let n_train = (n as f64 * ft).round() as usize;
        let n_valid = ((n as f64 * (ft + fv)).round() as usize).min(n);
        let n_train = n_train.min(n_valid);
        train_idx.extend_from_slice(&group[..n_train]);
        valid_idx.extend_from_slice(&group[n_train..n_valid]);
        test_idx.extend_from_slice(&group[n_valid..]);
    }
    // keep each split in the original instance order
    train_idx.sort_unstable();
    valid_idx.sort_unstable();
    test_idx.sort_unstable();
    let mut slots: Vec<Option<DatasetInstance>> = instances.into_iter().map(Some).collect();
    let take = |ids: &[usize], slots: &mut Vec<Option<DatasetInstance>>| {
        ids.iter()
            .map(|&i| slots[i].take().expect("disjoint split"))
            .collect::<Vec<_>>()
    };
    let train = take(&train_idx, &mut slots);
    let valid = take(&valid_idx, &mut slots);
    let test = take(&test_idx, &mut slots);
    Ok((train, valid, test))
}
