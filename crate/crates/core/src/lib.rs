//! Relational dynamic memory networks over attributed graphs.
//!
//! A neural controller coupled to graph-structured memory components
//! answers queries over sets of attributed graphs. Each input graph is
//! loaded into a memory matrix (one cell per node); over T reasoning hops
//! the controller reads the memories through soft attention heads, updates
//! its own state through a forgetting gate, and writes back through gated
//! relational message passing over normalized adjacency. Everything is
//! differentiable and trained end-to-end by gradient descent on a
//! per-example tape.
//!
//! The crate also ships deterministic synthetic task generators with
//! exact brute-force oracles, training/evaluation with AUC and F1
//! metrics, and a versioned model file format.

pub mod forward;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use forward::{forward, run_episode, Episode, EpisodeTrace, Mode, PreparedGraph, PreparedInstance};
pub use graph::{
    load_dataset, normalize_adjacency, save_dataset, split_dataset, AttributedGraph,
    DatasetInstance, DatasetSchema, Edge, NormalizedAdjacency, Query,
};
pub use model::{load_model, save_model, ModelConfig, ModelError, ModelParams};
pub use synth::{generate, oracle_label, TaskFamily, TaskSpec};
pub use train::{
    adam_step, evaluate, history_to_csv, nll_loss, train, EpochStats, EvalReport, OptimizerState,
    TrainConfig, TrainError, TrainOutcome,
};
