//! Shared helpers for the differencing-based test suites.

use rdmn_core::forward::{run_episode, Mode, PreparedInstance};
use rdmn_core::graph::{AttributedGraph, DatasetInstance, Edge, Query};
use rdmn_core::model::{ModelConfig, ModelParams};
use rdmn_core::tape::{Tape, Var};
use rdmn_core::tensor::Tensor;
use rdmn_core::train::nll_on_tape;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub const STEP: f64 = 1e-6;

/// |a-b| relative to the larger magnitude, with a unit floor so that
/// near-zero gradients compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

pub fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut plus = x.to_vec();
            plus[i] += STEP;
            let mut minus = x.to_vec();
            minus[i] -= STEP;
            (f(&plus) - f(&minus)) / (2.0 * STEP)
        })
        .collect()
}

/// Checks d loss / d x for a scalar-valued tape program parameterized by
/// the flat input `x` of shape (rows, cols).
pub fn check_op(
    name: &str,
    rows: usize,
    cols: usize,
    x: &[f64],
    tol: f64,
    build: &dyn Fn(&mut Tape, Var) -> Var,
) {
    let eval = |values: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let v = tape.leaf(&Tensor::new(rows, cols, values.to_vec()).unwrap());
        let loss = build(&mut tape, v);
        tape.values(loss)[0]
    };
    let numeric = central_diff(&eval, x);

    let mut tape = Tape::new();
    let v = tape.leaf(&Tensor::new(rows, cols, x.to_vec()).unwrap());
    let loss = build(&mut tape, v);
    let grads = tape.backward(loss).unwrap();
    let analytic = grads.wrt(v);

    for (i, (a, n)) in analytic.values().iter().zip(&numeric).enumerate() {
        let e = rel_err(*a, *n);
        assert!(
            e <= tol,
            "{name}: entry {i} analytic {a} vs numeric {n} (rel err {e:.3e})"
        );
    }
}

/// The pinned gradient-check instance: two components, four nodes each,
/// two hops, two heads, two relation types.
pub fn gradcheck_fixture() -> (ModelConfig, PreparedInstance) {
    let config = ModelConfig {
        d_q: 5,
        d_m: 6,
        d_x: 3,
        hops: 2,
        heads: 2,
        relations: 2,
        n_tasks: 2,
        query_dim: 0,
        n_classes: 2,
        dropout: 0.0,
        attn_dim: 4,
        decoder_hidden: 5,
    };
    let graph_a = AttributedGraph {
        nodes: vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.0],
        ],
        edges: vec![
            Edge { r: 1, i: 0, j: 1, directed: false, feat: None },
            Edge { r: 1, i: 1, j: 2, directed: false, feat: None },
            Edge { r: 2, i: 2, j: 3, directed: false, feat: None },
            Edge { r: 2, i: 3, j: 0, directed: true, feat: None },
        ],
    };
    let graph_b = AttributedGraph {
        nodes: vec![
            vec![0.0, 1.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ],
        edges: vec![
            Edge { r: 1, i: 0, j: 2, directed: false, feat: None },
            Edge { r: 2, i: 1, j: 3, directed: false, feat: None },
        ],
    };
    let instance = PreparedInstance::new(
        &DatasetInstance {
            query: Query::Task(1),
            graphs: vec![graph_a, graph_b],
            label: 1,
        },
        config.relations,
    );
    (config, instance)
}

pub fn model_loss(instance: &PreparedInstance, params: &ModelParams, config: &ModelConfig) -> f64 {
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let ep = run_episode(instance, params, config, Mode::Train, &mut rng).unwrap();
    let mut tape = ep.tape;
    let loss = nll_on_tape(&mut tape, ep.probabilities, instance.label).unwrap();
    tape.values(loss)[0]
}

/// Full-model check: backward against central differences for every
/// parameter entry. Returns the number of scalar parameters checked and
/// the worst relative error.
pub fn check_full_model(tol: f64) -> (usize, f64) {
    let (config, instance) = gradcheck_fixture();
    let params = ModelParams::init(&config, 2024).unwrap();

    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let ep = run_episode(&instance, &params, &config, Mode::Train, &mut rng).unwrap();
    let mut tape = ep.tape;
    let loss = nll_on_tape(&mut tape, ep.probabilities, instance.label).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut analytic: Vec<Vec<f64>> = params
        .entries()
        .iter()
        .map(|p| vec![0.0; p.value.len()])
        .collect();
    for (idx, var) in ep.bound {
        if let Some(g) = grads.values_wrt(var) {
            analytic[idx].copy_from_slice(g);
        }
    }

    let mut checked = 0;
    let mut worst = 0.0f64;
    for (idx, entry) in params.entries().iter().enumerate() {
        for i in 0..entry.value.len() {
            let numeric = {
                let mut plus = params.clone();
                plus.entries_mut()[idx].value.values_mut()[i] += STEP;
                let up = model_loss(&instance, &plus, &config);
                let mut minus = params.clone();
                minus.entries_mut()[idx].value.values_mut()[i] -= STEP;
                let down = model_loss(&instance, &minus, &config);
                (up - down) / (2.0 * STEP)
            };
            let a = analytic[idx][i];
            let e = rel_err(a, numeric);
            assert!(
                e <= tol,
                "{} entry {i}: analytic {a} vs numeric {numeric} (rel err {e:.3e})",
                entry.name
            );
            worst = worst.max(e);
            checked += 1;
        }
    }
    (checked, worst)
}
