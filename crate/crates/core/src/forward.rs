//! The reasoning episode: query encoding, memory loading, attention reads,
//! gated controller and memory updates over T hops, and the classifier head.
//!
//! Parameters are immutable during a pass; every pass records onto its own
//! tape, so any number of forward evaluations may run concurrently.

use crate::graph::{normalize_adjacency, AttributedGraph, DatasetInstance, Query};
use crate::model::{ModelConfig, ModelError, ModelParams};
use crate::tape::{ReduceKind, Tape, Var};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};

/// A graph preprocessed for episodes: feature matrix plus normalized
/// per-relation adjacency.
#[derive(Debug, Clone)]
pub struct PreparedGraph {
    /// Node features, one column per node (`d_x x M`).
    pub features: Tensor,
    /// Per-relation column-normalized adjacency (`M x M` each).
    pub adjacency: Vec<Tensor>,
    /// Relations that actually occur in this graph.
    pub active: Vec<bool>,
}

impl PreparedGraph {
    pub fn new(graph: &AttributedGraph, relations: usize) -> Self {
        let features = graph.feature_matrix();
        let adjacency: Vec<Tensor> = normalize_adjacency(graph, relations)
            .per_relation()
            .to_vec();
        let active = adjacency
            .iter()
            .map(|a| a.values().iter().any(|v| *v != 0.0))
            .collect();
        PreparedGraph {
            features,
            adjacency,
            active,
        }
    }

    pub fn node_count(&self) -> usize {
        self.features.cols()
    }
}

/// An instance preprocessed for episodes.
#[derive(Debug, Clone)]
pub struct PreparedInstance {
    pub query: Query,
    pub graphs: Vec<PreparedGraph>,
    pub label: usize,
}

impl PreparedInstance {
    pub fn new(inst: &DatasetInstance, relations: usize) -> Self {
        PreparedInstance {
            query: inst.query.clone(),
            graphs: inst
                .graphs
                .iter()
                .map(|g| PreparedGraph::new(g, relations))
                .collect(),
            label: inst.label,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Attention weights of one read, recorded for inspection.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub hop: usize,
    pub component: usize,
    pub head: usize,
    pub weights: Vec<f64>,
}

/// Per-cell memory gate values of one update.
#[derive(Debug, Clone)]
pub struct MemoryGateRecord {
    pub hop: usize,
    pub component: usize,
    /// `d_m x cells`, row-major.
    pub values: Vec<f64>,
    pub cells: usize,
}

/// Everything observable about one episode.
#[derive(Debug, Clone, Default)]
pub struct EpisodeTrace {
    pub attention: Vec<AttentionRecord>,
    /// Controller states h_0..h_T as carried forward.
    pub controller_states: Vec<Vec<f64>>,
    /// Controller forgetting-gate values per hop.
    pub controller_gates: Vec<Vec<f64>>,
    pub memory_gates: Vec<MemoryGateRecord>,
}

/// Builds one episode on a fresh tape. Step methods mirror the operator
/// pipeline and can be driven individually.
pub struct EpisodeBuilder<'a> {
    pub tape: Tape,
    params: &'a ModelParams,
    config: &'a ModelConfig,
    bound: Vec<Option<Var>>,
    pub trace: EpisodeTrace,
}

impl<'a> EpisodeBuilder<'a> {
    pub fn new(params: &'a ModelParams, config: &'a ModelConfig) -> Self {
        EpisodeBuilder {
            tape: Tape::new(),
            params,
            config,
            bound: vec![None; params.len()],
            trace: EpisodeTrace::default(),
        }
    }

    /// Leaf for a named parameter, bound at most once per episode.
    fn param(&mut self, name: &str) -> Var {
        let idx = self.params.position(name).expect("parameter name");
        if let Some(v) = self.bound[idx] {
            return v;
        }
        let v = self.tape.leaf(&self.params.entries()[idx].value);
        self.bound[idx] = Some(v);
        v
    }

    /// Parameter leaves bound during this episode, as (entry index, var).
    pub fn bound_params(&self) -> Vec<(usize, Var)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|var| (i, var)))
            .collect()
    }

    /// Encodes the query into the initial controller state (`d_q x 1`).
    pub fn q_encode(&mut self, query: &Query) -> Result<Var, ModelError> {
        match query {
            Query::Task(task) => {
                if self.config.n_tasks == 0 || *task >= self.config.n_tasks {
                    return Err(ModelError::TaskRange {
                        task: *task,
                        tasks: self.config.n_tasks,
                    });
                }
                let table = self.param("query.embed");
                Ok(self.tape.embed_row(table, *task)?)
            }
            Query::Dense(v) => {
                if self.config.n_tasks > 0 || v.len() != self.config.query_dim {
                    return Err(ModelError::QueryDim {
                        got: v.len(),
                        expected: self.config.query_dim,
                    });
                }
                let w = self.param("query.w");
                let b = self.param("query.b");
                let x = self.tape.leaf(&Tensor::column(v.clone())?);
                let wx = self.tape.matmul(w, x)?;
                Ok(self.tape.add(wx, b)?)
            }
        }
    }

    /// Embeds graph nodes into memory cells: column i is
    /// `relu(W_x x_i + b)`. Returns the memory and adjacency leaves.
    pub fn m_load(&mut self, graph: &'a PreparedGraph) -> Result<(Var, Vec<Var>), ModelError> {
        if graph.features.rows() != self.config.d_x {
            return Err(ModelError::FeatureDim {
                got: graph.features.rows(),
                expected: self.config.d_x,
            });
        }
        let w = self.param("load.w");
        let b = self.param("load.b");
        let x = self.tape.leaf(&graph.features);
        let wx = self.tape.matmul(w, x)?;
        let biased = self.tape.add(wx, b)?;
        let mem = self.tape.relu(biased);
        let adj = graph
            .adjacency
            .iter()
            .map(|a| self.tape.leaf(a))
            .collect();
        Ok((mem, adj))
    }

    /// Soft attention read of head `k` over one memory component:
    /// `a[i] = softmax(v_k' tanh(W_ak M[i] + U_ak h))`, `r = M a`.
    pub fn attention_read(
        &mut self,
        mem: Var,
        h: Var,
        head: usize,
        hop: usize,
        component: usize,
    ) -> Result<Var, ModelError> {
        let v = self.param(&format!("head.{head}.v"));
        let wa = self.param(&format!("head.{head}.wa"));
        let ua = self.param(&format!("head.{head}.ua"));
        let wm = self.tape.matmul(wa, mem)?;
        let uh = self.tape.matmul(ua, h)?;
        let pre = self.tape.add(wm, uh)?; // broadcast column over cells
        let act = self.tape.tanh(pre);
        let scores = self.tape.matmul(v, act)?; // 1 x M
        let attn = self.tape.softmax(scores)?;
        self.trace.attention.push(AttentionRecord {
            hop,
            component,
            head,
            weights: self.tape.values(attn).to_vec(),
        });
        let attn_col = self.tape.transpose(attn);
        Ok(self.tape.matmul(mem, attn_col)?)
    }

    /// One retrieval step: per-head reads averaged over components, then
    /// averaged over heads.
    pub fn read_step(&mut self, mems: &[Var], h: Var, hop: usize) -> Result<Var, ModelError> {
        let mut head_means = Vec::with_capacity(self.config.heads);
        for k in 0..self.config.heads {
            let mut acc: Option<Var> = None;
            for (c, mem) in mems.iter().enumerate() {
                let r = self.attention_read(*mem, h, k, hop, c)?;
                acc = Some(match acc {
                    None => r,
                    Some(a) => self.tape.add(a, r)?,
                });
            }
            let sum = acc.expect("at least one component");
            head_means.push(self.tape.scale(sum, 1.0 / mems.len() as f64));
        }
        let mut acc = head_means[0];
        for m in &head_means[1..] {
            acc = self.tape.add(acc, *m)?;
        }
        Ok(self.tape.scale(acc, 1.0 / self.config.heads as f64))
    }

    /// Gated controller update:
    /// `h = a*h_prev + (1-a)*relu(W_h h_prev + U_h r)`,
    /// `a = sigmoid(gate([h_prev, r]))`.
    pub fn s_update(&mut self, h_prev: Var, r_star: Var) -> Result<Var, ModelError> {
        let wh = self.param("ctrl.wh");
        let uh = self.param("ctrl.uh");
        let gw = self.param("ctrl.gate.w");
        let gb = self.param("ctrl.gate.b");

        let wx = self.tape.matmul(wh, h_prev)?;
        let ur = self.tape.matmul(uh, r_star)?;
        let pre = self.tape.add(wx, ur)?;
        let candidate = self.tape.relu(pre);

        let gin = self.tape.concat_rows(h_prev, r_star)?;
        let gpre = self.tape.matmul(gw, gin)?;
        let gpre = self.tape.add(gpre, gb)?;
        let alpha = self.tape.sigmoid(gpre);
        self.trace
            .controller_gates
            .push(self.tape.values(alpha).to_vec());

        let keep = self.tape.mul(alpha, h_prev)?;
        let ones = self.tape.leaf(&Tensor::filled(self.config.d_q, 1, 1.0));
        let inv = self.tape.sub(ones, alpha)?;
        let write = self.tape.mul(inv, candidate)?;
        Ok(self.tape.add(keep, write)?)
    }

    /// Gated relational memory update:
    /// candidate `relu(U_m h 1' + W_m M + sum_r V_r M A_r)` blended per cell
    /// by `sigmoid(gate([M[i], h]))`.
    pub fn m_update(
        &mut self,
        mem: Var,
        adjacency: &[Var],
        active: &[bool],
        h: Var,
        hop: usize,
        component: usize,
    ) -> Result<Var, ModelError> {
        let um = self.param("mem.um");
        let wm = self.param("mem.wm");
        let gw = self.param("mem.gate.w");
        let gb = self.param("mem.gate.b");

        let cells = self.tape.shape(mem).1;
        let write = self.tape.matmul(um, h)?; // d_m x 1, broadcast over cells
        let hold = self.tape.matmul(wm, mem)?;
        let mut pre = self.tape.add(hold, write)?;
        for (r, adj) in adjacency.iter().enumerate() {
            if !active[r] {
                continue;
            }
            let vr = self.param(&format!("mem.rel.{r}"));
            let vm = self.tape.matmul(vr, mem)?;
            let msg = self.tape.matmul(vm, *adj)?;
            pre = self.tape.add(pre, msg)?;
        }
        let candidate = self.tape.relu(pre);

        let ones_row = self.tape.leaf(&Tensor::filled(1, cells, 1.0));
        let h_tiled = self.tape.matmul(h, ones_row)?;
        let gin = self.tape.concat_rows(mem, h_tiled)?;
        let gpre = self.tape.matmul(gw, gin)?;
        let gpre = self.tape.add(gpre, gb)?;
        let alpha = self.tape.sigmoid(gpre);
        self.trace.memory_gates.push(MemoryGateRecord {
            hop,
            component,
            values: self.tape.values(alpha).to_vec(),
            cells,
        });

        let keep = self.tape.mul(alpha, mem)?;
        let ones = self
            .tape
            .leaf(&Tensor::filled(self.config.d_m, cells, 1.0));
        let inv = self.tape.sub(ones, alpha)?;
        let write = self.tape.mul(inv, candidate)?;
        Ok(self.tape.add(keep, write)?)
    }

    /// Classifier head on `[h_T, q]`: one hidden ReLU layer, then class
    /// probabilities (sigmoid for binary heads, softmax otherwise).
    pub fn decode(&mut self, h: Var, q: Var) -> Result<Var, ModelError> {
        let w1 = self.param("dec.w1");
        let b1 = self.param("dec.b1");
        let w2 = self.param("dec.w2");
        let b2 = self.param("dec.b2");

        let z = self.tape.concat_rows(h, q)?;
        let pre = self.tape.matmul(w1, z)?;
        let pre = self.tape.add(pre, b1)?;
        let hidden = self.tape.relu(pre);
        let logits = self.tape.matmul(w2, hidden)?;
        let logits = self.tape.add(logits, b2)?;
        if self.config.n_classes == 2 {
            let p1 = self.tape.sigmoid(logits);
            let one = self.tape.leaf(&Tensor::scalar(1.0));
            let p0 = self.tape.sub(one, p1)?;
            Ok(self.tape.concat_rows(p0, p1)?)
        } else {
            Ok(self.tape.softmax(logits)?)
        }
    }
}

/// A completed episode: the tape, the probability node, bound parameter
/// leaves, and the trace.
pub struct Episode {
    pub tape: Tape,
    pub probabilities: Var,
    pub bound: Vec<(usize, Var)>,
    pub trace: EpisodeTrace,
}

impl Episode {
    pub fn probability_values(&self) -> &[f64] {
        self.tape.values(self.probabilities)
    }
}

/// Runs a full episode over one instance.
///
/// `h_0 = q`; each hop reads all components, updates the controller, then
/// every memory. Dropout (training mode only) is applied to the controller
/// state and the memory matrices produced by the first and last hops.
/// With `hops = 0` the structure-free baseline runs instead: memory cells
/// are mean-pooled and one ReLU mixing layer feeds the classifier.
pub fn run_episode<R: Rng>(
    instance: &PreparedInstance,
    params: &ModelParams,
    config: &ModelConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Episode, ModelError> {
    let mut b = EpisodeBuilder::new(params, config);
    let training = mode == Mode::Train;
    let rate = config.dropout;

    let q = b.q_encode(&instance.query)?;
    let mut h = q;
    b.trace.controller_states.push(b.tape.values(h).to_vec());

    let mut mems = Vec::with_capacity(instance.graphs.len());
    let mut adjs = Vec::with_capacity(instance.graphs.len());
    for g in &instance.graphs {
        let (mem, adj) = b.m_load(g)?;
        mems.push(mem);
        adjs.push(adj);
    }

    if config.hops == 0 {
        // Pooling baseline: the classifier sees only mean-pooled embeddings.
        let mut acc: Option<Var> = None;
        for mem in &mems {
            let pooled = b.tape.reduce(ReduceKind::Mean, *mem, Some(1))?;
            acc = Some(match acc {
                None => pooled,
                Some(a) => b.tape.add(a, pooled)?,
            });
        }
        let pooled = b.tape.scale(acc.expect("C >= 1"), 1.0 / mems.len() as f64);
        let wh = b.param("ctrl.wh");
        let uh = b.param("ctrl.uh");
        let wx = b.tape.matmul(wh, h)?;
        let ur = b.tape.matmul(uh, pooled)?;
        let pre = b.tape.add(wx, ur)?;
        let mixed = b.tape.relu(pre);
        h = b.tape.dropout(mixed, rate, training, rng)?;
        b.trace.controller_states.push(b.tape.values(h).to_vec());
    } else {
        for hop in 1..=config.hops {
            let r_star = b.read_step(&mems, h, hop)?;
            h = b.s_update(h, r_star)?;
            for c in 0..mems.len() {
                mems[c] = b.m_update(
                    mems[c],
                    &adjs[c],
                    &instance.graphs[c].active,
                    h,
                    hop,
                    c,
                )?;
            }
            if hop == 1 || hop == config.hops {
                h = b.tape.dropout(h, rate, training, rng)?;
                for mem in &mut mems {
                    *mem = b.tape.dropout(*mem, rate, training, rng)?;
                }
            }
            b.trace.controller_states.push(b.tape.values(h).to_vec());
        }
    }

    let probabilities = b.decode(h, q)?;
    Ok(Episode {
        bound: b.bound_params(),
        probabilities,
        tape: b.tape,
        trace: b.trace,
    })
}

/// Eval-mode forward: class probabilities and the trace.
pub fn forward(
    instance: &PreparedInstance,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<(Vec<f64>, EpisodeTrace), ModelError> {
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(0);
    let ep = run_episode(instance, params, config, Mode::Eval, &mut rng)?;
    Ok((ep.probability_values().to_vec(), ep.trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Edge;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn config(heads: usize, hops: usize) -> ModelConfig {
        ModelConfig {
            d_q: 4,
            d_m: 5,
            d_x: 3,
            hops,
            heads,
            relations: 2,
            n_tasks: 3,
            query_dim: 0,
            n_classes: 2,
            dropout: 0.0,
            attn_dim: 3,
            decoder_hidden: 4,
        }
    }

    fn graph(colors: &[usize], edges: Vec<(usize, usize, usize)>) -> AttributedGraph {
        AttributedGraph {
            nodes: colors
                .iter()
                .map(|&c| {
                    let mut f = vec![0.0; 3];
                    f[c] = 1.0;
                    f
                })
                .collect(),
            edges: edges
                .into_iter()
                .map(|(r, i, j)| Edge {
                    r,
                    i,
                    j,
                    directed: false,
                    feat: None,
                })
                .collect(),
        }
    }

    fn instance(graphs: Vec<AttributedGraph>, task: usize) -> PreparedInstance {
        PreparedInstance::new(
            &DatasetInstance {
                query: Query::Task(task),
                graphs,
                label: 0,
            },
            2,
        )
    }

    #[test]
    fn q_encode_is_table_lookup() {
        let cfg = config(1, 1);
        let params = ModelParams::init(&cfg, 5).unwrap();
        let mut b = EpisodeBuilder::new(&params, &cfg);
        let q = b.q_encode(&Query::Task(2)).unwrap();
        let table = params.tensor("query.embed");
        let expect: Vec<f64> = (0..cfg.d_q).map(|j| table.at(2, j)).collect();
        assert_eq!(b.tape.values(q), expect.as_slice());

        // same task twice gives identical encodings
        let q2 = b.q_encode(&Query::Task(2)).unwrap();
        assert_eq!(b.tape.values(q), b.tape.values(q2));

        assert!(matches!(
            b.q_encode(&Query::Task(3)),
            Err(ModelError::TaskRange { task: 3, tasks: 3 })
        ));
    }

    #[test]
    fn dense_query_zero_vector_with_zero_bias_is_zero() {
        let mut cfg = config(1, 1);
        cfg.n_tasks = 0;
        cfg.query_dim = 6;
        let params = ModelParams::init(&cfg, 5).unwrap();
        let mut b = EpisodeBuilder::new(&params, &cfg);
        let q = b.q_encode(&Query::Dense(vec![0.0; 6])).unwrap();
        assert!(b.tape.values(q).iter().all(|v| *v == 0.0));
        assert!(matches!(
            b.q_encode(&Query::Dense(vec![0.0; 5])),
            Err(ModelError::QueryDim { got: 5, expected: 6 })
        ));
    }

    #[test]
    fn m_load_zero_features_zero_bias_gives_zero_cells() {
        let cfg = config(1, 1);
        let params = ModelParams::init(&cfg, 5).unwrap();
        let g = AttributedGraph {
            nodes: vec![vec![0.0; 3]; 4],
            edges: vec![],
        };
        let prepared = PreparedGraph::new(&g, cfg.relations);
        let mut b = EpisodeBuilder::new(&params, &cfg);
        let (mem, _) = b.m_load(&prepared).unwrap();
        assert!(b.tape.values(mem).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn m_load_is_node_permutation_equivariant() {
        let cfg = config(1, 1);
        let params = ModelParams::init(&cfg, 5).unwrap();
        let g = graph(&[0, 1, 2], vec![(1, 0, 1)]);
        let perm = graph(&[2, 0, 1], vec![(1, 1, 2)]); // nodes rotated by 1
        let pg = PreparedGraph::new(&g, cfg.relations);
        let pp = PreparedGraph::new(&perm, cfg.relations);
        let mut b = EpisodeBuilder::new(&params, &cfg);
        let (m1, _) = b.m_load(&pg).unwrap();
        let (m2, _) = b.m_load(&pp).unwrap();
        let (d_m, m) = b.tape.shape(m1);
        // column i of the original equals column (i+1) mod 3 of the permuted
        for i in 0..m {
            for rrow in 0..d_m {
                let a = b.tape.values(m1)[rrow * m + i];
                let c = b.tape.values(m2)[rrow * m + (i + 1) % 3];
                assert_eq!(a, c);
            }
        }
    }

    #[test]
    fn single_node_graph_loads_single_cell() {
        let cfg = config(1, 1);
        let params = ModelParams::init(&cfg, 5).unwrap();
        let g = graph(&[1], vec![]);
        let pg = PreparedGraph::new(&g, cfg.relations);
        let mut b = EpisodeBuilder::new(&params, &cfg);
        let (mem, adj) = b.m_load(&pg).unwrap();
        assert_eq!(b.tape.shape(mem), (cfg.d_m, 1));
        for a in adj {
            assert!(b.tape.values(a).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn attention_on_identical_cells_returns_the_cell() {
        let cfg = config(1, 1);
        let params = ModelParams::init(&cfg, 5).unwrap();
        let mut b = EpisodeBuilder::new(&params, &cfg);
        let cell = vec![0.3, -0.7, 1.1, 0.0, 2.0];
        let mem = b
            .tape
            .leaf(&Tensor::from_columns(&[cell.clone(), cell.clone(), cell.clone()]).unwrap());
        let h = b.tape.leaf(&Tensor::column(vec![0.5; 4]).unwrap());
        let r = b.attention_read(mem, h, 0, 1, 0).unwrap();
        for (got, want) in b.tape.values(r).iter().zip(&cell) {
            assert!((got - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn attention_single_cell_is_unit_weight() {
        let cfg = config(1, 1);
        let params = ModelParams::init(&cfg, 5).unwrap();
        let mut b = EpisodeBuilder::new(&params, &cfg);
        let cell = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let mem = b.tape.leaf(&Tensor::from_columns(&[cell.clone()]).unwrap());
        let h = b.tape.leaf(&Tensor::column(vec![0.1; 4]).unwrap());
        let r = b.attention_read(mem, h, 0, 1, 0).unwrap();
        assert_eq!(b.trace.attention[0].weights, vec![1.0]);
        assert_eq!(b.tape.values(r), cell.as_slice());
    }

    /// Independent scalar-loop evaluation of one attention read.
    fn attention_by_hand(
        params: &ModelParams,
        head: usize,
        mem: &Tensor,
        h: &[f64],
    ) -> Vec<f64> {
        let v = params.tensor(&format!("head.{head}.v"));
        let wa = params.tensor(&format!("head.{head}.wa"));
        let ua = params.tensor(&format!("head.{head}.ua"));
        let (d_a, d_m) = wa.shape();
        let cells = mem.cols();
        let mut scores = vec![0.0; cells];
        for i in 0..cells {
            let mut s = 0.0;
            for a in 0..d_a {
                let mut pre = 0.0;
                for m in 0..d_m {
                    pre += wa.at(a, m) * mem.at(m, i);
                }
                for (qj, hv) in h.iter().enumerate() {
                    pre += ua.at(a, qj) * hv;
                }
                s += v.at(0, a) * pre.tanh();
            }
            scores[i] = s;
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let attn: Vec<f64> = exps.iter().map(|e| e / z).collect();
        (0..d_m)
            .map(|row| (0..cells).map(|i| mem.at(row, i) * attn[i]).sum())
            .collect()
    }

    #[test]
    fn attention_matches_hand_evaluation() {
        let cfg = config(2, 1);
        let params = ModelParams::init(&cfg, 23).unwrap();
        let mem = Tensor::from_columns(&[
            vec![1.0, 0.0, -1.0, 0.5, 0.2],
            vec![0.0, 2.0, 0.3, -0.4, 1.0],
        ])
        .unwrap();
        let h = vec![0.3, -0.2, 0.8, 0.1];
        let mut b = EpisodeBuilder::new(&params, &cfg);
        let mv = b.tape.leaf(&mem);
        let hv = b.tape.leaf(&Tensor::column(h.clone()).unwrap());
        let r = b.attention_read(mv, hv, 1, 1, 0).unwrap();
        let by_hand = attention_by_hand(&params, 1, &mem, &h);
        for (got, want) in b.tape.values(r).iter().zip(&by_hand) {
            assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn read_step_single_component_single_head_is_plain_read() {
        let cfg = config(1, 1);
        let params = ModelParams::init(&cfg, 7).unwrap();
        let mem = Tensor::from_columns(&[vec![1.0, 2.0, 3.0, 4.0, 5.0], vec![0.0; 5]]).unwrap();
        let h = Tensor::column(vec![0.2; 4]).unwrap();

        let mut b1 = EpisodeBuilder::new(&params, &cfg);
        let m1 = b1.tape.leaf(&mem);
        let h1 = b1.tape.leaf(&h);
        let direct = b1.attention_read(m1, h1, 0, 1, 0).unwrap();

        let mut b2 = EpisodeBuilder::new(&params, &cfg);
        let m2 = b2.tape.leaf(&mem);
        let h2 = b2.tape.leaf(&h);
        let star = b2.read_step(&[m2], h2, 1).unwrap();

        assert_eq!(b1.tape.values(direct), b2.tape.values(star));
    }

    #[test]
    fn read_step_identical_components_match_single_component() {
        let cfg = config(1, 1);
        let params = ModelParams::init(&cfg, 7).unwrap();
        let mem = Tensor::from_columns(&[vec![0.5, -1.0, 2.0, 0.0, 1.0]]).unwrap();
        let h = Tensor::column(vec![-0.1, 0.4, 0.0, 0.9]).unwrap();
        let mut b = EpisodeBuilder::new(&params, &cfg);
        let m1 = b.tape.leaf(&mem);
        let m2 = b.tape.leaf(&mem);
        let hv = b.tape.leaf(&h);
        let pair = b.read_step(&[m1, m2], hv, 1).unwrap();
        let single = b.read_step(&[m1], hv, 1).unwrap();
        for (a, c) in b.tape.values(pair).iter().zip(b.tape.values(single)) {
            assert!((a - c).abs() <= 1e-12);
        }
    }

    #[test]
    fn read_step_two_heads_is_midpoint() {
        let cfg = config(2, 1);
        let params = ModelParams::init(&cfg, 11).unwrap();
        let mem = Tensor::from_columns(&[
            vec![1.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0, 0.0],
        ])
        .unwrap();
        let h = vec![0.3, 0.3, -0.6, 0.2];
        let mut b = EpisodeBuilder::new(&params, &cfg);
        let mv = b.tape.leaf(&mem);
        let hv = b.tape.leaf(&Tensor::column(h.clone()).unwrap());
        let star = b.read_step(&[mv], hv, 1).unwrap();
        let r0 = attention_by_hand(&params, 0, &mem, &h);
        let r1 = attention_by_hand(&params, 1, &mem, &h);
        for i in 0..cfg.d_m {
            let want = 0.5 * (r0[i] + r1[i]);
            let got = b.tape.values(star)[i];
            assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        }
    }

    fn force_gate(params: &mut ModelParams, name_w: &str, name_b: &str, bias: f64) {
        params.tensor_mut(name_w).values_mut().fill(0.0);
        params.tensor_mut(name_b).values_mut().fill(bias);
    }

    #[test]
    fn controller_gate_saturation() {
        let cfg = config(1, 1);
        let mut params = ModelParams::init(&cfg, 3).unwrap();
        let h_prev = Tensor::column(vec![0.4, -0.9, 1.3, 0.0]).unwrap();
        let r = Tensor::column(vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();

        // gate ~1: state passes through
        force_gate(&mut params, "ctrl.gate.w", "ctrl.gate.b", 30.0);
        let mut b = EpisodeBuilder::new(&params, &cfg);
        let hv = b.tape.leaf(&h_prev);
        let rv = b.tape.leaf(&r);
        let h = b.s_update(hv, rv).unwrap();
        for (got, want) in b.tape.values(h).iter().zip(h_prev.values()) {
            assert!((got - want).abs() <= 1e-9);
        }

        // gate ~0: state replaced by the candidate
        force_gate(&mut params, "ctrl.gate.w", "ctrl.gate.b", -30.0);
        let mut b = EpisodeBuilder::new(&params, &cfg);
        let hv = b.tape.leaf(&h_prev);
        let rv = b.tape.leaf(&r);
        let h = b.s_update(hv, rv).unwrap();
        let wh = params.tensor("ctrl.wh");
        let uh = params.tensor("ctrl.uh");
        for i in 0..cfg.d_q {
            let mut pre = 0.0;
            for j in 0..cfg.d_q {
                pre += wh.at(i, j) * h_prev.values()[j];
            }
            for j in 0..cfg.d_m {
                pre += uh.at(i, j) * r.values()[j];
            }
            let want = pre.max(0.0);
            let got = b.tape.values(h)[i];
            assert!((got - want).abs() <= 1e-9);
        }
    }

    #[test]
    fn s_update_matches_independent_reimplementation() {
        let cfg = config(1, 1);
        let params = ModelParams::init(&cfg, 31).unwrap();
        let h_prev = vec![0.2, -0.4, 0.7, 0.05];
        let r = vec![0.9, -1.1, 0.0, 0.3, 0.6];

        let mut b = EpisodeBuilder::new(&params, &cfg);
        let hv = b.tape.leaf(&Tensor::column(h_prev.clone()).unwrap());
        let rv = b.tape.leaf(&Tensor::column(r.clone()).unwrap());
        let h = b.s_update(hv, rv).unwrap();

        let wh = params.tensor("ctrl.wh");
        let uh = params.tensor("ctrl.uh");
        let gw = params.tensor("ctrl.gate.w");
        let gb = params.tensor("ctrl.gate.b");
        let cat: Vec<f64> = h_prev.iter().chain(&r).cloned().collect();
        for i in 0..cfg.d_q {
            let mut pre = 0.0;
            for j in 0..cfg.d_q {
                pre += wh.at(i, j) * h_prev[j];
            }
            for j in 0..cfg.d_m {
                pre += uh.at(i, j) * r[j];
            }
            let cand = pre.max(0.0);
            let mut gpre = gb.at(i, 0);
            for (j, cj) in cat.iter().enumerate() {
                gpre += gw.at(i, j) * cj;
            }
            let alpha = 1.0 / (1.0 + (-gpre).exp());
            let want = alpha * h_prev[i] + (1.0 - alpha) * cand;
            let got = b.tape.values(h)[i];
            assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn memory_gate_saturation_freezes_memory() {
        let cfg = config(1, 1);
        let mut params = ModelParams::init(&cfg, 3).unwrap();
        force_gate(&mut params, "mem.gate.w", "mem.gate.b", 30.0);
        let g = graph(&[0, 1, 2], vec![(1, 0, 1), (2, 1, 2)]);
        let pg = PreparedGraph::new(&g, cfg.relations);
        let mut b = EpisodeBuilder::new(&params, &cfg);
        let (mem, adj) = b.m_load(&pg).unwrap();
        let h = b.tape.leaf(&Tensor::column(vec![0.5, -0.5, 0.2, 0.9]).unwrap());
        let updated = b.m_update(mem, &adj, &pg.active, h, 1, 0).unwrap();
        for (got, want) in b.tape.values(updated).iter().zip(b.tape.values(mem)) {
            assert!((got - want).abs() <= 1e-9);
        }
    }

    #[test]
    fn edgeless_graph_update_has_no_relational_term() {
        let cfg = config(1, 1);
        let mut params = ModelParams::init(&cfg, 13).unwrap();
        // make the relational weights enormous: they must not matter
        params.tensor_mut("mem.rel.0").values_mut().fill(1e6);
        params.tensor_mut("mem.rel.1").values_mut().fill(1e6);
        let g = graph(&[0, 1], vec![]);
        let pg = PreparedGraph::new(&g, cfg.relations);
        let mut b = EpisodeBuilder::new(&params, &cfg);
        let (mem, adj) = b.m_load(&pg).unwrap();
        let h = b.tape.leaf(&Tensor::column(vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let updated = b.m_update(mem, &adj, &pg.active, h, 1, 0).unwrap();
        assert!(b.tape.values(updated).iter().all(|v| v.is_finite() && v.abs() < 1e3));
    }

    /// Independent scalar-loop evaluation of one memory update on a path
    /// graph, gates included.
    #[test]
    fn m_update_matches_hand_message_passing() {
        let cfg = config(1, 1);
        let params = ModelParams::init(&cfg, 41).unwrap();
        let g = graph(&[0, 1, 0], vec![(1, 0, 1), (1, 1, 2)]); // path 0-1-2
        let pg = PreparedGraph::new(&g, cfg.relations);
        let h = vec![0.3, -0.1, 0.5, 0.2];

        let mut b = EpisodeBuilder::new(&params, &cfg);
        let (mem, adj) = b.m_load(&pg).unwrap();
        let hv = b.tape.leaf(&Tensor::column(h.clone()).unwrap());
        let updated = b.m_update(mem, &adj, &pg.active, hv, 1, 0).unwrap();

        // by hand
        let wx = params.tensor("load.w");
        let cells = 3;
        let mut mem_hand = vec![vec![0.0; cells]; cfg.d_m];
        for i in 0..cells {
            for row in 0..cfg.d_m {
                let mut s = 0.0;
                for f in 0..cfg.d_x {
                    s += wx.at(row, f) * g.nodes[i][f];
                }
                mem_hand[row][i] = s.max(0.0);
            }
        }
        // column-normalized adjacency of the path for relation 1:
        // columns: 0 <- {1}, 1 <- {0,2} each 0.5, 2 <- {1}
        let a_hat = [
            [0.0, 0.5, 0.0],
            [1.0, 0.0, 1.0],
            [0.0, 0.5, 0.0],
        ];
        let um = params.tensor("mem.um");
        let wm = params.tensor("mem.wm");
        let vr = params.tensor("mem.rel.0");
        let gw = params.tensor("mem.gate.w");
        let gb = params.tensor("mem.gate.b");
        for i in 0..cells {
            for row in 0..cfg.d_m {
                let mut pre = 0.0;
                for (j, hv) in h.iter().enumerate() {
                    pre += um.at(row, j) * hv;
                }
                for j in 0..cfg.d_m {
                    pre += wm.at(row, j) * mem_hand[j][i];
                }
                // relational term: (V M A)[row, i]
                for j in 0..cfg.d_m {
                    let mut ma = 0.0;
                    for k in 0..cells {
                        ma += mem_hand[j][k] * a_hat[k][i];
                    }
                    pre += vr.at(row, j) * ma;
                }
                let cand = pre.max(0.0);
                let mut gpre = gb.at(row, 0);
                for j in 0..cfg.d_m {
                    gpre += gw.at(row, j) * mem_hand[j][i];
                }
                for (j, hv) in h.iter().enumerate() {
                    gpre += gw.at(row, cfg.d_m + j) * hv;
                }
                let alpha = 1.0 / (1.0 + (-gpre).exp());
                let want = alpha * mem_hand[row][i] + (1.0 - alpha) * cand;
                let got = b.tape.values(updated)[row * cells + i];
                assert!((got - want).abs() <= 1e-12, "cell {i} row {row}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn decode_zero_head_is_uniform() {
        let mut cfg = config(1, 1);
        cfg.n_classes = 4;
        let mut params = ModelParams::init(&cfg, 3).unwrap();
        params.tensor_mut("dec.w2").values_mut().fill(0.0);
        params.tensor_mut("dec.b2").values_mut().fill(0.0);
        let mut b = EpisodeBuilder::new(&params, &cfg);
        let h = b.tape.leaf(&Tensor::column(vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let q = b.tape.leaf(&Tensor::column(vec![0.5, 0.6, 0.7, 0.8]).unwrap());
        let p = b.decode(h, q).unwrap();
        for v in b.tape.values(p) {
            assert!((v - 0.25).abs() <= 1e-12);
        }
    }

    #[test]
    fn decode_binary_zero_logit_is_half() {
        let cfg = config(1, 1);
        let mut params = ModelParams::init(&cfg, 3).unwrap();
        params.tensor_mut("dec.w2").values_mut().fill(0.0);
        params.tensor_mut("dec.b2").values_mut().fill(0.0);
        let mut b = EpisodeBuilder::new(&params, &cfg);
        let h = b.tape.leaf(&Tensor::column(vec![1.0; 4]).unwrap());
        let q = b.tape.leaf(&Tensor::column(vec![1.0; 4]).unwrap());
        let p = b.decode(h, q).unwrap();
        assert_eq!(b.tape.values(p), &[0.5, 0.5]);
    }

    #[test]
    fn decode_probabilities_sum_to_one() {
        let mut cfg = config(1, 1);
        cfg.n_classes = 5;
        let params = ModelParams::init(&cfg, 77).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        for _ in 0..20 {
            let mut b = EpisodeBuilder::new(&params, &cfg);
            let hv: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let qv: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let h = b.tape.leaf(&Tensor::column(hv).unwrap());
            let q = b.tape.leaf(&Tensor::column(qv).unwrap());
            let p = b.decode(h, q).unwrap();
            let sum: f64 = b.tape.values(p).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn forward_composes_like_the_individual_steps() {
        let cfg = config(1, 1);
        let params = ModelParams::init(&cfg, 2).unwrap();
        let inst = instance(vec![graph(&[0, 1, 2], vec![(1, 0, 1), (2, 1, 2)])], 1);
        let (probs, _) = forward(&inst, &params, &cfg).unwrap();

        // compose by hand from the step methods
        let mut b = EpisodeBuilder::new(&params, &cfg);
        let q = b.q_encode(&inst.query).unwrap();
        let (mem, adj) = b.m_load(&inst.graphs[0]).unwrap();
        let r = b.read_step(&[mem], q, 1).unwrap();
        let h = b.s_update(q, r).unwrap();
        let _m = b
            .m_update(mem, &adj, &inst.graphs[0].active, h, 1, 0)
            .unwrap();
        let p = b.decode(h, q).unwrap();
        assert_eq!(probs.as_slice(), b.tape.values(p));
    }

    #[test]
    fn forward_eval_is_bit_identical_across_runs() {
        let cfg = config(2, 3);
        let params = ModelParams::init(&cfg, 9).unwrap();
        let inst = instance(
            vec![
                graph(&[0, 1, 2, 0], vec![(1, 0, 1), (1, 1, 2), (2, 2, 3)]),
                graph(&[1, 1], vec![(1, 0, 1)]),
            ],
            0,
        );
        let (p1, _) = forward(&inst, &params, &cfg).unwrap();
        let (p2, _) = forward(&inst, &params, &cfg).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn saturated_gates_make_output_independent_of_hops() {
        let mut cfg = config(1, 2);
        let mut params = ModelParams::init(&cfg, 4).unwrap();
        force_gate(&mut params, "ctrl.gate.w", "ctrl.gate.b", 40.0);
        force_gate(&mut params, "mem.gate.w", "mem.gate.b", 40.0);
        let inst = instance(vec![graph(&[0, 1], vec![(1, 0, 1)])], 0);
        let (p2, _) = forward(&inst, &params, &cfg).unwrap();
        cfg.hops = 7;
        let (p7, _) = forward(&inst, &params, &cfg).unwrap();
        for (a, b) in p2.iter().zip(&p7) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn trace_counts_follow_hops_components_heads() {
        let cfg = config(2, 3);
        let params = ModelParams::init(&cfg, 6).unwrap();
        let inst = instance(
            vec![graph(&[0, 1], vec![(1, 0, 1)]), graph(&[2], vec![])],
            0,
        );
        let (_, trace) = forward(&inst, &params, &cfg).unwrap();
        assert_eq!(trace.attention.len(), 3 * 2 * 2); // hops * components * heads
        assert_eq!(trace.controller_states.len(), 4); // h_0..h_3
        assert_eq!(trace.controller_gates.len(), 3);
        assert_eq!(trace.memory_gates.len(), 3 * 2);
        for rec in &trace.attention {
            let s: f64 = rec.weights.iter().sum();
            assert!((s - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn pooling_baseline_ignores_structure() {
        let mut cfg = config(1, 0);
        cfg.relations = 1;
        let params = ModelParams::init(&cfg, 15).unwrap();
        // same node multiset, different wiring
        let a = instance(vec![graph(&[0, 1, 2], vec![(1, 0, 1)])], 0);
        let b = instance(vec![graph(&[0, 1, 2], vec![(1, 1, 2)])], 0);
        let (pa, _) = forward(&a, &params, &cfg).unwrap();
        let (pb, _) = forward(&b, &params, &cfg).unwrap();
        assert_eq!(pa, pb);
    }
}
