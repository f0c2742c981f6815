//! Reverse-mode automatic differentiation over a per-example operation record.
//!
//! A [`Tape`] is built forward in topological order and replayed backward to
//! accumulate gradients. Records are single-writer; concurrent forward passes
//! each own an independent tape over shared read-only parameter values.

use crate::tensor::{Tensor, TensorError};
use rand::Rng;

/// Probability floor used by [`Tape::log_clamped`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node in a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBroadcast { mat: Var, col: Var },
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    Reduce { input: Var, kind: ReduceKind, axis: Option<usize> },
    ConcatRows(Var, Var),
    Transpose(Var),
    EmbedRow { table: Var, row: usize },
    Pick { input: Var, index: usize },
    LogClamped(Var),
    Dropout { input: Var, mask: Vec<f64> },
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

/// Recorded computation: ordered operation nodes with saved forward values.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; zero for nodes off every path to the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        let (r, c) = self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(r, c, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(r, c),
        }
    }

    pub fn values_wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Shape of a recorded node.
    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Forward values of a recorded node.
    pub fn values(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn value_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.rows, n.cols, n.values.clone()).expect("node shape")
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, values: Vec<f64>) -> Var {
        debug_assert_eq!(values.len(), rows * cols);
        self.nodes.push(Node { op, rows, cols, values });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a leaf holding a copy of `t`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.shape();
        self.push(Op::Leaf, r, c, t.values().to_vec())
    }

    /// Matrix product `a (m x k) * b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(TensorError::Dimension {
                op: "matmul",
                lhs: (m, ka),
                rhs: (kb, n),
            });
        }
        let va = &self.nodes[a.0].values;
        let vb = &self.nodes[b.0].values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..ka {
                let aip = va[i * ka + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &vb[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        Ok(self.push(Op::MatMul(a, b), m, n, out))
    }

    /// Elementwise sum; the second operand may be a broadcastable column.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            let out = zip_with(&self.nodes[a.0].values, &self.nodes[b.0].values, |x, y| x + y);
            return Ok(self.push(Op::Add(a, b), sa.0, sa.1, out));
        }
        let (mat, col) = if sb == (sa.0, 1) && sa.1 > 1 {
            (a, b)
        } else if sa == (sb.0, 1) && sb.1 > 1 {
            (b, a)
        } else {
            return Err(TensorError::Dimension {
                op: "add",
                lhs: sa,
                rhs: sb,
            });
        };
        let (r, c) = self.shape(mat);
        let vm = &self.nodes[mat.0].values;
        let vc = &self.nodes[col.0].values;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = vm[i * c + j] + vc[i];
            }
        }
        Ok(self.push(Op::AddBroadcast { mat, col }, r, c, out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(TensorError::Dimension {
                op: "sub",
                lhs: sa,
                rhs: sb,
            });
        }
        let out = zip_with(&self.nodes[a.0].values, &self.nodes[b.0].values, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), sa.0, sa.1, out))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(TensorError::Dimension {
                op: "mul",
                lhs: sa,
                rhs: sb,
            });
        }
        let out = zip_with(&self.nodes[a.0].values, &self.nodes[b.0].values, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), sa.0, sa.1, out))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0].values.iter().map(|x| x * factor).collect();
        self.push(Op::Scale(a, factor), r, c, out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0].values.iter().map(|x| x.max(0.0)).collect();
        self.push(Op::Relu(a), r, c, out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0].values.iter().map(|x| x.tanh()).collect();
        self.push(Op::Tanh(a), r, c, out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self
            .nodes[a.0]
            .values
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        self.push(Op::Sigmoid(a), r, c, out)
    }

    /// Softmax over a nonempty vector, computed with max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.shape(a);
        if r != 1 && c != 1 {
            return Err(TensorError::Domain {
                op: "softmax",
                expected: "a vector",
                got: (r, c),
            });
        }
        let v = &self.nodes[a.0].values;
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let out: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        Ok(self.push(Op::Softmax(a), r, c, out))
    }

    pub fn reduce(
        &mut self,
        kind: ReduceKind,
        a: Var,
        axis: Option<usize>,
    ) -> Result<Var, TensorError> {
        let (r, c) = self.shape(a);
        let v = &self.nodes[a.0].values;
        let (or, oc, mut out) = match axis {
            None => {
                let s: f64 = v.iter().sum();
                (1, 1, vec![s])
            }
            Some(0) => {
                let mut o = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        o[j] += v[i * c + j];
                    }
                }
                (1, c, o)
            }
            Some(1) => {
                let mut o = vec![0.0; r];
                for i in 0..r {
                    for j in 0..c {
                        o[i] += v[i * c + j];
                    }
                }
                (r, 1, o)
            }
            Some(ax) => return Err(TensorError::Axis(ax)),
        };
        if kind == ReduceKind::Mean {
            let count = match axis {
                None => (r * c) as f64,
                Some(0) => r as f64,
                Some(1) => c as f64,
                _ => unreachable!(),
            };
            for o in &mut out {
                *o /= count;
            }
        }
        Ok(self.push(Op::Reduce { input: a, kind, axis }, or, oc, out))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        self.reduce(ReduceKind::Sum, a, None).expect("axis None")
    }

    /// Stacks `a` on top of `b`; column counts must agree.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ca != cb {
            return Err(TensorError::Dimension {
                op: "concat_rows",
                lhs: (ra, ca),
                rhs: (rb, cb),
            });
        }
        let mut out = Vec::with_capacity((ra + rb) * ca);
        out.extend_from_slice(&self.nodes[a.0].values);
        out.extend_from_slice(&self.nodes[b.0].values);
        Ok(self.push(Op::ConcatRows(a, b), ra + rb, ca, out))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v = &self.nodes[a.0].values;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        self.push(Op::Transpose(a), c, r, out)
    }

    /// Row `row` of a table `n x d`, as a `d x 1` column.
    pub fn embed_row(&mut self, table: Var, row: usize) -> Result<Var, TensorError> {
        let (n, d) = self.shape(table);
        if row >= n {
            return Err(TensorError::Index { index: row, len: n });
        }
        let out = self.nodes[table.0].values[row * d..(row + 1) * d].to_vec();
        Ok(self.push(Op::EmbedRow { table, row }, d, 1, out))
    }

    /// Entry `index` of a vector, as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var, TensorError> {
        let (r, c) = self.shape(a);
        if r != 1 && c != 1 {
            return Err(TensorError::Domain {
                op: "pick",
                expected: "a vector",
                got: (r, c),
            });
        }
        let v = &self.nodes[a.0].values;
        if index >= v.len() {
            return Err(TensorError::Index {
                index,
                len: v.len(),
            });
        }
        let out = vec![v[index]];
        Ok(self.push(Op::Pick { input: a, index }, 1, 1, out))
    }

    /// Elementwise `ln(max(x, PROB_FLOOR))`.
    pub fn log_clamped(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self
            .nodes[a.0]
            .values
            .iter()
            .map(|x| x.max(PROB_FLOOR).ln())
            .collect();
        self.push(Op::LogClamped(a), r, c, out)
    }

    /// Inverted dropout: training mode zeroes entries with probability `rate`
    /// and scales survivors by `1/(1-rate)`; eval mode is the identity.
    pub fn dropout<R: Rng>(
        &mut self,
        a: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::DropoutRate(rate));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let (r, c) = self.shape(a);
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let mask: Vec<f64> = (0..r * c)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let out = zip_with(&self.nodes[a.0].values, &mask, |x, m| x * m);
        Ok(self.push(Op::Dropout { input: a, mask }, r, c, out))
    }

    /// Reverse accumulation from a scalar loss. Nodes off every path to the
    /// loss report zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let (lr, lc) = self.shape(loss);
        if (lr, lc) != (1, 1) {
            return Err(TensorError::NonScalarLoss((lr, lc)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            // take to appease the borrow checker; inputs always precede
            // their node, so the slot is reinserted untouched below
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(*a);
                    let (_, n) = self.shape(*b);
                    let va = &self.nodes[a.0].values;
                    let vb = &self.nodes[b.0].values;
                    {
                        let da = ensure(&mut grads, a.0, m * k);
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &vb[p * n..(p + 1) * n];
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += grow[j] * brow[j];
                                }
                                da[i * k + p] += s;
                            }
                        }
                    }
                    {
                        let db = ensure(&mut grads, b.0, k * n);
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = va[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                let drow = &mut db[p * n..(p + 1) * n];
                                for j in 0..n {
                                    drow[j] += aip * grow[j];
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a.0, &g);
                    accumulate(&mut grads, b.0, &g);
                }
                Op::AddBroadcast { mat, col } => {
                    let (r, c) = self.shape(*mat);
                    accumulate(&mut grads, mat.0, &g);
                    let dc = ensure(&mut grads, col.0, r);
                    for i in 0..r {
                        for j in 0..c {
                            dc[i] += g[i * c + j];
                        }
                    }
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, a.0, &g);
                    let db = ensure(&mut grads, b.0, g.len());
                    for (d, gi) in db.iter_mut().zip(&g) {
                        *d -= gi;
                    }
                }
                Op::Mul(a, b) => {
                    let va = self.nodes[a.0].values.clone();
                    let vb = &self.nodes[b.0].values;
                    {
                        let da = ensure(&mut grads, a.0, g.len());
                        for i in 0..g.len() {
                            da[i] += g[i] * vb[i];
                        }
                    }
                    let db = ensure(&mut grads, b.0, g.len());
                    for i in 0..g.len() {
                        db[i] += g[i] * va[i];
                    }
                }
                Op::Scale(a, f) => {
                    let da = ensure(&mut grads, a.0, g.len());
                    for (d, gi) in da.iter_mut().zip(&g) {
                        *d += gi * f;
                    }
                }
                Op::Relu(a) => {
                    let va = &self.nodes[a.0].values;
                    let da = ensure(&mut grads, a.0, g.len());
                    for i in 0..g.len() {
                        if va[i] > 0.0 {
                            da[i] += g[i];
                        }
                    }
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[idx].values;
                    let da = ensure(&mut grads, a.0, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[idx].values;
                    let da = ensure(&mut grads, a.0, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
                Op::Softmax(a) => {
                    let y = &self.nodes[idx].values;
                    let dot: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                    let da = ensure(&mut grads, a.0, g.len());
                    for i in 0..g.len() {
                        da[i] += y[i] * (g[i] - dot);
                    }
                }
                Op::Reduce { input, kind, axis } => {
                    let (r, c) = self.shape(*input);
                    let factor = match kind {
                        ReduceKind::Sum => 1.0,
                        ReduceKind::Mean => match axis {
                            None => 1.0 / (r * c) as f64,
                            Some(0) => 1.0 / r as f64,
                            Some(1) => 1.0 / c as f64,
                            _ => unreachable!(),
                        },
                    };
                    let da = ensure(&mut grads, input.0, r * c);
                    match axis {
                        None => {
                            for d in da.iter_mut() {
                                *d += g[0] * factor;
                            }
                        }
                        Some(0) => {
                            for i in 0..r {
                                for j in 0..c {
                                    da[i * c + j] += g[j] * factor;
                                }
                            }
                        }
                        Some(1) => {
                            for i in 0..r {
                                for j in 0..c {
                                    da[i * c + j] += g[i] * factor;
                                }
                            }
                        }
                        _ => unreachable!(),
                    }
                }
                Op::ConcatRows(a, b) => {
                    let (ra, ca) = self.shape(*a);
                    let split = ra * ca;
                    accumulate(&mut grads, a.0, &g[..split]);
                    accumulate(&mut grads, b.0, &g[split..]);
                }
                Op::Transpose(a) => {
                    let (r, c) = self.shape(*a);
                    let da = ensure(&mut grads, a.0, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                }
                Op::EmbedRow { table, row } => {
                    let (_, d) = self.shape(*table);
                    let (tr, tc) = self.shape(*table);
                    let dt = ensure(&mut grads, table.0, tr * tc);
                    for j in 0..d {
                        dt[row * d + j] += g[j];
                    }
                }
                Op::Pick { input, index } => {
                    let (r, c) = self.shape(*input);
                    let da = ensure(&mut grads, input.0, r * c);
                    da[*index] += g[0];
                }
                Op::LogClamped(a) => {
                    let va = &self.nodes[a.0].values;
                    let da = ensure(&mut grads, a.0, g.len());
                    for i in 0..g.len() {
                        if va[i] > PROB_FLOOR {
                            da[i] += g[i] / va[i];
                        }
                    }
                }
                Op::Dropout { input, mask } => {
                    let da = ensure(&mut grads, input.0, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * mask[i];
                    }
                }
            }
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| (n.rows, n.cols)).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn zip_with(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn ensure(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, g: &[f64]) {
    let slot = ensure(grads, idx, g.len());
    for (d, gi) in slot.iter_mut().zip(g) {
        *d += gi;
    }
}
