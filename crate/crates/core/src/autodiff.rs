//! Tape-based reverse-mode differentiation over the small op set the
//! polynomial models and their losses need.
//!
//! Every node holds a matrix value whose rows are batch samples. Nodes are
//! appended in evaluation order, so a node's inputs always have smaller
//! ids and the tape is acyclic by construction. `backward` walks the tape
//! once in descending id order, which fixes the gradient accumulation
//! order and makes results bitwise reproducible.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Matrix, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("op `{op}`: {source}")]
    Shape {
        op: &'static str,
        #[source]
        source: TensorError,
    },
    #[error("op `{op}` expects {expected}, got {actual:?}")]
    Operand {
        op: &'static str,
        expected: &'static str,
        actual: (usize, usize),
    },
    #[error("seed shape {seed:?} does not match output shape {output:?}")]
    SeedShape {
        seed: (usize, usize),
        output: (usize, usize),
    },
    #[error("no backward rule for op `{0}`")]
    UnregisteredOp(String),
    #[error("node {0} does not exist")]
    UnknownNode(usize),
    #[error("non-finite value at coordinate {index}")]
    NonFinite { index: usize },
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    Opaque(String, Vec<NodeId>),
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulTransB(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// adds a 1×n row to every row of an m×n operand
    AddRow(NodeId, NodeId),
    /// multiplies every row of an m×n operand by a 1×n row
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    LeakyRelu(NodeId, f64),
    Softplus(NodeId),
    CenterRows(NodeId),
    ConcatCols(NodeId, NodeId),
    SliceRows(NodeId, usize),
    SumAll(NodeId),
    MeanAll(NodeId),
    Mse(NodeId, Matrix),
    Mmd(NodeId, Matrix, Vec<f64>),
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Opaque(name, _) => name,
            Op::MatMul(..) => "matmul",
            Op::MatMulTransB(..) => "matmul_transb",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Softplus(_) => "softplus",
            Op::CenterRows(_) => "center_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::SumAll(_) => "sum_all",
            Op::MeanAll(_) => "mean_all",
            Op::Mse(..) => "mse",
            Op::Mmd(..) => "mmd",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
}

/// Parameter id → gradient, one entry per registered parameter.
pub type GradientMap = BTreeMap<ParamId, Matrix>;

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, NodeId>,
}

fn shape_err(op: &'static str) -> impl FnOnce(TensorError) -> GraphError {
    move |source| GraphError::Shape { op, source }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Input, value)
    }

    /// Trainable leaf. Registering the same id twice returns the first node,
    /// so a shared parameter accumulates gradient from all of its uses.
    pub fn param(&mut self, id: ParamId, value: &Matrix) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let n = self.push(Op::Param, value.clone());
        self.params.insert(id, n);
        n
    }

    /// Records an externally computed value. Such nodes have no backward
    /// rule; differentiating through one is an error.
    pub fn opaque(&mut self, name: &str, inputs: &[NodeId], value: Matrix) -> NodeId {
        self.push(Op::Opaque(name.to_string(), inputs.to_vec()), value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self
            .value(a)
            .matmul(self.value(b))
            .map_err(shape_err("matmul"))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn matmul_transb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let bt = self.value(b).transpose();
        let v = self
            .value(a)
            .matmul(&bt)
            .map_err(shape_err("matmul_transb"))?;
        Ok(self.push(Op::MatMulTransB(a, b), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b)).map_err(shape_err("add"))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b)).map_err(shape_err("sub"))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self
            .value(a)
            .zip_with(self.value(b), |x, y| x * y)
            .map_err(shape_err("mul"))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    fn check_row(&self, op: &'static str, a: NodeId, row: NodeId) -> Result<()> {
        let (r, c) = self.value(row).shape();
        if r != 1 || c != self.value(a).cols() {
            return Err(GraphError::Operand {
                op,
                expected: "a 1×n row matching the operand width",
                actual: (r, c),
            });
        }
        Ok(())
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.check_row("add_row", a, row)?;
        let r = self.value(row).data().to_vec();
        let av = self.value(a);
        let v = Matrix::from_fn(av.rows(), av.cols(), |i, j| av[(i, j)] + r[j]);
        Ok(self.push(Op::AddRow(a, row), v))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.check_row("mul_row", a, row)?;
        let r = self.value(row).data().to_vec();
        let av = self.value(a);
        let v = Matrix::from_fn(av.rows(), av.cols(), |i, j| av[(i, j)] * r[j]);
        Ok(self.push(Op::MulRow(a, row), v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(Op::LeakyRelu(a, slope), v)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(softplus);
        self.push(Op::Softplus(a), v)
    }

    /// Subtracts the per-column mean over rows (batch-mean centering).
    pub fn center_rows(&mut self, a: NodeId) -> NodeId {
        let v = center_rows(self.value(a));
        self.push(Op::CenterRows(a), v)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(GraphError::Operand {
                op: "concat_cols",
                expected: "operands with equal row counts",
                actual: bv.shape(),
            });
        }
        let ac = av.cols();
        let v = Matrix::from_fn(av.rows(), ac + bv.cols(), |i, j| {
            if j < ac {
                av[(i, j)]
            } else {
                bv[(i, j - ac)]
            }
        });
        Ok(self.push(Op::ConcatCols(a, b), v))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let av = self.value(a);
        if start + len > av.rows() || len == 0 {
            return Err(GraphError::Operand {
                op: "slice_rows",
                expected: "a non-empty row range inside the operand",
                actual: (start, len),
            });
        }
        let v = Matrix::from_fn(len, av.cols(), |i, j| av[(start + i, j)]);
        Ok(self.push(Op::SliceRows(a, start), v))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Op::SumAll(a), Matrix::filled(1, 1, s))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let d = self.value(a).data();
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Op::MeanAll(a), Matrix::filled(1, 1, s))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: NodeId, target: &Matrix) -> Result<NodeId> {
        let v = mse(self.value(pred), target).map_err(shape_err("mse"))?;
        Ok(self.push(Op::Mse(pred, target.clone()), Matrix::filled(1, 1, v)))
    }

    /// Biased MMD² between generated rows and a constant real batch,
    /// summed over RBF bandwidths.
    pub fn mmd(&mut self, gen: NodeId, real: &Matrix, bandwidths: &[f64]) -> Result<NodeId> {
        let gv = self.value(gen);
        if gv.cols() != real.cols() || gv.rows() == 0 || real.rows() == 0 {
            return Err(GraphError::Operand {
                op: "mmd",
                expected: "non-empty batches with equal feature width",
                actual: real.shape(),
            });
        }
        let v = mmd_value(gv, real, bandwidths);
        Ok(self.push(
            Op::Mmd(gen, real.clone(), bandwidths.to_vec()),
            Matrix::filled(1, 1, v),
        ))
    }

    /// Reverse sweep from `output` seeded with `seed`.
    pub fn backward(&self, output: NodeId, seed: &Matrix) -> Result<GradientMap> {
        let out = self
            .nodes
            .get(output.0)
            .ok_or(GraphError::UnknownNode(output.0))?;
        if out.value.shape() != seed.shape() {
            return Err(GraphError::SeedShape {
                seed: seed.shape(),
                output: out.value.shape(),
            });
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        adj[output.0] = Some(seed.clone());

        for id in (0..=output.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                // parameter adjoints stay in place for collection below
                Op::Param => adj[id] = Some(g),
                Op::Opaque(name, inputs) => {
                    if !inputs.is_empty() {
                        return Err(GraphError::UnregisteredOp(name.clone()));
                    }
                }
                op => {
                    for (target, contrib) in self.local_grads(op, &node.value, &g) {
                        accumulate(&mut adj[target.0], contrib);
                    }
                }
            }
        }

        let mut grads = GradientMap::new();
        for (&pid, &nid) in &self.params {
            let v = &self.nodes[nid.0].value;
            let g = adj
                .get_mut(nid.0)
                .and_then(Option::take)
                .unwrap_or_else(|| Matrix::zeros(v.rows(), v.cols()));
            grads.insert(pid, g);
        }
        Ok(grads)
    }

    /// Convenience for scalar outputs: seeds with 1.
    pub fn backward_scalar(&self, output: NodeId) -> Result<GradientMap> {
        self.backward(output, &Matrix::filled(1, 1, 1.0))
    }

    fn local_grads(&self, op: &Op, out: &Matrix, g: &Matrix) -> Vec<(NodeId, Matrix)> {
        let val = |n: NodeId| &self.nodes[n.0].value;
        match *op {
            Op::MatMul(a, b) => vec![
                (a, g.matmul(&val(b).transpose()).expect("shape")),
                (b, val(a).transpose().matmul(g).expect("shape")),
            ],
            Op::MatMulTransB(a, b) => vec![
                (a, g.matmul(val(b)).expect("shape")),
                (b, g.transpose().matmul(val(a)).expect("shape")),
            ],
            Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            Op::Sub(a, b) => vec![(a, g.clone()), (b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![
                (a, g.zip_with(val(b), |x, y| x * y).expect("shape")),
                (b, g.zip_with(val(a), |x, y| x * y).expect("shape")),
            ],
            Op::AddRow(a, row) => vec![(a, g.clone()), (row, column_sums(g))],
            Op::MulRow(a, row) => {
                let r = val(row).data();
                let av = val(a);
                let ga = Matrix::from_fn(g.rows(), g.cols(), |i, j| g[(i, j)] * r[j]);
                let gr = Matrix::from_fn(1, g.cols(), |_, j| {
                    (0..g.rows()).map(|i| g[(i, j)] * av[(i, j)]).sum()
                });
                vec![(a, ga), (row, gr)]
            }
            Op::Scale(a, c) => vec![(a, g.scale(c))],
            Op::Tanh(a) => vec![(
                a,
                g.zip_with(out, |gi, t| gi * (1.0 - t * t)).expect("shape"),
            )],
            Op::LeakyRelu(a, slope) => vec![(
                a,
                g.zip_with(val(a), |gi, x| if x > 0.0 { gi } else { gi * slope })
                    .expect("shape"),
            )],
            Op::Softplus(a) => vec![(
                a,
                g.zip_with(val(a), |gi, x| gi * sigmoid(x)).expect("shape"),
            )],
            Op::CenterRows(a) => vec![(a, center_rows(g))],
            Op::ConcatCols(a, b) => {
                let ac = val(a).cols();
                let ga = Matrix::from_fn(g.rows(), ac, |i, j| g[(i, j)]);
                let gb = Matrix::from_fn(g.rows(), g.cols() - ac, |i, j| g[(i, ac + j)]);
                vec![(a, ga), (b, gb)]
            }
            Op::SliceRows(a, start) => {
                let av = val(a);
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        ga[(start + i, j)] = g[(i, j)];
                    }
                }
                vec![(a, ga)]
            }
            Op::SumAll(a) => {
                let (r, c) = val(a).shape();
                vec![(a, Matrix::filled(r, c, g[(0, 0)]))]
            }
            Op::MeanAll(a) => {
                let (r, c) = val(a).shape();
                vec![(a, Matrix::filled(r, c, g[(0, 0)] / (r * c) as f64))]
            }
            Op::Mse(a, ref target) => {
                let n = target.data().len() as f64;
                let s = 2.0 * g[(0, 0)] / n;
                vec![(
                    a,
                    val(a).zip_with(target, |p, t| s * (p - t)).expect("shape"),
                )]
            }
            Op::Mmd(a, ref real, ref bw) => {
                vec![(a, mmd_grad(val(a), real, bw).scale(g[(0, 0)]))]
            }
            Op::Input | Op::Param | Op::Opaque(..) => unreachable!("leaf ops handled by caller"),
        }
    }

    pub fn op_name(&self, id: NodeId) -> &str {
        self.nodes[id.0].op.name()
    }
}

fn accumulate(slot: &mut Option<Matrix>, contrib: Matrix) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                *a += c;
            }
        }
        None => *slot = Some(contrib),
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    Matrix::from_fn(1, g.cols(), |_, j| (0..g.rows()).map(|i| g[(i, j)]).sum())
}

pub(crate) fn center_rows(m: &Matrix) -> Matrix {
    let n = m.rows() as f64;
    let means = column_sums(m).scale(1.0 / n);
    Matrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)] - means[(0, j)])
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn mse(pred: &Matrix, target: &Matrix) -> std::result::Result<f64, TensorError> {
    let d = pred.sub(target)?;
    Ok(d.data().iter().map(|v| v * v).sum::<f64>() / d.data().len() as f64)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kernel_mean(x: &Matrix, y: &Matrix, bw: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..x.rows() {
        for j in 0..y.rows() {
            let d2 = sq_dist(x.row(i), y.row(j));
            for &sigma in bw {
                s += (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    s / (x.rows() * y.rows()) as f64
}

pub(crate) fn mmd_value(x: &Matrix, y: &Matrix, bw: &[f64]) -> f64 {
    kernel_mean(x, x, bw) + kernel_mean(y, y, bw) - 2.0 * kernel_mean(x, y, bw)
}

fn mmd_grad(x: &Matrix, y: &Matrix, bw: &[f64]) -> Matrix {
    let (n, m) = (x.rows() as f64, y.rows() as f64);
    let mut g = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        // d/dx_i of (1/n²)ΣΣ k(x_a, x_b): each pair containing i counts twice
        for j in 0..x.rows() {
            let d2 = sq_dist(x.row(i), x.row(j));
            let w: f64 = bw
                .iter()
                .map(|s| (-d2 / (2.0 * s * s)).exp() / (s * s))
                .sum();
            for c in 0..x.cols() {
                g[(i, c)] += -2.0 / (n * n) * w * (x[(i, c)] - x[(j, c)]);
            }
        }
        for j in 0..y.rows() {
            let d2 = sq_dist(x.row(i), y.row(j));
            let w: f64 = bw
                .iter()
                .map(|s| (-d2 / (2.0 * s * s)).exp() / (s * s))
                .sum();
            for c in 0..x.cols() {
                g[(i, c)] += 2.0 / (n * m) * w * (x[(i, c)] - y[(j, c)]);
            }
        }
    }
    g
}

/// Central-difference gradient of `f` at `params`.
pub fn central_differences<F>(f: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(GraphError::BadStep(h));
    }
    let mut x = params.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        let d = (fp - fm) / (2.0 * h);
        if !d.is_finite() {
            return Err(GraphError::NonFinite { index: i });
        }
        out.push(d);
    }
    Ok(out)
}

/// Maximum relative error between an analytic gradient and central
/// differences of `f`, with denominator `max(|a|, |fd|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, params: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "gradient length");
    if let Some(i) = analytic.iter().position(|a| !a.is_finite()) {
        return Err(GraphError::NonFinite { index: i });
    }
    let fd = central_differences(f, params, h)?;
    Ok(analytic
        .iter()
        .zip(&fd)
        .map(|(a, d)| (a - d).abs() / a.abs().max(d.abs()).max(1e-8))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        // small LCG so these tests do not depend on the rng module
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn sum_of_squares_gradient_is_2x() {
        let x = Matrix::from_rows(&[&[1.0, -2.0, 0.5]]);
        let mut g = Graph::new();
        let p = g.param(ParamId(0), &x);
        let sq = g.mul(p, p).unwrap();
        let s = g.sum_all(sq);
        assert_eq!(g.value(s)[(0, 0)], 5.25);
        let grads = g.backward_scalar(s).unwrap();
        assert_eq!(grads[&ParamId(0)], x.scale(2.0));
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let a = g.param(ParamId(0), &Matrix::filled(1, 2, 3.0));
        let _b = g.param(ParamId(1), &Matrix::filled(2, 2, 1.0));
        let s = g.sum_all(a);
        let grads = g.backward_scalar(s).unwrap();
        assert_eq!(grads.len(), 2);
        assert_eq!(grads[&ParamId(1)], Matrix::zeros(2, 2));
    }

    #[test]
    fn shared_param_accumulates() {
        let mut g = Graph::new();
        let a = g.param(ParamId(7), &Matrix::filled(1, 1, 2.0));
        let a2 = g.param(ParamId(7), &Matrix::filled(1, 1, 2.0));
        assert_eq!(a, a2);
        let p = g.mul(a, a2).unwrap();
        let grads = g.backward_scalar(p).unwrap();
        assert_eq!(grads[&ParamId(7)][(0, 0)], 4.0);
    }

    #[test]
    fn opaque_node_blocks_backward() {
        let mut g = Graph::new();
        let a = g.param(ParamId(0), &Matrix::filled(1, 1, 2.0));
        let o = g.opaque("argmax", &[a], Matrix::filled(1, 1, 0.0));
        let err = g.backward_scalar(o).unwrap_err();
        assert_eq!(err, GraphError::UnregisteredOp("argmax".into()));
        assert!(err.to_string().contains("argmax"));
    }

    #[test]
    fn seed_shape_is_checked() {
        let mut g = Graph::new();
        let a = g.param(ParamId(0), &Matrix::filled(2, 2, 1.0));
        assert!(matches!(
            g.backward(a, &Matrix::zeros(1, 1)),
            Err(GraphError::SeedShape { .. })
        ));
    }

    #[test]
    fn fd_check_linear_and_cubic() {
        let f = |x: &[f64]| 3.0 * x[0] - 2.0 * x[1] + 0.5;
        let err = finite_diff_check(f, &[0.3, -1.2], &[3.0, -2.0], 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");

        let fd = central_differences(|x: &[f64]| x[0].powi(3), &[1.0], 1e-4).unwrap();
        assert!((fd[0] - 3.0).abs() < 1e-7);

        assert!(matches!(
            central_differences(|x: &[f64]| x[0], &[1.0], 0.0),
            Err(GraphError::BadStep(_))
        ));
        assert_eq!(
            central_differences(
                |x: &[f64]| if x[1] > 0.0 { f64::NAN } else { 0.0 },
                &[0.0, 0.0],
                1e-3
            ),
            Err(GraphError::NonFinite { index: 1 })
        );
    }

    /// Builds a graph touching every differentiable op and compares its
    /// gradient against central differences.
    #[test]
    fn every_op_matches_finite_differences() {
        let shapes = [(3, 4), (4, 2), (1, 2), (1, 2), (3, 2)];
        let sizes: Vec<usize> = shapes.iter().map(|(r, c)| r * c).collect();
        let total: usize = sizes.iter().sum();
        let x0 = pseudo(total, 11);
        let real = Matrix::from_vec(2, 2, pseudo(4, 5)).unwrap();
        let target = Matrix::from_vec(2, 2, pseudo(4, 9)).unwrap();

        let build = |x: &[f64]| -> (Graph, NodeId) {
            let mut g = Graph::new();
            let mut off = 0;
            let mut ids = Vec::new();
            for (k, &(r, c)) in shapes.iter().enumerate() {
                let m = Matrix::from_vec(r, c, x[off..off + r * c].to_vec()).unwrap();
                off += r * c;
                ids.push(g.param(ParamId(k), &m));
            }
            let h = g.matmul(ids[0], ids[1]).unwrap(); // 3×2
            let h = g.add_row(h, ids[2]).unwrap();
            let h = g.mul_row(h, ids[3]).unwrap();
            let h2 = g.matmul_transb(ids[4], ids[1]).unwrap(); // 3×4
            let h2 = g.tanh(h2);
            let h3 = g.matmul(h2, ids[1]).unwrap(); // 3×2
            let h = g.mul(h, h3).unwrap();
            let h = g.sub(h, ids[4]).unwrap();
            let h = g.center_rows(h);
            let lr = g.leaky_relu(h, 0.2);
            let sp = g.softplus(lr);
            let cat = g.concat_cols(sp, h).unwrap(); // 3×4
            let top = g.slice_rows(cat, 1, 2).unwrap(); // 2×4
            let w = g.input(Matrix::from_vec(4, 2, pseudo(8, 3)).unwrap());
            let proj = g.matmul(top, w).unwrap(); // 2×2
            let l1 = g.mse(proj, &target).unwrap();
            let l2 = g.mmd(proj, &real, &[0.5, 1.0]).unwrap();
            let l3 = g.mean_all(sp);
            let s = g.add(l1, l2).unwrap();
            let s = g.add(s, l3).unwrap();
            let s = g.scale(s, 1.5);
            (g, s)
        };

        let (g, out) = build(&x0);
        let grads = g.backward_scalar(out).unwrap();
        let analytic: Vec<f64> = grads.values().flat_map(|m| m.data().to_vec()).collect();
        let f = |x: &[f64]| {
            let (g, o) = build(x);
            g.value(o)[(0, 0)]
        };
        let err = finite_diff_check(f, &x0, &analytic, 1e-5).unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn backward_is_linear_in_seed() {
        let x = Matrix::from_vec(2, 3, pseudo(6, 1)).unwrap();
        let w = Matrix::from_vec(3, 2, pseudo(6, 2)).unwrap();
        let mut g = Graph::new();
        let px = g.param(ParamId(0), &x);
        let pw = g.param(ParamId(1), &w);
        let h = g.matmul(px, pw).unwrap();
        let out = g.tanh(h);
        let u = Matrix::from_vec(2, 2, pseudo(4, 3)).unwrap();
        let v = Matrix::from_vec(2, 2, pseudo(4, 4)).unwrap();
        let (alpha, beta) = (0.7, -1.3);
        let mix = u.scale(alpha).add(&v.scale(beta)).unwrap();
        let gu = g.backward(out, &u).unwrap();
        let gv = g.backward(out, &v).unwrap();
        let gm = g.backward(out, &mix).unwrap();
        for id in [ParamId(0), ParamId(1)] {
            let lin = gu[&id].scale(alpha).add(&gv[&id].scale(beta)).unwrap();
            assert!(gm[&id].max_abs_diff(&lin).unwrap() < 1e-12);
        }
    }

    #[test]
    fn mmd_closed_forms() {
        let x = Matrix::from_rows(&[&[0.0, 0.0], &[1.0, 2.0]]);
        assert!(mmd_value(&x, &x, &[1.0]).abs() < 1e-12);
        let a = Matrix::from_rows(&[&[0.0, 0.0]]);
        let b = Matrix::from_rows(&[&[3.0, 4.0]]);
        let (r, s) = (5.0f64, 2.0f64);
        let expected = 2.0 * (1.0 - (-r * r / (2.0 * s * s)).exp());
        assert!((mmd_value(&a, &b, &[s]) - expected).abs() < 1e-14);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
    }
}
