//! Recursive polynomial models and their baselines.
//!
//! Every model maps a fixed list of input variables `z_I, z_II, …` to an
//! output vector through a recursion over expansion orders `n = 1..N`:
//!
//! | model      | `y_1`                         | `y_n`                                         |
//! |------------|-------------------------------|-----------------------------------------------|
//! | CCP        | `e_1`                         | `y_{n-1} + e_n * y_{n-1}`                     |
//! | NCP        | `e_1 * s_1`                   | `e_n * (V_nᵀ y_{n-1} + s_n)`                  |
//! | additive   | `e_1 + s_1`                   | `e_n + (V_nᵀ y_{n-1} + s_n)`                  |
//! | Π-Net      | `Λ_1ᵀ z`                      | `(Λ_nᵀ z) * y_{n-1} + y_{n-1}`                |
//! | SPADE      | `A_{1,I}ᵀ z_I`                | `(A_{n,II}ᵀ z_II) * (V_nᵀ y_{n-1} + s_n)`     |
//!
//! where `e_n = Σ_φ U_{n,φ}ᵀ z_φ` is the summed per-variable embedding,
//! `s_n = B_nᵀ b_n`, and the output is `C y_N + β`.
//!
//! Each model has two evaluation paths: plain single-sample functions
//! (`ccp_forward`, `ncp_forward`, …) and graph builders used for training.
//! Tests hold the two paths to each other.
//!
//! Input factors are dense matrices here. The role a factor plays (an
//! embedding `Uᵀz` of one variable) is all the recursion depends on, so a
//! convolutional embedding could replace any of them without touching
//! the recursions.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{center_rows, Graph, GraphError, NodeId, ParamId};
use crate::rng::uniform_matrix;
use crate::tensor::{Matrix, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("expected {expected} input variables, got {actual}")]
    Arity { expected: usize, actual: usize },
    #[error("input variable {variable} has length {actual}, expected {expected}")]
    InputDim {
        variable: usize,
        expected: usize,
        actual: usize,
    },
    #[error("invalid parameter shape: {0}")]
    Shape(String),
    #[error("operation needs {expected:?} parameters, got {actual:?}")]
    Variant { expected: Variant, actual: Variant },
    #[error("block {block}: {reason}")]
    Chain { block: usize, reason: String },
    #[error("parameters are not in SPADE configuration: {0} is non-zero")]
    NotSpade(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Index of the conditional variable `z_II` among a model's inputs.
pub const CONDITIONAL: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Ccp,
    Ncp,
}

/// Per-order matrices of the nested factorization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestedFactors {
    /// `V^{(n)}` for `n = 2..=N`, each `k × k`.
    pub v: Vec<Matrix>,
    /// `B^{(n)}` for `n = 1..=N`, each `ω × k`.
    pub b: Vec<Matrix>,
    /// `b^{(n)}` for `n = 1..=N`, each a `1 × ω` row.
    pub scales: Vec<Matrix>,
}

/// Hyperparameters of one polynomial block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopeShape {
    pub variant: Variant,
    pub order: usize,
    pub rank: usize,
    pub input_dims: Vec<usize>,
    pub output_dim: usize,
    /// Width of the scaling vectors; defaults to the rank.
    pub omega: Option<usize>,
    pub share_conditional: bool,
}

/// Parameters of one coupled (CCP) or nested (NCP) polynomial block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopeParams {
    pub variant: Variant,
    pub order: usize,
    pub rank: usize,
    pub input_dims: Vec<usize>,
    pub output_dim: usize,
    pub share_conditional: bool,
    /// `factors[φ][n-1]` is `U^{(n,φ)}` (or `A^{(n,φ)}`), `d_φ × k`. With
    /// `share_conditional`, the conditional variable keeps one matrix that
    /// serves every order.
    pub factors: Vec<Vec<Matrix>>,
    pub nested: Option<NestedFactors>,
    /// Output head `C`, `o × k`.
    pub c: Matrix,
    /// Bias `β` as a `1 × o` row.
    pub beta: Matrix,
}

fn shape_err(what: impl Into<String>) -> ModelError {
    ModelError::Shape(what.into())
}

fn expect_shape(m: &Matrix, rows: usize, cols: usize, name: &str) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(shape_err(format!(
            "{name} is {:?}, expected {:?}",
            m.shape(),
            (rows, cols)
        )));
    }
    Ok(())
}

fn check_inputs(dims: &[usize], inputs: &[&[f64]]) -> Result<()> {
    if inputs.len() != dims.len() {
        return Err(ModelError::Arity {
            expected: dims.len(),
            actual: inputs.len(),
        });
    }
    for (variable, (z, &d)) in inputs.iter().zip(dims).enumerate() {
        if z.len() != d {
            return Err(ModelError::InputDim {
                variable,
                expected: d,
                actual: z.len(),
            });
        }
    }
    Ok(())
}

fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

fn row_times(row: &Matrix, m: &Matrix) -> Vec<f64> {
    // (1×ω)·(ω×k) as a plain vector, i.e. Bᵀb
    m.t_mul_vec(row.data()).expect("validated shape")
}

impl CopeParams {
    pub fn zeros(shape: &CopeShape) -> Result<Self> {
        Self::build(shape, Matrix::zeros, Matrix::zeros)
    }

    /// Draws factor entries uniformly from `[-1/√k, 1/√k]`; scaling vectors
    /// start at one and the bias at zero.
    pub fn init(shape: &CopeShape, rng: &mut impl Rng) -> Result<Self> {
        let s = 1.0 / (shape.rank.max(1) as f64).sqrt();
        let rng = std::cell::RefCell::new(rng);
        Self::build(
            shape,
            |r, c| uniform_matrix(&mut *rng.borrow_mut(), r, c, -s, s),
            |r, c| Matrix::filled(r, c, 1.0),
        )
    }

    fn build(
        shape: &CopeShape,
        mut draw: impl FnMut(usize, usize) -> Matrix,
        mut ones: impl FnMut(usize, usize) -> Matrix,
    ) -> Result<Self> {
        let CopeShape {
            variant,
            order,
            rank,
            ref input_dims,
            output_dim,
            omega,
            share_conditional,
        } = *shape;
        if order == 0 || rank == 0 || output_dim == 0 || input_dims.is_empty() {
            return Err(shape_err(
                "order, rank, output dim and input count must be positive",
            ));
        }
        let factors = input_dims
            .iter()
            .enumerate()
            .map(|(phi, &d)| {
                let count = if share_conditional && phi == CONDITIONAL {
                    1
                } else {
                    order
                };
                (0..count).map(|_| draw(d, rank)).collect()
            })
            .collect();
        let nested = (variant == Variant::Ncp).then(|| {
            let w = omega.unwrap_or(rank);
            NestedFactors {
                v: (1..order).map(|_| draw(rank, rank)).collect(),
                b: (0..order).map(|_| draw(w, rank)).collect(),
                scales: (0..order).map(|_| ones(1, w)).collect(),
            }
        });
        let p = CopeParams {
            variant,
            order,
            rank,
            input_dims: input_dims.clone(),
            output_dim,
            share_conditional,
            factors,
            nested,
            c: draw(output_dim, rank),
            beta: Matrix::zeros(1, output_dim),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn shape(&self) -> CopeShape {
        CopeShape {
            variant: self.variant,
            order: self.order,
            rank: self.rank,
            input_dims: self.input_dims.clone(),
            output_dim: self.output_dim,
            omega: self.omega(),
            share_conditional: self.share_conditional,
        }
    }

    pub fn omega(&self) -> Option<usize> {
        self.nested
            .as_ref()
            .and_then(|n| n.scales.first())
            .map(Matrix::cols)
    }

    pub fn num_variables(&self) -> usize {
        self.input_dims.len()
    }

    /// `U^{(n,φ)}` with 1-based order `n` and 0-based variable `φ`.
    pub fn factor(&self, n: usize, phi: usize) -> &Matrix {
        let f = &self.factors[phi];
        if f.len() == 1 {
            &f[0]
        } else {
            &f[n - 1]
        }
    }

    pub fn factor_mut(&mut self, n: usize, phi: usize) -> &mut Matrix {
        let f = &mut self.factors[phi];
        if f.len() == 1 {
            &mut f[0]
        } else {
            &mut f[n - 1]
        }
    }

    pub fn nested(&self) -> Result<&NestedFactors> {
        self.nested.as_ref().ok_or(ModelError::Variant {
            expected: Variant::Ncp,
            actual: self.variant,
        })
    }

    /// Switches to one conditional embedding for all orders, keeping
    /// `U^{(1,II)}`.
    pub fn into_shared(mut self) -> Self {
        if self.factors.len() > CONDITIONAL {
            self.factors[CONDITIONAL].truncate(1);
            self.share_conditional = true;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (n, k, o) = (self.order, self.rank, self.output_dim);
        if n == 0 || k == 0 || o == 0 {
            return Err(shape_err("order, rank and output dim must be positive"));
        }
        if self.factors.len() != self.input_dims.len() || self.input_dims.is_empty() {
            return Err(shape_err("one factor list per input variable is required"));
        }
        if self.share_conditional && self.input_dims.len() <= CONDITIONAL {
            return Err(shape_err("sharing needs a conditional variable"));
        }
        for (phi, (fs, &d)) in self.factors.iter().zip(&self.input_dims).enumerate() {
            let want = if self.share_conditional && phi == CONDITIONAL {
                1
            } else {
                n
            };
            if fs.len() != want {
                return Err(shape_err(format!(
                    "variable {phi} has {} factors, expected {want}",
                    fs.len()
                )));
            }
            for (i, f) in fs.iter().enumerate() {
                expect_shape(f, d, k, &format!("U[{},{phi}]", i + 1))?;
            }
        }
        expect_shape(&self.c, o, k, "C")?;
        expect_shape(&self.beta, 1, o, "beta")?;
        match (self.variant, &self.nested) {
            (Variant::Ccp, None) => Ok(()),
            (Variant::Ncp, Some(nf)) => {
                if nf.v.len() != n - 1 || nf.b.len() != n || nf.scales.len() != n {
                    return Err(shape_err("nested factors need N-1 V and N B/b entries"));
                }
                let w = nf.scales[0].cols();
                for v in &nf.v {
                    expect_shape(v, k, k, "V")?;
                }
                for b in &nf.b {
                    expect_shape(b, w, k, "B")?;
                }
                for s in &nf.scales {
                    expect_shape(s, 1, w, "b")?;
                }
                Ok(())
            }
            (Variant::Ccp, Some(_)) => Err(shape_err("CCP parameters carry no nested factors")),
            (Variant::Ncp, None) => Err(shape_err("NCP parameters need nested factors")),
        }
    }

    /// `e_n = Σ_φ U^{(n,φ)ᵀ} z_φ`.
    fn embed(&self, n: usize, inputs: &[&[f64]]) -> Vec<f64> {
        let mut e = vec![0.0; self.rank];
        for (phi, z) in inputs.iter().enumerate() {
            add_assign(
                &mut e,
                &self.factor(n, phi).t_mul_vec(z).expect("validated shape"),
            );
        }
        e
    }

    fn head(&self, y: &[f64]) -> Vec<f64> {
        let mut out = self.c.mul_vec(y).expect("validated shape");
        add_assign(&mut out, self.beta.data());
        out
    }

    fn check(&self, variant: Variant, inputs: &[&[f64]]) -> Result<()> {
        if self.variant != variant {
            return Err(ModelError::Variant {
                expected: variant,
                actual: self.variant,
            });
        }
        self.validate()?;
        check_inputs(&self.input_dims, inputs)
    }

    fn visit<'a>(&'a self, out: &mut Vec<(String, &'a Matrix)>) {
        for (phi, fs) in self.factors.iter().enumerate() {
            for (i, f) in fs.iter().enumerate() {
                out.push((format!("U[{},{}]", i + 1, phi + 1), f));
            }
        }
        if let Some(nf) = &self.nested {
            for (i, v) in nf.v.iter().enumerate() {
                out.push((format!("V[{}]", i + 2), v));
            }
            for (i, b) in nf.b.iter().enumerate() {
                out.push((format!("B[{}]", i + 1), b));
            }
            for (i, s) in nf.scales.iter().enumerate() {
                out.push((format!("b[{}]", i + 1), s));
            }
        }
        out.push(("C".into(), &self.c));
        out.push(("beta".into(), &self.beta));
    }

    /// Every parameter matrix, in checkpoint order.
    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        self.visit_mut(&mut out);
        out
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix>) {
        for fs in &mut self.factors {
            out.extend(fs.iter_mut());
        }
        if let Some(nf) = &mut self.nested {
            out.extend(nf.v.iter_mut());
            out.extend(nf.b.iter_mut());
            out.extend(nf.scales.iter_mut());
        }
        out.push(&mut self.c);
        out.push(&mut self.beta);
    }

    fn register(&self, g: &mut Graph, next: &mut usize) -> CopeNodes {
        let mut reg = |m: &Matrix| {
            let id = g.param(ParamId(*next), m);
            *next += 1;
            id
        };
        let factors = self
            .factors
            .iter()
            .map(|fs| fs.iter().map(&mut reg).collect())
            .collect();
        let nested = self.nested.as_ref().map(|nf| {
            (
                nf.v.iter().map(&mut reg).collect(),
                nf.b.iter().map(&mut reg).collect(),
                nf.scales.iter().map(&mut reg).collect(),
            )
        });
        let c = reg(&self.c);
        let beta = reg(&self.beta);
        CopeNodes {
            factors,
            nested,
            c,
            beta,
        }
    }
}

struct CopeNodes {
    factors: Vec<Vec<NodeId>>,
    nested: Option<(Vec<NodeId>, Vec<NodeId>, Vec<NodeId>)>,
    c: NodeId,
    beta: NodeId,
}

impl CopeNodes {
    fn factor(&self, n: usize, phi: usize) -> NodeId {
        let f = &self.factors[phi];
        if f.len() == 1 {
            f[0]
        } else {
            f[n - 1]
        }
    }

    fn embed(&self, g: &mut Graph, n: usize, inputs: &[NodeId]) -> Result<NodeId> {
        let mut acc = g.matmul(inputs[0], self.factor(n, 0))?;
        for (phi, &z) in inputs.iter().enumerate().skip(1) {
            let e = g.matmul(z, self.factor(n, phi))?;
            acc = g.add(acc, e)?;
        }
        Ok(acc)
    }

    /// `s_n = B_nᵀ b_n` as a `1 × k` row.
    fn scale_row(&self, g: &mut Graph, n: usize) -> Result<NodeId> {
        let (_, b, s) = self.nested.as_ref().expect("nested factors");
        Ok(g.matmul(s[n - 1], b[n - 1])?)
    }

    fn v(&self, n: usize) -> NodeId {
        self.nested.as_ref().expect("nested factors").0[n - 2]
    }

    fn head(&self, g: &mut Graph, y: NodeId) -> Result<NodeId> {
        let out = g.matmul_transb(y, self.c)?;
        Ok(g.add_row(out, self.beta)?)
    }
}

/// Coupled-CP recursion: `y_n = y_{n-1} + (Σ_φ U^{(n,φ)ᵀ} z_φ) * y_{n-1}`.
pub fn ccp_forward(p: &CopeParams, inputs: &[&[f64]]) -> Result<Vec<f64>> {
    p.check(Variant::Ccp, inputs)?;
    let mut y = p.embed(1, inputs);
    for n in 2..=p.order {
        let e = p.embed(n, inputs);
        for (yi, ei) in y.iter_mut().zip(&e) {
            *yi += ei * *yi;
        }
    }
    Ok(p.head(&y))
}

/// Nested recursion: `y_n = e_n * (V^{(n)ᵀ} y_{n-1} + B^{(n)ᵀ} b^{(n)})`.
pub fn ncp_forward(p: &CopeParams, inputs: &[&[f64]]) -> Result<Vec<f64>> {
    p.check(Variant::Ncp, inputs)?;
    let nf = p.nested()?;
    let s1 = row_times(&nf.scales[0], &nf.b[0]);
    let mut y: Vec<f64> = p
        .embed(1, inputs)
        .iter()
        .zip(&s1)
        .map(|(e, s)| e * s)
        .collect();
    for n in 2..=p.order {
        let e = p.embed(n, inputs);
        let mut inner = nf.v[n - 2].t_mul_vec(&y)?;
        add_assign(&mut inner, &row_times(&nf.scales[n - 1], &nf.b[n - 1]));
        y = e.iter().zip(&inner).map(|(a, b)| a * b).collect();
    }
    Ok(p.head(&y))
}

/// The NCP recursion with every Hadamard product replaced by a sum; an
/// affine map of its inputs.
pub fn additive_forward(p: &CopeParams, inputs: &[&[f64]]) -> Result<Vec<f64>> {
    p.check(Variant::Ncp, inputs)?;
    let nf = p.nested()?;
    let mut y = p.embed(1, inputs);
    add_assign(&mut y, &row_times(&nf.scales[0], &nf.b[0]));
    for n in 2..=p.order {
        let mut next = p.embed(n, inputs);
        add_assign(&mut next, &nf.v[n - 2].t_mul_vec(&y)?);
        add_assign(&mut next, &row_times(&nf.scales[n - 1], &nf.b[n - 1]));
        y = next;
    }
    Ok(p.head(&y))
}

/// Zeroes `A^{(1,II)}` and `A^{(n,I)}` for `n ≥ 2`, leaving a polynomial
/// in the conditional variable seeded by a linear term in `z_I`.
pub fn spade_configure(p: &mut CopeParams) {
    p.factor_mut(1, CONDITIONAL).data_mut().fill(0.0);
    for n in 2..=p.order {
        p.factor_mut(n, 0).data_mut().fill(0.0);
    }
}

/// Single-variable polynomial over (typically concatenated) input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiNetParams {
    pub order: usize,
    pub rank: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    /// `Λ^{(n)}`, `d × k`.
    pub lambdas: Vec<Matrix>,
    /// `Γ`, `o × k`.
    pub gamma: Matrix,
    pub beta: Matrix,
}

impl PiNetParams {
    pub fn init(
        order: usize,
        rank: usize,
        input_dim: usize,
        output_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let s = 1.0 / (rank.max(1) as f64).sqrt();
        let p = PiNetParams {
            order,
            rank,
            input_dim,
            output_dim,
            lambdas: (0..order)
                .map(|_| uniform_matrix(rng, input_dim, rank, -s, s))
                .collect(),
            gamma: uniform_matrix(rng, output_dim, rank, -s, s),
            beta: Matrix::zeros(1, output_dim),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.order == 0 || self.lambdas.len() != self.order {
            return Err(shape_err("Π-Net needs one Λ per order"));
        }
        for l in &self.lambdas {
            expect_shape(l, self.input_dim, self.rank, "Lambda")?;
        }
        expect_shape(&self.gamma, self.output_dim, self.rank, "Gamma")?;
        expect_shape(&self.beta, 1, self.output_dim, "beta")
    }
}

pub fn pinet_forward(p: &PiNetParams, z: &[f64]) -> Result<Vec<f64>> {
    p.validate()?;
    check_inputs(&[p.input_dim], &[z])?;
    let mut y = p.lambdas[0].t_mul_vec(z)?;
    for l in &p.lambdas[1..] {
        let e = l.t_mul_vec(z)?;
        for (yi, ei) in y.iter_mut().zip(&e) {
            *yi += ei * *yi;
        }
    }
    let mut out = p.gamma.mul_vec(&y)?;
    add_assign(&mut out, p.beta.data());
    Ok(out)
}

/// Polynomial in the conditional variable seeded by a linear embedding of
/// `z_I`: `y_1 = A^{(1,I)ᵀ} z_I`, then
/// `y_n = (A^{(n,II)ᵀ} z_II) * (V^{(n)ᵀ} y_{n-1} + B^{(n)ᵀ} b^{(n)})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpadeParams {
    pub order: usize,
    pub rank: usize,
    pub input_dims: [usize; 2],
    pub output_dim: usize,
    pub first: Matrix,
    /// `A^{(n,II)}` for `n = 2..=N`.
    pub conditional: Vec<Matrix>,
    /// `V^{(n)}`, `B^{(n)}`, `b^{(n)}` for `n = 2..=N`.
    pub v: Vec<Matrix>,
    pub b: Vec<Matrix>,
    pub scales: Vec<Matrix>,
    pub c: Matrix,
    pub beta: Matrix,
}

impl SpadeParams {
    pub fn init(shape: &CopeShape, rng: &mut impl Rng) -> Result<Self> {
        let mut ncp = CopeParams::init(
            &CopeShape {
                variant: Variant::Ncp,
                share_conditional: false,
                ..shape.clone()
            },
            rng,
        )?;
        spade_configure(&mut ncp);
        Self::from_ncp(&ncp)
    }

    /// Dedicated parameters equivalent to an NCP block in SPADE
    /// configuration. The first-order scale `B^{(1)ᵀ} b^{(1)}` is folded
    /// into the columns of `A^{(1,I)}`.
    pub fn from_ncp(p: &CopeParams) -> Result<Self> {
        let nf = p.nested()?;
        if p.num_variables() != 2 {
            return Err(ModelError::Arity {
                expected: 2,
                actual: p.num_variables(),
            });
        }
        if p.factor(1, CONDITIONAL).data().iter().any(|&v| v != 0.0) {
            return Err(ModelError::NotSpade("A[1,II]".into()));
        }
        for n in 2..=p.order {
            if p.factor(n, 0).data().iter().any(|&v| v != 0.0) {
                return Err(ModelError::NotSpade(format!("A[{n},I]")));
            }
        }
        let s1 = row_times(&nf.scales[0], &nf.b[0]);
        let a1 = p.factor(1, 0);
        let first = Matrix::from_fn(a1.rows(), a1.cols(), |i, j| a1[(i, j)] * s1[j]);
        Ok(SpadeParams {
            order: p.order,
            rank: p.rank,
            input_dims: [p.input_dims[0], p.input_dims[1]],
            output_dim: p.output_dim,
            first,
            conditional: (2..=p.order)
                .map(|n| p.factor(n, CONDITIONAL).clone())
                .collect(),
            v: nf.v.clone(),
            b: nf.b[1..].to_vec(),
            scales: nf.scales[1..].to_vec(),
            c: p.c.clone(),
            beta: p.beta.clone(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let (n, k) = (self.order, self.rank);
        if n == 0 {
            return Err(shape_err("order must be positive"));
        }
        if self.conditional.len() != n - 1
            || self.v.len() != n - 1
            || self.b.len() != n - 1
            || self.scales.len() != n - 1
        {
            return Err(shape_err("SPADE needs N-1 conditional, V, B and b entries"));
        }
        expect_shape(&self.first, self.input_dims[0], k, "A[1,I]")?;
        for (i, a) in self.conditional.iter().enumerate() {
            expect_shape(a, self.input_dims[1], k, &format!("A[{},II]", i + 2))?;
        }
        for v in &self.v {
            expect_shape(v, k, k, "V")?;
        }
        for (b, s) in self.b.iter().zip(&self.scales) {
            expect_shape(b, s.cols(), k, "B")?;
            expect_shape(s, 1, s.cols(), "b")?;
        }
        expect_shape(&self.c, self.output_dim, k, "C")?;
        expect_shape(&self.beta, 1, self.output_dim, "beta")
    }
}

pub fn spade_forward(p: &SpadeParams, z_i: &[f64], z_ii: &[f64]) -> Result<Vec<f64>> {
    p.validate()?;
    check_inputs(&p.input_dims, &[z_i, z_ii])?;
    let mut y = p.first.t_mul_vec(z_i)?;
    for i in 0..p.order - 1 {
        let e = p.conditional[i].t_mul_vec(z_ii)?;
        let mut inner = p.v[i].t_mul_vec(&y)?;
        add_assign(&mut inner, &row_times(&p.scales[i], &p.b[i]));
        y = e.iter().zip(&inner).map(|(a, b)| a * b).collect();
    }
    let mut out = p.c.mul_vec(&y)?;
    add_assign(&mut out, p.beta.data());
    Ok(out)
}

/// `Pᵀ [z_I; z_II; …]` for `P` of shape `(Σ d_φ) × o`.
pub fn concat_linear_forward(p: &Matrix, inputs: &[&[f64]]) -> Result<Vec<f64>> {
    let z: Vec<f64> = inputs.iter().flat_map(|z| z.iter().copied()).collect();
    if z.len() != p.rows() {
        return Err(ModelError::InputDim {
            variable: 0,
            expected: p.rows(),
            actual: z.len(),
        });
    }
    Ok(p.t_mul_vec(&z)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    None,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Centering {
    #[default]
    None,
    BatchMean,
}

/// Where a block input comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    /// Output of the preceding block.
    Previous,
    /// One of the model's original input variables (0-based).
    Variable(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Layer {
    Ccp(CopeParams),
    Ncp(CopeParams),
    /// NCP-shaped parameters evaluated with [`additive_forward`].
    Additive(CopeParams),
    Spade(SpadeParams),
    /// Consumes the concatenation of its sources.
    PiNet(PiNetParams),
    /// Linear map of the concatenated sources, `(Σ d) × o`.
    ConcatLinear {
        p: Matrix,
    },
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Ccp(_) => "ccp",
            Layer::Ncp(_) => "ncp",
            Layer::Additive(_) => "additive",
            Layer::Spade(_) => "spade",
            Layer::PiNet(_) => "pinet",
            Layer::ConcatLinear { .. } => "concat-linear",
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Layer::Ccp(p) | Layer::Ncp(p) | Layer::Additive(p) => p.output_dim,
            Layer::Spade(p) => p.output_dim,
            Layer::PiNet(p) => p.output_dim,
            Layer::ConcatLinear { p } => p.cols(),
        }
    }

    /// Checks the layer against the dims of its sources.
    fn accepts(&self, dims: &[usize]) -> std::result::Result<(), String> {
        let total: usize = dims.iter().sum();
        match self {
            Layer::Ccp(p) | Layer::Ncp(p) | Layer::Additive(p) => {
                let want = match self {
                    Layer::Ccp(_) => Variant::Ccp,
                    _ => Variant::Ncp,
                };
                if p.variant != want {
                    return Err(format!(
                        "{} layer holds {:?} parameters",
                        self.name(),
                        p.variant
                    ));
                }
                p.validate().map_err(|e| e.to_string())?;
                (p.input_dims == dims).then_some(()).ok_or_else(|| {
                    format!("expects inputs {:?}, sources give {dims:?}", p.input_dims)
                })
            }
            Layer::Spade(p) => {
                p.validate().map_err(|e| e.to_string())?;
                (p.input_dims[..] == *dims).then_some(()).ok_or_else(|| {
                    format!("expects inputs {:?}, sources give {dims:?}", p.input_dims)
                })
            }
            Layer::PiNet(p) => {
                p.validate().map_err(|e| e.to_string())?;
                (p.input_dim == total).then_some(()).ok_or_else(|| {
                    format!(
                        "expects concatenated width {}, sources give {total}",
                        p.input_dim
                    )
                })
            }
            Layer::ConcatLinear { p } => (p.rows() == total).then_some(()).ok_or_else(|| {
                format!(
                    "expects concatenated width {}, sources give {total}",
                    p.rows()
                )
            }),
        }
    }

    pub fn forward(&self, inputs: &[&[f64]]) -> Result<Vec<f64>> {
        match self {
            Layer::Ccp(p) => ccp_forward(p, inputs),
            Layer::Ncp(p) => ncp_forward(p, inputs),
            Layer::Additive(p) => additive_forward(p, inputs),
            Layer::Spade(p) => {
                check_inputs(&p.input_dims, inputs)?;
                spade_forward(p, inputs[0], inputs[1])
            }
            Layer::PiNet(p) => {
                let z: Vec<f64> = inputs.iter().flat_map(|z| z.iter().copied()).collect();
                pinet_forward(p, &z)
            }
            Layer::ConcatLinear { p } => concat_linear_forward(p, inputs),
        }
    }

    fn params<'a>(&'a self, out: &mut Vec<(String, &'a Matrix)>) {
        match self {
            Layer::Ccp(p) | Layer::Ncp(p) | Layer::Additive(p) => p.visit(out),
            Layer::Spade(p) => {
                out.push(("A[1,I]".into(), &p.first));
                for (i, m) in p.conditional.iter().enumerate() {
                    out.push((format!("A[{},II]", i + 2), m));
                }
                for (i, m) in p.v.iter().enumerate() {
                    out.push((format!("V[{}]", i + 2), m));
                }
                for (i, m) in p.b.iter().enumerate() {
                    out.push((format!("B[{}]", i + 2), m));
                }
                for (i, m) in p.scales.iter().enumerate() {
                    out.push((format!("b[{}]", i + 2), m));
                }
                out.push(("C".into(), &p.c));
                out.push(("beta".into(), &p.beta));
            }
            Layer::PiNet(p) => {
                for (i, m) in p.lambdas.iter().enumerate() {
                    out.push((format!("Lambda[{}]", i + 1), m));
                }
                out.push(("Gamma".into(), &p.gamma));
                out.push(("beta".into(), &p.beta));
            }
            Layer::ConcatLinear { p } => out.push(("P".into(), p)),
        }
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix>) {
        match self {
            Layer::Ccp(p) | Layer::Ncp(p) | Layer::Additive(p) => p.visit_mut(out),
            Layer::Spade(p) => {
                out.push(&mut p.first);
                out.extend(p.conditional.iter_mut());
                out.extend(p.v.iter_mut());
                out.extend(p.b.iter_mut());
                out.extend(p.scales.iter_mut());
                out.push(&mut p.c);
                out.push(&mut p.beta);
            }
            Layer::PiNet(p) => {
                out.extend(p.lambdas.iter_mut());
                out.push(&mut p.gamma);
                out.push(&mut p.beta);
            }
            Layer::ConcatLinear { p } => out.push(p),
        }
    }

    /// Records the layer on a graph over batched inputs (rows = samples).
    /// Parameters are registered with consecutive ids starting at `*next`,
    /// in the same order as [`ModelSpec::params`].
    pub fn build(&self, g: &mut Graph, inputs: &[NodeId], next: &mut usize) -> Result<NodeId> {
        match self {
            Layer::Ccp(p) => {
                let nodes = p.register(g, next);
                let mut y = nodes.embed(g, 1, inputs)?;
                for n in 2..=p.order {
                    let e = nodes.embed(g, n, inputs)?;
                    let ey = g.mul(e, y)?;
                    y = g.add(y, ey)?;
                }
                nodes.head(g, y)
            }
            Layer::Ncp(p) => {
                let nodes = p.register(g, next);
                let e = nodes.embed(g, 1, inputs)?;
                let s = nodes.scale_row(g, 1)?;
                let mut y = g.mul_row(e, s)?;
                for n in 2..=p.order {
                    let e = nodes.embed(g, n, inputs)?;
                    let vy = g.matmul(y, nodes.v(n))?;
                    let s = nodes.scale_row(g, n)?;
                    let inner = g.add_row(vy, s)?;
                    y = g.mul(e, inner)?;
                }
                nodes.head(g, y)
            }
            Layer::Additive(p) => {
                let nodes = p.register(g, next);
                let e = nodes.embed(g, 1, inputs)?;
                let s = nodes.scale_row(g, 1)?;
                let mut y = g.add_row(e, s)?;
                for n in 2..=p.order {
                    let e = nodes.embed(g, n, inputs)?;
                    let vy = g.matmul(y, nodes.v(n))?;
                    let s = nodes.scale_row(g, n)?;
                    let inner = g.add_row(vy, s)?;
                    y = g.add(e, inner)?;
                }
                nodes.head(g, y)
            }
            Layer::Spade(p) => {
                let mut reg = |m: &Matrix| {
                    let id = g.param(ParamId(*next), m);
                    *next += 1;
                    id
                };
                let first = reg(&p.first);
                let cond: Vec<NodeId> = p.conditional.iter().map(&mut reg).collect();
                let v: Vec<NodeId> = p.v.iter().map(&mut reg).collect();
                let b: Vec<NodeId> = p.b.iter().map(&mut reg).collect();
                let s: Vec<NodeId> = p.scales.iter().map(&mut reg).collect();
                let c = reg(&p.c);
                let beta = reg(&p.beta);
                let mut y = g.matmul(inputs[0], first)?;
                for i in 0..p.order - 1 {
                    let e = g.matmul(inputs[1], cond[i])?;
                    let vy = g.matmul(y, v[i])?;
                    let row = g.matmul(s[i], b[i])?;
                    let inner = g.add_row(vy, row)?;
                    y = g.mul(e, inner)?;
                }
                let out = g.matmul_transb(y, c)?;
                Ok(g.add_row(out, beta)?)
            }
            Layer::PiNet(p) => {
                let mut reg = |m: &Matrix| {
                    let id = g.param(ParamId(*next), m);
                    *next += 1;
                    id
                };
                let lambdas: Vec<NodeId> = p.lambdas.iter().map(&mut reg).collect();
                let gamma = reg(&p.gamma);
                let beta = reg(&p.beta);
                let z = concat_nodes(g, inputs)?;
                let mut y = g.matmul(z, lambdas[0])?;
                for &l in &lambdas[1..] {
                    let e = g.matmul(z, l)?;
                    let ey = g.mul(e, y)?;
                    y = g.add(ey, y)?;
                }
                let out = g.matmul_transb(y, gamma)?;
                Ok(g.add_row(out, beta)?)
            }
            Layer::ConcatLinear { p } => {
                let pn = g.param(ParamId(*next), p);
                *next += 1;
                let z = concat_nodes(g, inputs)?;
                Ok(g.matmul(z, pn)?)
            }
        }
    }
}

fn concat_nodes(g: &mut Graph, inputs: &[NodeId]) -> Result<NodeId> {
    let mut z = inputs[0];
    for &x in &inputs[1..] {
        z = g.concat_cols(z, x)?;
    }
    Ok(z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub layer: Layer,
    pub inputs: Vec<Source>,
}

/// A product of polynomials: each block consumes the previous block's
/// output and/or original variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variable_dims: Vec<usize>,
    pub blocks: Vec<Block>,
    #[serde(default)]
    pub output_activation: Activation,
    #[serde(default)]
    pub centering: Centering,
}

impl ModelSpec {
    pub fn new(
        variable_dims: Vec<usize>,
        blocks: Vec<Block>,
        output_activation: Activation,
        centering: Centering,
    ) -> Result<Self> {
        let spec = ModelSpec {
            variable_dims,
            blocks,
            output_activation,
            centering,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// A single block consuming every variable in order.
    pub fn single(layer: Layer, variable_dims: Vec<usize>) -> Result<Self> {
        let inputs = (0..variable_dims.len()).map(Source::Variable).collect();
        Self::new(
            variable_dims,
            vec![Block { layer, inputs }],
            Activation::None,
            Centering::None,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(ModelError::Chain {
                block: 0,
                reason: "a model needs at least one block".into(),
            });
        }
        let mut prev: Option<usize> = None;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.inputs.is_empty() {
                return Err(ModelError::Chain {
                    block: i,
                    reason: "block has no inputs".into(),
                });
            }
            let mut dims = Vec::with_capacity(b.inputs.len());
            for s in &b.inputs {
                dims.push(match *s {
                    Source::Previous => prev.ok_or_else(|| ModelError::Chain {
                        block: i,
                        reason: "the first block has no previous output".into(),
                    })?,
                    Source::Variable(v) => {
                        *self.variable_dims.get(v).ok_or_else(|| ModelError::Chain {
                            block: i,
                            reason: format!("variable {v} does not exist"),
                        })?
                    }
                });
            }
            b.layer
                .accepts(&dims)
                .map_err(|reason| ModelError::Chain { block: i, reason })?;
            prev = Some(b.layer.output_dim());
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.layer.output_dim())
    }

    pub fn params(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let start = out.len();
            b.layer.params(&mut out);
            for (name, _) in &mut out[start..] {
                *name = format!("block{i}.{name}");
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            b.layer.params_mut(&mut out);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, m)| m.data().len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|(_, m)| m.data().iter().copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut off = 0;
        for m in self.params_mut() {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter length");
    }

    fn check_batch(&self, inputs: &[Matrix]) -> Result<usize> {
        if inputs.len() != self.variable_dims.len() {
            return Err(ModelError::Arity {
                expected: self.variable_dims.len(),
                actual: inputs.len(),
            });
        }
        let rows = inputs[0].rows();
        for (variable, (z, &d)) in inputs.iter().zip(&self.variable_dims).enumerate() {
            if z.cols() != d || z.rows() != rows {
                return Err(ModelError::InputDim {
                    variable,
                    expected: d,
                    actual: z.cols(),
                });
            }
        }
        Ok(rows)
    }

    /// Plain evaluation over a batch (rows = samples). Centering, when
    /// enabled, subtracts the batch mean of each block output before it is
    /// fed to the next block.
    pub fn forward_batch(&self, inputs: &[Matrix]) -> Result<Matrix> {
        let rows = self.check_batch(inputs)?;
        let mut prev: Option<Matrix> = None;
        for (i, b) in self.blocks.iter().enumerate() {
            let fed = match (&prev, self.centering) {
                (Some(p), Centering::BatchMean) if i > 0 => Some(center_rows(p)),
                _ => prev.clone(),
            };
            let o = b.layer.output_dim();
            let mut out = Matrix::zeros(rows, o);
            for r in 0..rows {
                let args: Vec<&[f64]> = b
                    .inputs
                    .iter()
                    .map(|s| match *s {
                        Source::Previous => fed.as_ref().expect("validated chain").row(r),
                        Source::Variable(v) => inputs[v].row(r),
                    })
                    .collect();
                let y = b.layer.forward(&args)?;
                out.data_mut()[r * o..(r + 1) * o].copy_from_slice(&y);
            }
            prev = Some(out);
        }
        let out = prev.expect("non-empty chain");
        Ok(match self.output_activation {
            Activation::None => out,
            Activation::Tanh => out.map(f64::tanh),
        })
    }

    /// Single-sample evaluation (a batch of one).
    pub fn forward(&self, inputs: &[&[f64]]) -> Result<Vec<f64>> {
        let batch: Vec<Matrix> = inputs.iter().map(|z| Matrix::row_vector(z)).collect();
        Ok(self.forward_batch(&batch)?.into_data())
    }

    /// Records the whole chain on `g`; returns the output node. Parameter
    /// ids are the positions in [`ModelSpec::params`].
    pub fn build_graph(&self, g: &mut Graph, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.len() != self.variable_dims.len() {
            return Err(ModelError::Arity {
                expected: self.variable_dims.len(),
                actual: inputs.len(),
            });
        }
        let mut next = 0;
        let mut prev: Option<NodeId> = None;
        for (i, b) in self.blocks.iter().enumerate() {
            let fed = match (prev, self.centering) {
                (Some(p), Centering::BatchMean) if i > 0 => Some(g.center_rows(p)),
                _ => prev,
            };
            let args: Vec<NodeId> = b
                .inputs
                .iter()
                .map(|s| match *s {
                    Source::Previous => fed.expect("validated chain"),
                    Source::Variable(v) => inputs[v],
                })
                .collect();
            prev = Some(b.layer.build(g, &args, &mut next)?);
        }
        let out = prev.expect("non-empty chain");
        Ok(match self.output_activation {
            Activation::None => out,
            Activation::Tanh => g.tanh(out),
        })
    }
}

/// Which family of generator to build from hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    Ccp,
    Ncp,
    Additive,
    Spade,
    /// Π-Net over the concatenated variables (SICONC baseline).
    PinetConcat,
    /// Concatenation layer feeding an additive chain (GAN-CONC baseline).
    GanConc,
}

/// Hyperparameter-level description of a product-of-polynomials model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: ArchKind,
    /// Expansion order of each block.
    pub orders: Vec<usize>,
    pub rank: usize,
    /// Output width of every block except the last.
    pub hidden: usize,
    pub variable_dims: Vec<usize>,
    pub output_dim: usize,
    pub omega: Option<usize>,
    pub share_conditional: bool,
    /// Later blocks also consume the conditional variable.
    pub reconsume_conditional: bool,
    pub centering: Centering,
    pub activation: Activation,
}

impl Architecture {
    pub fn build(&self, rng: &mut impl Rng) -> Result<ModelSpec> {
        if self.orders.is_empty() {
            return Err(ModelError::Chain {
                block: 0,
                reason: "at least one block order is required".into(),
            });
        }
        if self.variable_dims.len() < 2 && matches!(self.kind, ArchKind::Spade) {
            return Err(ModelError::Arity {
                expected: 2,
                actual: self.variable_dims.len(),
            });
        }
        let m = self.variable_dims.len();
        let has_cond = m > CONDITIONAL;
        let mut blocks = Vec::new();
        let all_vars: Vec<Source> = (0..m).map(Source::Variable).collect();
        let later_sources = || {
            let mut s = vec![Source::Previous];
            if self.reconsume_conditional && has_cond {
                s.push(Source::Variable(CONDITIONAL));
            }
            s
        };
        let blocks_total = self.orders.len() + usize::from(self.kind == ArchKind::GanConc);
        let out_dim = |i: usize| {
            if i + 1 == blocks_total {
                self.output_dim
            } else {
                self.hidden
            }
        };

        let mut prev_dim = 0;
        for (i, &order) in self.orders.iter().enumerate() {
            let idx = i + usize::from(self.kind == ArchKind::GanConc);
            if self.kind == ArchKind::GanConc && i == 0 {
                let width: usize = self.variable_dims.iter().sum();
                let s = 1.0 / (width as f64).sqrt();
                blocks.push(Block {
                    layer: Layer::ConcatLinear {
                        p: uniform_matrix(rng, width, self.hidden, -s, s),
                    },
                    inputs: all_vars.clone(),
                });
                prev_dim = self.hidden;
            }
            let first = idx == 0;
            let sources = if first {
                all_vars.clone()
            } else {
                later_sources()
            };
            let dims: Vec<usize> = sources
                .iter()
                .map(|s| match *s {
                    Source::Previous => prev_dim,
                    Source::Variable(v) => self.variable_dims[v],
                })
                .collect();
            let shape = |variant| CopeShape {
                variant,
                order,
                rank: self.rank,
                input_dims: dims.clone(),
                output_dim: out_dim(idx),
                omega: self.omega,
                share_conditional: self.share_conditional && dims.len() > CONDITIONAL,
            };
            let layer = match self.kind {
                ArchKind::Ccp => Layer::Ccp(CopeParams::init(&shape(Variant::Ccp), rng)?),
                ArchKind::Ncp => Layer::Ncp(CopeParams::init(&shape(Variant::Ncp), rng)?),
                ArchKind::Additive | ArchKind::GanConc => {
                    Layer::Additive(CopeParams::init(&shape(Variant::Ncp), rng)?)
                }
                ArchKind::Spade => {
                    // SPADE always pairs the running representation with z_II
                    let sources = if first {
                        vec![Source::Variable(0), Source::Variable(CONDITIONAL)]
                    } else {
                        vec![Source::Previous, Source::Variable(CONDITIONAL)]
                    };
                    let d0 = if first {
                        self.variable_dims[0]
                    } else {
                        prev_dim
                    };
                    let mut sh = shape(Variant::Ncp);
                    sh.input_dims = vec![d0, self.variable_dims[CONDITIONAL]];
                    sh.share_conditional = false;
                    blocks.push(Block {
                        layer: Layer::Spade(SpadeParams::init(&sh, rng)?),
                        inputs: sources,
                    });
                    prev_dim = out_dim(idx);
                    continue;
                }
                ArchKind::PinetConcat => Layer::PiNet(PiNetParams::init(
                    order,
                    self.rank,
                    dims.iter().sum(),
                    out_dim(idx),
                    rng,
                )?),
            };
            blocks.push(Block {
                layer,
                inputs: sources,
            });
            prev_dim = out_dim(idx);
        }
        ModelSpec::new(
            self.variable_dims.clone(),
            blocks,
            self.activation,
            self.centering,
        )
    }

    /// Number of trainable scalars the built model would have.
    pub fn num_params(&self) -> Result<usize> {
        // parameter count does not depend on the drawn values
        let mut rng = crate::rng::stream(0, crate::rng::Stream::Init);
        Ok(self.build(&mut rng)?.num_params())
    }

    /// The `(rank, omega)` variant of `self`, each searched over `1..=max`,
    /// whose parameter count is closest to `target`. Ties go to the
    /// smaller rank, then the smaller ω.
    pub fn match_param_count(&self, target: usize, max: usize) -> Result<Architecture> {
        let mut best: Option<(usize, Architecture)> = None;
        for rank in 1..=max {
            for omega in 1..=max {
                let cand = Architecture {
                    rank,
                    omega: Some(omega),
                    ..self.clone()
                };
                let gap = cand.num_params()?.abs_diff(target);
                if best.as_ref().is_none_or(|(g, _)| gap < *g) {
                    best = Some((gap, cand));
                }
            }
        }
        best.map(|(_, a)| a)
            .ok_or_else(|| ModelError::Shape("empty search range".into()))
    }
}

pub const CHECKPOINT_FORMAT: &str = "cope-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Name and shape of one parameter matrix, listed ahead of the model body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamHeader {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// On-disk model layout.
///
/// ```json
/// {
///   "format": "cope-checkpoint",
///   "version": 1,
///   "param_count": 206,
///   "params": [{"name": "block0.U[1,0]", "rows": 2, "cols": 5}, ...],
///   "model": { "variable_dims": [...], "blocks": [...], ... }
/// }
/// ```
///
/// Inside `model`, every matrix is `{"rows", "cols", "data"}` with `data`
/// the row-major entries. Floats are written in shortest round-trip form,
/// so loading restores every parameter bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub param_count: usize,
    pub params: Vec<ParamHeader>,
    pub model: ModelSpec,
}

impl Checkpoint {
    pub fn new(model: &ModelSpec) -> Self {
        let params = model
            .params()
            .into_iter()
            .map(|(name, m)| ParamHeader {
                name,
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            param_count: model.num_params(),
            params,
            model: model.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serialization cannot fail")
    }

    /// Parses and checks headers against the model body.
    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!(
                "unknown format {:?}",
                ck.format
            )));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported version {}",
                ck.version
            )));
        }
        ck.model.validate()?;
        let expected = Checkpoint::new(&ck.model);
        if expected.params != ck.params || expected.param_count != ck.param_count {
            return Err(ModelError::Checkpoint(
                "headers do not match model body".into(),
            ));
        }
        Ok(ck)
    }
}

pub fn save_checkpoint(model: &ModelSpec, path: &std::path::Path) -> std::io::Result<()> {
    std::fs::write(path, Checkpoint::new(model).to_json())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<ModelSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    Ok(Checkpoint::from_json(&text)?.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = stream(11, Stream::Init);
        let arch = Architecture {
            kind: ArchKind::Ncp,
            orders: vec![2, 3],
            rank: 4,
            hidden: 3,
            variable_dims: vec![2, 3],
            output_dim: 2,
            omega: Some(3),
            share_conditional: true,
            reconsume_conditional: true,
            centering: Centering::BatchMean,
            activation: Activation::Tanh,
        };
        let mut spec = arch.build(&mut rng).unwrap();
        let flat: Vec<f64> = (0..spec.num_params())
            .map(|i| (i as f64 + 0.1).sqrt() * 1e-7 - 1.0 / 3.0)
            .collect();
        spec.set_flat_params(&flat);
        let text = Checkpoint::new(&spec).to_json();
        let back = Checkpoint::from_json(&text).unwrap().model;
        let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(back.flat_params()), bits(spec.flat_params()));
        assert_eq!(back, spec);

        let tampered = text.replacen("\"version\": 1", "\"version\": 2", 1);
        assert!(matches!(
            Checkpoint::from_json(&tampered),
            Err(ModelError::Checkpoint(_))
        ));
        let mut ck = Checkpoint::new(&spec);
        ck.params[0].cols += 1;
        assert!(Checkpoint::from_json(&ck.to_json()).is_err());
    }

    #[test]
    fn param_matching_finds_closest_count() {
        let ccp = Architecture {
            kind: ArchKind::Ccp,
            orders: vec![3],
            rank: 16,
            hidden: 1,
            variable_dims: vec![2, 2],
            output_dim: 1,
            omega: None,
            share_conditional: false,
            reconsume_conditional: false,
            centering: Centering::None,
            activation: Activation::None,
        };
        let target = ccp.num_params().unwrap();
        let add = Architecture {
            kind: ArchKind::Additive,
            ..ccp.clone()
        }
        .match_param_count(target, 16)
        .unwrap();
        let got = add.num_params().unwrap();
        for rank in 1..=16 {
            for omega in 1..=16 {
                let a = Architecture {
                    kind: ArchKind::Additive,
                    rank,
                    omega: Some(omega),
                    ..ccp.clone()
                };
                assert!(a.num_params().unwrap().abs_diff(target) >= got.abs_diff(target));
            }
        }
    }

    fn scalar_ones(variant: Variant, order: usize) -> CopeParams {
        let shape = CopeShape {
            variant,
            order,
            rank: 1,
            input_dims: vec![1, 1],
            output_dim: 1,
            omega: None,
            share_conditional: false,
        };
        let mut p = CopeParams::zeros(&shape).unwrap();
        let mut all = Vec::new();
        p.visit_mut(&mut all);
        for m in all {
            m.data_mut().fill(1.0);
        }
        p.beta.data_mut().fill(0.0);
        p
    }

    #[test]
    fn ccp_scalar_examples() {
        let p = scalar_ones(Variant::Ccp, 1);
        assert_eq!(ccp_forward(&p, &[&[2.0], &[3.0]]).unwrap(), vec![5.0]);
        let p = scalar_ones(Variant::Ccp, 2);
        assert_eq!(ccp_forward(&p, &[&[2.0], &[3.0]]).unwrap(), vec![30.0]);
    }

    #[test]
    fn ncp_scalar_examples() {
        let p = scalar_ones(Variant::Ncp, 2);
        assert_eq!(ncp_forward(&p, &[&[2.0], &[3.0]]).unwrap(), vec![30.0]);

        let mut p = scalar_ones(Variant::Ncp, 1);
        p.beta.data_mut().fill(0.25);
        p.nested.as_mut().unwrap().scales[0].data_mut().fill(0.0);
        assert_eq!(ncp_forward(&p, &[&[2.0], &[3.0]]).unwrap(), vec![0.25]);
    }

    #[test]
    fn additive_scalar_unroll() {
        // y1 = (2+3)+1 = 6, y2 = (2+3)+(6+1) = 12
        let p = scalar_ones(Variant::Ncp, 2);
        assert_eq!(additive_forward(&p, &[&[2.0], &[3.0]]).unwrap(), vec![12.0]);
    }

    #[test]
    fn pinet_examples() {
        let p = PiNetParams {
            order: 2,
            rank: 1,
            input_dim: 2,
            output_dim: 1,
            lambdas: vec![Matrix::filled(2, 1, 1.0); 2],
            gamma: Matrix::filled(1, 1, 1.0),
            beta: Matrix::zeros(1, 1),
        };
        assert_eq!(pinet_forward(&p, &[2.0, 3.0]).unwrap(), vec![30.0]);

        let mut rng = stream(3, Stream::Init);
        let mut p = PiNetParams::init(1, 3, 4, 2, &mut rng).unwrap();
        p.beta = Matrix::row_vector(&[0.5, -1.0]);
        let z = [0.1, -0.4, 0.7, 0.2];
        let affine = {
            let mut v = p
                .gamma
                .mul_vec(&p.lambdas[0].t_mul_vec(&z).unwrap())
                .unwrap();
            add_assign(&mut v, p.beta.data());
            v
        };
        assert_eq!(pinet_forward(&p, &z).unwrap(), affine);
        assert_eq!(pinet_forward(&p, &[0.0; 4]).unwrap(), vec![0.5, -1.0]);
    }

    #[test]
    fn concat_linear_examples() {
        let id = Matrix::identity(3);
        assert_eq!(
            concat_linear_forward(&id, &[&[1.0, 2.0], &[3.0]]).unwrap(),
            vec![1.0, 2.0, 3.0]
        );
        let mut rng = stream(5, Stream::Init);
        let p = uniform_matrix(&mut rng, 5, 3, -1.0, 1.0);
        assert_eq!(
            concat_linear_forward(&p, &[&[0.0; 2], &[0.0; 3]]).unwrap(),
            vec![0.0; 3]
        );
        let (zi, zii) = ([0.3, -0.2], [0.9, 0.1, -0.5]);
        let out = concat_linear_forward(&p, &[&zi, &zii]).unwrap();
        for j in 0..3 {
            let mut s = 0.0;
            for t in 0..2 {
                s += p[(t, j)] * zi[t];
            }
            for t in 0..3 {
                s += p[(t + 2, j)] * zii[t];
            }
            assert!((out[j] - s).abs() < 1e-15);
        }
        assert!(concat_linear_forward(&p, &[&zi]).is_err());
    }

    #[test]
    fn input_errors() {
        let p = scalar_ones(Variant::Ccp, 2);
        assert_eq!(
            ccp_forward(&p, &[&[1.0]]),
            Err(ModelError::Arity {
                expected: 2,
                actual: 1
            })
        );
        assert_eq!(
            ccp_forward(&p, &[&[1.0], &[1.0, 2.0]]),
            Err(ModelError::InputDim {
                variable: 1,
                expected: 1,
                actual: 2
            })
        );
        assert!(matches!(
            ncp_forward(&p, &[&[1.0], &[1.0]]),
            Err(ModelError::Variant { .. })
        ));
    }

    #[test]
    fn shared_representation_keeps_one_conditional_factor() {
        let mut rng = stream(9, Stream::Init);
        let shape = CopeShape {
            variant: Variant::Ccp,
            order: 3,
            rank: 4,
            input_dims: vec![2, 3],
            output_dim: 2,
            omega: None,
            share_conditional: true,
        };
        let p = CopeParams::init(&shape, &mut rng).unwrap();
        assert_eq!(p.factors[CONDITIONAL].len(), 1);
        assert!(std::ptr::eq(
            p.factor(1, CONDITIONAL),
            p.factor(3, CONDITIONAL)
        ));
    }

    #[test]
    fn chain_validation_reports_block() {
        let mut rng = stream(1, Stream::Init);
        let shape = CopeShape {
            variant: Variant::Ccp,
            order: 2,
            rank: 3,
            input_dims: vec![2, 2],
            output_dim: 4,
            omega: None,
            share_conditional: false,
        };
        let b0 = CopeParams::init(&shape, &mut rng).unwrap();
        // second block claims 5-dim previous output
        let b1 = CopeParams::init(
            &CopeShape {
                input_dims: vec![5],
                ..shape.clone()
            },
            &mut rng,
        )
        .unwrap();
        let err = ModelSpec::new(
            vec![2, 2],
            vec![
                Block {
                    layer: Layer::Ccp(b0),
                    inputs: vec![Source::Variable(0), Source::Variable(1)],
                },
                Block {
                    layer: Layer::Ccp(b1),
                    inputs: vec![Source::Previous],
                },
            ],
            Activation::None,
            Centering::None,
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::Chain { block: 1, .. }), "{err}");
    }

    #[test]
    fn spade_from_ncp_requires_configuration() {
        let mut rng = stream(2, Stream::Init);
        let shape = CopeShape {
            variant: Variant::Ncp,
            order: 3,
            rank: 3,
            input_dims: vec![2, 3],
            output_dim: 2,
            omega: Some(2),
            share_conditional: false,
        };
        let mut p = CopeParams::init(&shape, &mut rng).unwrap();
        assert!(matches!(
            SpadeParams::from_ncp(&p),
            Err(ModelError::NotSpade(_))
        ));
        spade_configure(&mut p);
        assert!(SpadeParams::from_ncp(&p).is_ok());
    }

    fn arch(kind: ArchKind, orders: Vec<usize>) -> Architecture {
        Architecture {
            kind,
            orders,
            rank: 4,
            hidden: 5,
            variable_dims: vec![3, 2],
            output_dim: 2,
            omega: None,
            share_conditional: true,
            reconsume_conditional: true,
            centering: Centering::BatchMean,
            activation: Activation::Tanh,
        }
    }

    #[test]
    fn every_architecture_builds_and_matches_graph() {
        for kind in [
            ArchKind::Ccp,
            ArchKind::Ncp,
            ArchKind::Additive,
            ArchKind::Spade,
            ArchKind::PinetConcat,
            ArchKind::GanConc,
        ] {
            let mut rng = stream(4, Stream::Init);
            let spec = arch(kind, vec![2, 3]).build(&mut rng).unwrap();
            assert_eq!(spec.output_dim(), 2);
            let zi = uniform_matrix(&mut rng, 6, 3, -1.0, 1.0);
            let zii = uniform_matrix(&mut rng, 6, 2, -1.0, 1.0);
            let plain = spec.forward_batch(&[zi.clone(), zii.clone()]).unwrap();
            let mut g = Graph::new();
            let a = g.input(zi);
            let b = g.input(zii);
            let out = spec.build_graph(&mut g, &[a, b]).unwrap();
            let diff = g.value(out).max_abs_diff(&plain).unwrap();
            assert!(diff < 1e-12, "{kind:?}: {diff}");
            let grads = g.backward(out, &Matrix::filled(6, 2, 1.0)).unwrap();
            assert_eq!(grads.len(), spec.params().len(), "{kind:?}");
        }
    }

    #[test]
    fn flat_params_round_trip() {
        let mut rng = stream(8, Stream::Init);
        let mut spec = arch(ArchKind::Ncp, vec![2, 2]).build(&mut rng).unwrap();
        let flat = spec.flat_params();
        assert_eq!(flat.len(), spec.num_params());
        let doubled: Vec<f64> = flat.iter().map(|v| v * 2.0).collect();
        spec.set_flat_params(&doubled);
        assert_eq!(spec.flat_params(), doubled);
    }
}
