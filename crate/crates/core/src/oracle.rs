//! Explicit, unfactorized polynomial expansions.
//!
//! The output is a sum of full coefficient tensors contracted against the
//! inputs, mode by mode:
//!
//! ```text
//! y = Σ_n Σ_ρ W^{[n,ρ]} ×_2 z_I … ×_ρ z_I ×_{ρ+1} z_II … ×_{n+1} z_II + β
//! ```
//!
//! and, with a third variable, `W^{[n,ρ,δ]}` whose modes `[2,ρ]` take
//! `z_I`, `[ρ+1,δ]` take `z_II` and `[δ+1,n+1]` take `z_III`. Everything
//! here materializes tensors of size `o·d^N`, so dims are capped; the
//! module only exists to check the factorized models.

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

use crate::models::{CopeParams, Variant};
use crate::rng::uniform;
use crate::tensor::{khatri_rao, mode_fold, mode_vec_product, DenseTensor, Matrix, TensorError};

pub const MAX_DIM: usize = 8;
pub const MAX_ORDER: usize = 4;
pub const MAX_PROBE_ORDER: usize = 12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("oracle supports dims and rank up to {MAX_DIM} and order up to {MAX_ORDER}; got {0}")]
    TooLarge(String),
    #[error("oracle supports 2 or 3 variables, got {0}")]
    Variables(usize),
    #[error("expected {expected} inputs, got {actual}")]
    Arity { expected: usize, actual: usize },
    #[error("input {variable} has length {actual}, expected {expected}")]
    InputDim {
        variable: usize,
        expected: usize,
        actual: usize,
    },
    #[error("term {0:?} is missing")]
    MissingTerm(TermKey),
    #[error("term {key:?} has shape {actual:?}, expected {expected:?}")]
    TermShape {
        key: TermKey,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("coefficient shape mismatch: {0}")]
    Coefficients(String),
    #[error("coupled construction needs CCP parameters with order 2 and two variables")]
    NotOrder2,
    #[error("degree probe supports max_order up to {MAX_PROBE_ORDER}, got {0}")]
    ProbeOrder(usize),
    #[error("probe direction has length {direction}, base has {base}")]
    ProbeShape { base: usize, direction: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, OracleError>;

/// `(n, ρ)` for two variables, `(n, ρ, δ)` for three.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TermKey {
    pub n: usize,
    pub rho: usize,
    pub delta: Option<usize>,
}

impl TermKey {
    pub fn two(n: usize, rho: usize) -> Self {
        TermKey {
            n,
            rho,
            delta: None,
        }
    }

    pub fn three(n: usize, rho: usize, delta: usize) -> Self {
        TermKey {
            n,
            rho,
            delta: Some(delta),
        }
    }

    /// Variable contracted with each mode `2..=n+1`, in order.
    fn mode_variables(&self) -> Vec<usize> {
        let delta = self.delta.unwrap_or(self.n + 1);
        (2..=self.n + 1)
            .map(|m| {
                if m <= self.rho {
                    0
                } else if m <= delta {
                    1
                } else {
                    2
                }
            })
            .collect()
    }

    pub fn touches(&self, variable: usize) -> bool {
        self.mode_variables().contains(&variable)
    }
}

/// Every term key required for the given order and variable count.
pub fn term_keys(order: usize, variables: usize) -> Vec<TermKey> {
    let mut keys = Vec::new();
    for n in 1..=order {
        for rho in 1..=n + 1 {
            if variables == 3 {
                for delta in rho..=n + 1 {
                    keys.push(TermKey::three(n, rho, delta));
                }
            } else {
                keys.push(TermKey::two(n, rho));
            }
        }
    }
    keys
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleParams {
    pub order: usize,
    pub input_dims: Vec<usize>,
    pub output_dim: usize,
    pub tensors: BTreeMap<TermKey, DenseTensor>,
    pub beta: Vec<f64>,
}

impl OracleParams {
    fn check_limits(order: usize, input_dims: &[usize], output_dim: usize) -> Result<()> {
        if !(2..=3).contains(&input_dims.len()) {
            return Err(OracleError::Variables(input_dims.len()));
        }
        if order == 0
            || order > MAX_ORDER
            || output_dim == 0
            || output_dim > MAX_DIM
            || input_dims.iter().any(|&d| d == 0 || d > MAX_DIM)
        {
            return Err(OracleError::TooLarge(format!(
                "order {order}, input dims {input_dims:?}, output dim {output_dim}"
            )));
        }
        Ok(())
    }

    pub fn term_shape(&self, key: &TermKey) -> Vec<usize> {
        let mut shape = vec![self.output_dim];
        shape.extend(key.mode_variables().iter().map(|&v| self.input_dims[v]));
        shape
    }

    pub fn zeros(order: usize, input_dims: Vec<usize>, output_dim: usize) -> Result<Self> {
        Self::from_fn(order, input_dims, output_dim, |_| 0.0)
    }

    /// Entries uniform on `[-scale, scale]`; β included.
    pub fn random(
        order: usize,
        input_dims: Vec<usize>,
        output_dim: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut p = Self::from_fn(order, input_dims, output_dim, |_| 0.0)?;
        for t in p.tensors.values_mut() {
            *t = DenseTensor::from_fn(t.shape().to_vec(), |_| uniform(rng, -scale, scale));
        }
        for b in &mut p.beta {
            *b = uniform(rng, -scale, scale);
        }
        Ok(p)
    }

    fn from_fn(
        order: usize,
        input_dims: Vec<usize>,
        output_dim: usize,
        mut value: impl FnMut(&TermKey) -> f64,
    ) -> Result<Self> {
        Self::check_limits(order, &input_dims, output_dim)?;
        let mut p = OracleParams {
            order,
            input_dims,
            output_dim,
            tensors: BTreeMap::new(),
            beta: vec![0.0; output_dim],
        };
        for key in term_keys(order, p.input_dims.len()) {
            let shape = p.term_shape(&key);
            let v = value(&key);
            p.tensors.insert(key, DenseTensor::from_fn(shape, |_| v));
        }
        Ok(p)
    }

    pub fn variables(&self) -> usize {
        self.input_dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        Self::check_limits(self.order, &self.input_dims, self.output_dim)?;
        if self.beta.len() != self.output_dim {
            return Err(OracleError::Coefficients(format!(
                "beta has length {}, expected {}",
                self.beta.len(),
                self.output_dim
            )));
        }
        for key in term_keys(self.order, self.variables()) {
            let t = self
                .tensors
                .get(&key)
                .ok_or(OracleError::MissingTerm(key))?;
            let expected = self.term_shape(&key);
            if t.shape() != expected {
                return Err(OracleError::TermShape {
                    key,
                    expected,
                    actual: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn term(&self, key: TermKey) -> &DenseTensor {
        &self.tensors[&key]
    }

    pub fn term_mut(&mut self, key: TermKey) -> &mut DenseTensor {
        self.tensors.get_mut(&key).expect("term key")
    }

    /// Contribution of a single term, `W ×_2 … ×_{n+1}` without β.
    pub fn eval_term(&self, key: TermKey, inputs: &[&[f64]]) -> Result<Vec<f64>> {
        let vars = key.mode_variables();
        let mut t = self
            .tensors
            .get(&key)
            .ok_or(OracleError::MissingTerm(key))?
            .clone();
        // highest mode first so lower mode numbers stay valid
        for m in (2..=key.n + 1).rev() {
            t = mode_vec_product(&t, m, inputs[vars[m - 2]])?;
        }
        Ok(t.data().to_vec())
    }

    /// The three-variable terms that never touch `z_III`, relabelled as a
    /// two-variable expansion.
    pub fn restrict_to_two(&self) -> Result<OracleParams> {
        if self.variables() != 3 {
            return Err(OracleError::Variables(self.variables()));
        }
        let mut out =
            OracleParams::zeros(self.order, self.input_dims[..2].to_vec(), self.output_dim)?;
        for (key, t) in &self.tensors {
            if key.delta == Some(key.n + 1) {
                out.tensors.insert(TermKey::two(key.n, key.rho), t.clone());
            }
        }
        out.beta = self.beta.clone();
        Ok(out)
    }
}

fn check_oracle_inputs(dims: &[usize], inputs: &[&[f64]]) -> Result<()> {
    if inputs.len() != dims.len() {
        return Err(OracleError::Arity {
            expected: dims.len(),
            actual: inputs.len(),
        });
    }
    for (variable, (z, &d)) in inputs.iter().zip(dims).enumerate() {
        if z.len() != d {
            return Err(OracleError::InputDim {
                variable,
                expected: d,
                actual: z.len(),
            });
        }
    }
    Ok(())
}

/// Sums every term's full contraction plus β, terms in key order.
pub fn eval_explicit(params: &OracleParams, inputs: &[&[f64]]) -> Result<Vec<f64>> {
    params.validate()?;
    check_oracle_inputs(&params.input_dims, inputs)?;
    let mut y = params.beta.clone();
    for key in params.tensors.keys() {
        for (yi, c) in y.iter_mut().zip(params.eval_term(*key, inputs)?) {
            *yi += c;
        }
    }
    Ok(y)
}

/// Second-order coefficients of one output coordinate τ. The cross term
/// `w22[λ][μ]` multiplies `z_I[λ]·z_II[μ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarCoefficients {
    pub w11: Vec<f64>,
    pub w12: Vec<f64>,
    pub w21: Matrix,
    pub w22: Matrix,
    pub w23: Matrix,
    pub beta: f64,
}

impl ScalarCoefficients {
    pub fn zeros(d_i: usize, d_ii: usize) -> Self {
        ScalarCoefficients {
            w11: vec![0.0; d_ii],
            w12: vec![0.0; d_i],
            w21: Matrix::zeros(d_ii, d_ii),
            w22: Matrix::zeros(d_i, d_ii),
            w23: Matrix::zeros(d_i, d_i),
            beta: 0.0,
        }
    }

    fn dims(&self) -> (usize, usize) {
        (self.w12.len(), self.w11.len())
    }

    fn validate(&self) -> Result<()> {
        let (di, dii) = self.dims();
        if self.w21.shape() != (dii, dii)
            || self.w22.shape() != (di, dii)
            || self.w23.shape() != (di, di)
        {
            return Err(OracleError::Coefficients(format!(
                "w21 {:?}, w22 {:?}, w23 {:?} inconsistent with d_I={di}, d_II={dii}",
                self.w21.shape(),
                self.w22.shape(),
                self.w23.shape()
            )));
        }
        Ok(())
    }

    /// Row τ of a two-variable order-2 expansion.
    pub fn from_oracle(p: &OracleParams, tau: usize) -> Result<Self> {
        if p.order != 2 || p.variables() != 2 {
            return Err(OracleError::Coefficients(
                "need a two-variable order-2 expansion".into(),
            ));
        }
        p.validate()?;
        let (di, dii) = (p.input_dims[0], p.input_dims[1]);
        let vec_of = |key, d| (0..d).map(|l| p.term(key).get(&[tau, l])).collect();
        let mat_of = |key, r, c| Matrix::from_fn(r, c, |l, m| p.term(key).get(&[tau, l, m]));
        Ok(ScalarCoefficients {
            w11: vec_of(TermKey::two(1, 1), dii),
            w12: vec_of(TermKey::two(1, 2), di),
            w21: mat_of(TermKey::two(2, 1), dii, dii),
            w22: mat_of(TermKey::two(2, 2), di, dii),
            w23: mat_of(TermKey::two(2, 3), di, di),
            beta: p.beta[tau],
        })
    }

    /// One coefficient set per output coordinate, stacked into tensors.
    pub fn to_oracle(rows: &[ScalarCoefficients]) -> Result<OracleParams> {
        let first = rows
            .first()
            .ok_or_else(|| OracleError::Coefficients("no output rows".into()))?;
        let (di, dii) = first.dims();
        let mut p = OracleParams::zeros(2, vec![di, dii], rows.len())?;
        for (tau, c) in rows.iter().enumerate() {
            c.validate()?;
            if c.dims() != (di, dii) {
                return Err(OracleError::Coefficients("rows disagree on dims".into()));
            }
            for l in 0..dii {
                p.term_mut(TermKey::two(1, 1)).set(&[tau, l], c.w11[l]);
            }
            for l in 0..di {
                p.term_mut(TermKey::two(1, 2)).set(&[tau, l], c.w12[l]);
            }
            for (key, m) in [
                (TermKey::two(2, 1), &c.w21),
                (TermKey::two(2, 2), &c.w22),
                (TermKey::two(2, 3), &c.w23),
            ] {
                for l in 0..m.rows() {
                    for mu in 0..m.cols() {
                        p.term_mut(key).set(&[tau, l, mu], m[(l, mu)]);
                    }
                }
            }
            p.beta[tau] = c.beta;
        }
        Ok(p)
    }
}

/// The scalar second-order expansion, summed term by term.
pub fn eval_scalar_second_order(w: &ScalarCoefficients, z_i: &[f64], z_ii: &[f64]) -> Result<f64> {
    w.validate()?;
    let (di, dii) = w.dims();
    check_oracle_inputs(&[di, dii], &[z_i, z_ii])?;
    let mut y = w.beta;
    for l in 0..dii {
        y += w.w11[l] * z_ii[l];
    }
    for l in 0..di {
        y += w.w12[l] * z_i[l];
    }
    for l in 0..dii {
        for m in 0..dii {
            y += w.w21[(l, m)] * z_ii[l] * z_ii[m];
        }
    }
    for l in 0..di {
        for m in 0..di {
            y += w.w23[(l, m)] * z_i[l] * z_i[m];
        }
    }
    for l in 0..di {
        for m in 0..dii {
            y += w.w22[(l, m)] * z_i[l] * z_ii[m];
        }
    }
    Ok(y)
}

fn fold_term(w1: &Matrix, o: usize, d2: usize, d3: usize) -> Result<DenseTensor> {
    Ok(mode_fold(w1, 1, &[o, d2, d3])?)
}

/// Explicit tensors of a second-order two-variable CCP block:
///
/// * `W^{[1,1]}_{(1)} = C U^{(1,II)ᵀ}`, `W^{[1,2]}_{(1)} = C U^{(1,I)ᵀ}`
/// * `W^{[2,1]}_{(1)} = C (U^{(2,II)} ⊙ U^{(1,II)})ᵀ`
/// * `W^{[2,3]}_{(1)} = C (U^{(2,I)} ⊙ U^{(1,I)})ᵀ`
/// * `W^{[2,2]}` the sum of `C (U^{(2,II)} ⊙ U^{(1,I)})ᵀ` and
///   `C (U^{(2,I)} ⊙ U^{(1,II)})ᵀ`.
///
/// The second cross term folds with its `z_II` mode before its `z_I` mode,
/// so its modes 2 and 3 are swapped before the two are added.
pub fn build_order2_coupled_tensors(f: &CopeParams) -> Result<OracleParams> {
    if f.variant != Variant::Ccp || f.order != 2 || f.num_variables() != 2 {
        return Err(OracleError::NotOrder2);
    }
    f.validate()
        .map_err(|e| OracleError::Coefficients(e.to_string()))?;
    let (di, dii, o) = (f.input_dims[0], f.input_dims[1], f.output_dim);
    let mut p = OracleParams::zeros(2, vec![di, dii], o)?;
    let c = &f.c;
    let (u1i, u1ii, u2i, u2ii) = (
        f.factor(1, 0),
        f.factor(1, 1),
        f.factor(2, 0),
        f.factor(2, 1),
    );

    let w11 = c.matmul(&u1ii.transpose())?;
    let w12 = c.matmul(&u1i.transpose())?;
    p.tensors
        .insert(TermKey::two(1, 1), mode_fold(&w11, 1, &[o, dii])?);
    p.tensors
        .insert(TermKey::two(1, 2), mode_fold(&w12, 1, &[o, di])?);

    let w21 = c.matmul(&khatri_rao(u2ii, u1ii)?.transpose())?;
    let w23 = c.matmul(&khatri_rao(u2i, u1i)?.transpose())?;
    p.tensors
        .insert(TermKey::two(2, 1), fold_term(&w21, o, dii, dii)?);
    p.tensors
        .insert(TermKey::two(2, 3), fold_term(&w23, o, di, di)?);

    let cross_a = c.matmul(&khatri_rao(u2ii, u1i)?.transpose())?;
    let cross_b = c.matmul(&khatri_rao(u2i, u1ii)?.transpose())?;
    let a = fold_term(&cross_a, o, di, dii)?;
    let b = fold_term(&cross_b, o, dii, di)?.permute(&[0, 2, 1])?;
    p.tensors.insert(TermKey::two(2, 2), a.add(&b)?);

    p.beta = f.beta.data().to_vec();
    Ok(p)
}

/// Result of [`degree_probe`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Degree {
    Exact(usize),
    /// No difference up to the probed order vanished.
    AtLeast(usize),
}

impl std::fmt::Display for Degree {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Degree::Exact(d) => write!(f, "{d}"),
            Degree::AtLeast(d) => write!(f, ">={d}"),
        }
    }
}

pub const PROBE_RTOL: f64 = 1e-6;

/// Numerical degree of `g(t) = Σ_i f(base + t·direction)_i` on the
/// integer nodes `t = 0..=max_order+1`.
///
/// Forward differences `Δ^j g(0)` are compared against
/// `PROBE_RTOL · max_j |Δ^j g(0)|`; the degree is the highest order whose
/// difference stands above that floor.
pub fn degree_probe(
    f: impl Fn(&[f64]) -> Vec<f64>,
    base: &[f64],
    direction: &[f64],
    max_order: usize,
) -> Result<Degree> {
    if max_order > MAX_PROBE_ORDER {
        return Err(OracleError::ProbeOrder(max_order));
    }
    if base.len() != direction.len() {
        return Err(OracleError::ProbeShape {
            base: base.len(),
            direction: direction.len(),
        });
    }
    let mut g: Vec<f64> = (0..=max_order + 1)
        .map(|t| {
            let x: Vec<f64> = base
                .iter()
                .zip(direction)
                .map(|(b, d)| b + t as f64 * d)
                .collect();
            f(&x).iter().sum()
        })
        .collect();
    let mut diffs = vec![g[0]];
    for _ in 0..=max_order {
        g = g.windows(2).map(|w| w[1] - w[0]).collect();
        diffs.push(g[0]);
    }
    let scale = diffs.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let tol = PROBE_RTOL * scale;
    if diffs[max_order + 1].abs() > tol {
        return Ok(Degree::AtLeast(max_order));
    }
    Ok(Degree::Exact(
        (0..=max_order)
            .rev()
            .find(|&j| diffs[j].abs() > tol)
            .unwrap_or(0),
    ))
}

/// Splits a concatenated vector back into per-variable slices.
pub fn split_inputs<'a>(x: &'a [f64], dims: &[usize]) -> Vec<&'a [f64]> {
    let mut out = Vec::with_capacity(dims.len());
    let mut off = 0;
    for &d in dims {
        out.push(&x[off..off + d]);
        off += d;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ccp_forward, CopeShape};
    use crate::rng::{stream, uniform_vec, Stream};

    fn ones_ccp2() -> CopeParams {
        let mut p = CopeParams::zeros(&CopeShape {
            variant: Variant::Ccp,
            order: 2,
            rank: 1,
            input_dims: vec![1, 1],
            output_dim: 1,
            omega: None,
            share_conditional: false,
        })
        .unwrap();
        for fs in &mut p.factors {
            for f in fs {
                f.data_mut().fill(1.0);
            }
        }
        p.c.data_mut().fill(1.0);
        p
    }

    #[test]
    fn first_order_identity_sums_inputs() {
        let mut p = OracleParams::zeros(1, vec![3, 3], 3).unwrap();
        let id = DenseTensor::from(Matrix::identity(3));
        p.tensors.insert(TermKey::two(1, 1), id.clone());
        p.tensors.insert(TermKey::two(1, 2), id);
        let y = eval_explicit(&p, &[&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]]).unwrap();
        assert_eq!(y, vec![11.0, 22.0, 33.0]);
    }

    #[test]
    fn zero_tensors_give_beta() {
        let mut p = OracleParams::zeros(3, vec![2, 3], 2).unwrap();
        p.beta = vec![0.5, -2.0];
        assert_eq!(
            eval_explicit(&p, &[&[1.0, 1.0], &[1.0, 2.0, 3.0]]).unwrap(),
            vec![0.5, -2.0]
        );
    }

    #[test]
    fn coupled_scalar_construction() {
        let p = build_order2_coupled_tensors(&ones_ccp2()).unwrap();
        for (key, want) in [
            ((1, 1), 1.0),
            ((1, 2), 1.0),
            ((2, 1), 1.0),
            ((2, 2), 2.0),
            ((2, 3), 1.0),
        ] {
            assert_eq!(
                p.term(TermKey::two(key.0, key.1)).data(),
                &[want],
                "{key:?}"
            );
        }
        assert_eq!(eval_explicit(&p, &[&[2.0], &[3.0]]).unwrap(), vec![30.0]);
    }

    #[test]
    fn zero_head_gives_zero_tensors() {
        let mut f = ones_ccp2();
        f.c.data_mut().fill(0.0);
        let p = build_order2_coupled_tensors(&f).unwrap();
        assert!(p
            .tensors
            .values()
            .all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn coupled_matches_recursion_with_unequal_dims() {
        let mut rng = stream(11, Stream::Init);
        let shape = CopeShape {
            variant: Variant::Ccp,
            order: 2,
            rank: 3,
            input_dims: vec![2, 4],
            output_dim: 3,
            omega: None,
            share_conditional: false,
        };
        let mut f = CopeParams::init(&shape, &mut rng).unwrap();
        f.beta = Matrix::row_vector(&[0.1, 0.2, 0.3]);
        let p = build_order2_coupled_tensors(&f).unwrap();
        let zi = uniform_vec(&mut rng, 2, -1.0, 1.0);
        let zii = uniform_vec(&mut rng, 4, -1.0, 1.0);
        let a = eval_explicit(&p, &[&zi, &zii]).unwrap();
        let b = ccp_forward(&f, &[&zi, &zii]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_expansion_examples() {
        assert_eq!(
            eval_scalar_second_order(
                &ScalarCoefficients {
                    beta: 1.5,
                    ..ScalarCoefficients::zeros(2, 2)
                },
                &[1.0, 2.0],
                &[3.0, 4.0]
            )
            .unwrap(),
            1.5
        );
        let ones = ScalarCoefficients {
            w11: vec![1.0],
            w12: vec![1.0],
            w21: Matrix::filled(1, 1, 1.0),
            w22: Matrix::filled(1, 1, 1.0),
            w23: Matrix::filled(1, 1, 1.0),
            beta: 0.0,
        };
        assert_eq!(
            eval_scalar_second_order(&ones, &[2.0], &[3.0]).unwrap(),
            24.0
        );
    }

    #[test]
    fn scalar_and_tensor_forms_agree() {
        let mut rng = stream(12, Stream::Init);
        let p = OracleParams::random(2, vec![3, 2], 2, 1.0, &mut rng).unwrap();
        let zi = uniform_vec(&mut rng, 3, -1.0, 1.0);
        let zii = uniform_vec(&mut rng, 2, -1.0, 1.0);
        let y = eval_explicit(&p, &[&zi, &zii]).unwrap();
        let rows: Vec<_> = (0..2)
            .map(|t| ScalarCoefficients::from_oracle(&p, t).unwrap())
            .collect();
        for (t, c) in rows.iter().enumerate() {
            let s = eval_scalar_second_order(c, &zi, &zii).unwrap();
            assert!((s - y[t]).abs() < 1e-12);
        }
        assert_eq!(ScalarCoefficients::to_oracle(&rows).unwrap(), p);
    }

    #[test]
    fn limits_and_shapes_are_enforced() {
        assert!(matches!(
            OracleParams::zeros(5, vec![2, 2], 1),
            Err(OracleError::TooLarge(_))
        ));
        assert!(matches!(
            OracleParams::zeros(2, vec![9, 2], 1),
            Err(OracleError::TooLarge(_))
        ));
        assert!(matches!(
            OracleParams::zeros(2, vec![2], 1),
            Err(OracleError::Variables(1))
        ));
        let mut p = OracleParams::zeros(2, vec![2, 2], 1).unwrap();
        p.tensors.remove(&TermKey::two(2, 2));
        assert!(matches!(
            eval_explicit(&p, &[&[0.0; 2], &[0.0; 2]]),
            Err(OracleError::MissingTerm(_))
        ));
        let p = OracleParams::zeros(2, vec![2, 2], 1).unwrap();
        assert!(matches!(
            eval_explicit(&p, &[&[0.0; 2]]),
            Err(OracleError::Arity { .. })
        ));
    }

    #[test]
    fn three_variable_keys_and_modes() {
        assert_eq!(term_keys(1, 3).len(), 3);
        assert_eq!(term_keys(2, 3).len(), 3 + 6);
        assert_eq!(TermKey::three(3, 2, 3).mode_variables(), vec![0, 1, 2]);
        assert!(!TermKey::three(2, 1, 3).touches(2));
    }

    #[test]
    fn probe_examples() {
        let cubic = |x: &[f64]| vec![(1.0 + x[0]).powi(3)];
        assert_eq!(
            degree_probe(cubic, &[0.0], &[1.0], 6).unwrap(),
            Degree::Exact(3)
        );
        assert_eq!(
            degree_probe(|_| vec![4.0], &[0.0], &[1.0], 6).unwrap(),
            Degree::Exact(0)
        );
        assert_eq!(
            degree_probe(|_| vec![0.0], &[0.0], &[1.0], 6).unwrap(),
            Degree::Exact(0)
        );
        let exp = |x: &[f64]| vec![x[0].exp()];
        assert_eq!(
            degree_probe(exp, &[0.0], &[1.0], 4).unwrap(),
            Degree::AtLeast(4)
        );
        assert!(degree_probe(cubic, &[0.0], &[1.0], 13).is_err());
    }
}
