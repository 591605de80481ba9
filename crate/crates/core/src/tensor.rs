//! Dense real tensors and the handful of multilinear operations the
//! polynomial models are built from.
//!
//! Storage is row-major with the first index slowest. Mode indices in the
//! public API are 1-based, matching the usual tensor-algebra convention
//! where mode 1 is the output mode of a parameter tensor.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("mode {mode} is out of range for a tensor of order {order}")]
    ModeOutOfRange { mode: usize, order: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("rank mismatch: factor {index} has {actual} columns, expected {expected}")]
    RankMismatch {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("at least one factor is required")]
    NoFactors,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Factor matrices of a CP decomposition are ordinary matrices with one
/// column per rank-one component.
pub type FactorMatrix = Matrix;

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: vec![rows, cols],
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input, so it is
    /// meant for literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn row_vector(v: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    pub fn column_vector(v: &[f64]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(TensorError::DimMismatch {
                expected: self.cols,
                actual: other.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for p in 0..self.cols {
                let a = self[(i, p)];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[p * other.cols..(p + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · x`.
    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(TensorError::DimMismatch {
                expected: self.cols,
                actual: x.len(),
            });
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// `selfᵀ · x`, the embedding `Uᵀz` used throughout the models.
    pub fn t_mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(TensorError::DimMismatch {
                expected: self.rows,
                actual: x.len(),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * xi;
            }
        }
        Ok(out)
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                left: vec![self.rows, self.cols],
                right: vec![other.rows, other.cols],
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        Ok(self
            .zip_with(other, |a, b| (a - b).abs())?
            .data
            .into_iter()
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Arbitrary-order dense tensor.
///
/// An order-0 tensor (empty shape) holds a single scalar; it is what a
/// chain of vector products over every mode leaves behind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() || shape.contains(&0) {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..len {
            data.push(f(&idx));
            increment(&mut idx, &shape);
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Linear offset of a 0-based multi-index.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    pub fn scale(&self, c: f64) -> DenseTensor {
        DenseTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn add(&self, other: &DenseTensor) -> Result<DenseTensor> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(DenseTensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &DenseTensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Reorders modes so that mode `perm[k]` of `self` becomes mode `k` of
    /// the result (0-based positions).
    pub fn permute(&self, perm: &[usize]) -> Result<DenseTensor> {
        let order = self.order();
        let mut seen = vec![false; order];
        if perm.len() != order
            || perm
                .iter()
                .any(|&p| p >= order || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::ShapeMismatch {
                left: self.shape.clone(),
                right: perm.to_vec(),
            });
        }
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let mut src = vec![0usize; order];
        Ok(DenseTensor::from_fn(shape, |idx| {
            for (k, &p) in perm.iter().enumerate() {
                src[p] = idx[k];
            }
            self.get(&src)
        }))
    }

    pub fn as_vector(&self) -> Option<&[f64]> {
        (self.order() == 1).then_some(&self.data[..])
    }

    pub fn to_matrix(&self) -> Option<Matrix> {
        (self.order() == 2).then(|| Matrix {
            rows: self.shape[0],
            cols: self.shape[1],
            data: self.data.clone(),
        })
    }
}

impl From<Matrix> for DenseTensor {
    fn from(m: Matrix) -> Self {
        DenseTensor {
            shape: vec![m.rows, m.cols],
            data: m.data,
        }
    }
}

impl From<Vec<f64>> for DenseTensor {
    fn from(v: Vec<f64>) -> Self {
        DenseTensor {
            shape: vec![v.len()],
            data: v,
        }
    }
}

/// Advances a row-major multi-index (last index fastest).
fn increment(idx: &mut [usize], shape: &[usize]) {
    for k in (0..idx.len()).rev() {
        idx[k] += 1;
        if idx[k] < shape[k] {
            return;
        }
        idx[k] = 0;
    }
}

/// Column strides of the mode-`m` unfolding: `J_k = ∏_{n<k, n≠m} I_n`,
/// so among the remaining modes the lowest one varies fastest.
fn unfolding_strides(shape: &[usize], m: usize) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (k, &n) in shape.iter().enumerate() {
        if k == m {
            continue;
        }
        strides[k] = acc;
        acc *= n;
    }
    strides
}

fn check_mode(t_order: usize, mode: usize) -> Result<usize> {
    if mode == 0 || mode > t_order {
        return Err(TensorError::ModeOutOfRange {
            mode,
            order: t_order,
        });
    }
    Ok(mode - 1)
}

/// Mode-`mode` unfolding `W_(m)` of shape `I_m × ∏_{k≠m} I_k`.
///
/// Element `w[i_1..i_M]` lands at row `i_m`, column
/// `Σ_{k≠m} i_k J_k` (0-based form of `1 + Σ (i_k − 1) J_k`).
pub fn mode_unfold(t: &DenseTensor, mode: usize) -> Result<Matrix> {
    let m = check_mode(t.order(), mode)?;
    let rows = t.shape[m];
    let cols = t.len() / rows;
    let strides = unfolding_strides(&t.shape, m);
    let mut out = Matrix::zeros(rows, cols);
    let mut idx = vec![0usize; t.order()];
    for &v in &t.data {
        let j: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out[(idx[m], j)] = v;
        increment(&mut idx, &t.shape);
    }
    Ok(out)
}

/// Inverse of [`mode_unfold`] for a tensor of the given shape.
pub fn mode_fold(w: &Matrix, mode: usize, shape: &[usize]) -> Result<DenseTensor> {
    let m = check_mode(shape.len(), mode)?;
    let total: usize = shape.iter().product();
    if w.rows != shape[m] || w.rows * w.cols != total {
        return Err(TensorError::ShapeMismatch {
            left: vec![w.rows, w.cols],
            right: shape.to_vec(),
        });
    }
    let strides = unfolding_strides(shape, m);
    Ok(DenseTensor::from_fn(shape.to_vec(), |idx| {
        let j: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        w[(idx[m], j)]
    }))
}

/// Mode-`mode` vector product `W ×_m u`, contracting mode `m` away.
pub fn mode_vec_product(t: &DenseTensor, mode: usize, u: &[f64]) -> Result<DenseTensor> {
    let m = check_mode(t.order(), mode)?;
    let n = t.shape[m];
    if u.len() != n {
        return Err(TensorError::DimMismatch {
            expected: n,
            actual: u.len(),
        });
    }
    let outer: usize = t.shape[..m].iter().product();
    let inner: usize = t.shape[m + 1..].iter().product();
    let mut data = vec![0.0; outer * inner];
    for a in 0..outer {
        let dst = &mut data[a * inner..(a + 1) * inner];
        for (i, &ui) in u.iter().enumerate() {
            let src = &t.data[(a * n + i) * inner..(a * n + i + 1) * inner];
            for (d, &w) in dst.iter_mut().zip(src) {
                *d += w * ui;
            }
        }
    }
    let mut shape = t.shape.clone();
    shape.remove(m);
    Ok(DenseTensor { shape, data })
}

/// Column-wise Kronecker product: column `r` of the result is
/// `a[:, r] ⊗ b[:, r]`, with the row index of `b` varying fastest.
pub fn khatri_rao(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(TensorError::RankMismatch {
            index: 1,
            expected: a.cols,
            actual: b.cols,
        });
    }
    let mut out = Matrix::zeros(a.rows * b.rows, a.cols);
    for i in 0..a.rows {
        for j in 0..b.rows {
            for r in 0..a.cols {
                out[(i * b.rows + j, r)] = a[(i, r)] * b[(j, r)];
            }
        }
    }
    Ok(out)
}

/// `A⁽¹⁾ ⊙ A⁽²⁾ ⊙ … ⊙ A⁽ᴺ⁾`, folded left to right.
pub fn khatri_rao_chain(factors: &[&Matrix]) -> Result<Matrix> {
    let (first, rest) = factors.split_first().ok_or(TensorError::NoFactors)?;
    let mut acc = (*first).clone();
    for (i, f) in rest.iter().enumerate() {
        acc = khatri_rao(&acc, f).map_err(|_| TensorError::RankMismatch {
            index: i + 1,
            expected: first.cols,
            actual: f.cols,
        })?;
    }
    Ok(acc)
}

pub fn hadamard(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.zip_with(b, |x, y| x * y)
}

pub fn hadamard_vec(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(TensorError::DimMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).collect())
}

/// Rebuilds `[[U⁽¹⁾, …, U⁽ᴹ⁾]] = Σ_r u_r⁽¹⁾ ∘ ⋯ ∘ u_r⁽ᴹ⁾`.
pub fn cp_reconstruct(factors: &[&FactorMatrix]) -> Result<DenseTensor> {
    let first = factors.first().ok_or(TensorError::NoFactors)?;
    let rank = first.cols;
    for (i, f) in factors.iter().enumerate() {
        if f.cols != rank {
            return Err(TensorError::RankMismatch {
                index: i,
                expected: rank,
                actual: f.cols,
            });
        }
    }
    let shape: Vec<usize> = factors.iter().map(|f| f.rows).collect();
    Ok(DenseTensor::from_fn(shape, |idx| {
        (0..rank)
            .map(|r| {
                factors
                    .iter()
                    .zip(idx)
                    .map(|(f, &i)| f[(i, r)])
                    .product::<f64>()
            })
            .sum()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_tensor(shape: Vec<usize>) -> DenseTensor {
        let n: usize = shape.iter().product();
        DenseTensor::new(shape, (0..n).map(|i| i as f64 * 0.5 - 1.0).collect()).unwrap()
    }

    #[test]
    fn unfold_order2_is_matrix_and_transpose() {
        let m = Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let t = DenseTensor::from(m.clone());
        assert_eq!(mode_unfold(&t, 1).unwrap(), m);
        assert_eq!(mode_unfold(&t, 2).unwrap(), m.transpose());
    }

    #[test]
    fn unfold_matches_index_formula() {
        // 2×3×2, mode 2: j = i_1 + i_3·I_1
        let t = seq_tensor(vec![2, 3, 2]);
        let w = mode_unfold(&t, 2).unwrap();
        assert_eq!(w.shape(), (3, 4));
        for i1 in 0..2 {
            for i2 in 0..3 {
                for i3 in 0..2 {
                    assert_eq!(w[(i2, i1 + i3 * 2)], t.get(&[i1, i2, i3]));
                }
            }
        }
    }

    #[test]
    fn fold_inverts_unfold() {
        let t = seq_tensor(vec![2, 3, 2]);
        for m in 1..=3 {
            let w = mode_unfold(&t, m).unwrap();
            assert_eq!(mode_fold(&w, m, t.shape()).unwrap(), t);
        }
    }

    #[test]
    fn mode_errors() {
        let t = seq_tensor(vec![2, 2]);
        assert_eq!(
            mode_unfold(&t, 3),
            Err(TensorError::ModeOutOfRange { mode: 3, order: 2 })
        );
        assert!(mode_unfold(&t, 0).is_err());
        assert_eq!(
            mode_vec_product(&t, 1, &[1.0, 2.0, 3.0]),
            Err(TensorError::DimMismatch {
                expected: 2,
                actual: 3
            })
        );
    }

    #[test]
    fn vec_product_examples() {
        let id = DenseTensor::from(Matrix::identity(2));
        let r = mode_vec_product(&id, 2, &[3.0, 4.0]).unwrap();
        assert_eq!(r.shape(), &[2]);
        assert_eq!(r.data(), &[3.0, 4.0]);

        let ones = DenseTensor::new(vec![2, 2, 2], vec![1.0; 8]).unwrap();
        let r = mode_vec_product(&ones, 2, &[1.0, 2.0]).unwrap();
        assert_eq!(r.shape(), &[2, 2]);
        assert!(r.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn vector_times_vector_is_order_zero() {
        let v = DenseTensor::from(vec![1.0, 2.0, 3.0]);
        let s = mode_vec_product(&v, 1, &[1.0, 1.0, 2.0]).unwrap();
        assert_eq!(s.order(), 0);
        assert_eq!(s.data(), &[9.0]);
    }

    #[test]
    fn khatri_rao_examples() {
        let id = Matrix::identity(2);
        let kr = khatri_rao(&id, &id).unwrap();
        assert_eq!(
            kr,
            Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0], &[0.0, 0.0], &[0.0, 1.0]])
        );
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(
            khatri_rao(&a, &b).unwrap(),
            Matrix::from_rows(&[&[0.0, 2.0], &[1.0, 0.0], &[0.0, 4.0], &[3.0, 0.0]])
        );
        assert!(khatri_rao(&a, &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn khatri_rao_single_column_is_kronecker() {
        let a = Matrix::column_vector(&[1.0, -2.0]);
        let b = Matrix::column_vector(&[3.0, 5.0, 7.0]);
        let kr = khatri_rao(&a, &b).unwrap();
        assert_eq!(kr.column(0), vec![3.0, 5.0, 7.0, -6.0, -10.0, -14.0]);
    }

    #[test]
    fn hadamard_examples() {
        let x = Matrix::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]);
        assert_eq!(hadamard(&x, &Matrix::filled(2, 2, 1.0)).unwrap(), x);
        assert_eq!(
            hadamard(&x, &Matrix::zeros(2, 2)).unwrap(),
            Matrix::zeros(2, 2)
        );
        assert_eq!(
            hadamard_vec(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap(),
            vec![4.0, 10.0, 18.0]
        );
        assert!(hadamard(&x, &Matrix::zeros(2, 3)).is_err());
        assert!(hadamard_vec(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cp_examples() {
        let u1 = Matrix::from_rows(&[&[1.0, 2.0], &[0.0, -1.0], &[3.0, 1.0]]);
        let u2 = Matrix::from_rows(&[&[2.0, 1.0], &[1.0, 1.0]]);
        let t = cp_reconstruct(&[&u1, &u2]).unwrap();
        assert_eq!(t.to_matrix().unwrap(), u1.matmul(&u2.transpose()).unwrap());

        let ones = Matrix::filled(2, 1, 1.0);
        let t = cp_reconstruct(&[&ones, &ones, &ones]).unwrap();
        assert_eq!(t, DenseTensor::new(vec![2, 2, 2], vec![1.0; 8]).unwrap());

        assert_eq!(
            cp_reconstruct(&[&u1, &ones]),
            Err(TensorError::RankMismatch {
                index: 1,
                expected: 2,
                actual: 1
            })
        );
    }

    #[test]
    fn permute_swaps_modes() {
        let t = seq_tensor(vec![2, 3, 4]);
        let p = t.permute(&[0, 2, 1]).unwrap();
        assert_eq!(p.shape(), &[2, 4, 3]);
        assert_eq!(p.get(&[1, 3, 2]), t.get(&[1, 2, 3]));
        assert!(t.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn dense_tensor_rejects_bad_length() {
        assert!(DenseTensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Matrix::from_vec(2, 2, vec![0.0; 3]).is_err());
    }
}
