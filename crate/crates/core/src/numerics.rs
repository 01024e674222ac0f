//! Dense row-major matrices, stable reductions, parameter tensors and the
//! finite-difference gradient checker.

use std::fmt;

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            let row = &self.data[r * self.cols..r * self.cols + self.cols.min(8)];
            writeln!(f, "  {row:?}")?;
        }
        write!(f, "]")
    }
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// A `1×n` matrix.
    pub fn row_vector(values: Vec<T>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    /// A `n×1` matrix.
    pub fn column_vector(values: Vec<T>) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::c(v.f64())).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Rows picked by index, in the order given.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: T) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    /// Adds `row` to every row.
    pub fn add_row_broadcast(&mut self, row: &[T]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                left: self.shape(),
                right: (1, row.len()),
            });
        }
        for chunk in self.data.chunks_exact_mut(self.cols.max(1)) {
            for (a, &b) in chunk.iter_mut().zip(row) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn column_sums(&self) -> Vec<T> {
        let mut sums = vec![T::zero(); self.cols];
        for r in 0..self.rows {
            for (s, &v) in sums.iter_mut().zip(self.row(r)) {
                *s += v;
            }
        }
        sums
    }

    /// `self · other`
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        gemm_strided(
            self.rows,
            self.cols,
            other.cols,
            (&self.data, self.cols as isize, 1),
            (&other.data, other.cols as isize, 1),
            &mut out,
            T::zero(),
        );
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch {
                op: "t_matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Self::zeros(self.cols, other.cols);
        gemm_strided(
            self.cols,
            self.rows,
            other.cols,
            (&self.data, 1, self.cols as isize),
            (&other.data, other.cols as isize, 1),
            &mut out,
            T::zero(),
        );
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "matmul_t",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, other.rows);
        gemm_strided(
            self.rows,
            self.cols,
            other.rows,
            (&self.data, self.cols as isize, 1),
            (&other.data, 1, other.cols as isize),
            &mut out,
            T::zero(),
        );
        Ok(out)
    }

    /// `acc += selfᵀ · other`, used for weight-gradient accumulation.
    pub fn t_matmul_acc(&self, other: &Self, acc: &mut Self) -> Result<()> {
        if self.rows != other.rows || acc.shape() != (self.cols, other.cols) {
            return Err(Error::ShapeMismatch {
                op: "t_matmul_acc",
                left: self.shape(),
                right: other.shape(),
            });
        }
        gemm_strided(
            self.cols,
            self.rows,
            other.cols,
            (&self.data, 1, self.cols as isize),
            (&other.data, other.cols as isize, 1),
            acc,
            T::one(),
        );
        Ok(())
    }
}

fn gemm_strided<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: (&[T], isize, isize),
    b: (&[T], isize, isize),
    c: &mut Matrix<T>,
    beta: T,
) {
    debug_assert_eq!(c.shape(), (m, n));
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.scale(beta);
        return;
    }
    let cols = c.cols as isize;
    // SAFETY: shapes were checked by the callers; the three buffers are
    // distinct allocations of the described sizes.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.data.as_mut_ptr(),
            cols,
            1,
        );
    }
}

/// `log Σ exp(terms)`, shifted by the maximum. All `-∞` yields `-∞`.
pub fn logsumexp<T: Scalar>(terms: &[T]) -> Result<T> {
    if terms.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let max = terms.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() || max == T::infinity() {
        return Ok(max);
    }
    let sum: T = terms.iter().map(|&t| (t - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Normalized exponentials, computed stably. `-∞` entries map to exactly 0.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// What a parameter tensor is; drives weight-decay exclusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    NormScale,
    NormShift,
    DepthLogits,
    NoiseLogStd,
}

impl ParamRole {
    pub fn decays(self) -> bool {
        matches!(self, ParamRole::Weight | ParamRole::Bias)
    }
}

/// A named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub role: ParamRole,
    pub value: Matrix<T>,
    pub grad: Matrix<T>,
    /// Frozen tensors are skipped by the optimizer and the gradient checker.
    pub frozen: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, role: ParamRole, value: Matrix<T>) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self {
            name: name.into(),
            role,
            value,
            grad,
            frozen: false,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Anything that owns an ordered collection of [`Param`]s.
///
/// Visiting order is the declaration order and must be stable: optimizer
/// state and checkpoints rely on it.
pub trait ParamBundle<T: Scalar> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    /// All parameter values concatenated in visiting order.
    fn flat_values(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.extend_from_slice(p.value.as_slice()));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.len());
        n
    }
}

fn with_param_mut<T: Scalar, M: ParamBundle<T> + ?Sized>(
    model: &mut M,
    index: usize,
    f: &mut dyn FnMut(&mut Param<T>),
) {
    let mut i = 0;
    model.visit_params_mut(&mut |p| {
        if i == index {
            f(p);
        }
        i += 1;
    });
}

/// Compares analytic gradients with central differences.
///
/// `loss` must return the loss and accumulate its gradient into the
/// parameters' `grad` tensors. Returns the largest
/// `|analytic - numeric| / (|numeric| + 1e-8)` over all unfrozen entries.
pub fn grad_check<T, M, F>(model: &mut M, mut loss: F, eps: T) -> Result<T>
where
    T: Scalar,
    M: ParamBundle<T> + ?Sized,
    F: FnMut(&mut M) -> Result<T>,
{
    if !(eps >= T::c(1e-7) && eps <= T::c(1e-3)) {
        return Err(invalid(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    model.zero_grad();
    let base = loss(model)?;
    if !base.is_finite() {
        return Err(Error::LossNotFinite);
    }
    let mut analytic: Vec<Option<Vec<T>>> = Vec::new();
    model.visit_params(&mut |p| {
        analytic.push((!p.frozen).then(|| p.grad.as_slice().to_vec()));
    });

    let mut worst = T::zero();
    for (index, grads) in analytic.iter().enumerate() {
        let Some(grads) = grads else { continue };
        for (j, &g) in grads.iter().enumerate() {
            let mut original = T::zero();
            with_param_mut(model, index, &mut |p| {
                original = p.value.as_slice()[j];
                p.value.as_mut_slice()[j] = original + eps;
            });
            let plus = loss(model)?;
            with_param_mut(model, index, &mut |p| {
                p.value.as_mut_slice()[j] = original - eps;
            });
            let minus = loss(model)?;
            with_param_mut(model, index, &mut |p| {
                p.value.as_mut_slice()[j] = original;
            });
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::LossNotFinite);
            }
            let numeric = (plus - minus) / (eps + eps);
            let rel = (g - numeric).abs() / (numeric.abs() + T::c(1e-8));
            if rel > worst {
                worst = rel;
            }
        }
    }
    // leave the analytic gradient in place for the caller
    model.zero_grad();
    loss(model)?;
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic {
        p: Param<f64>,
        frozen: Param<f64>,
    }

    impl ParamBundle<f64> for Quadratic {
        fn visit_params(&self, f: &mut dyn FnMut(&Param<f64>)) {
            f(&self.p);
            f(&self.frozen);
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
            f(&mut self.p);
            f(&mut self.frozen);
        }
    }

    fn half_norm_sq(q: &mut Quadratic) -> Result<f64> {
        let mut total = 0.0;
        for (g, &v) in q.p.grad.as_mut_slice().iter_mut().zip(q.p.value.as_slice()) {
            *g += v;
            total += 0.5 * v * v;
        }
        // the frozen tensor deliberately reports a wrong gradient
        for (g, &v) in q
            .frozen
            .grad
            .as_mut_slice()
            .iter_mut()
            .zip(q.frozen.value.as_slice())
        {
            *g += 1e3;
            total += v * v * v;
        }
        Ok(total)
    }

    #[test]
    fn logsumexp_simple_cases() {
        assert!((logsumexp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(logsumexp(&[3.25]).unwrap(), 3.25);
        assert_eq!(logsumexp(&[-7.5f64]).unwrap(), -7.5);
        assert_eq!(
            logsumexp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap(),
            f64::NEG_INFINITY
        );
        assert!(matches!(logsumexp::<f64>(&[]), Err(Error::EmptyReduction)));
    }

    #[test]
    fn logsumexp_large_terms_against_extended_precision() {
        // 1000.5 + ln(1 + e^-0.5) evaluated with a 30-term series in f64
        // around small quantities only, so no large exponent is formed.
        let z = (-0.5f64).exp();
        let mut log1p = 0.0;
        let mut term = z;
        for k in 1..60 {
            log1p += if k % 2 == 1 { term / k as f64 } else { -term / k as f64 };
            term *= z;
        }
        let expected = 1000.5 + log1p;
        let got = logsumexp(&[1000.0, 1000.5]).unwrap();
        assert!(((got - expected) / expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn quadratic_gradient_is_exact_and_frozen_is_ignored() {
        let mut q = Quadratic {
            p: Param::new(
                "p",
                ParamRole::Weight,
                Matrix::row_vector(vec![0.3, -1.2, 2.5, 0.01]),
            ),
            frozen: Param::new("f", ParamRole::Bias, Matrix::row_vector(vec![1.0, 2.0])),
        };
        q.frozen.frozen = true;
        let err = grad_check(&mut q, half_norm_sq, 1e-5).unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn grad_check_rejects_bad_eps_and_nonfinite_loss() {
        let mut q = Quadratic {
            p: Param::new("p", ParamRole::Weight, Matrix::row_vector(vec![1.0])),
            frozen: Param::new("f", ParamRole::Bias, Matrix::row_vector(vec![])),
        };
        assert!(grad_check(&mut q, half_norm_sq, 1e-2).is_err());
        let r = grad_check(&mut q, |_q: &mut Quadratic| Ok(f64::NAN), 1e-5);
        assert!(matches!(r, Err(Error::LossNotFinite)));
    }

    #[test]
    fn matmul_variants_agree_with_naive_loops() {
        let a = Matrix::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.37 - 1.0);
        let b = Matrix::from_fn(4, 2, |r, c| (r as f64 - c as f64) * 0.5 + 0.1);
        let ab = a.matmul(&b).unwrap();
        for r in 0..3 {
            for c in 0..2 {
                let naive: f64 = (0..4).map(|k| a.get(r, k) * b.get(k, c)).sum();
                assert!((ab.get(r, c) - naive).abs() < 1e-12);
            }
        }
        let at = a.transpose();
        assert_eq!(at.t_matmul(&b).unwrap(), a.matmul(&b).unwrap());
        let bt = b.transpose();
        let abt = a.matmul_t(&bt).unwrap();
        for (x, y) in abt.as_slice().iter().zip(ab.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut acc = Matrix::filled(ab.rows(), 2, 1.0);
        at.t_matmul_acc(&b, &mut acc).unwrap();
        for (x, y) in acc.as_slice().iter().zip(ab.as_slice()) {
            assert!((x - 1.0 - y).abs() < 1e-12);
        }
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn softmax_handles_negative_infinity() {
        let p = softmax(&[f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY]);
        assert_eq!(p, vec![0.0, 1.0, 0.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn logsumexp_is_bracketed(v in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
                let lse = logsumexp(&v).unwrap();
                let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(lse >= max);
                prop_assert!(lse <= max + (v.len() as f64).ln() + 1e-12);
            }
        }
    }
}
