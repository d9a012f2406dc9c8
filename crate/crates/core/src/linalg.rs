//! Dense vector/matrix primitives and the two normalization layers used by the
//! embedding head: L2 normalization and parameter-free layer normalization.
//!
//! Vectors are plain `f64` slices. All accumulation happens in double
//! precision so that finite-difference checks of the backward passes are
//! meaningful.

use crate::error::{Error, Result};

/// Norms at or below this are treated as a degenerate embedding.
pub const MIN_NORM: f64 = 1e-30;

/// Default epsilon for [`layer_norm`].
pub const DEFAULT_LAYER_NORM_EPS: f64 = 1e-5;

/// Tolerance used when a function requires unit-norm input.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::ShapeMismatch(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
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
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact panics on a zero chunk size
        (0..self.rows).map(move |i| self.row(i))
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// `self · v` for a column vector `v` of length `cols`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::ShapeMismatch(format!(
                "matvec: {}x{} times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok(self.row_iter().map(|r| dot(r, v)).collect())
    }

    /// `selfᵀ · v` for a vector `v` of length `rows`.
    pub fn matvec_transposed(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::ShapeMismatch(format!(
                "matvecᵀ: {}x{} transposed times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &s) in self.row_iter().zip(v) {
            axpy(s, r, &mut out);
        }
        Ok(out)
    }

    /// New matrix holding the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `y += a·x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Cached forward state of [`l2_normalize`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L2Context {
    pub input_norm: f64,
}

/// Cached forward state of [`layer_norm`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNormContext {
    pub mean: f64,
    pub variance: f64,
    pub epsilon: f64,
}

impl LayerNormContext {
    #[inline]
    fn inv_std(&self) -> f64 {
        1.0 / (self.variance + self.epsilon).sqrt()
    }
}

pub fn l2_normalize(v: &[f64]) -> Result<(Vec<f64>, L2Context)> {
    let n = norm(v);
    if !(n > MIN_NORM) {
        return Err(Error::ZeroVector { norm: n });
    }
    Ok((v.iter().map(|x| x / n).collect(), L2Context { input_norm: n }))
}

/// Backward pass of [`l2_normalize`]: applies `(I − ûûᵀ)/‖v‖` to `grad_out`.
pub fn l2_normalize_backward(v: &[f64], grad_out: &[f64], ctx: &L2Context) -> Result<Vec<f64>> {
    if v.len() != grad_out.len() {
        return Err(Error::LengthMismatch {
            left: v.len(),
            right: grad_out.len(),
        });
    }
    let n = norm(v);
    if !(ctx.input_norm > MIN_NORM) || (n - ctx.input_norm).abs() > 1e-9 * n.max(ctx.input_norm) {
        return Err(Error::ContextMismatch);
    }
    Ok(l2_backward_unchecked(v, grad_out, ctx.input_norm))
}

/// Same as [`l2_normalize_backward`] without re-deriving the norm; callers
/// guarantee `input_norm == ‖v‖`.
pub(crate) fn l2_backward_unchecked(v: &[f64], grad_out: &[f64], input_norm: f64) -> Vec<f64> {
    let inv = 1.0 / input_norm;
    // û·g with û = v/‖v‖
    let radial = dot(v, grad_out) * inv;
    v.iter()
        .zip(grad_out)
        .map(|(vi, gi)| (gi - radial * vi * inv) * inv)
        .collect()
}

/// Layer normalization without affine parameters, using the population
/// variance.
pub fn layer_norm(v: &[f64], epsilon: f64) -> Result<(Vec<f64>, LayerNormContext)> {
    let d = v.len();
    if d < 2 {
        return Err(Error::DimensionTooSmall(d));
    }
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidParams(format!("layer norm epsilon {epsilon}")));
    }
    let mean = v.iter().sum::<f64>() / d as f64;
    let variance = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
    let ctx = LayerNormContext {
        mean,
        variance,
        epsilon,
    };
    if !(variance + epsilon > 0.0) {
        return Err(Error::DegenerateVariance);
    }
    let inv_std = ctx.inv_std();
    Ok((v.iter().map(|x| (x - mean) * inv_std).collect(), ctx))
}

pub fn layer_norm_backward(v: &[f64], grad_out: &[f64], ctx: &LayerNormContext) -> Result<Vec<f64>> {
    if v.len() != grad_out.len() {
        return Err(Error::LengthMismatch {
            left: v.len(),
            right: grad_out.len(),
        });
    }
    let d = v.len() as f64;
    let mean = v.iter().sum::<f64>() / d;
    let variance = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
    let scale = 1.0 + mean.abs().max(variance.sqrt());
    if (mean - ctx.mean).abs() > 1e-9 * scale || (variance - ctx.variance).abs() > 1e-9 * (1.0 + variance) {
        return Err(Error::ContextMismatch);
    }
    Ok(layer_norm_backward_unchecked(v, grad_out, ctx))
}

pub(crate) fn layer_norm_backward_unchecked(v: &[f64], grad_out: &[f64], ctx: &LayerNormContext) -> Vec<f64> {
    let d = v.len() as f64;
    let inv_std = ctx.inv_std();
    let g_mean = grad_out.iter().sum::<f64>() / d;
    // mean of g ⊙ x̂
    let gx_mean = v
        .iter()
        .zip(grad_out)
        .map(|(vi, gi)| gi * (vi - ctx.mean) * inv_std)
        .sum::<f64>()
        / d;
    v.iter()
        .zip(grad_out)
        .map(|(vi, gi)| {
            let xhat = (vi - ctx.mean) * inv_std;
            inv_std * (gi - g_mean - xhat * gx_mean)
        })
        .collect()
}

/// Cosine distance `1 − aᵀb` between two unit vectors.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    for v in [a, b] {
        let n = norm(v);
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::NotNormalized { norm: n });
        }
    }
    Ok(1.0 - dot(a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    /// Vector-Jacobian product of `f` at `v` against `g`, by central differences.
    fn fd_vjp(f: impl Fn(&[f64]) -> Vec<f64>, v: &[f64], g: &[f64], h: f64) -> Vec<f64> {
        let mut p = v.to_vec();
        (0..v.len())
            .map(|i| {
                p[i] = v[i] + h;
                let plus = dot(&f(&p), g);
                p[i] = v[i] - h;
                let minus = dot(&f(&p), g);
                p[i] = v[i];
                (plus - minus) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
            .fold(0.0, f64::max)
    }

    #[test]
    fn l2_examples() {
        let (u, ctx) = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!(close(&u, &[0.6, 0.8], 1e-15));
        assert_eq!(ctx.input_norm, 5.0);
        let (u, _) = l2_normalize(&[0.0, 0.0, 5.0]).unwrap();
        assert_eq!(u, vec![0.0, 0.0, 1.0]);
        let (u, _) = l2_normalize(&[1.0; 4]).unwrap();
        assert_eq!(u, vec![0.5; 4]);
    }

    #[test]
    fn l2_rejects_zero() {
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::ZeroVector { .. })));
        assert!(matches!(l2_normalize(&[1e-31, 0.0]), Err(Error::ZeroVector { .. })));
    }

    #[test]
    fn l2_backward_examples() {
        let ctx = L2Context { input_norm: 1.0 };
        assert_eq!(
            l2_normalize_backward(&[1.0, 0.0], &[0.0, 1.0], &ctx).unwrap(),
            vec![0.0, 1.0]
        );
        let ctx = L2Context { input_norm: 2.0 };
        assert_eq!(
            l2_normalize_backward(&[2.0, 0.0], &[1.0, 0.0], &ctx).unwrap(),
            vec![0.0, 0.0]
        );

        let v = [3.0, 4.0];
        let g = [1.0, 1.0];
        let (_, ctx) = l2_normalize(&v).unwrap();
        let analytic = l2_normalize_backward(&v, &g, &ctx).unwrap();
        let numeric = fd_vjp(|p| l2_normalize(p).unwrap().0, &v, &g, 1e-5);
        assert!(rel_err(&analytic, &numeric) < 1e-6, "{analytic:?} vs {numeric:?}");
    }

    #[test]
    fn l2_backward_context_mismatch() {
        let ctx = L2Context { input_norm: 4.0 };
        assert!(matches!(
            l2_normalize_backward(&[3.0, 4.0], &[1.0, 0.0], &ctx),
            Err(Error::ContextMismatch)
        ));
    }

    #[test]
    fn layer_norm_examples() {
        let (out, _) = layer_norm(&[5.0; 4], 1e-5).unwrap();
        assert_eq!(out, vec![0.0; 4]);
        // mean 2, population variance 2/3 -> ±1/sqrt(2/3) = ±sqrt(1.5)
        let (out, ctx) = layer_norm(&[1.0, 2.0, 3.0], 0.0).unwrap();
        let s = 1.5_f64.sqrt();
        assert!(close(&out, &[-s, 0.0, s], 1e-12));
        assert!((s - 1.224744871391589).abs() < 1e-15);
        assert_eq!(ctx.mean, 2.0);
        let (out, _) = layer_norm(&[-1.0, 1.0], 0.0).unwrap();
        assert_eq!(out, vec![-1.0, 1.0]);
    }

    #[test]
    fn layer_norm_errors() {
        assert!(matches!(layer_norm(&[1.0], 1e-5), Err(Error::DimensionTooSmall(1))));
        assert!(matches!(layer_norm(&[2.0, 2.0], 0.0), Err(Error::DegenerateVariance)));
        let (_, ctx) = layer_norm(&[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert!(matches!(
            layer_norm_backward(&[1.0, 2.0, 4.0], &[1.0, 0.0, 0.0], &ctx),
            Err(Error::ContextMismatch)
        ));
    }

    #[test]
    fn layer_norm_backward_constant_and_zero() {
        let v = [5.0; 6];
        let (_, ctx) = layer_norm(&v, 1e-5).unwrap();
        let g = [0.3, -1.0, 2.0, 0.1, 0.0, 4.0];
        let grad = layer_norm_backward(&v, &g, &ctx).unwrap();
        assert!(grad.iter().sum::<f64>().abs() < 1e-9);
        let numeric = fd_vjp(|p| layer_norm(p, 1e-5).unwrap().0, &v, &g, 1e-5);
        assert!(rel_err(&grad, &numeric) < 1e-6);

        let v = [0.5, -1.0, 3.0];
        let (_, ctx) = layer_norm(&v, 1e-5).unwrap();
        assert_eq!(layer_norm_backward(&v, &[0.0; 3], &ctx).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn backward_passes_match_finite_differences() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
            let g: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();

            let (_, ctx) = layer_norm(&v, DEFAULT_LAYER_NORM_EPS).unwrap();
            let analytic = layer_norm_backward(&v, &g, &ctx).unwrap();
            let numeric = fd_vjp(|p| layer_norm(p, DEFAULT_LAYER_NORM_EPS).unwrap().0, &v, &g, 1e-5);
            assert!(rel_err(&analytic, &numeric) < 1e-6, "layer norm seed {seed}");

            let (_, ctx) = l2_normalize(&v).unwrap();
            let analytic = l2_normalize_backward(&v, &g, &ctx).unwrap();
            let numeric = fd_vjp(|p| l2_normalize(p).unwrap().0, &v, &g, 1e-5);
            assert!(rel_err(&analytic, &numeric) < 1e-6, "l2 seed {seed}");
        }
    }

    #[test]
    fn cosine_distance_examples() {
        assert_eq!(cosine_distance(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 2.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!(matches!(
            cosine_distance(&[1.0, 1.0], &[0.0, 1.0]),
            Err(Error::NotNormalized { .. })
        ));
    }

    #[test]
    fn matrix_shapes() {
        assert!(Matrix::new(2, 3, vec![0.0; 5]).is_err());
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(m.matvec(&[1.0, 1.0]).unwrap(), vec![3.0, 7.0]);
        assert_eq!(m.matvec_transposed(&[1.0, 1.0]).unwrap(), vec![4.0, 6.0]);
        assert_eq!(m.select_rows(&[1]).as_slice(), &[3.0, 4.0]);
        assert!(m.matvec(&[1.0]).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn nonzero_vec() -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-100.0f64..100.0, 2..32).prop_filter("nonzero", |v| norm(v) > 1e-3)
        }

        proptest! {
            #[test]
            fn unit_norm_and_scale_invariance(v in nonzero_vec(), c in 1e-3f64..1e3) {
                let (u, _) = l2_normalize(&v).unwrap();
                prop_assert!((norm(&u) - 1.0).abs() < 1e-12);
                let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
                let (us, _) = l2_normalize(&scaled).unwrap();
                for (a, b) in u.iter().zip(&us) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }

            #[test]
            fn l2_backward_is_tangential(v in nonzero_vec(), seed in any::<u64>()) {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let g: Vec<f64> = (0..v.len()).map(|_| rng.random_range(-5.0..5.0)).collect();
                let (_, ctx) = l2_normalize(&v).unwrap();
                let out = l2_normalize_backward(&v, &g, &ctx).unwrap();
                prop_assert!(dot(&out, &v).abs() <= 1e-9 * norm(&g).max(1e-300) * norm(&v));
            }

            #[test]
            fn layer_norm_moments(v in prop::collection::vec(-100.0f64..100.0, 2..32)) {
                let d = v.len() as f64;
                let mean = v.iter().sum::<f64>() / d;
                let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d;
                prop_assume!(var > 1e-6);
                let (out, _) = layer_norm(&v, 0.0).unwrap();
                let m = out.iter().sum::<f64>() / d;
                prop_assert!(m.abs() < 1e-10);
                let ov = out.iter().map(|x| (x - m).powi(2)).sum::<f64>() / d;
                prop_assert!((ov - 1.0).abs() < 1e-9);
            }

            #[test]
            fn cosine_distance_symmetric(a in nonzero_vec()) {
                let (ua, _) = l2_normalize(&a).unwrap();
                let ub: Vec<f64> = ua.iter().rev().copied().collect();
                let dab = cosine_distance(&ua, &ub).unwrap();
                let dba = cosine_distance(&ub, &ua).unwrap();
                prop_assert_eq!(dab, dba);
                prop_assert!(cosine_distance(&ua, &ua).unwrap().abs() < 1e-12);
                prop_assert!((-1e-9..=2.0 + 1e-9).contains(&dab));
            }
        }
    }
}
