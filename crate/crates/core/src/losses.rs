//! Proxy-based classification losses over L2-normalized embeddings.
//!
//! Every loss scores a unit embedding `x` against class proxies, the rows of
//! the bias-free final layer. Proxy rows are stored raw and normalized on each
//! forward pass, so `grad_proxies` is the gradient with respect to the raw
//! rows and already includes the normalization Jacobian. `grad_embedding` is
//! the gradient with respect to the unit embedding itself; the model applies
//! the embedding's own normalization Jacobian when backpropagating.
//!
//! Variants:
//!
//! * NCA: `−log(exp(−d(x,p_y)) / Σ_{z≠y} exp(−d(x,p_z)))` with cosine
//!   distance `d(x,p) = 1 − xᵀp`. The positive term is not in the denominator,
//!   so the value can be negative.
//! * Normalized softmax: cross-entropy over logits `xᵀp_z / σ`.
//! * LMCL: cross-entropy over `s·(xᵀp_z − m·[z = y])`.
//!
//! Any variant can be restricted to an active subset of classes, which is how
//! class subsampling is implemented.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, l2_backward_unchecked, norm, Matrix, MIN_NORM, UNIT_NORM_TOL};
use crate::sampling::SeededRng;

pub const DEFAULT_TEMPERATURE: f64 = 0.05;
pub const DEFAULT_LMCL_SCALE: f64 = 30.0;
pub const DEFAULT_LMCL_MARGIN: f64 = 0.35;

/// Class proxies: one raw (unnormalized) row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyMatrix {
    weights: Matrix,
}

impl ProxyMatrix {
    pub fn new(weights: Matrix) -> Self {
        Self { weights }
    }

    /// Standard-normal rows, each scaled to unit length.
    pub fn random(class_count: usize, dim: usize, rng: &mut SeededRng) -> Self {
        let mut weights = Matrix::zeros(class_count, dim);
        for r in 0..class_count {
            let row = weights.row_mut(r);
            for v in row.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            let n = norm(row);
            row.iter_mut().for_each(|v| *v /= n);
        }
        Self { weights }
    }

    #[inline]
    pub fn class_count(&self) -> usize {
        self.weights.rows()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    pub fn into_inner(self) -> Matrix {
        self.weights
    }

    /// Row-normalized copy of the proxies together with the raw row norms.
    pub fn normalized(&self) -> Result<NormalizedProxies> {
        let mut unit = self.weights.clone();
        let mut norms = Vec::with_capacity(unit.rows());
        for r in 0..unit.rows() {
            let row = unit.row_mut(r);
            let n = norm(row);
            if !(n > MIN_NORM) {
                return Err(Error::ZeroVector { norm: n });
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(NormalizedProxies { unit, norms })
    }
}

#[derive(Debug, Clone)]
pub struct NormalizedProxies {
    unit: Matrix,
    norms: Vec<f64>,
}

impl NormalizedProxies {
    pub fn unit(&self) -> &Matrix {
        &self.unit
    }

    /// Pulls a gradient w.r.t. the unit rows back to the raw rows. Rows whose
    /// gradient is exactly zero stay exactly zero.
    fn backward(&self, raw: &Matrix, grad_unit: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(raw.rows(), raw.cols());
        for r in 0..raw.rows() {
            let g = grad_unit.row(r);
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            out.row_mut(r)
                .copy_from_slice(&l2_backward_unchecked(raw.row(r), g, self.norms[r]));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Nca,
    NormSoftmax,
    Lmcl,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Nca => "nca",
            LossKind::NormSoftmax => "norm-softmax",
            LossKind::Lmcl => "lmcl",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nca" | "proxy-nca" | "proxy_nca" => Ok(LossKind::Nca),
            "norm-softmax" | "norm_softmax" | "normsoftmax" | "softmax" => Ok(LossKind::NormSoftmax),
            "lmcl" | "cosface" => Ok(LossKind::Lmcl),
            other => Err(Error::InvalidParams(format!("unknown loss '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    /// σ, used by the normalized softmax.
    pub temperature: f64,
    /// s, used by LMCL.
    pub scale: f64,
    /// m, used by LMCL.
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::NormSoftmax,
            temperature: DEFAULT_TEMPERATURE,
            scale: DEFAULT_LMCL_SCALE,
            margin: DEFAULT_LMCL_MARGIN,
        }
    }
}

impl LossConfig {
    pub fn norm_softmax(temperature: f64) -> Self {
        Self {
            kind: LossKind::NormSoftmax,
            temperature,
            ..Self::default()
        }
    }

    pub fn nca() -> Self {
        Self {
            kind: LossKind::Nca,
            ..Self::default()
        }
    }

    pub fn lmcl(scale: f64, margin: f64) -> Self {
        Self {
            kind: LossKind::Lmcl,
            scale,
            margin,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            LossKind::NormSoftmax if !(self.temperature > 0.0 && self.temperature.is_finite()) => Err(
                Error::InvalidParams(format!("temperature must be positive, got {}", self.temperature)),
            ),
            LossKind::Lmcl if !(self.scale > 0.0 && self.scale.is_finite()) => Err(Error::InvalidParams(format!(
                "LMCL scale must be positive, got {}",
                self.scale
            ))),
            LossKind::Lmcl if !(0.0..1.0).contains(&self.margin) => Err(Error::InvalidMargin(self.margin)),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub loss: f64,
    /// Gradient w.r.t. the unit embedding.
    pub grad_embedding: Vec<f64>,
    /// Gradient w.r.t. the raw proxy rows, `class_count × dim`.
    pub grad_proxies: Matrix,
    /// Per-class probabilities, zero for classes outside the active set. For
    /// NCA this is the softmax of `−d(x, p_z)` over the active classes.
    pub probabilities: Vec<f64>,
}

/// Mean loss over a minibatch, with gradients of that mean.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub loss: f64,
    /// Row `i` is the gradient of the mean loss w.r.t. unit embedding `i`.
    pub grad_embeddings: Matrix,
    pub grad_proxies: Matrix,
}

/// Loss terms for one sample over the active classes, in active order.
struct SampleTerms {
    loss: f64,
    probabilities: Vec<f64>,
    grad_cos: Vec<f64>,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax_cross_entropy(logits: &[f64], target: usize, logit_scale: f64) -> SampleTerms {
    let lse = log_sum_exp(logits.iter().copied());
    let probabilities: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
    let grad_cos = probabilities
        .iter()
        .enumerate()
        .map(|(k, p)| logit_scale * (p - if k == target { 1.0 } else { 0.0 }))
        .collect();
    SampleTerms {
        loss: lse - logits[target],
        probabilities,
        grad_cos,
    }
}

fn sample_terms(cos: &[f64], target: usize, config: &LossConfig) -> Result<SampleTerms> {
    match config.kind {
        LossKind::NormSoftmax => {
            let logits: Vec<f64> = cos.iter().map(|c| c / config.temperature).collect();
            Ok(softmax_cross_entropy(&logits, target, 1.0 / config.temperature))
        }
        LossKind::Lmcl => {
            let s = config.scale;
            let logits: Vec<f64> = cos
                .iter()
                .enumerate()
                .map(|(k, c)| if k == target { s * (c - config.margin) } else { s * c })
                .collect();
            Ok(softmax_cross_entropy(&logits, target, s))
        }
        LossKind::Nca => {
            if cos.len() < 2 {
                return Err(Error::SingleClass(cos.len()));
            }
            let neg = |c: f64| -(1.0 - c);
            let negatives = cos
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != target)
                .map(|(_, &c)| neg(c));
            let lse_neg = log_sum_exp(negatives);
            let loss = (1.0 - cos[target]) + lse_neg;
            let grad_cos = cos
                .iter()
                .enumerate()
                .map(|(k, &c)| if k == target { -1.0 } else { (neg(c) - lse_neg).exp() })
                .collect();
            let lse_all = log_sum_exp(cos.iter().map(|&c| neg(c)));
            let probabilities = cos.iter().map(|&c| (neg(c) - lse_all).exp()).collect();
            Ok(SampleTerms {
                loss,
                probabilities,
                grad_cos,
            })
        }
    }
}

fn check_unit(x: &[f64]) -> Result<()> {
    let n = norm(x);
    if (n - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::NotNormalized { norm: n });
    }
    Ok(())
}

/// Sorted, deduplicated active set, or every class when `active` is `None`.
fn resolve_active(active: Option<&[usize]>, class_count: usize) -> Result<Vec<usize>> {
    match active {
        None => Ok((0..class_count).collect()),
        Some(a) => {
            let mut a = a.to_vec();
            a.sort_unstable();
            a.dedup();
            if let Some(&bad) = a.iter().find(|&&c| c >= class_count) {
                return Err(Error::InvalidClass {
                    class: bad,
                    class_count,
                });
            }
            Ok(a)
        }
    }
}

struct SampleOutput {
    terms: SampleTerms,
    grad_x: Vec<f64>,
}

fn per_sample(x: &[f64], y: usize, unit: &Matrix, active: &[usize], config: &LossConfig) -> Result<SampleOutput> {
    if x.len() != unit.cols() {
        return Err(Error::ShapeMismatch(format!(
            "embedding dim {} vs proxy dim {}",
            x.len(),
            unit.cols()
        )));
    }
    if y >= unit.rows() {
        return Err(Error::InvalidClass {
            class: y,
            class_count: unit.rows(),
        });
    }
    check_unit(x)?;
    let target = active.binary_search(&y).map_err(|_| Error::TargetNotActive(y))?;
    let cos: Vec<f64> = active.iter().map(|&c| dot(x, unit.row(c))).collect();
    let terms = sample_terms(&cos, target, config)?;
    let mut grad_x = vec![0.0; x.len()];
    for (&c, &g) in active.iter().zip(&terms.grad_cos) {
        axpy(g, unit.row(c), &mut grad_x);
    }
    Ok(SampleOutput { terms, grad_x })
}

fn single_loss(
    x: &[f64],
    y: usize,
    proxies: &ProxyMatrix,
    active: Option<&[usize]>,
    config: &LossConfig,
) -> Result<LossResult> {
    config.validate()?;
    let normalized = proxies.normalized()?;
    let active = resolve_active(active, proxies.class_count())?;
    let out = per_sample(x, y, &normalized.unit, &active, config)?;
    let mut grad_unit = Matrix::zeros(proxies.class_count(), proxies.dim());
    let mut probabilities = vec![0.0; proxies.class_count()];
    for (k, &c) in active.iter().enumerate() {
        axpy(out.terms.grad_cos[k], x, grad_unit.row_mut(c));
        probabilities[c] = out.terms.probabilities[k];
    }
    Ok(LossResult {
        loss: out.terms.loss,
        grad_embedding: out.grad_x,
        grad_proxies: normalized.backward(proxies.weights(), &grad_unit),
        probabilities,
    })
}

pub fn nca_loss(x: &[f64], y: usize, proxies: &ProxyMatrix) -> Result<LossResult> {
    if proxies.class_count() < 2 {
        return Err(Error::SingleClass(proxies.class_count()));
    }
    single_loss(x, y, proxies, None, &LossConfig::nca())
}

pub fn normalized_softmax_loss(x: &[f64], y: usize, proxies: &ProxyMatrix, temperature: f64) -> Result<LossResult> {
    single_loss(x, y, proxies, None, &LossConfig::norm_softmax(temperature))
}

pub fn lmcl_loss(x: &[f64], y: usize, proxies: &ProxyMatrix, scale: f64, margin: f64) -> Result<LossResult> {
    single_loss(x, y, proxies, None, &LossConfig::lmcl(scale, margin))
}

/// Normalized softmax restricted to the classes in `active`; the target must
/// be one of them.
pub fn subsampled_softmax_loss(
    x: &[f64],
    y: usize,
    proxies: &ProxyMatrix,
    active: &[usize],
    temperature: f64,
) -> Result<LossResult> {
    single_loss(x, y, proxies, Some(active), &LossConfig::norm_softmax(temperature))
}

/// Same as [`single_loss`] dispatch but for any variant and optional active
/// set; exposed for the trainer and the gradient checker.
pub fn sample_loss(
    x: &[f64],
    y: usize,
    proxies: &ProxyMatrix,
    config: &LossConfig,
    active: Option<&[usize]>,
) -> Result<LossResult> {
    single_loss(x, y, proxies, active, config)
}

/// Mean loss over the rows of `embeddings`. Per-sample terms are computed in
/// parallel and reduced in row order, so the result does not depend on the
/// thread count.
pub fn batch_loss(
    embeddings: &Matrix,
    labels: &[usize],
    proxies: &ProxyMatrix,
    config: &LossConfig,
    active: Option<&[usize]>,
) -> Result<BatchLoss> {
    if embeddings.rows() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} embeddings vs {} labels",
            embeddings.rows(),
            labels.len()
        )));
    }
    if embeddings.rows() == 0 {
        return Err(Error::ShapeMismatch("empty batch".into()));
    }
    if embeddings.cols() != proxies.dim() {
        return Err(Error::ShapeMismatch(format!(
            "embedding dim {} vs proxy dim {}",
            embeddings.cols(),
            proxies.dim()
        )));
    }
    config.validate()?;
    let normalized = proxies.normalized()?;
    let active = resolve_active(active, proxies.class_count())?;

    let outputs: Vec<SampleOutput> = (0..labels.len())
        .into_par_iter()
        .map(|i| per_sample(embeddings.row(i), labels[i], &normalized.unit, &active, config))
        .collect::<Result<_>>()?;

    let b = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad_embeddings = Matrix::zeros(embeddings.rows(), embeddings.cols());
    let mut grad_unit = Matrix::zeros(proxies.class_count(), proxies.dim());
    for (i, out) in outputs.iter().enumerate() {
        loss += out.terms.loss;
        grad_embeddings
            .row_mut(i)
            .iter_mut()
            .zip(&out.grad_x)
            .for_each(|(g, v)| *g = v / b);
        let x = embeddings.row(i);
        for (&c, &g) in active.iter().zip(&out.terms.grad_cos) {
            axpy(g, x, grad_unit.row_mut(c));
        }
    }
    grad_unit.scale(1.0 / b);
    Ok(BatchLoss {
        loss: loss / b,
        grad_embeddings,
        grad_proxies: normalized.backward(proxies.weights(), &grad_unit),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{l2_normalize, l2_normalize_backward, layer_norm};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn proxies(rows: &[&[f64]]) -> ProxyMatrix {
        ProxyMatrix::new(Matrix::from_rows(rows).unwrap())
    }

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        l2_normalize(&v).unwrap().0
    }

    fn random_proxies(rng: &mut ChaCha8Rng, z: usize, d: usize) -> ProxyMatrix {
        let rows: Vec<Vec<f64>> = (0..z)
            .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        ProxyMatrix::new(Matrix::from_rows(&rows).unwrap())
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn nca_examples() {
        let p = proxies(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let r = nca_loss(&[1.0, 0.0], 0, &p).unwrap();
        assert!((r.loss - (-1.0)).abs() < 1e-15);
        let s = 0.5f64.sqrt();
        let p = proxies(&[&[s, s], &[s, -s]]);
        let r = nca_loss(&[1.0, 0.0], 0, &p).unwrap();
        assert!(r.loss.abs() < 1e-15);
        let p = proxies(&[&[1.0, 0.0]]);
        assert!(matches!(nca_loss(&[1.0, 0.0], 0, &p), Err(Error::SingleClass(1))));
    }

    /// Direct evaluation of the NCA formula, summing exponentials as written.
    fn nca_oracle(x: &[f64], y: usize, p: &ProxyMatrix) -> f64 {
        let unit: Vec<Vec<f64>> = p.weights().row_iter().map(|r| l2_normalize(r).unwrap().0).collect();
        let d = |z: usize| 1.0 - dot(x, &unit[z]);
        let num = (-d(y)).exp();
        let den: f64 = (0..unit.len()).filter(|&z| z != y).map(|z| (-d(z)).exp()).sum();
        -(num / den).ln()
    }

    #[test]
    fn nca_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = random_unit(&mut rng, 5);
            let p = random_proxies(&mut rng, 3, 5);
            let y = rng.random_range(0..3);
            let r = nca_loss(&x, y, &p).unwrap();
            assert!((r.loss - nca_oracle(&x, y, &p)).abs() < 1e-10);
        }
    }

    #[test]
    fn norm_softmax_examples() {
        let p = proxies(&[&[1.0, 0.0]]);
        let r = normalized_softmax_loss(&[1.0, 0.0], 0, &p, 0.05).unwrap();
        assert_eq!(r.loss, 0.0);
        assert_eq!(r.probabilities, vec![1.0]);

        let p = proxies(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let r = normalized_softmax_loss(&[1.0, 0.0, 0.0], 0, &p, 1.0).unwrap();
        let expected = (1.0 + 2.0 * (-1.0f64).exp()).ln();
        assert!((r.loss - expected).abs() < 1e-15);
        assert!((r.loss - 0.551445).abs() < 1e-6);

        assert!(matches!(
            normalized_softmax_loss(&[1.0, 0.0, 0.0], 3, &p, 1.0),
            Err(Error::InvalidClass {
                class: 3,
                class_count: 3
            })
        ));
        assert!(matches!(
            normalized_softmax_loss(&[2.0, 0.0, 0.0], 0, &p, 1.0),
            Err(Error::NotNormalized { .. })
        ));
    }

    #[test]
    fn norm_softmax_random_init_loss_near_log_classes() {
        // Layer-normed, L2-normed embedding against 100 random unit proxies.
        let mut total = 0.0;
        let seeds = 50;
        for seed in 0..seeds {
            let mut rng = SeededRng::new(seed);
            let raw: Vec<f64> = (0..2048).map(|_| StandardNormal.sample(&mut rng)).collect();
            let (ln, _) = layer_norm(&raw, 1e-5).unwrap();
            let (x, _) = l2_normalize(&ln).unwrap();
            let p = ProxyMatrix::random(100, 2048, &mut rng);
            total += normalized_softmax_loss(&x, 0, &p, 0.05).unwrap().loss;
        }
        let mean = total / seeds as f64;
        assert!((mean - 100f64.ln()).abs() < 0.5, "mean init loss {mean}");
    }

    #[test]
    fn lmcl_examples() {
        let p = proxies(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let r = lmcl_loss(&[1.0, 0.0], 0, &p, 1.0, 0.35).unwrap();
        let expected = (1.0 + (-0.65f64).exp()).ln();
        assert!((r.loss - expected).abs() < 1e-15);
        assert!((r.loss - 0.420_055_335_702_715).abs() < 1e-12);
        assert!(matches!(
            lmcl_loss(&[1.0, 0.0], 0, &p, 1.0, 1.0),
            Err(Error::InvalidMargin(_))
        ));
        assert!(matches!(
            lmcl_loss(&[1.0, 0.0], 0, &p, 1.0, -0.1),
            Err(Error::InvalidMargin(_))
        ));
    }

    #[test]
    fn lmcl_margin_increases_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let x = random_unit(&mut rng, 6);
            let p = random_proxies(&mut rng, 4, 6);
            let a = lmcl_loss(&x, 1, &p, 30.0, 0.0).unwrap().loss;
            let b = lmcl_loss(&x, 1, &p, 30.0, 0.35).unwrap().loss;
            assert!(b > a);
        }
    }

    #[test]
    fn subsampled_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_unit(&mut rng, 7);
        let p = random_proxies(&mut rng, 10, 7);
        let all: Vec<usize> = (0..10).collect();
        let full = normalized_softmax_loss(&x, 4, &p, 0.05).unwrap();
        let sub = subsampled_softmax_loss(&x, 4, &p, &all, 0.05).unwrap();
        assert_eq!(full, sub);

        let only = subsampled_softmax_loss(&x, 4, &p, &[4], 0.05).unwrap();
        assert_eq!(only.loss, 0.0);

        // sub-matrix oracle
        let active = [1, 4, 5, 7, 9];
        let sub = subsampled_softmax_loss(&x, 4, &p, &active, 0.05).unwrap();
        let sub_p = ProxyMatrix::new(p.weights().select_rows(&active));
        let oracle = normalized_softmax_loss(&x, 1, &sub_p, 0.05).unwrap();
        assert_eq!(sub.loss, oracle.loss);
        assert_eq!(sub.grad_embedding, oracle.grad_embedding);
        for (k, &c) in active.iter().enumerate() {
            assert_eq!(sub.grad_proxies.row(c), oracle.grad_proxies.row(k));
        }
        for c in [0, 2, 3, 6, 8] {
            assert!(sub.grad_proxies.row(c).iter().all(|&g| g == 0.0));
            assert_eq!(sub.probabilities[c], 0.0);
        }

        assert!(matches!(
            subsampled_softmax_loss(&x, 4, &p, &[1, 2], 0.05),
            Err(Error::TargetNotActive(4))
        ));
    }

    #[test]
    fn removing_positive_term_recovers_nca() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let x = random_unit(&mut rng, 5);
            let p = random_proxies(&mut rng, 4, 5);
            let unit = p.normalized().unwrap();
            let y = 2;
            let logits: Vec<f64> = unit.unit().row_iter().map(|r| dot(&x, r)).collect();
            // softmax with σ = 1 and the positive term dropped from the denominator
            let without_positive = -logits[y]
                + logits
                    .iter()
                    .enumerate()
                    .filter(|&(z, _)| z != y)
                    .map(|(_, l)| l.exp())
                    .sum::<f64>()
                    .ln();
            let nca = nca_loss(&x, y, &p).unwrap().loss;
            assert!((without_positive - nca).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_proxies(&mut rng, 5, 4);
        let cfg = LossConfig::default();
        let rows: Vec<Vec<f64>> = (0..8).map(|_| random_unit(&mut rng, 4)).collect();
        let labels: Vec<usize> = (0..8).map(|i| i % 5).collect();
        let x = Matrix::from_rows(&rows).unwrap();

        let one = batch_loss(&x.select_rows(&[0]), &labels[..1], &p, &cfg, None).unwrap();
        let single = sample_loss(x.row(0), labels[0], &p, &cfg, None).unwrap();
        assert_eq!(one.loss, single.loss);
        assert_eq!(one.grad_proxies, single.grad_proxies);
        assert_eq!(one.grad_embeddings.row(0), &single.grad_embedding[..]);

        let twice = batch_loss(&x.select_rows(&[0, 0]), &[labels[0], labels[0]], &p, &cfg, None).unwrap();
        assert_eq!(twice.loss, one.loss);

        let batch = batch_loss(&x, &labels, &p, &cfg, None).unwrap();
        let singles: Vec<LossResult> = (0..8)
            .map(|i| sample_loss(x.row(i), labels[i], &p, &cfg, None).unwrap())
            .collect();
        let mean = singles.iter().map(|r| r.loss).sum::<f64>() / 8.0;
        assert!((batch.loss - mean).abs() < 1e-12);
        for (r, c) in (0..5).flat_map(|r| (0..4).map(move |c| (r, c))) {
            let m = singles.iter().map(|s| s.grad_proxies.get(r, c)).sum::<f64>() / 8.0;
            assert!((batch.grad_proxies.get(r, c) - m).abs() < 1e-12);
        }

        assert!(matches!(
            batch_loss(&x, &labels[..3], &p, &cfg, None),
            Err(Error::ShapeMismatch(_))
        ));
    }

    /// Loss of a raw embedding (normalized first) against raw proxies.
    fn raw_loss(x_raw: &[f64], y: usize, p: &ProxyMatrix, cfg: &LossConfig, active: Option<&[usize]>) -> f64 {
        let (x, _) = l2_normalize(x_raw).unwrap();
        sample_loss(&x, y, p, cfg, active).unwrap().loss
    }

    fn check_gradients(cfg: LossConfig, subsample: bool) {
        let h = 1e-5;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = rng.random_range(3..9);
            let z = rng.random_range(3..8);
            let x_raw: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut p = random_proxies(&mut rng, z, d);
            let y = rng.random_range(0..z);
            let active: Option<Vec<usize>> = subsample.then(|| {
                let mut a: Vec<usize> = (0..z).filter(|&c| c == y || rng.random_bool(0.5)).collect();
                a.sort_unstable();
                a
            });
            let active = active.as_deref();

            let (x, ctx) = l2_normalize(&x_raw).unwrap();
            let r = sample_loss(&x, y, &p, &cfg, active).unwrap();
            let grad_raw = l2_normalize_backward(&x_raw, &r.grad_embedding, &ctx).unwrap();

            let mut xp = x_raw.clone();
            for i in 0..d {
                xp[i] = x_raw[i] + h;
                let plus = raw_loss(&xp, y, &p, &cfg, active);
                xp[i] = x_raw[i] - h;
                let minus = raw_loss(&xp, y, &p, &cfg, active);
                xp[i] = x_raw[i];
                let num = (plus - minus) / (2.0 * h);
                assert!(
                    rel(grad_raw[i], num) < 1e-5,
                    "{:?} seed {seed} x[{i}]: {} vs {num}",
                    cfg.kind,
                    grad_raw[i]
                );
            }
            for row in 0..z {
                for col in 0..d {
                    let orig = p.weights().get(row, col);
                    p.weights_mut().set(row, col, orig + h);
                    let plus = raw_loss(&x_raw, y, &p, &cfg, active);
                    p.weights_mut().set(row, col, orig - h);
                    let minus = raw_loss(&x_raw, y, &p, &cfg, active);
                    p.weights_mut().set(row, col, orig);
                    let num = (plus - minus) / (2.0 * h);
                    let ana = r.grad_proxies.get(row, col);
                    assert!(
                        rel(ana, num) < 1e-5,
                        "{:?} seed {seed} p[{row},{col}]: {ana} vs {num}",
                        cfg.kind
                    );
                    if let Some(a) = active {
                        if !a.contains(&row) {
                            assert_eq!(ana, 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn gradients_nca() {
        check_gradients(LossConfig::nca(), false);
    }

    #[test]
    fn gradients_norm_softmax() {
        check_gradients(LossConfig::norm_softmax(0.05), false);
    }

    #[test]
    fn gradients_lmcl() {
        check_gradients(LossConfig::lmcl(30.0, 0.35), false);
    }

    #[test]
    fn gradients_subsampled() {
        check_gradients(LossConfig::norm_softmax(0.05), true);
    }

    #[test]
    fn parse_kind() {
        assert_eq!("lmcl".parse::<LossKind>().unwrap(), LossKind::Lmcl);
        assert_eq!("proxy-nca".parse::<LossKind>().unwrap(), LossKind::Nca);
        assert_eq!(
            LossKind::NormSoftmax.to_string().parse::<LossKind>().unwrap(),
            LossKind::NormSoftmax
        );
        assert!("triplet".parse::<LossKind>().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn probabilities_form_a_distribution(seed in any::<u64>(), temp in 0.01f64..2.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = random_unit(&mut rng, 6);
                let p = random_proxies(&mut rng, 7, 6);
                for cfg in [LossConfig::norm_softmax(temp), LossConfig::lmcl(1.0 / temp, 0.2), LossConfig::nca()] {
                    let r = sample_loss(&x, 3, &p, &cfg, None).unwrap();
                    prop_assert!((r.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-10);
                    prop_assert!(r.probabilities.iter().all(|&q| q > 0.0));
                    prop_assert!(r.loss.is_finite());
                }
            }

            #[test]
            fn scale_invariance(seed in any::<u64>(), c in 1e-3f64..1e3) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x_raw: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
                let p = random_proxies(&mut rng, 4, 5);
                let mut scaled = p.clone();
                for r in 0..4 {
                    let k = rng.random_range(0.01..100.0);
                    scaled.weights_mut().row_mut(r).iter_mut().for_each(|v| *v *= k);
                }
                let xs: Vec<f64> = x_raw.iter().map(|v| v * c).collect();
                let cfg = LossConfig::default();
                let a = raw_loss(&x_raw, 2, &p, &cfg, None);
                let b = raw_loss(&xs, 2, &scaled, &cfg, None);
                prop_assert!((a - b).abs() < 1e-10);
            }

            #[test]
            fn sharper_temperature_concentrates_argmax(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = random_unit(&mut rng, 6);
                let p = random_proxies(&mut rng, 5, 6);
                let logits: Vec<f64> = p.normalized().unwrap().unit().row_iter().map(|r| dot(&x, r)).collect();
                let best = (0..5).max_by(|&a, &b| logits[a].total_cmp(&logits[b])).unwrap();
                let mut prev = 0.0;
                for temp in [2.0, 1.0, 0.5, 0.2, 0.1, 0.05] {
                    let q = normalized_softmax_loss(&x, 0, &p, temp).unwrap().probabilities[best];
                    prop_assert!(q >= prev);
                    prev = q;
                }
            }

            #[test]
            fn lmcl_without_margin_is_norm_softmax(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = random_unit(&mut rng, 8);
                let p = random_proxies(&mut rng, 6, 8);
                let a = lmcl_loss(&x, 5, &p, 20.0, 0.0).unwrap();
                let b = normalized_softmax_loss(&x, 5, &p, 0.05).unwrap();
                prop_assert!((a.loss - b.loss).abs() < 1e-12);
            }
        }
    }
}
