//! Embedding model and its SGD training loop.
//!
//! The model is `trunk → layer norm → bias-free projection → L2 norm`, and
//! the proxies live next to it as the rows of the classifier. Gradients are
//! analytic end to end; [`grad_check`] compares them against central
//! differences of the full pipeline.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{
    axpy, l2_backward_unchecked, layer_norm, layer_norm_backward_unchecked, norm, LayerNormContext, Matrix,
    DEFAULT_LAYER_NORM_EPS, MIN_NORM,
};
use crate::losses::{batch_loss, LossConfig, ProxyMatrix};
use crate::sampling::{class_balanced_batches, sequential_batches, subsample_classes, BatchSpec, Dataset, SeededRng};

/// Feature extractor ahead of the embedding head.
#[derive(Debug, Clone, PartialEq)]
pub enum Trunk {
    Identity,
    /// `tanh(W·x + b)`, `W` is `hidden × input`.
    Hidden {
        weights: Matrix,
        bias: Vec<f64>,
    },
}

impl Trunk {
    pub fn output_dim(&self, input_dim: usize) -> usize {
        match self {
            Trunk::Identity => input_dim,
            Trunk::Hidden { weights, .. } => weights.rows(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub input_dim: usize,
    pub trunk: Trunk,
    /// `embed_dim × trunk_output_dim`, no bias.
    pub projection: Matrix,
    pub layer_norm: bool,
    pub layer_norm_epsilon: f64,
}

fn uniform_matrix(rows: usize, cols: usize, bound: f64, rng: &mut SeededRng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    m.as_mut_slice()
        .iter_mut()
        .for_each(|v| *v = rng.random_range(-bound..bound));
    m
}

/// Per-sample intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
struct SampleCache {
    trunk_out: Vec<f64>,
    ln_ctx: Option<LayerNormContext>,
    normed: Vec<f64>,
    projected: Vec<f64>,
    projected_norm: f64,
}

/// Result of [`EmbeddingModel::forward`].
#[derive(Debug, Clone)]
pub struct Forward {
    pub embeddings: Matrix,
    caches: Vec<SampleCache>,
}

/// Gradients of the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub trunk_weights: Option<Matrix>,
    pub trunk_bias: Option<Vec<f64>>,
    pub projection: Matrix,
}

impl EmbeddingModel {
    /// Identity trunk. The projection is drawn from `U(−1/√F, 1/√F)`.
    pub fn linear(input_dim: usize, embed_dim: usize, layer_norm: bool, rng: &mut SeededRng) -> Result<Self> {
        Self::check_dims(input_dim, embed_dim, layer_norm)?;
        let bound = 1.0 / (input_dim as f64).sqrt();
        Ok(Self {
            input_dim,
            trunk: Trunk::Identity,
            projection: uniform_matrix(embed_dim, input_dim, bound, rng),
            layer_norm,
            layer_norm_epsilon: DEFAULT_LAYER_NORM_EPS,
        })
    }

    /// One tanh hidden layer ahead of the projection.
    pub fn with_hidden(
        input_dim: usize,
        hidden_dim: usize,
        embed_dim: usize,
        layer_norm: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Self::check_dims(hidden_dim, embed_dim, layer_norm)?;
        if input_dim == 0 {
            return Err(Error::InvalidParams("input dim must be >= 1".into()));
        }
        let bound = 1.0 / (input_dim as f64).sqrt();
        let weights = uniform_matrix(hidden_dim, input_dim, bound, rng);
        let bias = (0..hidden_dim).map(|_| rng.random_range(-bound..bound)).collect();
        let pbound = 1.0 / (hidden_dim as f64).sqrt();
        Ok(Self {
            input_dim,
            trunk: Trunk::Hidden { weights, bias },
            projection: uniform_matrix(embed_dim, hidden_dim, pbound, rng),
            layer_norm,
            layer_norm_epsilon: DEFAULT_LAYER_NORM_EPS,
        })
    }

    fn check_dims(trunk_dim: usize, embed_dim: usize, layer_norm: bool) -> Result<()> {
        if trunk_dim == 0 || embed_dim == 0 || (layer_norm && trunk_dim < 2) {
            return Err(Error::InvalidParams(format!(
                "invalid model dims: trunk output {trunk_dim}, embedding {embed_dim}"
            )));
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn trunk_output_dim(&self) -> usize {
        self.trunk.output_dim(self.input_dim)
    }

    /// Checks internal shape consistency, e.g. after loading a checkpoint.
    pub fn validate(&self) -> Result<()> {
        if let Trunk::Hidden { weights, bias } = &self.trunk {
            if weights.cols() != self.input_dim || bias.len() != weights.rows() {
                return Err(Error::ShapeMismatch("trunk weights/bias shapes disagree".into()));
            }
        }
        if self.projection.cols() != self.trunk_output_dim() {
            return Err(Error::ShapeMismatch(format!(
                "projection has {} columns, trunk outputs {}",
                self.projection.cols(),
                self.trunk_output_dim()
            )));
        }
        Ok(())
    }

    fn forward_one(&self, x: &[f64]) -> Result<(Vec<f64>, SampleCache)> {
        if x.len() != self.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim
            )));
        }
        let trunk_out = match &self.trunk {
            Trunk::Identity => x.to_vec(),
            Trunk::Hidden { weights, bias } => weights
                .matvec(x)?
                .into_iter()
                .zip(bias)
                .map(|(a, b)| (a + b).tanh())
                .collect(),
        };
        let (normed, ln_ctx) = if self.layer_norm {
            let (out, ctx) = layer_norm(&trunk_out, self.layer_norm_epsilon)?;
            (out, Some(ctx))
        } else {
            (trunk_out.clone(), None)
        };
        let projected = self.projection.matvec(&normed)?;
        let projected_norm = norm(&projected);
        if !(projected_norm > MIN_NORM) {
            return Err(Error::ZeroVector { norm: projected_norm });
        }
        let unit = projected.iter().map(|v| v / projected_norm).collect();
        Ok((
            unit,
            SampleCache {
                trunk_out,
                ln_ctx,
                normed,
                projected,
                projected_norm,
            },
        ))
    }

    /// Forward pass over the rows of `inputs`, keeping what backward needs.
    pub fn forward(&self, inputs: &Matrix) -> Result<Forward> {
        let rows: Vec<(Vec<f64>, SampleCache)> = (0..inputs.rows())
            .into_par_iter()
            .map(|i| self.forward_one(inputs.row(i)))
            .collect::<Result<_>>()?;
        let mut embeddings = Matrix::zeros(inputs.rows(), self.embed_dim());
        let mut caches = Vec::with_capacity(rows.len());
        for (i, (unit, cache)) in rows.into_iter().enumerate() {
            embeddings.row_mut(i).copy_from_slice(&unit);
            caches.push(cache);
        }
        Ok(Forward { embeddings, caches })
    }

    /// Unit-norm embeddings of every row of `inputs`.
    pub fn embed(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.forward(inputs)?.embeddings)
    }

    pub fn embed_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_one(x)?.0)
    }

    /// Parameter gradients given gradients w.r.t. the unit embeddings.
    /// Contributions are summed in row order.
    pub fn backward(&self, inputs: &Matrix, fwd: &Forward, grad_embeddings: &Matrix) -> Result<ModelGrads> {
        if grad_embeddings.rows() != fwd.caches.len() || grad_embeddings.cols() != self.embed_dim() {
            return Err(Error::ShapeMismatch("gradient does not match forward batch".into()));
        }
        // (grad wrt projected, grad wrt trunk pre-activation)
        let per_row: Vec<(Vec<f64>, Option<Vec<f64>>)> = fwd
            .caches
            .par_iter()
            .enumerate()
            .map(|(i, c)| {
                let g_proj = l2_backward_unchecked(&c.projected, grad_embeddings.row(i), c.projected_norm);
                let pre = match &self.trunk {
                    Trunk::Identity => None,
                    Trunk::Hidden { .. } => {
                        let g_normed = self
                            .projection
                            .matvec_transposed(&g_proj)
                            .expect("projection shape checked by forward");
                        let g_trunk = match &c.ln_ctx {
                            Some(ctx) => layer_norm_backward_unchecked(&c.trunk_out, &g_normed, ctx),
                            None => g_normed,
                        };
                        Some(
                            g_trunk
                                .iter()
                                .zip(&c.trunk_out)
                                .map(|(g, t)| g * (1.0 - t * t))
                                .collect(),
                        )
                    }
                };
                (g_proj, pre)
            })
            .collect();

        let mut projection = Matrix::zeros(self.projection.rows(), self.projection.cols());
        for ((g_proj, _), c) in per_row.iter().zip(&fwd.caches) {
            for (r, &g) in g_proj.iter().enumerate() {
                axpy(g, &c.normed, projection.row_mut(r));
            }
        }
        let (trunk_weights, trunk_bias) = match &self.trunk {
            Trunk::Identity => (None, None),
            Trunk::Hidden { weights, bias } => {
                let mut gw = Matrix::zeros(weights.rows(), weights.cols());
                let mut gb = vec![0.0; bias.len()];
                for (i, (_, pre)) in per_row.iter().enumerate() {
                    let pre = pre.as_ref().expect("hidden trunk");
                    for (h, &g) in pre.iter().enumerate() {
                        axpy(g, inputs.row(i), gw.row_mut(h));
                        gb[h] += g;
                    }
                }
                (Some(gw), Some(gb))
            }
        };
        Ok(ModelGrads {
            trunk_weights,
            trunk_bias,
            projection,
        })
    }
}

/// Classical momentum with weight decay folded into the gradient:
/// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::ShapeMismatch(format!(
            "sgd: {} params, {} grads, {} velocity entries",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + (g + weight_decay * *p);
        *p -= lr * *v;
    }
    Ok(())
}

/// Velocity buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub trunk_weights: Vec<f64>,
    pub trunk_bias: Vec<f64>,
    pub projection: Vec<f64>,
    pub proxies: Vec<f64>,
}

impl OptimizerState {
    pub fn zeros(model: &EmbeddingModel, proxies: &ProxyMatrix) -> Self {
        let (tw, tb) = match &model.trunk {
            Trunk::Identity => (0, 0),
            Trunk::Hidden { weights, bias } => (weights.as_slice().len(), bias.len()),
        };
        Self {
            trunk_weights: vec![0.0; tw],
            trunk_bias: vec![0.0; tb],
            projection: vec![0.0; model.projection.as_slice().len()],
            proxies: vec![0.0; proxies.weights().as_slice().len()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchPolicy {
    Balanced(BatchSpec),
    Sequential { batch_size: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batching: BatchPolicy,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at which the learning rate is multiplied by `lr_gamma`.
    pub lr_steps: Vec<usize>,
    pub lr_gamma: f64,
    pub loss: LossConfig,
    pub subsample_ratio: f64,
    /// Leading epochs (counted within `epochs`) during which the trunk is
    /// frozen and only the projection and proxies update.
    pub warmstart_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batching: BatchPolicy::Balanced(BatchSpec {
                classes_per_batch: 3,
                samples_per_class: 25,
            }),
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_steps: vec![15],
            lr_gamma: 0.1,
            loss: LossConfig::default(),
            subsample_ratio: 1.0,
            warmstart_epochs: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma.is_finite()) {
            return bad(format!("lr gamma must be positive, got {}", self.lr_gamma));
        }
        if !(self.subsample_ratio > 0.0 && self.subsample_ratio <= 1.0) {
            return bad(format!(
                "subsample ratio must be in (0, 1], got {}",
                self.subsample_ratio
            ));
        }
        match self.batching {
            BatchPolicy::Balanced(spec) if spec.classes_per_batch == 0 || spec.samples_per_class == 0 => {
                return bad("batch spec needs C, S >= 1".into())
            }
            BatchPolicy::Sequential { batch_size: 0 } => return bad("batch size must be >= 1".into()),
            _ => {}
        }
        self.loss.validate()
    }
}

/// Step-decayed learning rate for `epoch` (0-based).
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let passed = config.lr_steps.iter().filter(|&&s| epoch >= s).count();
    config.lr * config.lr_gamma.powi(passed as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Loss of the very first minibatch, before any update.
    pub first_batch_loss: Option<f64>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub model: EmbeddingModel,
    pub proxies: ProxyMatrix,
    pub history: TrainHistory,
}

fn check_fit_inputs(dataset: &Dataset, model: &EmbeddingModel, proxies: &ProxyMatrix) -> Result<()> {
    model.validate()?;
    if dataset.feature_dim() != model.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "dataset has {} features, model expects {}",
            dataset.feature_dim(),
            model.input_dim
        )));
    }
    if proxies.dim() != model.embed_dim() {
        return Err(Error::ShapeMismatch(format!(
            "proxy dim {} vs embedding dim {}",
            proxies.dim(),
            model.embed_dim()
        )));
    }
    if proxies.class_count() < dataset.class_count() {
        return Err(Error::ShapeMismatch(format!(
            "{} proxies for {} classes",
            proxies.class_count(),
            dataset.class_count()
        )));
    }
    Ok(())
}

/// Trains `model` and `proxies` on `dataset`. Each iteration draws a batch,
/// embeds it, optionally restricts the softmax to a class subsample, and
/// takes one SGD step. The run is a pure function of its inputs and
/// `config.seed`.
/// Once parameters have been updated, a vanishing or overflowing norm means
/// training blew up rather than bad input.
fn diverged(e: Error, iteration: usize) -> Error {
    match e {
        Error::NotNormalized { .. } | Error::ZeroVector { .. } | Error::DegenerateVariance if iteration > 0 => {
            Error::NonFiniteLoss { iteration }
        }
        e => e,
    }
}

pub fn fit(
    dataset: &Dataset,
    mut model: EmbeddingModel,
    mut proxies: ProxyMatrix,
    config: &TrainConfig,
) -> Result<FitOutput> {
    config.validate()?;
    check_fit_inputs(dataset, &model, &proxies)?;

    let mut rng = SeededRng::new(config.seed);
    let mut state = OptimizerState::zeros(&model, &proxies);
    let mut history = TrainHistory::default();
    let mut iteration = 0usize;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = lr_at(epoch, config);
        let train_trunk = epoch >= config.warmstart_epochs;
        let batches = match config.batching {
            BatchPolicy::Balanced(spec) => class_balanced_batches(dataset.labels(), spec, &mut rng)?,
            BatchPolicy::Sequential { batch_size } => sequential_batches(dataset.len(), batch_size, &mut rng)?,
        };

        let mut loss_sum = 0.0;
        for batch in &batches {
            let inputs = dataset.features().select_rows(batch);
            let labels: Vec<usize> = batch.iter().map(|&i| dataset.labels()[i]).collect();
            let fwd = model.forward(&inputs).map_err(|e| diverged(e, iteration))?;
            let active = if config.subsample_ratio < 1.0 {
                Some(subsample_classes(
                    &labels,
                    proxies.class_count(),
                    config.subsample_ratio,
                    &mut rng,
                )?)
            } else {
                None
            };
            let bl = batch_loss(&fwd.embeddings, &labels, &proxies, &config.loss, active.as_deref())
                .map_err(|e| diverged(e, iteration))?;
            if !bl.loss.is_finite() {
                return Err(Error::NonFiniteLoss { iteration });
            }
            history.first_batch_loss.get_or_insert(bl.loss);
            loss_sum += bl.loss;

            let grads = model.backward(&inputs, &fwd, &bl.grad_embeddings)?;
            let (mom, wd) = (config.momentum, config.weight_decay);
            if train_trunk {
                if let Trunk::Hidden { weights, bias } = &mut model.trunk {
                    let gw = grads.trunk_weights.as_ref().expect("hidden trunk grads");
                    let gb = grads.trunk_bias.as_ref().expect("hidden trunk grads");
                    sgd_step(
                        weights.as_mut_slice(),
                        gw.as_slice(),
                        &mut state.trunk_weights,
                        lr,
                        mom,
                        wd,
                    )?;
                    sgd_step(bias, gb, &mut state.trunk_bias, lr, mom, wd)?;
                }
            }
            sgd_step(
                model.projection.as_mut_slice(),
                grads.projection.as_slice(),
                &mut state.projection,
                lr,
                mom,
                wd,
            )?;
            sgd_step(
                proxies.weights_mut().as_mut_slice(),
                bl.grad_proxies.as_slice(),
                &mut state.proxies,
                lr,
                mom,
                wd,
            )?;
            if !model.projection.is_finite() || !proxies.weights().is_finite() {
                return Err(Error::NonFiniteLoss { iteration });
            }
            iteration += 1;
        }

        history.epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / batches.len().max(1) as f64,
            lr,
            wall_time_secs: started.elapsed().as_secs_f64(),
        });
    }

    Ok(FitOutput {
        model,
        proxies,
        history,
    })
}

/// Mean loss of the full pipeline on one batch.
pub fn pipeline_loss(
    model: &EmbeddingModel,
    proxies: &ProxyMatrix,
    inputs: &Matrix,
    labels: &[usize],
    loss: &LossConfig,
    active: Option<&[usize]>,
) -> Result<f64> {
    let emb = model.embed(inputs)?;
    Ok(batch_loss(&emb, labels, proxies, loss, active)?.loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Coordinates checked per tensor; larger tensors are strided.
    pub max_coords_per_tensor: usize,
    /// Negates the analytic gradient before comparing. Negative control for
    /// the checker itself.
    #[doc(hidden)]
    pub negate_analytic: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_coords_per_tensor: 256,
            negate_analytic: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub tensor: &'static str,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<GradCheckEntry>,
    pub coords_checked: usize,
    /// Inactive proxy rows whose analytic gradient was not exactly zero.
    pub nonzero_inactive: usize,
}

/// Error measure for gradient checks: `|a − n| / max(|a|, |n|, 1)`, i.e.
/// relative for gradients above unit magnitude and absolute below.
pub fn grad_rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

fn strided(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|k| k * len / max).collect()
    }
}

#[derive(Clone, Copy)]
enum Tensor {
    TrunkWeights,
    TrunkBias,
    Projection,
    Proxies,
}

impl Tensor {
    fn name(self) -> &'static str {
        match self {
            Tensor::TrunkWeights => "trunk_weights",
            Tensor::TrunkBias => "trunk_bias",
            Tensor::Projection => "projection",
            Tensor::Proxies => "proxies",
        }
    }
}

fn param_slot<'a>(model: &'a mut EmbeddingModel, proxies: &'a mut ProxyMatrix, t: Tensor) -> Option<&'a mut [f64]> {
    match (t, &mut model.trunk) {
        (Tensor::TrunkWeights, Trunk::Hidden { weights, .. }) => Some(weights.as_mut_slice()),
        (Tensor::TrunkBias, Trunk::Hidden { bias, .. }) => Some(bias.as_mut_slice()),
        (Tensor::Projection, _) => Some(model.projection.as_mut_slice()),
        (Tensor::Proxies, _) => Some(proxies.weights_mut().as_mut_slice()),
        _ => None,
    }
}

/// Compares analytic gradients of the full pipeline loss on one batch with
/// central differences, coordinate by coordinate.
pub fn grad_check(
    model: &EmbeddingModel,
    proxies: &ProxyMatrix,
    inputs: &Matrix,
    labels: &[usize],
    loss: &LossConfig,
    active: Option<&[usize]>,
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !(options.h > 0.0) {
        return Err(Error::InvalidParams(format!("step {} must be positive", options.h)));
    }
    let fwd = model.forward(inputs)?;
    let bl = batch_loss(&fwd.embeddings, labels, proxies, loss, active)?;
    let grads = model.backward(inputs, &fwd, &bl.grad_embeddings)?;

    let mut nonzero_inactive = 0;
    if let Some(a) = active {
        for r in (0..proxies.class_count()).filter(|r| !a.contains(r)) {
            if bl.grad_proxies.row(r).iter().any(|&g| g != 0.0) {
                nonzero_inactive += 1;
            }
        }
    }

    let mut m = model.clone();
    let mut p = proxies.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
        nonzero_inactive,
    };
    let sign = if options.negate_analytic { -1.0 } else { 1.0 };
    for t in [
        Tensor::TrunkWeights,
        Tensor::TrunkBias,
        Tensor::Projection,
        Tensor::Proxies,
    ] {
        let analytic: &[f64] = match t {
            Tensor::TrunkWeights => grads.trunk_weights.as_ref().map_or(&[][..], Matrix::as_slice),
            Tensor::TrunkBias => grads.trunk_bias.as_deref().unwrap_or(&[]),
            Tensor::Projection => grads.projection.as_slice(),
            Tensor::Proxies => bl.grad_proxies.as_slice(),
        };
        for idx in strided(analytic.len(), options.max_coords_per_tensor) {
            let orig = param_slot(&mut m, &mut p, t).expect("tensor exists")[idx];
            param_slot(&mut m, &mut p, t).expect("tensor exists")[idx] = orig + options.h;
            let plus = pipeline_loss(&m, &p, inputs, labels, loss, active)?;
            param_slot(&mut m, &mut p, t).expect("tensor exists")[idx] = orig - options.h;
            let minus = pipeline_loss(&m, &p, inputs, labels, loss, active)?;
            param_slot(&mut m, &mut p, t).expect("tensor exists")[idx] = orig;

            let numeric = (plus - minus) / (2.0 * options.h);
            let a = sign * analytic[idx];
            let err = grad_rel_error(a, numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(GradCheckEntry {
                    tensor: t.name(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_error: err,
                });
            }
        }
    }
    Ok(report)
}
