//! Finite-difference verification of every loss variant on seeded random
//! problems, with and without layer norm.

use std::fmt;

use normsoft_core::losses::{LossConfig, LossKind, ProxyMatrix};
use normsoft_core::sampling::{derive_seed, subsample_classes, SeededRng};
use normsoft_core::trainer::{grad_check, EmbeddingModel, GradCheckEntry, GradCheckOptions};
use normsoft_core::{Matrix, Result};
use rand::Rng;
use rand_distr::StandardNormal;

pub const GRAD_TOLERANCE: f64 = 1e-5;
pub const SUBSAMPLE_RATIO: f64 = 0.5;

const INPUT_DIM: usize = 6;
const HIDDEN_DIM: usize = 5;
const EMBED_DIM: usize = 4;
const CLASSES: usize = 7;
const BATCH: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Nca,
    NormSoftmax,
    Lmcl,
    Subsampled,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Nca, Variant::NormSoftmax, Variant::Lmcl, Variant::Subsampled];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Nca => "nca",
            Variant::NormSoftmax => "norm-softmax",
            Variant::Lmcl => "lmcl",
            Variant::Subsampled => "subsampled",
        }
    }

    /// Variants selected by a `--loss` filter; `all` selects everything.
    pub fn matching(filter: &str) -> Option<Vec<Variant>> {
        if filter == "all" {
            return Some(Self::ALL.to_vec());
        }
        if filter == "subsampled" {
            return Some(vec![Variant::Subsampled]);
        }
        let kind: LossKind = filter.parse().ok()?;
        Some(
            Self::ALL
                .into_iter()
                .filter(|v| *v != Variant::Subsampled && v.loss().kind == kind)
                .collect(),
        )
    }

    pub fn loss(self) -> LossConfig {
        match self {
            Variant::Nca => LossConfig::nca(),
            Variant::NormSoftmax | Variant::Subsampled => LossConfig::default(),
            Variant::Lmcl => LossConfig::lmcl(30.0, 0.35),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub variant: Variant,
    pub layer_norm: bool,
    pub instances: usize,
    pub max_rel_error: f64,
    pub worst: Option<GradCheckEntry>,
    pub nonzero_inactive: usize,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE && self.nonzero_inactive == 0
    }
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<13} layer_norm={:<3} instances={} max_rel_err={:.3e}",
            self.variant.name(),
            if self.layer_norm { "on" } else { "off" },
            self.instances,
            self.max_rel_error
        )?;
        if let Some(w) = &self.worst {
            write!(
                f,
                " worst={}[{}] analytic={:.6e} numeric={:.6e}",
                w.tensor, w.index, w.analytic, w.numeric
            )?;
        }
        if self.nonzero_inactive > 0 {
            write!(f, " nonzero_inactive_rows={}", self.nonzero_inactive)?;
        }
        write!(f, " {}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

/// A small hidden-layer model, random proxies and a random labelled batch.
pub fn random_instance(seed: u64, layer_norm: bool) -> Result<(EmbeddingModel, ProxyMatrix, Matrix, Vec<usize>)> {
    let mut rng = SeededRng::new(seed);
    let model = EmbeddingModel::with_hidden(INPUT_DIM, HIDDEN_DIM, EMBED_DIM, layer_norm, &mut rng)?;
    let proxies = ProxyMatrix::random(CLASSES, EMBED_DIM, &mut rng);
    let data: Vec<f64> = (0..BATCH * INPUT_DIM).map(|_| rng.sample(StandardNormal)).collect();
    let inputs = Matrix::new(BATCH, INPUT_DIM, data)?;
    let labels = (0..BATCH).map(|_| rng.random_range(0..CLASSES)).collect();
    Ok((model, proxies, inputs, labels))
}

pub fn run_suite(
    variant: Variant,
    layer_norm: bool,
    instances: usize,
    seed: u64,
    options: &GradCheckOptions,
) -> Result<SuiteResult> {
    let mut out = SuiteResult {
        variant,
        layer_norm,
        instances,
        max_rel_error: 0.0,
        worst: None,
        nonzero_inactive: 0,
    };
    let loss = variant.loss();
    for i in 0..instances {
        let s = derive_seed(seed, i as u64);
        let (model, proxies, inputs, labels) = random_instance(s, layer_norm)?;
        let active = match variant {
            Variant::Subsampled => Some(subsample_classes(
                &labels,
                CLASSES,
                SUBSAMPLE_RATIO,
                &mut SeededRng::derived(s, 1),
            )?),
            _ => None,
        };
        let r = grad_check(&model, &proxies, &inputs, &labels, &loss, active.as_deref(), options)?;
        out.nonzero_inactive += r.nonzero_inactive;
        if r.max_rel_error >= out.max_rel_error {
            out.max_rel_error = r.max_rel_error;
            out.worst = r.worst;
        }
    }
    Ok(out)
}
