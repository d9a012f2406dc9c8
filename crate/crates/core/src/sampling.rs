//! Datasets, synthetic data, minibatch construction and class subsampling.

use rand::seq::{index, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{norm, Matrix};

/// Name of the generator behind [`SeededRng`], recorded in run configs.
pub const RNG_ALGORITHM: &str = "chacha8";

/// Seeded ChaCha8 stream. The same seed yields the same stream on every
/// platform.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for `(seed, stream)`.
    pub fn derived(seed: u64, stream: u64) -> Self {
        Self::new(derive_seed(seed, stream))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// SplitMix64 finalizer over `(seed, stream)`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Labelled feature rows. Labels are dense: every class below `class_count`
/// has at least one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature rows vs {} labels",
                features.rows(),
                labels.len()
            )));
        }
        let class_count = labels.iter().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; class_count];
        labels.iter().for_each(|&l| seen[l] = true);
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!("class {missing} has no samples")));
        }
        Ok(Self {
            features,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Sample indices of each class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        group_by_class(&self.labels)
    }

    /// Rows at `indices`, with labels compacted to `0..k` in ascending order
    /// of the original label.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut present = vec![false; self.class_count];
        indices.iter().for_each(|&i| present[self.labels[i]] = true);
        let mut remap = vec![usize::MAX; self.class_count];
        let mut next = 0;
        for (c, &p) in present.iter().enumerate() {
            if p {
                remap[c] = next;
                next += 1;
            }
        }
        let labels = indices.iter().map(|&i| remap[self.labels[i]]).collect();
        Dataset::new(self.features.select_rows(indices), labels)
    }

    /// Splits off the last `test_per_class` samples of every class.
    pub fn split_per_class(&self, test_per_class: usize) -> Result<(Dataset, Dataset)> {
        let groups = self.class_indices();
        if test_per_class == 0 || groups.iter().any(|g| g.len() <= test_per_class) {
            return Err(Error::InvalidParams(format!(
                "cannot hold out {test_per_class} samples per class"
            )));
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for g in &groups {
            let cut = g.len() - test_per_class;
            train.extend_from_slice(&g[..cut]);
            test.extend_from_slice(&g[cut..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train)?, self.subset(&test)?))
    }

    /// Samples whose class lies in `classes`, relabelled from 0.
    pub fn filter_classes(&self, classes: std::ops::Range<usize>) -> Result<Dataset> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        if idx.is_empty() {
            return Err(Error::InvalidParams(format!("no samples in classes {classes:?}")));
        }
        self.subset(&idx)
    }
}

fn group_by_class(labels: &[usize]) -> Vec<Vec<usize>> {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut groups = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        groups[l].push(i);
    }
    groups
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticParams {
    pub class_count: usize,
    pub per_class: usize,
    pub feature_dim: usize,
    pub center_scale: f64,
    pub noise_sigma: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            class_count: 20,
            per_class: 100,
            feature_dim: 64,
            center_scale: 5.0,
            noise_sigma: 0.5,
        }
    }
}

/// Gaussian blobs around random centers on a sphere of radius `center_scale`.
/// Centers are drawn first, then samples class by class.
pub fn generate_synthetic(params: &SyntheticParams, rng: &mut SeededRng) -> Result<Dataset> {
    let SyntheticParams {
        class_count,
        per_class,
        feature_dim,
        center_scale,
        noise_sigma,
    } = *params;
    if class_count < 2 || per_class < 2 || feature_dim < 2 {
        return Err(Error::InvalidParams(format!(
            "need class_count >= 2, per_class >= 2, feature_dim >= 2 (got {class_count}, {per_class}, {feature_dim})"
        )));
    }
    if !(center_scale >= 0.0 && center_scale.is_finite() && noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::InvalidParams(format!(
            "center_scale and noise_sigma must be finite and non-negative (got {center_scale}, {noise_sigma})"
        )));
    }

    let mut centers = Matrix::zeros(class_count, feature_dim);
    for c in 0..class_count {
        let row = centers.row_mut(c);
        loop {
            for v in row.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            let n = norm(row);
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v *= center_scale / n);
                break;
            }
        }
    }

    let n = class_count * per_class;
    let mut features = Matrix::zeros(n, feature_dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..class_count {
        for s in 0..per_class {
            let row = features.row_mut(c * per_class + s);
            for (v, &center) in row.iter_mut().zip(centers.row(c)) {
                let noise: f64 = StandardNormal.sample(rng);
                *v = center + noise_sigma * noise;
            }
            labels.push(c);
        }
    }
    Dataset::new(features, labels)
}

/// `C` distinct classes per batch, `S` samples per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSpec {
    pub classes_per_batch: usize,
    pub samples_per_class: usize,
}

impl BatchSpec {
    pub fn new(classes_per_batch: usize, samples_per_class: usize) -> Result<Self> {
        if classes_per_batch == 0 || samples_per_class == 0 {
            return Err(Error::InvalidParams(format!(
                "batch spec needs C, S >= 1 (got C={classes_per_batch}, S={samples_per_class})"
            )));
        }
        Ok(Self {
            classes_per_batch,
            samples_per_class,
        })
    }

    /// `C = floor(batch_size / S)`, the convention of fixing the batch size
    /// and varying samples per class.
    pub fn from_batch_size(batch_size: usize, samples_per_class: usize) -> Result<Self> {
        if samples_per_class == 0 {
            return Err(Error::InvalidParams("samples per class must be >= 1".into()));
        }
        Self::new(batch_size / samples_per_class, samples_per_class)
    }

    pub fn batch_size(&self) -> usize {
        self.classes_per_batch * self.samples_per_class
    }
}

/// One epoch of class-balanced batches: `ceil(N / (C·S))` batches, each with
/// `C` classes drawn without replacement and `S` indices per class. Indices
/// are drawn with replacement only for classes smaller than `S`.
pub fn class_balanced_batches(labels: &[usize], spec: BatchSpec, rng: &mut SeededRng) -> Result<Vec<Vec<usize>>> {
    if spec.classes_per_batch == 0 || spec.samples_per_class == 0 {
        return Err(Error::InvalidParams("batch spec needs C, S >= 1".into()));
    }
    let groups: Vec<Vec<usize>> = group_by_class(labels).into_iter().filter(|g| !g.is_empty()).collect();
    if spec.classes_per_batch > groups.len() {
        return Err(Error::SpecInfeasible {
            classes_per_batch: spec.classes_per_batch,
            class_count: groups.len(),
        });
    }
    let num_batches = labels.len().div_ceil(spec.batch_size());
    let s = spec.samples_per_class;
    let mut batches = Vec::with_capacity(num_batches);
    for _ in 0..num_batches {
        let mut batch = Vec::with_capacity(spec.batch_size());
        for c in index::sample(rng, groups.len(), spec.classes_per_batch) {
            let members = &groups[c];
            if members.len() >= s {
                batch.extend(index::sample(rng, members.len(), s).into_iter().map(|k| members[k]));
            } else {
                batch.extend((0..s).map(|_| members[rng.random_range(0..members.len())]));
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// One random permutation of `0..n`, cut into chunks of `batch_size`.
pub fn sequential_batches(n: usize, batch_size: usize, rng: &mut SeededRng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidParams("batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Active class set for one iteration: every class in the batch plus
/// uniformly drawn extras, `max(|batch classes|, round(ratio · class_count))`
/// in total. Returned sorted.
pub fn subsample_classes(
    batch_labels: &[usize],
    class_count: usize,
    ratio: f64,
    rng: &mut SeededRng,
) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidParams(format!("subsample ratio {ratio} outside (0, 1]")));
    }
    let mut in_batch = vec![false; class_count];
    for &l in batch_labels {
        if l >= class_count {
            return Err(Error::InvalidClass { class: l, class_count });
        }
        in_batch[l] = true;
    }
    let mut active: Vec<usize> = (0..class_count).filter(|&c| in_batch[c]).collect();
    let target = active
        .len()
        .max((ratio * class_count as f64).round() as usize)
        .min(class_count);
    let extra = target - active.len();
    if extra > 0 {
        let complement: Vec<usize> = (0..class_count).filter(|&c| !in_batch[c]).collect();
        active.extend(
            index::sample(rng, complement.len(), extra)
                .into_iter()
                .map(|k| complement[k]),
        );
        active.sort_unstable();
    }
    Ok(active)
}
