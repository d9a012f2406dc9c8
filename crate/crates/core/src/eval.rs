//! Retrieval and clustering evaluation.
//!
//! Retrieval follows the usual deep-metric-learning protocol: every sample is
//! a query against all others (itself excluded), ranked by cosine similarity
//! for float embeddings or Hamming distance for sign-binarized codes. Ties
//! are broken by the smaller gallery index so results are reproducible.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::sampling::SeededRng;

/// Row-norm tolerance for [`EmbeddingSet`]; embeddings read back from 32-bit
/// files are only unit-norm to about 1e-7.
pub const EMBEDDING_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    embeddings: Matrix,
    labels: Vec<usize>,
}

impl EmbeddingSet {
    pub fn new(embeddings: Matrix, labels: Vec<usize>) -> Result<Self> {
        if embeddings.rows() != labels.len() {
            return Err(Error::LengthMismatch {
                left: embeddings.rows(),
                right: labels.len(),
            });
        }
        if embeddings.rows() < 2 {
            return Err(Error::InvalidParams("need at least 2 embeddings".into()));
        }
        for (i, r) in embeddings.row_iter().enumerate() {
            let n = norm(r);
            if (n - 1.0).abs() > EMBEDDING_NORM_TOL {
                return Err(Error::Format(format!("embedding {i} has norm {n}, expected 1")));
            }
        }
        Ok(Self { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    }
}

/// K nearest gallery rows of `scores` (higher is closer), ties by index.
fn top_k_by<T: Copy + Send + Sync>(
    candidates: Vec<(T, usize)>,
    k: usize,
    cmp: impl Fn(&T, &T) -> Ordering,
) -> Vec<usize> {
    let mut c = candidates;
    let order = |a: &(T, usize), b: &(T, usize)| cmp(&a.0, &b.0).then(a.1.cmp(&b.1));
    if k < c.len() {
        c.select_nth_unstable_by(k, order);
        c.truncate(k);
    }
    c.sort_unstable_by(order);
    c.into_iter().map(|(_, j)| j).collect()
}

fn check_k(k: usize, available: usize) -> Result<()> {
    if k > available {
        return Err(Error::KTooLarge { k, available });
    }
    Ok(())
}

/// For each query, the `k` other rows with the largest dot product,
/// most similar first.
pub fn knn_cosine(set: &EmbeddingSet, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = set.len();
    check_k(k, n - 1)?;
    let e = &set.embeddings;
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let q = e.row(i);
            let cand: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (dot(q, e.row(j)), j)).collect();
            top_k_by(cand, k, |a, b| b.total_cmp(a))
        })
        .collect())
}

/// Split-gallery retrieval (queries and gallery are disjoint sets, nothing
/// is excluded).
pub fn knn_cosine_split(queries: &Matrix, gallery: &Matrix, k: usize) -> Result<Vec<Vec<usize>>> {
    if queries.cols() != gallery.cols() {
        return Err(Error::ShapeMismatch(format!(
            "query dim {} vs gallery dim {}",
            queries.cols(),
            gallery.cols()
        )));
    }
    check_k(k, gallery.rows())?;
    Ok((0..queries.rows())
        .into_par_iter()
        .map(|i| {
            let q = queries.row(i);
            let cand: Vec<(f64, usize)> = (0..gallery.rows()).map(|j| (dot(q, gallery.row(j)), j)).collect();
            top_k_by(cand, k, |a, b| b.total_cmp(a))
        })
        .collect())
}

/// Recall@K from precomputed neighbor lists (each at least `max(ks)` long):
/// the fraction of queries with a same-label item among the first K.
pub fn recall_from_neighbors(
    neighbors: &[Vec<usize>],
    query_labels: &[usize],
    gallery_labels: &[usize],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    if neighbors.len() != query_labels.len() {
        return Err(Error::LengthMismatch {
            left: neighbors.len(),
            right: query_labels.len(),
        });
    }
    let max_k = ks.iter().copied().max().unwrap_or(0);
    // rank of the first hit per query, if within max_k
    let first_hit: Vec<Option<usize>> = neighbors
        .iter()
        .zip(query_labels)
        .map(|(nb, &ql)| {
            if nb.len() < max_k {
                return Err(Error::KTooLarge {
                    k: max_k,
                    available: nb.len(),
                });
            }
            Ok(nb.iter().take(max_k).position(|&j| gallery_labels[j] == ql))
        })
        .collect::<Result<_>>()?;
    let n = neighbors.len().max(1) as f64;
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = first_hit.iter().filter(|h| h.is_some_and(|r| r < k)).count();
            (k, hits as f64 / n)
        })
        .collect())
}

pub fn recall_at_k(set: &EmbeddingSet, ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let nb = knn_cosine(set, max_k)?;
    recall_from_neighbors(&nb, &set.labels, &set.labels, ks)
}

/// Sign bits of embeddings packed into 64-bit words. Bit `j % 64` of word
/// `j / 64` holds dimension `j`; padding bits are zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryCodeMatrix {
    n: usize,
    dim_bits: usize,
    words: Vec<u64>,
}

impl BinaryCodeMatrix {
    pub fn words_per_row(dim_bits: usize) -> usize {
        dim_bits.div_ceil(64)
    }

    pub fn new(n: usize, dim_bits: usize, words: Vec<u64>) -> Result<Self> {
        let wpr = Self::words_per_row(dim_bits);
        if words.len() != n * wpr {
            return Err(Error::ShapeMismatch(format!(
                "{n} codes of {dim_bits} bits need {} words, got {}",
                n * wpr,
                words.len()
            )));
        }
        let rem = dim_bits % 64;
        if rem != 0 {
            let pad_mask = !((1u64 << rem) - 1);
            if (0..n).any(|i| words[i * wpr + wpr - 1] & pad_mask != 0) {
                return Err(Error::Format("padding bits must be zero".into()));
            }
        }
        Ok(Self { n, dim_bits, words })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim_bits(&self) -> usize {
        self.dim_bits
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn row(&self, i: usize) -> &[u64] {
        let w = Self::words_per_row(self.dim_bits);
        &self.words[i * w..(i + 1) * w]
    }

    pub fn bit(&self, i: usize, j: usize) -> bool {
        (self.row(i)[j / 64] >> (j % 64)) & 1 == 1
    }

    /// Bits of row `i` as booleans.
    pub fn unpack_row(&self, i: usize) -> Vec<bool> {
        (0..self.dim_bits).map(|j| self.bit(i, j)).collect()
    }
}

/// Thresholds every coordinate at zero: bit set iff value ≥ 0.
pub fn binarize(embeddings: &Matrix) -> BinaryCodeMatrix {
    let d = embeddings.cols();
    let wpr = BinaryCodeMatrix::words_per_row(d);
    let mut words = vec![0u64; embeddings.rows() * wpr];
    for (i, r) in embeddings.row_iter().enumerate() {
        for (j, &v) in r.iter().enumerate() {
            if v >= 0.0 {
                words[i * wpr + j / 64] |= 1 << (j % 64);
            }
        }
    }
    BinaryCodeMatrix {
        n: embeddings.rows(),
        dim_bits: d,
        words,
    }
}

#[inline]
pub fn hamming_distance(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// For each code, the `k` other codes at smallest Hamming distance.
pub fn hamming_knn(codes: &BinaryCodeMatrix, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = codes.len();
    if n == 0 {
        return Err(Error::KTooLarge { k, available: 0 });
    }
    check_k(k, n - 1)?;
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let q = codes.row(i);
            let cand: Vec<(u32, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (hamming_distance(q, codes.row(j)), j))
                .collect();
            top_k_by(cand, k, |a, b| a.cmp(b))
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Matrix,
    /// Sum of squared distances to the assigned centroid, recorded at the end
    /// of each iteration.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

pub const DEFAULT_KMEANS_ITERS: usize = 100;

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy k-means++ seeding: each new center is the best of a few
/// D²-weighted candidates, judged by the resulting potential.
fn kmeans_pp(points: &Matrix, k: usize, rng: &mut SeededRng) -> Matrix {
    let n = points.rows();
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centers = Matrix::zeros(k, points.cols());
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from_slice(points.row(first));
    let mut closest: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(first))).collect();

    for c in 1..k {
        let total: f64 = closest.iter().sum();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let cand = if total > 0.0 {
                let target = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut pick = n - 1;
                for (i, &d) in closest.iter().enumerate() {
                    acc += d;
                    if acc > target {
                        pick = i;
                        break;
                    }
                }
                pick
            } else {
                rng.random_range(0..n)
            };
            let updated: Vec<f64> = (0..n)
                .map(|i| closest[i].min(sq_dist(points.row(i), points.row(cand))))
                .collect();
            let potential: f64 = updated.iter().sum();
            if best.as_ref().is_none_or(|(p, _, _)| potential < *p) {
                best = Some((potential, cand, updated));
            }
        }
        let (_, cand, updated) = best.expect("at least one trial");
        centers.row_mut(c).copy_from_slice(points.row(cand));
        closest = updated;
    }
    centers
}

fn assign(points: &Matrix, centers: &Matrix) -> Vec<(usize, f64)> {
    (0..points.rows())
        .into_par_iter()
        .map(|i| {
            let p = points.row(i);
            let mut best = (0, f64::INFINITY);
            for c in 0..centers.rows() {
                let d = sq_dist(p, centers.row(c));
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .collect()
}

/// Lloyd's algorithm from a greedy k-means++ start, until the assignment
/// stops changing or `max_iters` is hit. An emptied cluster is re-seeded with
/// the point farthest from its current centroid.
pub fn kmeans(points: &Matrix, k: usize, rng: &mut SeededRng, max_iters: usize) -> Result<KMeansResult> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::InvalidParams("k must be >= 1".into()));
    }
    check_k(k, n)?;
    let d = points.cols();
    let mut centers = kmeans_pp(points, k, rng);
    let mut assignments: Vec<usize> = vec![usize::MAX; n];
    let mut objective = Vec::new();
    let mut iterations = 0;

    while iterations < max_iters {
        iterations += 1;
        let assigned = assign(points, &centers);
        let new_assign: Vec<usize> = assigned.iter().map(|a| a.0).collect();
        let changed = new_assign != assignments;
        assignments = new_assign;

        // centroid update, accumulated in point order
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            counts[c] += 1;
            sums.row_mut(c).iter_mut().zip(points.row(i)).for_each(|(s, p)| *s += p);
        }
        let mut dist: Vec<f64> = assigned.iter().map(|a| a.1).collect();
        for (c, &count) in counts.iter().enumerate().filter(|(_, &n)| n > 0) {
            let inv = 1.0 / count as f64;
            centers
                .row_mut(c)
                .iter_mut()
                .zip(sums.row(c))
                .for_each(|(m, s)| *m = s * inv);
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[assignments[i]] > 1)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)));
                let Some(far) = far else { continue };
                let old = assignments[far];
                counts[old] -= 1;
                counts[c] = 1;
                assignments[far] = c;
                dist[far] = 0.0;
                centers.row_mut(c).copy_from_slice(points.row(far));
                // refresh the donor centroid without the moved point
                let mut s = vec![0.0; d];
                for i in (0..n).filter(|&i| assignments[i] == old) {
                    s.iter_mut().zip(points.row(i)).for_each(|(a, p)| *a += p);
                }
                let inv = 1.0 / counts[old] as f64;
                centers.row_mut(old).iter_mut().zip(&s).for_each(|(m, v)| *m = v * inv);
            }
        }
        let obj: f64 = (0..n)
            .map(|i| sq_dist(points.row(i), centers.row(assignments[i])))
            .sum();
        objective.push(obj);
        if !changed {
            break;
        }
    }

    Ok(KMeansResult {
        assignments,
        centroids: centers,
        objective,
        iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NmiNormalization {
    /// `2·I / (H(A) + H(B))`
    #[default]
    Arithmetic,
    /// `I / sqrt(H(A)·H(B))`
    Geometric,
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    -counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    nmi_with(a, b, NmiNormalization::Arithmetic)
}

/// Normalized mutual information of two labelings from their contingency
/// table, natural logs. Two single-cluster partitions score 1.
pub fn nmi_with(a: &[usize], b: &[usize], norm: NmiNormalization) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::InvalidParams("empty partition".into()));
    }
    let n = a.len() as f64;
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut ca: HashMap<usize, usize> = HashMap::new();
    let mut cb: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
    }
    let ha = entropy(ca.values().copied(), n);
    let hb = entropy(cb.values().copied(), n);
    if ca.len() == 1 && cb.len() == 1 {
        return Ok(1.0);
    }
    // one nonzero cell per row and column: the partitions match up to
    // relabeling and the ratio is exactly 1
    if joint.len() == ca.len() && joint.len() == cb.len() {
        return Ok(1.0);
    }
    // sorted for a deterministic summation order
    let mut cells: Vec<_> = joint.into_iter().collect();
    cells.sort_unstable();
    let mi: f64 = cells
        .iter()
        .map(|&((x, y), c)| {
            let pxy = c as f64 / n;
            pxy * (pxy / ((ca[&x] as f64 / n) * (cb[&y] as f64 / n))).ln()
        })
        .sum::<f64>()
        .max(0.0);
    let denom = match norm {
        NmiNormalization::Arithmetic => 0.5 * (ha + hb),
        NmiNormalization::Geometric => (ha * hb).sqrt(),
    };
    if denom <= 0.0 {
        return Ok(0.0);
    }
    Ok((mi / denom).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Float,
    Binary,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Float => "FLOAT",
            EvalMode::Binary => "BINARY",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub recall_at: BTreeMap<usize, f64>,
    pub nmi: f64,
}

impl EvalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k).copied()
    }
}

pub const CUB_CARS_KS: [usize; 4] = [1, 2, 4, 8];
pub const SOP_KS: [usize; 3] = [1, 10, 100];

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub with_binary: bool,
    /// Clusters for NMI; defaults to the number of distinct labels.
    pub nmi_clusters: Option<usize>,
    pub nmi_normalization: NmiNormalization,
    pub kmeans_iters: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ks: CUB_CARS_KS.to_vec(),
            with_binary: false,
            nmi_clusters: None,
            nmi_normalization: NmiNormalization::Arithmetic,
            kmeans_iters: DEFAULT_KMEANS_ITERS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub float: EvalReport,
    pub binary: Option<EvalReport>,
}

/// Recall@K and k-means NMI for float embeddings, plus the same metrics on
/// sign codes when `with_binary` is set. For the binary twin, clustering
/// runs on the ±1/√D vectors the codes represent.
pub fn evaluate(set: &EmbeddingSet, options: &EvalOptions, rng: &mut SeededRng) -> Result<Evaluation> {
    let max_k = options.ks.iter().copied().max().unwrap_or(0);
    let k_nmi = options.nmi_clusters.unwrap_or_else(|| set.class_count());

    let neighbors = knn_cosine(set, max_k)?;
    let recall_at = recall_from_neighbors(&neighbors, &set.labels, &set.labels, &options.ks)?;
    let clusters = kmeans(&set.embeddings, k_nmi, rng, options.kmeans_iters)?;
    let float = EvalReport {
        mode: EvalMode::Float,
        recall_at,
        nmi: nmi_with(&clusters.assignments, &set.labels, options.nmi_normalization)?,
    };

    let binary = if options.with_binary {
        let codes = binarize(&set.embeddings);
        let neighbors = hamming_knn(&codes, max_k)?;
        let recall_at = recall_from_neighbors(&neighbors, &set.labels, &set.labels, &options.ks)?;
        let d = codes.dim_bits();
        let v = 1.0 / (d as f64).sqrt();
        let mut signs = Matrix::zeros(codes.len(), d);
        for i in 0..codes.len() {
            for (j, s) in signs.row_mut(i).iter_mut().enumerate() {
                *s = if codes.bit(i, j) { v } else { -v };
            }
        }
        let clusters = kmeans(&signs, k_nmi, rng, options.kmeans_iters)?;
        Some(EvalReport {
            mode: EvalMode::Binary,
            recall_at,
            nmi: nmi_with(&clusters.assignments, &set.labels, options.nmi_normalization)?,
        })
    } else {
        None
    };
    Ok(Evaluation { float, binary })
}
