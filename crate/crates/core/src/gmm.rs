//! Diagonal-covariance Gaussian mixture: densities, soft assignments and
//! seeded EM training.
//!
//! Training is bitwise reproducible for a given `(data, seed)`: per-descriptor
//! work runs in parallel, but every reduction walks descriptors in index
//! order, one component at a time.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::DescriptorSequence;
use crate::error::{Error, Result};
use crate::io_util::{read_all, write_all, LeReader};

pub const GMM1_MAGIC: &[u8; 4] = b"GMM1";

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const KMEANS_REFINE_STEPS: usize = 10;
const WEIGHT_SUM_TOL: f64 = 1e-12;
/// Rows per E-step block; bounds the responsibility buffer to BLOCK × K.
const BLOCK: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGmm {
    weights: Vec<f64>,
    means: Array2<f64>,
    stddevs: Array2<f64>,
    // derived: 1/σ² per (component, dim) and ln ω − Σ ln σ − D/2 ln 2π
    inv_var: Vec<f64>,
    log_norm: Vec<f64>,
}

impl DiagonalGmm {
    pub fn new(weights: Vec<f64>, means: Array2<f64>, stddevs: Array2<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::InvalidModel("mixture needs at least one component".into()));
        }
        if means.nrows() != k || stddevs.dim() != means.dim() || means.ncols() == 0 {
            return Err(Error::InvalidModel(format!(
                "shape mismatch: {k} weights, means {:?}, stddevs {:?}",
                means.dim(),
                stddevs.dim()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::InvalidModel(format!("mixture weight {w} is not positive")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidModel(format!("mixture weights sum to {total}")));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidModel("non-finite mean".into()));
        }
        if stddevs.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidModel("standard deviations must be positive and finite".into()));
        }
        let means = means.as_standard_layout().into_owned();
        let stddevs = stddevs.as_standard_layout().into_owned();
        let d = means.ncols();
        let inv_var = stddevs.iter().map(|s| 1.0 / (s * s)).collect();
        let log_norm = stddevs
            .rows()
            .into_iter()
            .zip(&weights)
            .map(|(sig, w)| w.ln() - sig.iter().map(|s| s.ln()).sum::<f64>() - 0.5 * d as f64 * LN_2PI)
            .collect();
        Ok(Self {
            weights,
            means,
            stddevs,
            inv_var,
            log_norm,
        })
    }

    /// Number of components.
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    /// Descriptor dimensionality.
    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn stddevs(&self) -> &Array2<f64> {
        &self.stddevs
    }

    pub(crate) fn mean_row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.means.as_slice().unwrap()[i * d..(i + 1) * d]
    }

    pub(crate) fn stddev_row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.stddevs.as_slice().unwrap()[i * d..(i + 1) * d]
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// ln(ω_i N(x; μ_i, σ_i²)) for every component.
    fn log_joint_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let means = self.means.as_slice().unwrap();
        for (i, slot) in out.iter_mut().enumerate() {
            let mu = &means[i * d..(i + 1) * d];
            let iv = &self.inv_var[i * d..(i + 1) * d];
            let mut quad = 0.0;
            for ((xv, m), v) in x.iter().zip(mu).zip(iv) {
                let diff = xv - m;
                quad += diff * diff * v;
            }
            *slot = self.log_norm[i] - 0.5 * quad;
        }
    }

    /// Overwrites `out` with posteriors and returns ln u(x). Assumes `x` has
    /// the right dimension.
    pub(crate) fn posteriors_into(&self, x: &[f64], out: &mut [f64]) -> f64 {
        self.log_joint_into(x, out);
        let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in out.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in out.iter_mut() {
            *v /= sum;
        }
        max + sum.ln()
    }

    /// ln Σ_i ω_i N(x; μ_i, diag σ_i²), via log-sum-exp.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let mut buf = vec![0.0; self.k()];
        self.log_joint_into(x, &mut buf);
        Ok(log_sum_exp(&buf))
    }

    /// Soft assignment γ of `x` to each component.
    pub fn posteriors(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut buf = vec![0.0; self.k()];
        self.posteriors_into(x, &mut buf);
        Ok(buf)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Mean per-descriptor log-likelihood, (1/T) Σ_t ln u(x_t).
pub fn sequence_log_likelihood(model: &DiagonalGmm, seq: &DescriptorSequence) -> Result<f64> {
    if seq.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: seq.dim(),
        });
    }
    let mut buf = vec![0.0; model.k()];
    let mut total = 0.0;
    for x in seq.rows() {
        model.log_joint_into(x, &mut buf);
        total += log_sum_exp(&buf);
    }
    Ok(total / seq.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmTrainConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub rel_tol: f64,
    /// Lower bound on every σ².
    pub variance_floor: f64,
    /// Training uses a seeded uniform subsample when more descriptors exist.
    pub sample_cap: usize,
}

impl GmmTrainConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            seed: 0,
            max_iters: 200,
            rel_tol: 1e-6,
            variance_floor: 1e-4,
            sample_cap: 200_000,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1");
        }
        if self.rel_tol.is_nan() || self.rel_tol <= 0.0 {
            return bad("rel_tol must be positive");
        }
        if !self.variance_floor.is_finite() || self.variance_floor <= 0.0 {
            return bad("variance_floor must be positive");
        }
        if self.sample_cap < self.k {
            return bad("sample_cap must be at least k");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GmmTrainingLog {
    /// Descriptors offered for training.
    pub total: usize,
    /// Descriptors actually used (after subsampling).
    pub sampled: usize,
    /// Mean log-likelihood of the training sample, one entry per E-step.
    pub mean_log_likelihood: Vec<f64>,
    pub converged: bool,
    /// E-step indices after which at least one starved component was re-seeded.
    pub reseeded_after: Vec<usize>,
}

/// Fits a diagonal GMM with k-means++ seeding, 10 Lloyd refinements and EM.
pub fn train_gmm(descriptors: ArrayView2<f64>, cfg: &GmmTrainConfig) -> Result<(DiagonalGmm, GmmTrainingLog)> {
    cfg.validate()?;
    let (total, d) = descriptors.dim();
    if d == 0 {
        return Err(Error::InvalidInput("descriptors have zero dimensions".into()));
    }
    if total < cfg.k {
        return Err(Error::InvalidInput(format!(
            "need at least k={} descriptors, got {total}",
            cfg.k
        )));
    }
    if descriptors.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("descriptors contain non-finite values".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let data: Vec<f64> = if total > cfg.sample_cap {
        let mut idx = rand::seq::index::sample(&mut rng, total, cfg.sample_cap).into_vec();
        idx.sort_unstable();
        idx.iter().flat_map(|&i| descriptors.row(i).to_vec()).collect()
    } else {
        descriptors.as_standard_layout().iter().copied().collect()
    };
    let n = data.len() / d;
    let k = cfg.k;
    let sigma_floor = cfg.variance_floor.sqrt();

    let global_sigma = global_stddev(&data, d, sigma_floor);
    let mut means = kmeans_plus_plus(&data, d, k, &mut rng);
    lloyd_refine(&data, d, &mut means, KMEANS_REFINE_STEPS);

    let mut model = DiagonalGmm::new(
        vec![1.0 / k as f64; k],
        Array2::from_shape_vec((k, d), means).unwrap(),
        Array2::from_shape_fn((k, d), |(_, j)| global_sigma[j]),
    )
    .map_err(|e| normalize_weights_error(e, k))?;

    let mut log = GmmTrainingLog {
        total,
        sampled: n,
        ..Default::default()
    };
    let mut stats = SufficientStats::new(k, d, n);
    for iter in 0..cfg.max_iters {
        let ll = stats.accumulate(&model, &data);
        log.mean_log_likelihood.push(ll);
        if iter > 0 {
            let prev = log.mean_log_likelihood[iter - 1];
            if ll - prev < cfg.rel_tol * prev.abs() {
                log.converged = true;
                break;
            }
        }
        let (next, reseeded) = stats.maximize(&model, &data, cfg.variance_floor, &global_sigma)?;
        if reseeded {
            log.reseeded_after.push(iter);
        }
        model = next;
    }
    Ok((model, log))
}

fn normalize_weights_error(e: Error, k: usize) -> Error {
    match e {
        Error::InvalidModel(m) => Error::InvalidModel(format!("initial {k}-component model: {m}")),
        other => other,
    }
}

fn global_stddev(data: &[f64], d: usize, floor: f64) -> Vec<f64> {
    let n = (data.len() / d) as f64;
    let mut mean = vec![0.0; d];
    for row in data.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for row in data.chunks_exact(d) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter().map(|s| (s / n).sqrt().max(floor)).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// D²-weighted seeding; falls back to uniform picks once every point
/// coincides with a chosen center.
fn kmeans_plus_plus(data: &[f64], d: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = data.len() / d;
    let row = |i: usize| &data[i * d..(i + 1) * d];
    let mut centers = Vec::with_capacity(k * d);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(row(first));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();
    for _ in 1..k {
        let pick = match WeightedIndex::new(&nearest) {
            Ok(dist) => dist.sample(rng),
            Err(_) => rng.random_range(0..n),
        };
        centers.extend_from_slice(row(pick));
        let c = row(pick);
        nearest
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, best)| *best = best.min(sq_dist(row(i), c)));
    }
    centers
}

fn nearest_center(x: &[f64], centers: &[f64], d: usize) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.chunks_exact(d).enumerate() {
        let dist = sq_dist(x, c);
        if dist < best.1 {
            best = (j, dist);
        }
    }
    best.0
}

fn lloyd_refine(data: &[f64], d: usize, centers: &mut [f64], steps: usize) {
    let k = centers.len() / d;
    for _ in 0..steps {
        let assign: Vec<usize> = data
            .par_chunks_exact(d)
            .map(|x| nearest_center(x, centers, d))
            .collect();
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (x, &j) in data.chunks_exact(d).zip(&assign) {
            counts[j] += 1;
            for (s, v) in sums[j * d..(j + 1) * d].iter_mut().zip(x) {
                *s += v;
            }
        }
        let mut moved = false;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            for (c, s) in centers[j * d..(j + 1) * d].iter_mut().zip(&sums[j * d..(j + 1) * d]) {
                let next = s / counts[j] as f64;
                moved |= next != *c;
                *c = next;
            }
        }
        if !moved {
            break;
        }
    }
}

/// Per-component zeroth, first and second order statistics, the latter two
/// taken about the current means for numerical stability.
struct SufficientStats {
    k: usize,
    d: usize,
    resp: Vec<f64>,
    counts: Vec<f64>,
    first: Vec<f64>,
    second: Vec<f64>,
    /// Squared distance of each descriptor to the mean of its most
    /// responsible component; used to re-seed starved components.
    spread: Vec<f64>,
}

impl SufficientStats {
    fn new(k: usize, d: usize, n: usize) -> Self {
        Self {
            k,
            d,
            resp: vec![0.0; BLOCK.min(n) * k],
            counts: vec![0.0; k],
            first: vec![0.0; k * d],
            second: vec![0.0; k * d],
            spread: vec![0.0; n],
        }
    }

    /// E-step; returns the mean log-likelihood under `model`.
    fn accumulate(&mut self, model: &DiagonalGmm, data: &[f64]) -> f64 {
        let (k, d) = (self.k, self.d);
        self.counts.iter_mut().for_each(|v| *v = 0.0);
        self.first.iter_mut().for_each(|v| *v = 0.0);
        self.second.iter_mut().for_each(|v| *v = 0.0);
        let n = data.len() / d;
        let mut total_ll = 0.0;
        for (block_idx, block) in data.chunks(BLOCK * d).enumerate() {
            let rows = block.len() / d;
            let resp = &mut self.resp[..rows * k];
            let spread = &mut self.spread[block_idx * BLOCK..block_idx * BLOCK + rows];
            let lls: Vec<f64> = resp
                .par_chunks_exact_mut(k)
                .zip(block.par_chunks_exact(d))
                .zip(spread.par_iter_mut())
                .map(|((g, x), s)| {
                    let ll = model.posteriors_into(x, g);
                    let mut best = 0;
                    for (i, v) in g.iter().enumerate() {
                        if *v > g[best] {
                            best = i;
                        }
                    }
                    *s = sq_dist(x, model.mean_row(best));
                    ll
                })
                .collect();
            total_ll += lls.iter().sum::<f64>();

            let resp = &self.resp[..rows * k];
            self.counts
                .par_iter_mut()
                .zip(self.first.par_chunks_exact_mut(d))
                .zip(self.second.par_chunks_exact_mut(d))
                .enumerate()
                .for_each(|(i, ((cnt, s1), s2))| {
                    let mu = model.mean_row(i);
                    for (r, x) in block.chunks_exact(d).enumerate() {
                        let g = resp[r * k + i];
                        if g == 0.0 {
                            continue;
                        }
                        *cnt += g;
                        for j in 0..d {
                            let diff = x[j] - mu[j];
                            s1[j] += g * diff;
                            s2[j] += g * diff * diff;
                        }
                    }
                });
        }
        total_ll / n as f64
    }

    /// M-step with σ² floored. Components whose weight collapses below
    /// 1e-8/K are moved onto the descriptors farthest from their centroids.
    fn maximize(
        &self,
        model: &DiagonalGmm,
        data: &[f64],
        variance_floor: f64,
        global_sigma: &[f64],
    ) -> Result<(DiagonalGmm, bool)> {
        let (k, d) = (self.k, self.d);
        let n = data.len() / d;
        let mut weights = vec![0.0; k];
        let mut means = Array2::zeros((k, d));
        let mut stddevs = Array2::zeros((k, d));
        let dead_threshold = 1e-8 / k as f64;
        let mut dead = Vec::new();
        for i in 0..k {
            let nk = self.counts[i];
            let w = nk / n as f64;
            if w.is_nan() || w < dead_threshold {
                dead.push(i);
                continue;
            }
            weights[i] = w;
            let mu_old = model.mean_row(i);
            for j in 0..d {
                let shift = self.first[i * d + j] / nk;
                means[(i, j)] = mu_old[j] + shift;
                let var = (self.second[i * d + j] / nk - shift * shift).max(variance_floor);
                stddevs[(i, j)] = var.sqrt();
            }
        }
        if !dead.is_empty() {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| self.spread[b].total_cmp(&self.spread[a]).then(a.cmp(&b)));
            for (slot, &i) in dead.iter().enumerate() {
                let src = order[slot % n];
                for j in 0..d {
                    means[(i, j)] = data[src * d + j];
                    stddevs[(i, j)] = global_sigma[j];
                }
                weights[i] = 1.0 / k as f64;
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Ok((DiagonalGmm::new(weights, means, stddevs)?, !dead.is_empty()))
    }
}

/// GMM1: magic, u32 K, u32 D, then ω (K), μ (K·D), σ (K·D) as binary64 LE.
pub fn gmm_bytes(model: &DiagonalGmm) -> Vec<u8> {
    let (k, d) = (model.k(), model.dim());
    let mut out = Vec::with_capacity(12 + 8 * (k + 2 * k * d));
    out.extend_from_slice(GMM1_MAGIC);
    out.extend_from_slice(&(k as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in model.weights.iter().chain(model.means.iter()).chain(model.stddevs.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_gmm(model: &DiagonalGmm, path: &Path) -> Result<()> {
    write_all(path, &gmm_bytes(model))
}

pub fn read_gmm(path: &Path) -> Result<DiagonalGmm> {
    let bytes = read_all(path)?;
    let mut r = LeReader::new(&bytes);
    if r.take(4) != Some(GMM1_MAGIC.as_slice()) {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "GMM1".into(),
        });
    }
    let truncated = || Error::SizeMismatch {
        path: path.to_path_buf(),
        expected: 12,
        found: bytes.len(),
    };
    let k = r.u32().ok_or_else(truncated)? as usize;
    let d = r.u32().ok_or_else(truncated)? as usize;
    let expected = k + 2 * k * d;
    if r.remaining() != 8 * expected {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            found: r.remaining() / 8,
        });
    }
    let mut next = |len: usize| (0..len).map(|_| r.f64().unwrap()).collect::<Vec<_>>();
    let weights = next(k);
    let means = Array2::from_shape_vec((k, d), next(k * d)).unwrap();
    let stddevs = Array2::from_shape_vec((k, d), next(k * d)).unwrap();
    DiagonalGmm::new(weights, means, stddevs)
}


#[cfg(test)]
mod tests {
    use super::test_support::random_model;
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn std_normal() -> DiagonalGmm {
        DiagonalGmm::new(vec![1.0], array![[0.0]], array![[1.0]]).unwrap()
    }

    #[allow(clippy::needless_range_loop)]
    fn naive_density(m: &DiagonalGmm, x: &[f64]) -> Vec<f64> {
        (0..m.k())
            .map(|i| {
                let mut p = m.weights()[i];
                for j in 0..m.dim() {
                    let (mu, s) = (m.means()[(i, j)], m.stddevs()[(i, j)]);
                    p *= (-(x[j] - mu).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
                }
                p
            })
            .collect()
    }

    #[test]
    fn rejects_bad_models() {
        assert!(DiagonalGmm::new(vec![0.5, 0.4], array![[0.0], [1.0]], array![[1.0], [1.0]]).is_err());
        assert!(DiagonalGmm::new(vec![1.0, 0.0], array![[0.0], [1.0]], array![[1.0], [1.0]]).is_err());
        assert!(DiagonalGmm::new(vec![1.0], array![[0.0]], array![[0.0]]).is_err());
        assert!(DiagonalGmm::new(vec![1.0], array![[f64::NAN]], array![[1.0]]).is_err());
        assert!(DiagonalGmm::new(vec![1.0], array![[0.0, 1.0]], array![[1.0]]).is_err());
    }

    #[test]
    fn standard_normal_at_mode() {
        let ld = std_normal().log_density(&[0.0]).unwrap();
        assert_abs_diff_eq!(ld, -0.5 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(ld, -0.918_938_5, epsilon = 1e-7);
    }

    #[test]
    fn identical_components_match_single() {
        let two = DiagonalGmm::new(vec![0.5, 0.5], array![[0.0], [0.0]], array![[1.0], [1.0]]).unwrap();
        assert_abs_diff_eq!(
            two.log_density(&[0.0]).unwrap(),
            std_normal().log_density(&[0.0]).unwrap(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn log_density_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let m = random_model(&mut rng, 2, 2);
            let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let direct = naive_density(&m, &x).iter().sum::<f64>().ln();
            assert_abs_diff_eq!(m.log_density(&x).unwrap(), direct, epsilon = 1e-10);
        }
    }

    #[test]
    fn log_density_stays_finite_far_away() {
        let ld = std_normal().log_density(&[1e3]).unwrap();
        assert!(ld.is_finite());
        assert_abs_diff_eq!(ld, -0.5 * 1e6 - 0.5 * LN_2PI, epsilon = 1e-6);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(
            std_normal().log_density(&[0.0, 1.0]),
            Err(Error::DimensionMismatch { expected: 1, got: 2 })
        ));
        assert!(std_normal().posteriors(&[]).is_err());
    }

    #[test]
    fn posterior_cases() {
        assert_eq!(std_normal().posteriors(&[3.0]).unwrap(), vec![1.0]);
        let sym = DiagonalGmm::new(vec![0.5, 0.5], array![[-1.0], [1.0]], array![[1.0], [1.0]]).unwrap();
        assert_eq!(sym.posteriors(&[0.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn posteriors_match_bayes_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let m = random_model(&mut rng, 3, 3);
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let joint = naive_density(&m, &x);
            let z: f64 = joint.iter().sum();
            let gamma = m.posteriors(&x).unwrap();
            for (g, j) in gamma.iter().zip(&joint) {
                assert_abs_diff_eq!(*g, j / z, epsilon = 1e-12);
            }
            assert_abs_diff_eq!(gamma.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn point_mass_hits_variance_floor() {
        let data = Array2::from_elem((100, 2), 3.0);
        let (m, _) = train_gmm(data.view(), &GmmTrainConfig::new(1)).unwrap();
        assert_eq!(m.weights(), &[1.0]);
        assert_eq!(m.means(), &array![[3.0, 3.0]]);
        for s in m.stddevs() {
            assert_abs_diff_eq!(s * s, 1e-4, epsilon = 1e-15);
        }
    }

    #[test]
    fn separates_two_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // 70 points near 0, 30 near 100
        let data = Array2::from_shape_fn((100, 1), |(i, _)| {
            let base = if i < 70 { 0.0 } else { 100.0 };
            base + rng.random_range(-1.0..1.0)
        });
        let sample_mean = |r: std::ops::Range<usize>| data.column(0).slice(ndarray::s![r]).mean().unwrap();
        let (m0, m1) = (sample_mean(0..70), sample_mean(70..100));
        let (m, log) = train_gmm(data.view(), &GmmTrainConfig::new(2).with_seed(5)).unwrap();
        let (lo, hi) = if m.means()[(0, 0)] < m.means()[(1, 0)] { (0, 1) } else { (1, 0) };
        assert!((m.means()[(lo, 0)] - m0).abs() < 0.5);
        assert!((m.means()[(hi, 0)] - m1).abs() < 0.5);
        assert!((m.weights()[lo] - 0.7).abs() < 0.1);
        assert!((m.weights()[hi] - 0.3).abs() < 0.1);
        assert!(log.converged);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let data = Array2::from_shape_fn((300, 3), |_| rng.random_range(-5.0..5.0));
        let cfg = GmmTrainConfig::new(4).with_seed(99);
        let (a, la) = train_gmm(data.view(), &cfg).unwrap();
        let (b, lb) = train_gmm(data.view(), &cfg).unwrap();
        assert_eq!(gmm_bytes(&a), gmm_bytes(&b));
        assert_eq!(la, lb);
    }

    #[test]
    fn too_few_points() {
        let data = Array2::zeros((2, 1));
        assert!(matches!(
            train_gmm(data.view(), &GmmTrainConfig::new(3)),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn bad_config_rejected() {
        let data = Array2::zeros((10, 1));
        let mut cfg = GmmTrainConfig::new(2);
        cfg.rel_tol = 0.0;
        assert!(matches!(train_gmm(data.view(), &cfg), Err(Error::InvalidConfig(_))));
        let mut cfg = GmmTrainConfig::new(2);
        cfg.variance_floor = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn subsampling_is_recorded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = Array2::from_shape_fn((500, 2), |_| rng.random_range(-1.0..1.0));
        let mut cfg = GmmTrainConfig::new(2);
        cfg.sample_cap = 120;
        let (_, log) = train_gmm(data.view(), &cfg).unwrap();
        assert_eq!((log.total, log.sampled), (500, 120));
    }

    #[test]
    fn blocks_larger_than_one_are_consistent() {
        // more rows than one E-step block
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = BLOCK + 300;
        let data = Array2::from_shape_fn((n, 2), |(i, _)| (i % 3) as f64 * 10.0 + rng.random_range(-1.0..1.0));
        let (m, log) = train_gmm(data.view(), &GmmTrainConfig::new(3).with_seed(2)).unwrap();
        let mut means: Vec<f64> = m.means().column(0).to_vec();
        means.sort_by(f64::total_cmp);
        for (got, want) in means.iter().zip([0.0, 10.0, 20.0]) {
            assert!((got - want).abs() < 0.2, "{means:?}");
        }
        for w in log.mean_log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs());
        }
    }

    #[test]
    fn sequence_likelihood_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_model(&mut rng, 3, 2);
        let one = DescriptorSequence::new("a", "v", array![[0.3, -0.2]]).unwrap();
        assert_eq!(
            sequence_log_likelihood(&m, &one).unwrap(),
            m.log_density(&[0.3, -0.2]).unwrap()
        );
        let data = Array2::from_shape_fn((7, 2), |_| rng.random_range(-2.0..2.0));
        let seq = DescriptorSequence::new("a", "v", data.clone()).unwrap();
        let doubled = DescriptorSequence::new("a", "v", ndarray::concatenate![ndarray::Axis(0), data, data]).unwrap();
        let a = sequence_log_likelihood(&m, &seq).unwrap();
        assert_abs_diff_eq!(a, sequence_log_likelihood(&m, &doubled).unwrap(), epsilon = 1e-12);
        let oracle: f64 = data
            .rows()
            .into_iter()
            .map(|r| naive_density(&m, r.as_slice().unwrap()).iter().sum::<f64>().ln())
            .sum::<f64>()
            / 7.0;
        assert_abs_diff_eq!(a, oracle, epsilon = 1e-10);
        let wrong = DescriptorSequence::new("a", "v", array![[1.0]]).unwrap();
        assert!(sequence_log_likelihood(&m, &wrong).is_err());
    }

    #[test]
    fn gmm1_roundtrip_and_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_model(&mut rng, 3, 4);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.gmm");
        write_gmm(&m, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 12 + 8 * (3 + 2 * 12));
        assert_eq!(&bytes[..4], b"GMM1");
        assert_eq!(read_gmm(&p).unwrap(), m);
        std::fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(read_gmm(&p), Err(Error::SizeMismatch { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn em_never_decreases_likelihood(seed in any::<u64>(), k in 1usize..5, d in 1usize..4, n in 20usize..200) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let data = Array2::from_shape_fn((n, d), |_| rng.random_range(-3.0..3.0));
                let (_, log) = train_gmm(data.view(), &GmmTrainConfig::new(k).with_seed(seed)).unwrap();
                for (t, w) in log.mean_log_likelihood.windows(2).enumerate() {
                    if log.reseeded_after.contains(&t) { continue; }
                    prop_assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "{} -> {}", w[0], w[1]);
                }
            }

            #[test]
            fn posteriors_sum_to_one(seed in any::<u64>(), k in 1usize..6, d in 1usize..5) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let m = random_model(&mut rng, k, d);
                let x: Vec<f64> = (0..d).map(|_| rng.random_range(-20.0..20.0)).collect();
                let g = m.posteriors(&x).unwrap();
                prop_assert!(g.iter().all(|&v| v >= 0.0));
                prop_assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
