//! One-vs-rest L2-regularized, L1-loss (hinge) linear SVMs trained by dual
//! coordinate descent. The bias is learned by appending a constant 1 to
//! every feature vector, so it is regularized like any other weight.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io_util::{read_all, write_all, LeReader};

pub const SVM1_MAGIC: &[u8; 4] = b"SVM1";

#[derive(Debug, Clone, PartialEq)]
pub struct SvmTrainConfig {
    pub c: f64,
    pub max_epochs: usize,
    /// Stop once the largest |projected gradient| seen in an epoch drops below this.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for SvmTrainConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            max_epochs: 1000,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

impl SvmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.c.is_finite() || self.c <= 0.0 {
            return Err(Error::InvalidConfig(format!("C must be positive, got {}", self.c)));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidConfig("max_epochs must be at least 1".into()));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(Error::InvalidConfig("tolerance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvmModel {
    /// One weight row per genre.
    pub weights: Array2<f64>,
    pub biases: Vec<f64>,
    /// Regularization used for training; unknown for models read from disk.
    pub c: Option<f64>,
}

impl LinearSvmModel {
    pub fn n_genres(&self) -> usize {
        self.biases.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.ncols()
    }
}

/// score_g = w_g · x + b_g
pub fn decision_scores(model: &LinearSvmModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.feature_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.feature_dim(),
            got: x.len(),
        });
    }
    Ok(model
        .weights
        .rows()
        .into_iter()
        .zip(&model.biases)
        .map(|(w, b)| w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b)
        .collect())
}

/// A binary problem with labels ±1. Features are used with an implicit
/// trailing constant 1.
#[derive(Debug, Clone)]
pub struct BinaryProblem<'a> {
    pub features: ArrayView2<'a, f64>,
    pub labels: Vec<f64>,
    pub c: f64,
}

impl BinaryProblem<'_> {
    fn augmented_sq_norm(&self, i: usize) -> f64 {
        self.features.row(i).iter().map(|v| v * v).sum::<f64>() + 1.0
    }

    /// w = Σ α_i y_i x̃_i, with the bias as the last component.
    fn primal(&self, alpha: &[f64]) -> Vec<f64> {
        let f = self.features.ncols();
        let mut w = vec![0.0; f + 1];
        for (i, (&a, &y)) in alpha.iter().zip(&self.labels).enumerate() {
            if a == 0.0 {
                continue;
            }
            for (wj, xj) in w.iter_mut().zip(self.features.row(i)) {
                *wj += a * y * xj;
            }
            w[f] += a * y;
        }
        w
    }
}

/// Σ α_i − ½‖Σ α_i y_i x̃_i‖² for 0 ≤ α_i ≤ C.
pub fn dual_objective(problem: &BinaryProblem<'_>, alpha: &[f64]) -> Result<f64> {
    if alpha.len() != problem.labels.len() {
        return Err(Error::DimensionMismatch {
            expected: problem.labels.len(),
            got: alpha.len(),
        });
    }
    if let Some(a) = alpha.iter().find(|a| !(**a >= 0.0 && **a <= problem.c)) {
        return Err(Error::InvalidInput(format!(
            "dual variable {a} outside [0, {}]",
            problem.c
        )));
    }
    Ok(dual_value(alpha, &problem.primal(alpha)))
}

fn dual_value(alpha: &[f64], w: &[f64]) -> f64 {
    alpha.iter().sum::<f64>() - 0.5 * w.iter().map(|v| v * v).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinarySolution {
    /// Weights followed by the bias.
    pub w: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Dual objective after each epoch.
    pub dual_per_epoch: Vec<f64>,
    pub epochs: usize,
    pub converged: bool,
}

/// Dual coordinate descent on one binary problem. Coordinates are visited
/// in a fresh seeded shuffle every epoch.
pub fn solve_binary(problem: &BinaryProblem<'_>, max_epochs: usize, tolerance: f64, rng: &mut ChaCha8Rng) -> BinarySolution {
    let n = problem.labels.len();
    let f = problem.features.ncols();
    let q_diag: Vec<f64> = (0..n).map(|i| problem.augmented_sq_norm(i)).collect();
    let mut alpha = vec![0.0; n];
    let mut w = vec![0.0; f + 1];
    let mut order: Vec<usize> = (0..n).collect();
    let mut dual_per_epoch = Vec::new();
    let mut converged = false;
    let mut epochs = 0;

    for _ in 0..max_epochs {
        epochs += 1;
        order.shuffle(rng);
        let mut max_pg: f64 = 0.0;
        for &i in &order {
            let x = problem.features.row(i);
            let y = problem.labels[i];
            let margin = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + w[f];
            let grad = y * margin - 1.0;
            let pg = if alpha[i] == 0.0 {
                grad.min(0.0)
            } else if alpha[i] == problem.c {
                grad.max(0.0)
            } else {
                grad
            };
            max_pg = max_pg.max(pg.abs());
            if pg == 0.0 {
                continue;
            }
            let old = alpha[i];
            let new = (old - grad / q_diag[i]).clamp(0.0, problem.c);
            let step = (new - old) * y;
            if step != 0.0 {
                for (wj, xj) in w.iter_mut().zip(x) {
                    *wj += step * xj;
                }
                w[f] += step;
            }
            alpha[i] = new;
        }
        dual_per_epoch.push(dual_value(&alpha, &w));
        if max_pg < tolerance {
            converged = true;
            break;
        }
    }
    BinarySolution {
        w,
        alpha,
        dual_per_epoch,
        epochs,
        converged,
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SvmTrainingLog {
    /// Per genre; `None` for genres without positive examples.
    pub solutions: Vec<Option<BinarySolution>>,
}

/// Trains one binary SVM per genre (label g vs. the rest). Genres with no
/// positive example get w = 0, b = −1.
pub fn train_svm(
    features: ArrayView2<f64>,
    labels: &[usize],
    n_genres: usize,
    cfg: &SvmTrainConfig,
) -> Result<(LinearSvmModel, SvmTrainingLog)> {
    cfg.validate()?;
    let (n, f) = features.dim();
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: labels.len(),
        });
    }
    if n < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 training points, got {n}")));
    }
    if let Some(&g) = labels.iter().find(|&&g| g >= n_genres) {
        return Err(Error::InvalidInput(format!("label {g} out of range for {n_genres} genres")));
    }
    if let Some(((row, col), _)) = features.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { row, col });
    }

    let solutions: Vec<Option<BinarySolution>> = (0..n_genres)
        .into_par_iter()
        .map(|g| {
            if !labels.contains(&g) {
                log::warn!("genre {g} has no positive training example; its scores are constant -1");
                return None;
            }
            let problem = BinaryProblem {
                features,
                labels: labels.iter().map(|&l| if l == g { 1.0 } else { -1.0 }).collect(),
                c: cfg.c,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(g as u64);
            Some(solve_binary(&problem, cfg.max_epochs, cfg.tolerance, &mut rng))
        })
        .collect();

    let mut weights = Array2::zeros((n_genres, f));
    let mut biases = vec![-1.0; n_genres];
    for (g, sol) in solutions.iter().enumerate() {
        if let Some(sol) = sol {
            weights.row_mut(g).assign(&ndarray::ArrayView1::from(&sol.w[..f]));
            biases[g] = sol.w[f];
            if !sol.converged {
                log::warn!("genre {g}: dual coordinate descent stopped after {} epochs", sol.epochs);
            }
        }
    }
    Ok((
        LinearSvmModel {
            weights,
            biases,
            c: Some(cfg.c),
        },
        SvmTrainingLog { solutions },
    ))
}

/// SVM1: magic, u32 genre count, u32 F, then per genre F binary64 weights
/// and the binary64 bias, little-endian.
pub fn svm_bytes(model: &LinearSvmModel) -> Vec<u8> {
    let (g, f) = model.weights.dim();
    let mut out = Vec::with_capacity(12 + 8 * g * (f + 1));
    out.extend_from_slice(SVM1_MAGIC);
    out.extend_from_slice(&(g as u32).to_le_bytes());
    out.extend_from_slice(&(f as u32).to_le_bytes());
    for (w, b) in model.weights.rows().into_iter().zip(&model.biases) {
        for v in w.iter().chain(std::iter::once(b)) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_svm(model: &LinearSvmModel, path: &Path) -> Result<()> {
    write_all(path, &svm_bytes(model))
}

pub fn read_svm(path: &Path) -> Result<LinearSvmModel> {
    let bytes = read_all(path)?;
    let mut r = LeReader::new(&bytes);
    if r.take(4) != Some(SVM1_MAGIC.as_slice()) {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "SVM1".into(),
        });
    }
    let truncated = || Error::SizeMismatch {
        path: path.to_path_buf(),
        expected: 12,
        found: bytes.len(),
    };
    let g = r.u32().ok_or_else(truncated)? as usize;
    let f = r.u32().ok_or_else(truncated)? as usize;
    let expected = g * (f + 1);
    if r.remaining() != 8 * expected {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            found: r.remaining() / 8,
        });
    }
    let mut weights = Array2::zeros((g, f));
    let mut biases = Vec::with_capacity(g);
    for mut row in weights.rows_mut() {
        for v in row.iter_mut() {
            *v = r.f64().unwrap();
        }
        biases.push(r.f64().unwrap());
    }
    if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
        return Err(Error::InvalidModel(format!("{}: non-finite weight", path.display())));
    }
    Ok(LinearSvmModel { weights, biases, c: None })
}
