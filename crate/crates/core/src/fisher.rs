//! Fisher vector encoding over a diagonal GMM, and the normalization steps
//! applied to encoded vectors.
//!
//! Layout of an encoded vector: the K mean-gradient blocks first, then the K
//! standard-deviation-gradient blocks, each block D values long.

use std::fmt;
use std::str::FromStr;

use crate::dataset::DescriptorSequence;
use crate::error::{Error, Result};
use crate::gmm::DiagonalGmm;

pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormStep {
    L1,
    L2,
    /// sign(x)·√(α|x|)
    Power(f64),
    /// sign(x)·ln(1 + α|x|)
    Log(f64),
    /// sign(x)·|x|^α, the usual "signed power" variant.
    PowerExp(f64),
}

impl NormStep {
    fn apply(&self, values: &mut [f64]) {
        match *self {
            NormStep::L1 => {
                let norm: f64 = values.iter().map(|v| v.abs()).sum();
                if norm > 0.0 {
                    values.iter_mut().for_each(|v| *v /= norm);
                }
            }
            NormStep::L2 => {
                let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    values.iter_mut().for_each(|v| *v /= norm);
                }
            }
            NormStep::Power(alpha) => values
                .iter_mut()
                .for_each(|v| *v = signed(*v, (alpha * v.abs()).sqrt())),
            NormStep::Log(alpha) => values
                .iter_mut()
                .for_each(|v| *v = signed(*v, (alpha * v.abs()).ln_1p())),
            NormStep::PowerExp(alpha) => values
                .iter_mut()
                .for_each(|v| *v = signed(*v, v.abs().powf(alpha))),
        }
    }

    fn alpha(&self) -> Option<f64> {
        match *self {
            NormStep::Power(a) | NormStep::Log(a) | NormStep::PowerExp(a) => Some(a),
            NormStep::L1 | NormStep::L2 => None,
        }
    }
}

fn signed(x: f64, magnitude: f64) -> f64 {
    if x < 0.0 {
        -magnitude
    } else if x > 0.0 {
        magnitude
    } else {
        0.0
    }
}

impl fmt::Display for NormStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormStep::L1 => f.write_str("l1"),
            NormStep::L2 => f.write_str("l2"),
            NormStep::Power(a) => write!(f, "pn({a})"),
            NormStep::Log(a) => write!(f, "log({a})"),
            NormStep::PowerExp(a) => write!(f, "pexp({a})"),
        }
    }
}

/// Ordered list of steps; empty means "no normalization".
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NormalizationSpec {
    pub steps: Vec<NormStep>,
}

impl NormalizationSpec {
    pub fn new(steps: Vec<NormStep>) -> Result<Self> {
        for s in &steps {
            if let Some(a) = s.alpha() {
                if !(a > 0.0 && a.is_finite()) {
                    return Err(Error::InvalidConfig(format!("normalization alpha must be positive, got {a}")));
                }
            }
        }
        Ok(Self { steps })
    }

    pub fn none() -> Self {
        Self::default()
    }

    /// Parses `none` or a `+`-separated list such as `pn+l2`, `log`,
    /// `pn(0.3)+l1`. Steps without an explicit α use `default_alpha`.
    pub fn parse(text: &str, default_alpha: f64) -> Result<Self> {
        let text = text.trim().to_ascii_lowercase();
        if let Some((_, spec)) = normalization_menu_with_alpha(default_alpha)
            .into_iter()
            .find(|(name, _)| name.to_ascii_lowercase() == text)
        {
            return Ok(spec);
        }
        if text.is_empty() || text == "none" {
            return Ok(Self::none());
        }
        let mut steps = Vec::new();
        for part in text.split('+').map(str::trim) {
            let (name, alpha) = match part.split_once('(') {
                Some((name, rest)) => {
                    let inner = rest
                        .strip_suffix(')')
                        .ok_or_else(|| Error::InvalidConfig(format!("unbalanced parenthesis in {part:?}")))?;
                    let a = inner
                        .trim()
                        .parse::<f64>()
                        .map_err(|_| Error::InvalidConfig(format!("bad alpha in {part:?}")))?;
                    (name.trim(), Some(a))
                }
                None => (part, None),
            };
            let a = alpha.unwrap_or(default_alpha);
            let step = match name {
                "l1" if alpha.is_none() => NormStep::L1,
                "l2" if alpha.is_none() => NormStep::L2,
                "pn" | "power" => NormStep::Power(a),
                "log" => NormStep::Log(a),
                "pexp" => NormStep::PowerExp(a),
                _ => return Err(Error::InvalidConfig(format!("unknown normalization step {part:?}"))),
            };
            steps.push(step);
        }
        Self::new(steps)
    }
}

impl fmt::Display for NormalizationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.steps.is_empty() {
            return f.write_str("none");
        }
        let parts: Vec<String> = self.steps.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for NormalizationSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s, DEFAULT_ALPHA)
    }
}

/// The seven named settings compared in the normalization sweep, α = 0.5.
pub fn normalization_menu() -> Vec<(&'static str, NormalizationSpec)> {
    normalization_menu_with_alpha(DEFAULT_ALPHA)
}

pub fn normalization_menu_with_alpha(alpha: f64) -> Vec<(&'static str, NormalizationSpec)> {
    use NormStep::*;
    let spec = |steps: Vec<NormStep>| NormalizationSpec { steps };
    vec![
        ("Without normalization", spec(vec![])),
        ("L1", spec(vec![L1])),
        ("L2", spec(vec![L2])),
        ("Log Norm", spec(vec![Log(alpha)])),
        ("PN", spec(vec![Power(alpha)])),
        ("PN + L2 Norm", spec(vec![Power(alpha), L2])),
        ("PN + L1 Norm", spec(vec![Power(alpha), L1])),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherVector {
    values: Vec<f64>,
    k: usize,
    d: usize,
    normalization: NormalizationSpec,
}

impl FisherVector {
    pub fn from_parts(values: Vec<f64>, k: usize, d: usize, normalization: NormalizationSpec) -> Result<Self> {
        if values.len() != 2 * k * d {
            return Err(Error::DimensionMismatch {
                expected: 2 * k * d,
                got: values.len(),
            });
        }
        if let Some(col) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: 0, col });
        }
        Ok(Self {
            values,
            k,
            d,
            normalization,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn normalization(&self) -> &NormalizationSpec {
        &self.normalization
    }

    /// Gradient with respect to the mean of component `i`.
    pub fn mean_block(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    /// Gradient with respect to the standard deviation of component `i`.
    pub fn sigma_block(&self, i: usize) -> &[f64] {
        let off = self.k * self.d;
        &self.values[off + i * self.d..off + (i + 1) * self.d]
    }
}

/// Unnormalized Fisher vector of `seq` under `model`:
///
/// G_μ,i = 1/(T√ω_i) Σ_t γ_t(i) (x_t − μ_i)/σ_i
/// G_σ,i = 1/(T√(2ω_i)) Σ_t γ_t(i) [(x_t − μ_i)²/σ_i² − 1]
pub fn encode_fisher(model: &DiagonalGmm, seq: &DescriptorSequence) -> Result<FisherVector> {
    let (k, d) = (model.k(), model.dim());
    if seq.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: seq.dim(),
        });
    }
    let mut values = vec![0.0; 2 * k * d];
    let (g_mu, g_sigma) = values.split_at_mut(k * d);
    let mut gamma = vec![0.0; k];
    for x in seq.rows() {
        model.posteriors_into(x, &mut gamma);
        for (i, &g) in gamma.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let mu = model.mean_row(i);
            let sigma = model.stddev_row(i);
            let acc_mu = &mut g_mu[i * d..(i + 1) * d];
            let acc_sigma = &mut g_sigma[i * d..(i + 1) * d];
            for j in 0..d {
                let z = (x[j] - mu[j]) / sigma[j];
                acc_mu[j] += g * z;
                acc_sigma[j] += g * (z * z - 1.0);
            }
        }
    }
    let t = seq.len() as f64;
    for (i, &w) in model.weights().iter().enumerate() {
        let mu_scale = 1.0 / (t * w.sqrt());
        let sigma_scale = 1.0 / (t * (2.0 * w).sqrt());
        g_mu[i * d..(i + 1) * d].iter_mut().for_each(|v| *v *= mu_scale);
        g_sigma[i * d..(i + 1) * d].iter_mut().for_each(|v| *v *= sigma_scale);
    }
    FisherVector::from_parts(values, k, d, NormalizationSpec::none())
}

/// Applies `spec` step by step; the result records the accumulated steps.
pub fn normalize(v: &FisherVector, spec: &NormalizationSpec) -> FisherVector {
    let mut values = v.values.clone();
    for step in &spec.steps {
        step.apply(&mut values);
    }
    let mut steps = v.normalization.steps.clone();
    steps.extend_from_slice(&spec.steps);
    FisherVector {
        values,
        k: v.k,
        d: v.d,
        normalization: NormalizationSpec { steps },
    }
}

/// Normalization on a bare feature vector.
pub fn normalize_values(values: &mut [f64], spec: &NormalizationSpec) {
    for step in &spec.steps {
        step.apply(values);
    }
}
