//! Shared numeric kernels: stable softmax, Adam, seeded RNG streams, Otsu
//! thresholding and a central-difference gradient checker.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dense row-major matrix used for datasets and network weights.
pub type Matrix = Array2<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("no legal action: every logit is -inf")]
    NoLegalAction,
    #[error("non-finite gradient at index {index}")]
    NonFiniteGradient { index: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("otsu threshold needs at least one value")]
    EmptyInput,
}

/// Hyperparameters of the Adam optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Self {
            config,
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step_count: 0,
        }
    }

    /// Applies one bias-corrected Adam step to `params` in place.
    ///
    /// A non-finite gradient rejects the whole update and leaves both the
    /// parameters and the optimizer state untouched.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NumericsError> {
        if params.len() != self.first_moment.len() {
            return Err(NumericsError::ShapeMismatch {
                expected: self.first_moment.len(),
                got: params.len(),
            });
        }
        if grads.len() != params.len() {
            return Err(NumericsError::ShapeMismatch {
                expected: params.len(),
                got: grads.len(),
            });
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(NumericsError::NonFiniteGradient { index });
        }
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let correction1 = 1.0 - beta1.powi(t);
        let correction2 = 1.0 - beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

/// Numerically stable log-softmax. Entries equal to `-inf` stay `-inf`.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>, NumericsError> {
    let mut out = vec![0.0; logits.len()];
    log_softmax_into(logits, &mut out)?;
    Ok(out)
}

pub fn log_softmax_into(logits: &[f64], out: &mut [f64]) -> Result<(), NumericsError> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(NumericsError::NoLegalAction);
    }
    let sum: f64 = logits
        .iter()
        .filter(|l| **l != f64::NEG_INFINITY)
        .map(|&l| (l - max).exp())
        .sum();
    let log_z = max + sum.ln();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = if l == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            l - log_z
        };
    }
    Ok(())
}

/// Entropy of a distribution given by its log-probabilities.
pub fn entropy_from_log_probs(log_probs: &[f64]) -> f64 {
    -log_probs
        .iter()
        .filter(|lp| lp.is_finite())
        .map(|&lp| lp.exp() * lp)
        .sum::<f64>()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Result of an Otsu split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtsuSplit {
    pub threshold: f64,
    /// Set when fewer than two distinct values exist; callers treat every
    /// value as falling below the threshold.
    pub degenerate: bool,
}

/// Exact Otsu threshold over the sorted distinct values.
///
/// Every boundary between consecutive distinct values is a candidate; the
/// split with maximal between-class variance wins (first one on ties) and
/// the threshold is the midpoint of the two values around it.
pub fn otsu_threshold(values: &[f64]) -> Result<OtsuSplit, NumericsError> {
    if values.is_empty() {
        return Err(NumericsError::EmptyInput);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted[0] == sorted[sorted.len() - 1] {
        return Ok(OtsuSplit {
            threshold: sorted[0],
            degenerate: true,
        });
    }
    let n = sorted.len() as f64;
    let total: f64 = sorted.iter().sum();
    let mut best = f64::NEG_INFINITY;
    let mut threshold = sorted[0];
    let mut below_sum = 0.0;
    for i in 0..sorted.len() - 1 {
        below_sum += sorted[i];
        if sorted[i] == sorted[i + 1] {
            continue;
        }
        let w0 = (i + 1) as f64 / n;
        let w1 = 1.0 - w0;
        let mu0 = below_sum / (i + 1) as f64;
        let mu1 = (total - below_sum) / (n - (i + 1) as f64);
        let between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if between > best {
            best = between;
            threshold = 0.5 * (sorted[i] + sorted[i + 1]);
        }
    }
    Ok(OtsuSplit {
        threshold,
        degenerate: false,
    })
}

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub numeric: Vec<f64>,
    pub relative_errors: Vec<f64>,
    pub max_relative_error: f64,
}

/// Denominator floor, relative to `max(1, |f(params)|)`, so that near-zero
/// gradients are compared absolutely. Central-difference roundoff grows with
/// the magnitude of the objective.
const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Fourth-order central-difference check of `analytic` against `f` at
/// `params`.
pub fn finite_diff_check<F>(mut f: F, analytic: &[f64], params: &[f64], step: f64) -> GradCheck
where
    F: FnMut(&[f64]) -> f64,
{
    let floor = GRAD_CHECK_FLOOR * f(params).abs().max(1.0);
    let mut probe = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut relative_errors = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let mut at = |offset: f64| {
            probe[i] = params[i] + offset;
            f(&probe)
        };
        let (p1, m1, p2, m2) = (at(step), at(-step), at(2.0 * step), at(-2.0 * step));
        probe[i] = params[i];
        let g = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
        let a = analytic[i];
        let denom = a.abs().max(g.abs()).max(floor);
        numeric.push(g);
        relative_errors.push((a - g).abs() / denom);
    }
    let max_relative_error = relative_errors.iter().copied().fold(0.0, f64::max);
    GradCheck {
        numeric,
        relative_errors,
        max_relative_error,
    }
}

/// A named, reproducible random stream.
///
/// Streams are ChaCha8 keyed by the master seed with the 64-bit ChaCha stream
/// selector derived from the stream path, so draws depend only on
/// `(master_seed, path)` and never on thread scheduling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    pub master_seed: u64,
    pub stream_id: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        Self {
            master_seed,
            stream_id: splitmix64(stream_id),
        }
    }

    /// Derives an independent sub-stream, e.g. one per trajectory.
    pub fn child(&self, id: u64) -> Self {
        Self {
            master_seed: self.master_seed,
            stream_id: splitmix64(self.stream_id ^ splitmix64(id.wrapping_add(1))),
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_id);
        rng
    }
}
