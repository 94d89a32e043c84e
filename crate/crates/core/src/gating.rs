//! Noise gating: a regression network whose inputs pass through L0
//! hard-concrete gates. After training, the epoch-averaged probability that
//! each gate is open is binarised with a scaled Otsu threshold, giving the
//! per-variable filter used by the expression sampler.

use crate::dataset::{mean, Dataset};
use crate::numerics::{otsu_threshold, sigmoid, AdamConfig, AdamState, NumericsError, RngStream};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Open01};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatingError {
    #[error("uniform sample {0} is not strictly inside (0, 1)")]
    UniformOutOfRange(f64),
    #[error("batch of {0} row(s) cannot be batch-normalised in train mode")]
    BatchTooSmall(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("dataset too small: {0}")]
    TooFewRows(String),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Stretch-and-clip constants of the hard-concrete distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardConcrete {
    pub temperature: f64,
    pub stretch_lo: f64,
    pub stretch_hi: f64,
}

impl Default for HardConcrete {
    fn default() -> Self {
        Self {
            temperature: 2.0 / 3.0,
            stretch_lo: -0.1,
            stretch_hi: 1.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub log_alpha: Vec<f64>,
    pub temperature: f64,
    pub stretch_lo: f64,
    pub stretch_hi: f64,
}

/// A reparameterised gate draw and its derivative w.r.t. `log_alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateSample {
    pub values: Vec<f64>,
    pub dvalue_dlog_alpha: Vec<f64>,
}

impl GateParams {
    pub fn new(log_alpha: Vec<f64>, hc: HardConcrete) -> Self {
        Self {
            log_alpha,
            temperature: hc.temperature,
            stretch_lo: hc.stretch_lo,
            stretch_hi: hc.stretch_hi,
        }
    }

    fn hard_concrete(&self) -> HardConcrete {
        HardConcrete {
            temperature: self.temperature,
            stretch_lo: self.stretch_lo,
            stretch_hi: self.stretch_hi,
        }
    }

    /// `z = min(1, max(0, σ((ln u − ln(1−u) + log α)/τ)·(b − a) + a))`.
    pub fn sample(&self, uniforms: &[f64]) -> Result<GateSample, GatingError> {
        sample_gates(&self.log_alpha, self.hard_concrete(), uniforms)
    }

    /// `P(z ≠ 0) = σ(log α − τ ln(−a/(b − a)))` per gate.
    pub fn prob_nonzero(&self) -> Vec<f64> {
        prob_nonzero(&self.log_alpha, self.hard_concrete())
    }

    /// Noise-free gate used at evaluation time.
    pub fn deterministic(&self) -> Vec<f64> {
        deterministic_gates(&self.log_alpha, self.hard_concrete())
    }
}

pub fn sample_gates(log_alpha: &[f64], hc: HardConcrete, uniforms: &[f64]) -> Result<GateSample, GatingError> {
    if uniforms.len() != log_alpha.len() {
        return Err(GatingError::Shape(format!(
            "{} uniforms for {} gates",
            uniforms.len(),
            log_alpha.len()
        )));
    }
    let span = hc.stretch_hi - hc.stretch_lo;
    let mut values = Vec::with_capacity(log_alpha.len());
    let mut grads = Vec::with_capacity(log_alpha.len());
    for (&la, &u) in log_alpha.iter().zip(uniforms) {
        if !(u > 0.0 && u < 1.0) {
            return Err(GatingError::UniformOutOfRange(u));
        }
        let s = sigmoid((u.ln() - (1.0 - u).ln() + la) / hc.temperature);
        let stretched = s * span + hc.stretch_lo;
        if stretched <= 0.0 {
            values.push(0.0);
            grads.push(0.0);
        } else if stretched >= 1.0 {
            values.push(1.0);
            grads.push(0.0);
        } else {
            values.push(stretched);
            grads.push(span * s * (1.0 - s) / hc.temperature);
        }
    }
    Ok(GateSample {
        values,
        dvalue_dlog_alpha: grads,
    })
}

/// `τ ln(-a/b)`: the stretched sample is positive iff the logistic noise
/// exceeds this shift minus `log α`.
fn nonzero_shift(hc: HardConcrete) -> f64 {
    hc.temperature * (-hc.stretch_lo / hc.stretch_hi).ln()
}

pub fn prob_nonzero(log_alpha: &[f64], hc: HardConcrete) -> Vec<f64> {
    let shift = nonzero_shift(hc);
    log_alpha.iter().map(|&la| sigmoid(la - shift)).collect()
}

fn prob_nonzero_grad(log_alpha: &[f64], hc: HardConcrete) -> Vec<f64> {
    prob_nonzero(log_alpha, hc).into_iter().map(|p| p * (1.0 - p)).collect()
}

pub fn deterministic_gates(log_alpha: &[f64], hc: HardConcrete) -> Vec<f64> {
    let span = hc.stretch_hi - hc.stretch_lo;
    log_alpha
        .iter()
        .map(|&la| (sigmoid(la) * span + hc.stretch_lo).clamp(0.0, 1.0))
        .collect()
}

/// Training hyperparameters for the gating network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NgmHyper {
    pub lambda_l0: f64,
    pub l2_weight: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden_size: usize,
    pub train_ratio: f64,
    pub otsu_scale: f64,
    pub log_alpha_init_mean: f64,
    pub log_alpha_init_sd: f64,
    /// Train on `(y - mean) / sd` so the L0 weight is relative to unit
    /// target variance.
    pub standardize_target: bool,
    pub hard_concrete: HardConcrete,
}

impl Default for NgmHyper {
    fn default() -> Self {
        Self {
            lambda_l0: 0.25,
            l2_weight: 1e-5,
            learning_rate: 0.001,
            beta1: 0.99,
            beta2: 0.999,
            epochs: 20,
            batch_size: 256,
            hidden_size: 128,
            train_ratio: 0.8,
            otsu_scale: 1.05,
            log_alpha_init_mean: 0.0,
            log_alpha_init_sd: 0.1,
            standardize_target: true,
            hard_concrete: HardConcrete::default(),
        }
    }
}

impl NgmHyper {
    pub fn validate(&self) -> Result<(), GatingError> {
        let positive = [
            ("lambda_l0", self.lambda_l0),
            ("learning_rate", self.learning_rate),
            ("otsu_scale", self.otsu_scale),
            ("temperature", self.hard_concrete.temperature),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(GatingError::InvalidHyper(format!("{name} must be positive")));
            }
        }
        if self.l2_weight < 0.0 {
            return Err(GatingError::InvalidHyper("l2_weight must be non-negative".into()));
        }
        if self.epochs == 0 || self.batch_size < 2 || self.hidden_size == 0 {
            return Err(GatingError::InvalidHyper(
                "epochs and hidden_size must be positive, batch_size at least 2".into(),
            ));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(GatingError::InvalidHyper("train_ratio must lie in (0, 1)".into()));
        }
        let hc = self.hard_concrete;
        if !(hc.stretch_lo < 0.0 && hc.stretch_hi > 1.0) {
            return Err(GatingError::InvalidHyper("need stretch_lo < 0 < 1 < stretch_hi".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Offsets of each parameter block inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NgmLayout {
    pub n_inputs: usize,
    pub hidden: usize,
}

type Span = std::ops::Range<usize>;

impl NgmLayout {
    pub fn len(&self) -> usize {
        self.out_bias().end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn log_alpha(&self) -> Span {
        0..self.n_inputs
    }
    pub fn w1(&self) -> Span {
        let s = self.log_alpha().end;
        s..s + self.n_inputs * self.hidden
    }
    pub fn b1(&self) -> Span {
        let s = self.w1().end;
        s..s + self.hidden
    }
    pub fn gamma1(&self) -> Span {
        let s = self.b1().end;
        s..s + self.hidden
    }
    pub fn beta1(&self) -> Span {
        let s = self.gamma1().end;
        s..s + self.hidden
    }
    pub fn w2(&self) -> Span {
        let s = self.beta1().end;
        s..s + self.hidden * self.hidden
    }
    pub fn b2(&self) -> Span {
        let s = self.w2().end;
        s..s + self.hidden
    }
    pub fn gamma2(&self) -> Span {
        let s = self.b2().end;
        s..s + self.hidden
    }
    pub fn beta2(&self) -> Span {
        let s = self.gamma2().end;
        s..s + self.hidden
    }
    pub fn w_out(&self) -> Span {
        let s = self.beta2().end;
        s..s + self.hidden
    }
    pub fn out_bias(&self) -> Span {
        let s = self.w_out().end;
        s..s + 1
    }

    fn weight_blocks(&self) -> [Span; 3] {
        [self.w1(), self.w2(), self.w_out()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Gated MLP: gate → dense → BN → ReLU → dense → BN → ReLU → linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct NgmParams {
    pub layout: NgmLayout,
    pub hard_concrete: HardConcrete,
    /// All trainable values; see [`NgmLayout`].
    pub values: Vec<f64>,
    pub running: [RunningStats; 2],
}

/// Cached train-mode activations needed by the backward pass.
struct Cache {
    gated: Array2<f64>,
    xhat1: Array2<f64>,
    pre1: Array2<f64>,
    act1: Array2<f64>,
    xhat2: Array2<f64>,
    pre2: Array2<f64>,
    act2: Array2<f64>,
    inv_std1: Array1<f64>,
    inv_std2: Array1<f64>,
}

/// Output of a forward pass plus batch statistics (train mode).
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub output: Vec<f64>,
    pub batch_stats: Option<[RunningStats; 2]>,
}

fn view2(values: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), values).expect("layout shape")
}

fn view1(values: &[f64]) -> ArrayView1<'_, f64> {
    ArrayView1::from(values)
}

/// Batch-norm over rows; returns (normalised, per-column 1/std, batch stats).
fn batch_norm_train(a: &Array2<f64>) -> (Array2<f64>, Array1<f64>, RunningStats) {
    let rows = a.nrows() as f64;
    let mean = a.mean_axis(Axis(0)).expect("non-empty batch");
    let centered = a - &mean;
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / rows;
    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    let xhat = &centered * &inv_std;
    let unbiased = &var * (rows / (rows - 1.0));
    (
        xhat,
        inv_std,
        RunningStats {
            mean: mean.to_vec(),
            var: unbiased.to_vec(),
        },
    )
}

fn batch_norm_backward(dy: &Array2<f64>, xhat: &Array2<f64>, inv_std: &Array1<f64>, gamma: ArrayView1<f64>) -> Array2<f64> {
    let rows = dy.nrows() as f64;
    let dxhat = dy * &gamma;
    let sum_dxhat = dxhat.sum_axis(Axis(0));
    let sum_dxhat_xhat = (&dxhat * xhat).sum_axis(Axis(0));
    let mut da = dxhat * rows - &sum_dxhat - &(xhat * &sum_dxhat_xhat);
    da *= &(inv_std / rows);
    da
}

impl NgmParams {
    /// He-initialised network with `log α ~ Normal(mean, sd)`.
    pub fn init(n_inputs: usize, hyper: &NgmHyper, rng: &mut impl Rng) -> Self {
        let layout = NgmLayout {
            n_inputs,
            hidden: hyper.hidden_size,
        };
        let mut values = vec![0.0; layout.len()];
        let alpha = Normal::new(hyper.log_alpha_init_mean, hyper.log_alpha_init_sd).expect("sd >= 0");
        for v in &mut values[layout.log_alpha()] {
            *v = alpha.sample(rng);
        }
        let he = |fan_in: usize| Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("fan_in > 0");
        let d1 = he(n_inputs.max(1));
        for v in &mut values[layout.w1()] {
            *v = d1.sample(rng);
        }
        let d2 = he(layout.hidden);
        for v in &mut values[layout.w2()] {
            *v = d2.sample(rng);
        }
        let d3 = Normal::new(0.0, (1.0 / layout.hidden as f64).sqrt()).expect("hidden > 0");
        for v in &mut values[layout.w_out()] {
            *v = d3.sample(rng);
        }
        values[layout.gamma1()].fill(1.0);
        values[layout.gamma2()].fill(1.0);
        let stats = || RunningStats {
            mean: vec![0.0; layout.hidden],
            var: vec![1.0; layout.hidden],
        };
        Self {
            layout,
            hard_concrete: hyper.hard_concrete,
            values,
            running: [stats(), stats()],
        }
    }

    pub fn gate(&self) -> GateParams {
        GateParams::new(self.values[self.layout.log_alpha()].to_vec(), self.hard_concrete)
    }

    /// Network output for each row of `batch` after gating its columns.
    pub fn forward(&self, gates: &[f64], batch: ArrayView2<f64>, mode: Mode) -> Result<ForwardPass, GatingError> {
        self.check_inputs(gates, batch, mode)?;
        match mode {
            Mode::Train => {
                let (output, _, stats) = self.forward_train(&self.values, gates, batch);
                Ok(ForwardPass {
                    output: output.to_vec(),
                    batch_stats: Some(stats),
                })
            }
            Mode::Eval => Ok(ForwardPass {
                output: self.forward_eval(gates, batch),
                batch_stats: None,
            }),
        }
    }

    fn check_inputs(&self, gates: &[f64], batch: ArrayView2<f64>, mode: Mode) -> Result<(), GatingError> {
        if batch.ncols() != self.layout.n_inputs || gates.len() != self.layout.n_inputs {
            return Err(GatingError::Shape(format!(
                "network has {} inputs; batch has {} columns and {} gates",
                self.layout.n_inputs,
                batch.ncols(),
                gates.len()
            )));
        }
        if mode == Mode::Train && batch.nrows() < 2 {
            return Err(GatingError::BatchTooSmall(batch.nrows()));
        }
        Ok(())
    }

    fn forward_train(
        &self,
        values: &[f64],
        gates: &[f64],
        batch: ArrayView2<f64>,
    ) -> (Array1<f64>, Cache, [RunningStats; 2]) {
        let l = self.layout;
        let gated = &batch * &view1(gates);
        let a1 = gated.dot(&view2(&values[l.w1()], l.n_inputs, l.hidden)) + view1(&values[l.b1()]);
        let (xhat1, inv_std1, stats1) = batch_norm_train(&a1);
        let pre1 = &xhat1 * &view1(&values[l.gamma1()]) + view1(&values[l.beta1()]);
        let act1 = pre1.mapv(|x| x.max(0.0));
        let a2 = act1.dot(&view2(&values[l.w2()], l.hidden, l.hidden)) + view1(&values[l.b2()]);
        let (xhat2, inv_std2, stats2) = batch_norm_train(&a2);
        let pre2 = &xhat2 * &view1(&values[l.gamma2()]) + view1(&values[l.beta2()]);
        let act2 = pre2.mapv(|x| x.max(0.0));
        let output = act2.dot(&view1(&values[l.w_out()])) + values[l.out_bias()][0];
        (
            output,
            Cache {
                gated,
                xhat1,
                pre1,
                act1,
                xhat2,
                pre2,
                act2,
                inv_std1,
                inv_std2,
            },
            [stats1, stats2],
        )
    }

    fn forward_eval(&self, gates: &[f64], batch: ArrayView2<f64>) -> Vec<f64> {
        let l = self.layout;
        let v = &self.values;
        let norm = |a: Array2<f64>, stats: &RunningStats, gamma: Span, beta: Span| {
            let mean = Array1::from(stats.mean.clone());
            let inv_std = Array1::from(stats.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect::<Vec<_>>());
            (((a - &mean) * &inv_std) * view1(&v[gamma]) + view1(&v[beta])).mapv(|x| x.max(0.0))
        };
        let gated = &batch * &view1(gates);
        let a1 = gated.dot(&view2(&v[l.w1()], l.n_inputs, l.hidden)) + view1(&v[l.b1()]);
        let act1 = norm(a1, &self.running[0], l.gamma1(), l.beta1());
        let a2 = act1.dot(&view2(&v[l.w2()], l.hidden, l.hidden)) + view1(&v[l.b2()]);
        let act2 = norm(a2, &self.running[1], l.gamma2(), l.beta2());
        (act2.dot(&view1(&v[l.w_out()])) + v[l.out_bias()][0]).to_vec()
    }

    /// Exponential moving update of the batch-norm running statistics.
    pub fn update_running_stats(&mut self, batch_stats: &[RunningStats; 2]) {
        for (running, batch) in self.running.iter_mut().zip(batch_stats) {
            for (r, b) in running.mean.iter_mut().zip(&batch.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, b) in running.var.iter_mut().zip(&batch.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }

    /// Train-mode loss and gradient at `values` (a candidate parameter
    /// vector with this network's layout) for one batch and one gate draw.
    ///
    /// Loss is `MSE + λ Σ P(z≠0) + l2 (‖W1‖² + ‖W2‖² + ‖w_out‖²)`; the gate
    /// gradient flows through the reparameterised sample.
    pub fn loss_and_grad(
        &self,
        values: &[f64],
        batch: ArrayView2<f64>,
        targets: &[f64],
        uniforms: &[f64],
        hyper: &NgmHyper,
    ) -> Result<LossEval, GatingError> {
        let l = self.layout;
        let gate = GateParams::new(values[l.log_alpha()].to_vec(), self.hard_concrete);
        let sample = gate.sample(uniforms)?;
        self.check_inputs(&sample.values, batch, Mode::Train)?;
        if targets.len() != batch.nrows() {
            return Err(GatingError::Shape(format!("{} targets for {} rows", targets.len(), batch.nrows())));
        }
        let (output, c, batch_stats) = self.forward_train(values, &sample.values, batch);
        let rows = batch.nrows() as f64;
        let resid = &output - &view1(targets);
        let mse = resid.mapv(|r| r * r).sum() / rows;
        let pnz = gate.prob_nonzero();
        let l0: f64 = pnz.iter().sum();
        let l2: f64 = l.weight_blocks().iter().map(|b| values[b.clone()].iter().map(|w| w * w).sum::<f64>()).sum();
        let loss = mse + hyper.lambda_l0 * l0 + hyper.l2_weight * l2;

        let mut grad = vec![0.0; l.len()];
        let dout = resid * (2.0 / rows);
        grad[l.w_out()].copy_from_slice(c.act2.t().dot(&dout).as_slice().expect("contiguous"));
        grad[l.out_bias()][0] = dout.sum();
        let w_out = view1(&values[l.w_out()]);
        let dout_col = dout.insert_axis(Axis(1));
        let dpre2 = (&dout_col * &w_out) * c.pre2.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
        grad[l.gamma2()].copy_from_slice(&(&dpre2 * &c.xhat2).sum_axis(Axis(0)).to_vec());
        grad[l.beta2()].copy_from_slice(&dpre2.sum_axis(Axis(0)).to_vec());
        let da2 = batch_norm_backward(&dpre2, &c.xhat2, &c.inv_std2, view1(&values[l.gamma2()]));
        grad[l.w2()].copy_from_slice(&c.act1.t().dot(&da2).iter().copied().collect::<Vec<_>>());
        grad[l.b2()].copy_from_slice(&da2.sum_axis(Axis(0)).to_vec());
        let w2 = view2(&values[l.w2()], l.hidden, l.hidden);
        let dpre1 = da2.dot(&w2.t()) * c.pre1.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
        grad[l.gamma1()].copy_from_slice(&(&dpre1 * &c.xhat1).sum_axis(Axis(0)).to_vec());
        grad[l.beta1()].copy_from_slice(&dpre1.sum_axis(Axis(0)).to_vec());
        let da1 = batch_norm_backward(&dpre1, &c.xhat1, &c.inv_std1, view1(&values[l.gamma1()]));
        grad[l.w1()].copy_from_slice(&c.gated.t().dot(&da1).iter().copied().collect::<Vec<_>>());
        grad[l.b1()].copy_from_slice(&da1.sum_axis(Axis(0)).to_vec());
        let w1 = view2(&values[l.w1()], l.n_inputs, l.hidden);
        let dgated = da1.dot(&w1.t());
        let dz = (&dgated * &batch).sum_axis(Axis(0));
        let dpnz = prob_nonzero_grad(&gate.log_alpha, self.hard_concrete);
        for j in 0..l.n_inputs {
            grad[l.log_alpha()][j] = dz[j] * sample.dvalue_dlog_alpha[j] + hyper.lambda_l0 * dpnz[j];
        }
        for block in l.weight_blocks() {
            for (g, w) in grad[block.clone()].iter_mut().zip(&values[block]) {
                *g += 2.0 * hyper.l2_weight * w;
            }
        }
        Ok(LossEval {
            loss,
            mse,
            grad,
            batch_stats,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss: f64,
    pub mse: f64,
    pub grad: Vec<f64>,
    pub batch_stats: [RunningStats; 2],
}

/// Binary per-variable filter derived from the averaged gate probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateVector {
    pub probabilities: Vec<f64>,
    pub binary: Vec<bool>,
    pub threshold_used: f64,
    pub fallback_applied: bool,
}

impl GateVector {
    /// Every variable kept; used when gating is disabled.
    pub fn all_open(n: usize) -> Self {
        Self {
            probabilities: vec![1.0; n],
            binary: vec![true; n],
            threshold_used: 0.0,
            fallback_applied: false,
        }
    }

    /// Binarises averaged probabilities at `otsu · scale`. A degenerate split
    /// or an all-closed result falls back to keeping every variable.
    pub fn from_probabilities(probabilities: Vec<f64>, otsu_scale: f64) -> Result<Self, GatingError> {
        let split = otsu_threshold(&probabilities)?;
        let threshold_used = split.threshold * otsu_scale;
        let mut binary: Vec<bool> = if split.degenerate {
            vec![false; probabilities.len()]
        } else {
            probabilities.iter().map(|&p| p > threshold_used).collect()
        };
        let fallback_applied = !binary.iter().any(|&b| b);
        if fallback_applied {
            binary.fill(true);
        }
        Ok(Self {
            probabilities,
            binary,
            threshold_used,
            fallback_applied,
        })
    }

    pub fn kept(&self) -> Vec<usize> {
        (0..self.binary.len()).filter(|&j| self.binary[j]).collect()
    }
}

/// Full record of one gating run.
#[derive(Debug, Clone, PartialEq)]
pub struct GateTraining {
    pub gates: GateVector,
    /// `P(z≠0)` recorded at the end of every epoch.
    pub epoch_probabilities: Vec<Vec<f64>>,
    /// Eval-mode MSE on the validation split after every epoch, on the
    /// training target scale.
    pub validation_mse: Vec<f64>,
    pub params: NgmParams,
}

/// Trains the gating network on `data` and binarises the averaged gates.
///
/// Rows are shuffled once and split into a leading training part and a
/// trailing validation part. Each training batch draws fresh gate noise.
pub fn train_ngm(data: &Dataset, hyper: &NgmHyper, rng: RngStream) -> Result<GateTraining, GatingError> {
    hyper.validate()?;
    let rows = data.rows();
    let n_train = (rows as f64 * hyper.train_ratio).round() as usize;
    if n_train < 2 || rows - n_train < 2 {
        return Err(GatingError::TooFewRows(format!(
            "{rows} rows leave {n_train} training and {} validation rows",
            rows - n_train
        )));
    }
    let n = data.columns();
    let mut params = NgmParams::init(n, hyper, &mut rng.child(0).rng());
    let mut order: Vec<usize> = (0..rows).collect();
    order.shuffle(&mut rng.child(1).rng());
    let (train_idx, val_idx) = order.split_at(n_train);
    let val_x = data.x.select(Axis(0), val_idx);
    let target: Vec<f64> = if hyper.standardize_target && data.sigma_y > 0.0 {
        let m = mean(&data.y);
        data.y.iter().map(|y| (y - m) / data.sigma_y).collect()
    } else {
        data.y.clone()
    };
    let val_y: Vec<f64> = val_idx.iter().map(|&i| target[i]).collect();

    let mut adam = AdamState::new(AdamConfig::new(hyper.learning_rate, hyper.beta1, hyper.beta2), params.layout.len());
    let mut epoch_probabilities = Vec::with_capacity(hyper.epochs);
    let mut validation_mse = Vec::with_capacity(hyper.epochs);
    let mut batch_x = Array2::<f64>::zeros((hyper.batch_size, n));
    let mut batch_y = vec![0.0; hyper.batch_size];
    let mut uniforms = vec![0.0; n];
    for epoch in 0..hyper.epochs {
        let mut epoch_rng = rng.child(2 + epoch as u64).rng();
        let mut shuffled = train_idx.to_vec();
        shuffled.shuffle(&mut epoch_rng);
        for (b, chunk) in shuffled.chunks(hyper.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            for (r, &i) in chunk.iter().enumerate() {
                batch_x.row_mut(r).assign(&data.x.row(i));
                batch_y[r] = target[i];
            }
            let bx = batch_x.slice(s![..chunk.len(), ..]);
            for u in uniforms.iter_mut() {
                *u = Open01.sample(&mut epoch_rng);
            }
            let eval = params.loss_and_grad(&params.values, bx, &batch_y[..chunk.len()], &uniforms, hyper)?;
            if !eval.loss.is_finite() {
                return Err(GatingError::NonFiniteLoss { epoch, batch: b });
            }
            adam.update(&mut params.values, &eval.grad)?;
            params.update_running_stats(&eval.batch_stats);
        }
        epoch_probabilities.push(params.gate().prob_nonzero());
        let pred = params.forward(&params.gate().deterministic(), val_x.view(), Mode::Eval)?.output;
        let mse = pred.iter().zip(&val_y).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / val_y.len() as f64;
        validation_mse.push(mse);
    }
    let mut averaged = vec![0.0; n];
    for probs in &epoch_probabilities {
        for (a, p) in averaged.iter_mut().zip(probs) {
            *a += p;
        }
    }
    averaged.iter_mut().for_each(|a| *a /= epoch_probabilities.len() as f64);
    let gates = GateVector::from_probabilities(averaged, hyper.otsu_scale)?;
    Ok(GateTraining {
        gates,
        epoch_probabilities,
        validation_mse,
        params,
    })
}
