//! Risk-seeking policy-gradient search: rewards, top-ε filtering, clipped
//! surrogate with path and hierarchical entropy bonuses, early stopping and
//! exploration accounting.

use crate::bench::streams;
use crate::constraints::{MaskConfig, MaskError};
use crate::dataset::Dataset;
use crate::expr::{canonical_key, evaluate, render_infix, ExprError, TokenLibrary, Traversal};
use crate::gating::GateVector;
use crate::numerics::{AdamConfig, AdamState, NumericsError, RngStream};
use crate::policy::{init_policy, PolicyError, PolicyParams, TrajectoryRecord};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
    #[error("reward set has zero target variance")]
    ZeroVariance,
    #[error("gate vector has {got} entries for {expected} variables")]
    GateLength { expected: usize, got: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// How the clipped surrogate averages over the kept set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurrogateAverage {
    /// Mean over every (trajectory, step) pair.
    Step,
    /// Per-trajectory sum over steps, then mean over trajectories.
    Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub risk_epsilon: f64,
    pub clip: f64,
    pub ppo_epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub max_expressions: u64,
    pub recovery_tol: f64,
    pub hidden_size: usize,
    /// Plain policy gradient (one step per batch, no ratio clipping) when false.
    pub use_ppo: bool,
    pub surrogate_average: SurrogateAverage,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            batch_size: 1000,
            risk_epsilon: 0.05,
            clip: 0.2,
            ppo_epochs: 4,
            learning_rate: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            alpha: 0.05,
            beta: 0.02,
            gamma: 0.7,
            max_expressions: 2_000_000,
            recovery_tol: 1e-10,
            hidden_size: 32,
            use_ppo: true,
            surrogate_average: SurrogateAverage::Trajectory,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: &str| Err(RlError::InvalidConfig(m.into()));
        if !(self.risk_epsilon > 0.0 && self.risk_epsilon < 1.0) {
            return bad("risk_epsilon must be in (0, 1)");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must be in (0, 1)");
        }
        if !(self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if self.batch_size == 0 || self.ppo_epochs == 0 || self.max_expressions == 0 || self.hidden_size == 0 {
            return bad("batch_size, ppo_epochs, max_expressions and hidden_size must be positive");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must be in [0, 1)");
        }
        if !(self.recovery_tol >= 0.0) {
            return bad("recovery_tol must be non-negative");
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("entropy coefficients must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardEval {
    /// `None` when the expression is not finite on every point.
    pub nrmse: Option<f64>,
    pub reward: f64,
}

/// Normalised RMSE of raw predictions against `data.y`; `None` if any
/// prediction is non-finite.
pub fn nrmse_of_predictions(predictions: &[f64], data: &Dataset) -> Result<Option<f64>, RlError> {
    if !(data.sigma_y > 0.0) {
        return Err(RlError::ZeroVariance);
    }
    if predictions.iter().any(|p| !p.is_finite()) {
        return Ok(None);
    }
    let mse = predictions.iter().zip(&data.y).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / data.rows() as f64;
    let value = mse.sqrt() / data.sigma_y;
    Ok(value.is_finite().then_some(value))
}

/// Normalised RMSE of a traversal on `data`.
pub fn nrmse(traversal: &Traversal, lib: &TokenLibrary, data: &Dataset) -> Result<Option<f64>, RlError> {
    if !(data.sigma_y > 0.0) {
        return Err(RlError::ZeroVariance);
    }
    let eval = evaluate(traversal, lib, data.x.view())?;
    if !eval.valid {
        return Ok(None);
    }
    nrmse_of_predictions(&eval.values, data)
}

pub fn reward_from_nrmse(nrmse: Option<f64>) -> RewardEval {
    RewardEval {
        nrmse,
        reward: nrmse.map_or(0.0, |e| 1.0 / (1.0 + e)),
    }
}

/// `1 / (1 + NRMSE)`, or 0 for an invalid expression.
pub fn reward(traversal: &Traversal, lib: &TokenLibrary, data: &Dataset) -> Result<RewardEval, RlError> {
    Ok(reward_from_nrmse(nrmse(traversal, lib, data)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub baseline: f64,
    pub kept_indices: Vec<usize>,
    pub advantages: Vec<f64>,
    pub mean_reward: f64,
    pub max_reward: f64,
    pub hierarchical_entropy: f64,
    pub path_entropy: f64,
}

/// Number of samples kept out of `n`: `⌈εn⌉`, at least one.
pub fn kept_count(n: usize, epsilon: f64) -> usize {
    // The small offset keeps exact products such as 0.05 * 100 from rounding up.
    let k = (epsilon * n as f64 - 1e-9).ceil().max(1.0) as usize;
    k.min(n)
}

/// Top-ε selection with the lower-interpolated `(1-ε)`-quantile as
/// baseline. Entropy fields are left at zero.
pub fn quantile_filter(rewards: &[f64], epsilon: f64) -> BatchStats {
    let n = rewards.len();
    if n == 0 {
        return BatchStats {
            baseline: 0.0,
            kept_indices: Vec::new(),
            advantages: Vec::new(),
            mean_reward: f64::NAN,
            max_reward: f64::NAN,
            hierarchical_entropy: 0.0,
            path_entropy: 0.0,
        };
    }
    let mut sorted = rewards.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q_index = ((1.0 - epsilon) * (n - 1) as f64).floor() as usize;
    let baseline = sorted[q_index];
    let k = kept_count(n, epsilon);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| rewards[b].total_cmp(&rewards[a]).then(a.cmp(&b)));
    let mut kept_indices = order[..k].to_vec();
    kept_indices.sort_unstable();
    let advantages = kept_indices.iter().map(|&i| rewards[i] - baseline).collect();
    BatchStats {
        baseline,
        kept_indices,
        advantages,
        mean_reward: rewards.iter().sum::<f64>() / n as f64,
        max_reward: sorted[n - 1],
        hierarchical_entropy: 0.0,
        path_entropy: 0.0,
    }
}

/// Mean over trajectories of `Σ_t γ^t H_t` (first step weighted 1).
pub fn hierarchical_entropy(entropies: &[Vec<f64>], gamma: f64) -> f64 {
    if entropies.is_empty() {
        return 0.0;
    }
    let total: f64 = entropies
        .iter()
        .map(|steps| {
            let mut w = 1.0;
            let mut s = 0.0;
            for h in steps {
                s += w * h;
                w *= gamma;
            }
            s
        })
        .sum();
    total / entropies.len() as f64
}

/// Monte Carlo path entropy: mean of `-log π(τ)`.
pub fn path_entropy(sequence_log_probs: &[f64]) -> f64 {
    if sequence_log_probs.is_empty() {
        return 0.0;
    }
    -sequence_log_probs.iter().sum::<f64>() / sequence_log_probs.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub loss: f64,
    pub surrogate: f64,
    pub path_entropy: f64,
    pub hierarchical_entropy: f64,
    pub grad: Vec<f64>,
    /// Per kept trajectory, per step importance ratios.
    pub ratios: Vec<Vec<f64>>,
    pub skipped: usize,
}

/// Clipped surrogate minus the entropy bonuses, with its gradient.
///
/// `old_log_probs[i]` and `advantages[i]` belong to `trajectories[i]`. With
/// `use_ppo == false` the surrogate is the unclipped `-Â·log π` estimator.
pub fn ppo_loss(
    policy: &PolicyParams,
    values: &[f64],
    trajectories: &[&TrajectoryRecord],
    old_log_probs: &[Vec<f64>],
    advantages: &[f64],
    cfg: &TrainerConfig,
) -> Result<LossEval, RlError> {
    let per_traj: Vec<_> = trajectories
        .par_iter()
        .map(|t| policy.forward_tape(values, t))
        .collect::<Result<_, _>>()?;
    let k = trajectories.len().max(1) as f64;
    let total_steps: usize = trajectories.iter().map(|t| t.len()).sum();
    let surrogate_norm = match cfg.surrogate_average {
        SurrogateAverage::Step => total_steps.max(1) as f64,
        SurrogateAverage::Trajectory => k,
    };
    let mut surrogate = 0.0;
    let mut h_tau = 0.0;
    let mut h_hier = 0.0;
    let mut skipped = 0;
    let mut ratios = Vec::with_capacity(trajectories.len());
    let mut d_lp = Vec::with_capacity(trajectories.len());
    let mut d_ent = Vec::with_capacity(trajectories.len());
    for (i, tape) in per_traj.iter().enumerate() {
        let lps = tape.log_probs();
        let ents = tape.entropies();
        let adv = advantages[i];
        let mut r_i = Vec::with_capacity(lps.len());
        let mut dl = vec![0.0; lps.len()];
        let mut de = vec![0.0; lps.len()];
        let finite = lps.iter().zip(&old_log_probs[i]).all(|(l, o)| (l - o).exp().is_finite());
        if !finite {
            skipped += 1;
        }
        let mut w = 1.0;
        for t in 0..lps.len() {
            let r = (lps[t] - old_log_probs[i][t]).exp();
            r_i.push(r);
            if finite {
                if cfg.use_ppo {
                    let clipped = r.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
                    let unclipped_term = r * adv;
                    let clipped_term = clipped * adv;
                    if unclipped_term <= clipped_term {
                        surrogate -= unclipped_term / surrogate_norm;
                        dl[t] -= adv * r / surrogate_norm;
                    } else {
                        surrogate -= clipped_term / surrogate_norm;
                    }
                } else {
                    surrogate -= adv * lps[t] / surrogate_norm;
                    dl[t] -= adv / surrogate_norm;
                }
            }
            h_tau -= lps[t] / k;
            dl[t] += cfg.alpha / k;
            h_hier += w * ents[t] / k;
            de[t] -= cfg.beta * w / k;
            w *= cfg.gamma;
        }
        ratios.push(r_i);
        d_lp.push(dl);
        d_ent.push(de);
    }
    let mut grad = vec![0.0; values.len()];
    for ((tape, dl), de) in per_traj.iter().zip(&d_lp).zip(&d_ent) {
        policy.backward(values, tape, dl, de, &mut grad);
    }
    Ok(LossEval {
        loss: surrogate - cfg.alpha * h_tau - cfg.beta * h_hier,
        surrogate,
        path_entropy: h_tau,
        hierarchical_entropy: h_hier,
        grad,
        ratios,
        skipped,
    })
}

/// One line of the per-iteration training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub een: u64,
    pub uen: u64,
    pub r_eta: f64,
    pub best_reward: f64,
    pub mean_reward: f64,
    pub max_reward: f64,
    /// Hierarchical entropy over the kept set at sampling time.
    pub h: f64,
    /// Path entropy over the kept set at sampling time.
    pub h_tau: f64,
    /// Path entropy over the whole batch at sampling time.
    pub h_tau_batch: f64,
    /// Loss of the last optimiser step.
    pub loss: f64,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Recovered,
    BudgetExhausted,
    Aborted { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub recovered: bool,
    pub best_traversal: Option<String>,
    pub best_infix: Option<String>,
    pub best_reward: f64,
    pub expressions_consumed: u64,
    pub unique_expressions: u64,
    /// NMSE of the best expression on the held-out set; `None` if invalid.
    pub eval_nmse: Option<f64>,
    pub iterations: usize,
    pub wall_time_secs: f64,
    pub seed: u64,
    pub status: RunStatus,
}

impl RunReport {
    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.wall_time_secs = 0.0;
        let mut b = other.clone();
        b.wall_time_secs = 0.0;
        a == b
    }
}

/// Kept-set tensors for one update: trajectory refs, old log-probs, advantages.
type KeptBatch<'a> = (Vec<&'a TrajectoryRecord>, Vec<Vec<f64>>, Vec<f64>);

struct Search<'a> {
    cfg: &'a TrainerConfig,
    mask: &'a MaskConfig,
    lib: &'a TokenLibrary,
    reward_set: &'a Dataset,
    eval_set: &'a Dataset,
    gates: &'a [bool],
    seed: u64,
    policy: PolicyParams,
    adam: AdamState,
    cache: HashMap<Vec<u8>, RewardEval>,
    een: u64,
    best: Option<(Traversal, f64)>,
    recovered: Option<Traversal>,
    log: Vec<IterationLog>,
}

impl Search<'_> {
    fn iteration(
        &mut self,
        iteration: usize,
        inject: Option<&Traversal>,
        observer: &mut dyn FnMut(usize, &[TrajectoryRecord]),
    ) -> Result<(), RlError> {
        let remaining = (self.cfg.max_expressions - self.een) as usize;
        let n = self.cfg.batch_size.min(remaining);
        let stream = RngStream::new(self.seed, streams::SAMPLING_BASE + iteration as u64);
        let policy = &self.policy;
        let (lib, mask, gates) = (self.lib, self.mask, self.gates);
        let mut batch: Vec<TrajectoryRecord> = (0..n)
            .into_par_iter()
            .map(|i| policy.sample_trajectory(lib, mask, gates, &mut stream.child(i as u64).rng()))
            .collect::<Result<_, _>>()?;
        if let Some(t) = inject {
            batch[0] = policy.score_traversal(lib, mask, gates, t)?;
        }

        let keys: Vec<Vec<u8>> = batch.iter().map(|t| canonical_key(&t.traversal)).collect();
        let fresh: Vec<usize> = {
            let mut seen = std::collections::HashSet::new();
            (0..n)
                .filter(|&i| !self.cache.contains_key(&keys[i]) && seen.insert(&keys[i]))
                .collect()
        };
        let evals: Vec<RewardEval> = fresh
            .par_iter()
            .map(|&i| reward(&batch[i].traversal, lib, self.reward_set))
            .collect::<Result<_, _>>()?;
        for (&i, e) in fresh.iter().zip(evals) {
            self.cache.insert(keys[i].clone(), e);
        }
        let rewards: Vec<f64> = keys.iter().map(|k| self.cache[k].reward).collect();
        for (t, &r) in batch.iter_mut().zip(&rewards) {
            t.reward = r;
        }
        self.een += n as u64;
        observer(iteration, &batch);

        for (i, &r) in rewards.iter().enumerate() {
            if self.best.as_ref().is_none_or(|(_, b)| r > *b) {
                self.best = Some((batch[i].traversal.clone(), r));
            }
        }
        let threshold = 1.0 / (1.0 + self.cfg.recovery_tol);
        for (i, &r) in rewards.iter().enumerate() {
            if r >= threshold {
                let on_eval = nrmse(&batch[i].traversal, lib, self.eval_set)?;
                if on_eval.is_some_and(|e| e <= self.cfg.recovery_tol) {
                    self.recovered = Some(batch[i].traversal.clone());
                    self.best = Some((batch[i].traversal.clone(), r));
                    break;
                }
            }
        }

        let mut stats = quantile_filter(&rewards, self.cfg.risk_epsilon);
        let (kept, old, adv): KeptBatch = {
            let kept: Vec<&TrajectoryRecord> = stats.kept_indices.iter().map(|&i| &batch[i]).collect();
            let old = kept.iter().map(|t| t.steps.iter().map(|s| s.log_prob).collect()).collect();
            (kept, old, stats.advantages.clone())
        };
        stats.hierarchical_entropy = hierarchical_entropy(
            &kept
                .iter()
                .map(|t| t.steps.iter().map(|s| s.dist_entropy).collect())
                .collect::<Vec<_>>(),
            self.cfg.gamma,
        );
        stats.path_entropy = path_entropy(&kept.iter().map(|t| t.sequence_log_prob).collect::<Vec<_>>());
        let h_tau_batch = path_entropy(&batch.iter().map(|t| t.sequence_log_prob).collect::<Vec<_>>());

        let mut loss = f64::NAN;
        let mut skipped = 0;
        if self.recovered.is_none() {
            let epochs = if self.cfg.use_ppo { self.cfg.ppo_epochs } else { 1 };
            for _ in 0..epochs {
                let eval = ppo_loss(&self.policy, &self.policy.values, &kept, &old, &adv, self.cfg)?;
                loss = eval.loss;
                skipped += eval.skipped;
                self.adam.update(&mut self.policy.values, &eval.grad)?;
            }
        }
        self.log.push(IterationLog {
            iteration,
            een: self.een,
            uen: self.cache.len() as u64,
            r_eta: stats.baseline,
            best_reward: self.best.as_ref().map_or(0.0, |b| b.1),
            mean_reward: stats.mean_reward,
            max_reward: stats.max_reward,
            h: stats.hierarchical_entropy,
            h_tau: stats.path_entropy,
            h_tau_batch,
            loss,
            skipped,
        });
        Ok(())
    }

    fn report(&self, iterations: usize, started: Instant, status: RunStatus) -> RunReport {
        let (best_traversal, best_infix, best_reward, eval_nmse) = match &self.best {
            Some((t, r)) => (
                Some(t.to_text(self.lib)),
                render_infix(t, self.lib).ok(),
                *r,
                nrmse(t, self.lib, self.eval_set).ok().flatten().map(|e| e * e),
            ),
            None => (None, None, 0.0, None),
        };
        RunReport {
            recovered: self.recovered.is_some(),
            best_traversal,
            best_infix,
            best_reward,
            expressions_consumed: self.een,
            unique_expressions: self.cache.len() as u64,
            eval_nmse,
            iterations,
            wall_time_secs: started.elapsed().as_secs_f64(),
            seed: self.seed,
            status,
        }
    }
}

/// Everything a finished (or aborted) run produces.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub report: RunReport,
    pub log: Vec<IterationLog>,
    pub policy: PolicyParams,
}

/// Runs the search until recovery or until the expression budget is spent.
///
/// `inject` replaces the first sample of the first batch, which lets tests
/// exercise early stopping. Errors raised inside the loop end the run with
/// an `Aborted` status and the partial report.
#[allow(clippy::too_many_arguments)]
pub fn train(
    cfg: &TrainerConfig,
    mask: &MaskConfig,
    lib: &TokenLibrary,
    reward_set: &Dataset,
    eval_set: &Dataset,
    gates: &GateVector,
    seed: u64,
    inject: Option<&Traversal>,
) -> Result<(RunReport, Vec<IterationLog>), RlError> {
    let out = train_observed(cfg, mask, lib, reward_set, eval_set, gates, seed, inject, &mut |_, _| {})?;
    Ok((out.report, out.log))
}

/// [`train`] with a callback that sees every rewarded batch.
#[allow(clippy::too_many_arguments)]
pub fn train_observed(
    cfg: &TrainerConfig,
    mask: &MaskConfig,
    lib: &TokenLibrary,
    reward_set: &Dataset,
    eval_set: &Dataset,
    gates: &GateVector,
    seed: u64,
    inject: Option<&Traversal>,
    observer: &mut dyn FnMut(usize, &[TrajectoryRecord]),
) -> Result<TrainOutput, RlError> {
    cfg.validate()?;
    mask.validate()?;
    if !(reward_set.sigma_y > 0.0) || !(eval_set.sigma_y > 0.0) {
        return Err(RlError::ZeroVariance);
    }
    if gates.binary.len() != lib.n_variables() {
        return Err(RlError::GateLength {
            expected: lib.n_variables(),
            got: gates.binary.len(),
        });
    }
    let started = Instant::now();
    let policy = init_policy(lib, cfg.hidden_size, RngStream::new(seed, streams::POLICY_INIT));
    let adam = AdamState::new(
        AdamConfig::new(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2),
        policy.values.len(),
    );
    let mut search = Search {
        cfg,
        mask,
        lib,
        reward_set,
        eval_set,
        gates: &gates.binary,
        seed,
        policy,
        adam,
        cache: HashMap::new(),
        een: 0,
        best: None,
        recovered: None,
        log: Vec::new(),
    };
    let mut iteration = 0;
    let mut status = RunStatus::BudgetExhausted;
    while search.een < cfg.max_expressions {
        let injected = if iteration == 0 { inject } else { None };
        if let Err(e) = search.iteration(iteration, injected, observer) {
            status = RunStatus::Aborted {
                reason: e.to_string(),
            };
            break;
        }
        iteration += 1;
        if search.recovered.is_some() {
            status = RunStatus::Recovered;
            break;
        }
    }
    Ok(TrainOutput {
        report: search.report(iteration, started, status),
        log: search.log,
        policy: search.policy,
    })
}
