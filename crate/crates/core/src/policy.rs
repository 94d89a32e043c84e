//! Single-layer LSTM policy over library tokens.
//!
//! Observations are one-hot encodings of the parent and left-sibling tokens
//! of the slot being filled. Masked tokens get a logit of `-inf`, so their
//! probability is exactly zero and entropies cover the legal support only.

use crate::constraints::{apply_gate, ActionMask, MaskConfig, MaskError, TreeCursor};
use crate::expr::{TokenId, TokenLibrary, Traversal};
use crate::numerics::{log_softmax_into, sigmoid, NumericsError, RngStream};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("non-finite recurrent state at step {0}")]
    NonFiniteState(usize),
    #[error("token `{token}` is illegal at step {step}")]
    IllegalToken { token: String, step: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Parent/sibling token indices; `n_tokens` stands for "empty".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub parent: usize,
    pub sibling: usize,
}

impl Observation {
    pub fn from_cursor(cursor: &TreeCursor, lib: &TokenLibrary) -> Self {
        let empty = lib.len();
        Self {
            parent: cursor.parent().map_or(empty, TokenId::index),
            sibling: cursor.sibling(lib).map_or(empty, TokenId::index),
        }
    }

    /// Dense `2(|L| + 1)` feature vector.
    pub fn features(&self, n_tokens: usize) -> Vec<f64> {
        let mut v = vec![0.0; 2 * (n_tokens + 1)];
        v[self.parent] = 1.0;
        v[n_tokens + 1 + self.sibling] = 1.0;
        v
    }
}

/// Observation for the next slot of a partial traversal.
pub fn encode_observation(partial: &Traversal, lib: &TokenLibrary) -> Result<Vec<f64>, PolicyError> {
    let cursor = TreeCursor::from_partial(partial, lib)?;
    Ok(Observation::from_cursor(&cursor, lib).features(lib.len()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub observation: Observation,
    pub action: TokenId,
    pub log_prob: f64,
    pub dist_entropy: f64,
    pub mask: ActionMask,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub steps: Vec<StepRecord>,
    pub traversal: Traversal,
    pub sequence_log_prob: f64,
    pub reward: f64,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Recurrent state `(h, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

type Span = std::ops::Range<usize>;

/// Block offsets inside the flat parameter vector. Matrices are stored
/// input-major: row `k` holds the weights leaving input unit `k`. Gate
/// columns are ordered input, forget, cell, output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub n_tokens: usize,
    pub hidden: usize,
}

impl PolicyShape {
    pub fn input_dim(&self) -> usize {
        2 * (self.n_tokens + 1)
    }
    fn gates(&self) -> usize {
        4 * self.hidden
    }
    pub fn w_in(&self) -> Span {
        0..self.input_dim() * self.gates()
    }
    pub fn w_rec(&self) -> Span {
        let s = self.w_in().end;
        s..s + self.hidden * self.gates()
    }
    pub fn bias(&self) -> Span {
        let s = self.w_rec().end;
        s..s + self.gates()
    }
    pub fn w_out(&self) -> Span {
        let s = self.bias().end;
        s..s + self.hidden * self.n_tokens
    }
    pub fn b_out(&self) -> Span {
        let s = self.w_out().end;
        s..s + self.n_tokens
    }
    pub fn len(&self) -> usize {
        self.b_out().end
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub shape: PolicyShape,
    pub values: Vec<f64>,
}

const INIT_RANGE: f64 = 0.08;

/// Per-step activations kept for backpropagation through time.
#[derive(Debug, Clone)]
struct StepTape {
    obs: Observation,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Post-activation gate values `[i, f, g, o]`.
    act: Vec<f64>,
    tanh_c: Vec<f64>,
    log_probs: Vec<f64>,
    entropy: f64,
    action: usize,
}

#[derive(Debug, Clone)]
pub struct Tape {
    steps: Vec<StepTape>,
}

impl Tape {
    pub fn log_probs(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.log_probs[s.action]).collect()
    }

    pub fn entropies(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.entropy).collect()
    }
}

fn masked_logits(logits: &mut [f64], mask: &[bool]) {
    for (l, &ok) in logits.iter_mut().zip(mask) {
        if !ok {
            *l = f64::NEG_INFINITY;
        }
    }
}

fn entropy_of(log_probs: &[f64]) -> f64 {
    let mut h = 0.0;
    for &lp in log_probs {
        if lp > f64::NEG_INFINITY {
            h -= lp.exp() * lp;
        }
    }
    h.max(0.0)
}

impl PolicyParams {
    /// Uniform(±0.08) weights, zero biases except forget-gate bias 1.
    pub fn init(shape: PolicyShape, rng: &mut impl Rng) -> Self {
        let mut values = vec![0.0; shape.len()];
        for span in [shape.w_in(), shape.w_rec(), shape.w_out()] {
            for v in &mut values[span] {
                *v = rng.gen_range(-INIT_RANGE..INIT_RANGE);
            }
        }
        let bias = shape.bias();
        let h = shape.hidden;
        values[bias.start + h..bias.start + 2 * h].fill(1.0);
        Self { shape, values }
    }

    pub fn zeros(shape: PolicyShape) -> Self {
        Self {
            shape,
            values: vec![0.0; shape.len()],
        }
    }

    /// One LSTM step followed by the output projection.
    pub fn policy_step(&self, obs: Observation, state: &LstmState) -> Result<(Vec<f64>, LstmState), PolicyError> {
        let mut next = LstmState::zeros(self.shape.hidden);
        let mut act = vec![0.0; self.shape.gates()];
        let mut tanh_c = vec![0.0; self.shape.hidden];
        let mut logits = vec![0.0; self.shape.n_tokens];
        self.step_into(&self.values, obs, state, &mut next, &mut act, &mut tanh_c, &mut logits);
        if next.h.iter().chain(&next.c).any(|v| !v.is_finite()) {
            return Err(PolicyError::NonFiniteState(0));
        }
        Ok((logits, next))
    }

    #[allow(clippy::too_many_arguments)]
    fn step_into(
        &self,
        values: &[f64],
        obs: Observation,
        state: &LstmState,
        next: &mut LstmState,
        act: &mut [f64],
        tanh_c: &mut [f64],
        logits: &mut [f64],
    ) {
        let shape = self.shape;
        let g = shape.gates();
        let h = shape.hidden;
        let w_in = &values[shape.w_in()];
        let w_rec = &values[shape.w_rec()];
        act.copy_from_slice(&values[shape.bias()]);
        let parent_row = &w_in[obs.parent * g..(obs.parent + 1) * g];
        let sib = shape.n_tokens + 1 + obs.sibling;
        let sibling_row = &w_in[sib * g..(sib + 1) * g];
        for ((a, p), s) in act.iter_mut().zip(parent_row).zip(sibling_row) {
            *a += p + s;
        }
        for (k, &hk) in state.h.iter().enumerate() {
            if hk != 0.0 {
                let row = &w_rec[k * g..(k + 1) * g];
                for (a, w) in act.iter_mut().zip(row) {
                    *a += hk * w;
                }
            }
        }
        for v in &mut act[..2 * h] {
            *v = sigmoid(*v);
        }
        for v in &mut act[2 * h..3 * h] {
            *v = v.tanh();
        }
        for v in &mut act[3 * h..] {
            *v = sigmoid(*v);
        }
        for j in 0..h {
            let c = act[h + j] * state.c[j] + act[j] * act[2 * h + j];
            next.c[j] = c;
            tanh_c[j] = c.tanh();
            next.h[j] = act[3 * h + j] * tanh_c[j];
        }
        let w_out = &values[shape.w_out()];
        let v = shape.n_tokens;
        logits.copy_from_slice(&values[shape.b_out()]);
        for (k, &hk) in next.h.iter().enumerate() {
            let row = &w_out[k * v..(k + 1) * v];
            for (l, w) in logits.iter_mut().zip(row) {
                *l += hk * w;
            }
        }
    }

    /// Samples one complete traversal under the structural mask and gate.
    pub fn sample_trajectory(
        &self,
        lib: &TokenLibrary,
        cfg: &MaskConfig,
        gates: &[bool],
        rng: &mut impl Rng,
    ) -> Result<TrajectoryRecord, PolicyError> {
        self.roll_out(lib, cfg, gates, |_, log_probs, _| {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut last = None;
            for (i, &lp) in log_probs.iter().enumerate() {
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                acc += lp.exp();
                last = Some(i);
                if u < acc {
                    return Ok(i);
                }
            }
            last.ok_or(PolicyError::Numerics(NumericsError::NoLegalAction))
        })
    }

    /// Teacher-forces `traversal` through the policy, recording the masks it
    /// would have been sampled under. Fails if any token is illegal.
    pub fn score_traversal(
        &self,
        lib: &TokenLibrary,
        cfg: &MaskConfig,
        gates: &[bool],
        traversal: &Traversal,
    ) -> Result<TrajectoryRecord, PolicyError> {
        let record = self.roll_out(lib, cfg, gates, |step, log_probs, _| {
            let Some(&id) = traversal.tokens.get(step) else {
                return Err(PolicyError::IllegalToken {
                    token: "<end>".into(),
                    step,
                });
            };
            if log_probs[id.index()] == f64::NEG_INFINITY {
                return Err(PolicyError::IllegalToken {
                    token: lib.token(id).name.clone(),
                    step,
                });
            }
            Ok(id.index())
        })?;
        if record.traversal.len() != traversal.len() {
            return Err(PolicyError::IllegalToken {
                token: "<trailing tokens>".into(),
                step: record.traversal.len(),
            });
        }
        Ok(record)
    }

    fn roll_out<F>(
        &self,
        lib: &TokenLibrary,
        cfg: &MaskConfig,
        gates: &[bool],
        mut choose: F,
    ) -> Result<TrajectoryRecord, PolicyError>
    where
        F: FnMut(usize, &[f64], &[bool]) -> Result<usize, PolicyError>,
    {
        let shape = self.shape;
        let mut cursor = TreeCursor::new();
        let mut state = LstmState::zeros(shape.hidden);
        let mut next = LstmState::zeros(shape.hidden);
        let mut act = vec![0.0; shape.gates()];
        let mut tanh_c = vec![0.0; shape.hidden];
        let mut logits = vec![0.0; shape.n_tokens];
        let mut log_probs = vec![0.0; shape.n_tokens];
        let mut steps = Vec::with_capacity(cfg.max_length);
        let mut tokens = Vec::with_capacity(cfg.max_length);
        let mut total = 0.0;
        while !cursor.is_complete() {
            let t = steps.len();
            let obs = Observation::from_cursor(&cursor, lib);
            self.step_into(&self.values, obs, &state, &mut next, &mut act, &mut tanh_c, &mut logits);
            if next.h.iter().any(|v| !v.is_finite()) {
                return Err(PolicyError::NonFiniteState(t));
            }
            let mut legal = vec![false; shape.n_tokens];
            cursor.structural_mask_into(lib, cfg, &mut legal)?;
            apply_gate(&mut legal, lib, gates)?;
            masked_logits(&mut logits, &legal);
            log_softmax_into(&logits, &mut log_probs)?;
            let action = choose(t, &log_probs, &legal)?;
            let lp = log_probs[action];
            total += lp;
            steps.push(StepRecord {
                observation: obs,
                action: TokenId(action as u8),
                log_prob: lp,
                dist_entropy: entropy_of(&log_probs),
                mask: ActionMask { legal },
            });
            tokens.push(TokenId(action as u8));
            cursor.push(TokenId(action as u8), lib);
            std::mem::swap(&mut state, &mut next);
        }
        Ok(TrajectoryRecord {
            steps,
            traversal: Traversal::new(tokens),
            sequence_log_prob: total,
            reward: 0.0,
        })
    }

    /// Teacher-forced forward pass with the stored masks.
    pub fn forward_tape(&self, values: &[f64], trajectory: &TrajectoryRecord) -> Result<Tape, PolicyError> {
        let shape = self.shape;
        let mut state = LstmState::zeros(shape.hidden);
        let mut next = LstmState::zeros(shape.hidden);
        let mut logits = vec![0.0; shape.n_tokens];
        let mut steps = Vec::with_capacity(trajectory.len());
        for (t, rec) in trajectory.steps.iter().enumerate() {
            let mut act = vec![0.0; shape.gates()];
            let mut tanh_c = vec![0.0; shape.hidden];
            self.step_into(values, rec.observation, &state, &mut next, &mut act, &mut tanh_c, &mut logits);
            if next.h.iter().any(|v| !v.is_finite()) {
                return Err(PolicyError::NonFiniteState(t));
            }
            masked_logits(&mut logits, &rec.mask.legal);
            let mut log_probs = vec![0.0; shape.n_tokens];
            log_softmax_into(&logits, &mut log_probs)?;
            let entropy = entropy_of(&log_probs);
            steps.push(StepTape {
                obs: rec.observation,
                h_prev: state.h.clone(),
                c_prev: state.c.clone(),
                act,
                tanh_c,
                log_probs,
                entropy,
                action: rec.action.index(),
            });
            std::mem::swap(&mut state, &mut next);
        }
        Ok(Tape { steps })
    }

    /// Per-step log-probabilities and entropies of a stored trajectory under
    /// the current parameters.
    pub fn rescore(&self, trajectory: &TrajectoryRecord) -> Result<(Vec<f64>, Vec<f64>), PolicyError> {
        let tape = self.forward_tape(&self.values, trajectory)?;
        Ok((tape.log_probs(), tape.entropies()))
    }

    /// Accumulates into `grad` the gradient of
    /// `Σ_t d_log_prob[t]·log π(a_t|s_t) + d_entropy[t]·H_t`.
    pub fn backward(&self, values: &[f64], tape: &Tape, d_log_prob: &[f64], d_entropy: &[f64], grad: &mut [f64]) {
        let shape = self.shape;
        let h = shape.hidden;
        let g = shape.gates();
        let v = shape.n_tokens;
        let w_rec = &values[shape.w_rec()];
        let w_out = &values[shape.w_out()];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut dlogits = vec![0.0; v];
        let mut dh = vec![0.0; h];
        let mut dz = vec![0.0; g];
        // h_t of each step is h_prev of the next one; the last is rebuilt.
        for t in (0..tape.steps.len()).rev() {
            let st = &tape.steps[t];
            let h_t: Vec<f64> = (0..h).map(|j| st.act[3 * h + j] * st.tanh_c[j]).collect();
            let entropy = st.entropy;
            for (j, (d, &lp)) in dlogits.iter_mut().zip(&st.log_probs).enumerate() {
                if lp == f64::NEG_INFINITY {
                    *d = 0.0;
                    continue;
                }
                let p = lp.exp();
                let onehot = if j == st.action { 1.0 } else { 0.0 };
                *d = d_log_prob[t] * (onehot - p) - d_entropy[t] * p * (lp + entropy);
            }
            {
                let gb = &mut grad[shape.b_out()];
                for (gj, d) in gb.iter_mut().zip(&dlogits) {
                    *gj += d;
                }
            }
            {
                let gw = &mut grad[shape.w_out()];
                for k in 0..h {
                    let row = &mut gw[k * v..(k + 1) * v];
                    for (gw, d) in row.iter_mut().zip(&dlogits) {
                        *gw += h_t[k] * d;
                    }
                }
            }
            for k in 0..h {
                let row = &w_out[k * v..(k + 1) * v];
                dh[k] = dh_next[k] + row.iter().zip(&dlogits).map(|(w, d)| w * d).sum::<f64>();
            }
            let (i_g, f_g, c_g, o_g) = (&st.act[..h], &st.act[h..2 * h], &st.act[2 * h..3 * h], &st.act[3 * h..]);
            for j in 0..h {
                let d_o = dh[j] * st.tanh_c[j];
                let dc = dc_next[j] + dh[j] * o_g[j] * (1.0 - st.tanh_c[j] * st.tanh_c[j]);
                let d_i = dc * c_g[j];
                let d_g = dc * i_g[j];
                let d_f = dc * st.c_prev[j];
                dc_next[j] = dc * f_g[j];
                dz[j] = d_i * i_g[j] * (1.0 - i_g[j]);
                dz[h + j] = d_f * f_g[j] * (1.0 - f_g[j]);
                dz[2 * h + j] = d_g * (1.0 - c_g[j] * c_g[j]);
                dz[3 * h + j] = d_o * o_g[j] * (1.0 - o_g[j]);
            }
            {
                let gb = &mut grad[shape.bias()];
                for (gj, d) in gb.iter_mut().zip(&dz) {
                    *gj += d;
                }
            }
            {
                let w_in_start = shape.w_in().start;
                let sib = shape.n_tokens + 1 + st.obs.sibling;
                for row in [st.obs.parent, sib] {
                    let off = w_in_start + row * g;
                    for (gj, d) in grad[off..off + g].iter_mut().zip(&dz) {
                        *gj += d;
                    }
                }
            }
            {
                let off = shape.w_rec().start;
                for k in 0..h {
                    let hk = st.h_prev[k];
                    let row = &mut grad[off + k * g..off + (k + 1) * g];
                    for (gj, d) in row.iter_mut().zip(&dz) {
                        *gj += hk * d;
                    }
                    let wrow = &w_rec[k * g..(k + 1) * g];
                    dh_next[k] = wrow.iter().zip(&dz).map(|(w, d)| w * d).sum();
                }
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let text = serde_json::to_string_pretty(&Checkpoint::from_params(self))
            .map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        ckpt.into_params()
    }
}

/// Policy initialised from a seeded stream.
pub fn init_policy(lib: &TokenLibrary, hidden: usize, rng: RngStream) -> PolicyParams {
    PolicyParams::init(
        PolicyShape {
            n_tokens: lib.len(),
            hidden,
        },
        &mut rng.rng(),
    )
}

pub const CHECKPOINT_FORMAT: &str = "symreg-policy";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointBlock {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

/// Versioned, self-describing dump of every weight block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub n_tokens: usize,
    pub hidden: usize,
    pub blocks: Vec<CheckpointBlock>,
}

impl Checkpoint {
    fn layout(shape: PolicyShape) -> [(&'static str, [usize; 2], Span); 5] {
        [
            ("input_weights", [shape.input_dim(), shape.gates()], shape.w_in()),
            ("recurrent_weights", [shape.hidden, shape.gates()], shape.w_rec()),
            ("recurrent_bias", [1, shape.gates()], shape.bias()),
            ("output_weights", [shape.hidden, shape.n_tokens], shape.w_out()),
            ("output_bias", [1, shape.n_tokens], shape.b_out()),
        ]
    }

    pub fn from_params(params: &PolicyParams) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            n_tokens: params.shape.n_tokens,
            hidden: params.shape.hidden,
            blocks: Self::layout(params.shape)
                .into_iter()
                .map(|(name, shape, span)| CheckpointBlock {
                    name: name.into(),
                    shape,
                    values: params.values[span].to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_params(self) -> Result<PolicyParams, PolicyError> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(PolicyError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let shape = PolicyShape {
            n_tokens: self.n_tokens,
            hidden: self.hidden,
        };
        let mut values = vec![0.0; shape.len()];
        let layout = Self::layout(shape);
        if self.blocks.len() != layout.len() {
            return Err(PolicyError::Checkpoint(format!("expected {} blocks", layout.len())));
        }
        for (block, (name, dims, span)) in self.blocks.iter().zip(layout) {
            if block.name != name || block.shape != dims || block.values.len() != span.len() {
                return Err(PolicyError::Checkpoint(format!(
                    "block `{}` {:?} does not match expected `{name}` {dims:?}",
                    block.name, block.shape
                )));
            }
            values[span].copy_from_slice(&block.values);
        }
        Ok(PolicyParams { shape, values })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lib() -> TokenLibrary {
        TokenLibrary::standard(2)
    }

    fn shape(lib: &TokenLibrary, hidden: usize) -> PolicyShape {
        PolicyShape {
            n_tokens: lib.len(),
            hidden,
        }
    }

    fn parse(text: &str, lib: &TokenLibrary) -> Traversal {
        Traversal::parse(text, lib).unwrap()
    }

    /// Parent and left sibling of the next slot by replaying arities on a
    /// stack of (token, children seen so far).
    fn position_oracle(prefix: &[TokenId], lib: &TokenLibrary) -> (Option<TokenId>, Option<TokenId>) {
        let mut stack: Vec<(TokenId, Vec<TokenId>)> = Vec::new();
        for &id in prefix {
            if let Some(top) = stack.last_mut() {
                top.1.push(id);
            }
            stack.push((id, Vec::new()));
            while let Some((tok, kids)) = stack.last() {
                if kids.len() == lib.arity(*tok) {
                    stack.pop();
                } else {
                    break;
                }
            }
        }
        match stack.last() {
            None => (None, None),
            Some((tok, kids)) => (Some(*tok), kids.last().copied()),
        }
    }

    #[test]
    fn observation_examples() {
        let lib = lib();
        let empty = lib.len();
        let v = encode_observation(&Traversal::new(vec![]), &lib).unwrap();
        assert_eq!(v.len(), 2 * (lib.len() + 1));
        assert_eq!(v[empty], 1.0);
        assert_eq!(v[empty + 1 + empty], 1.0);
        assert_eq!(v.iter().sum::<f64>(), 2.0);

        let add = lib.by_name("add").unwrap().index();
        let x1 = lib.by_name("x1").unwrap().index();
        let v = encode_observation(&parse("add x1", &lib), &lib).unwrap();
        assert_eq!((v[add], v[empty + 1 + x1]), (1.0, 1.0));

        let sin = lib.by_name("sin").unwrap().index();
        let v = encode_observation(&parse("sin", &lib), &lib).unwrap();
        assert_eq!((v[sin], v[empty + 1 + empty]), (1.0, 1.0));
    }

    #[test]
    fn observation_matches_position_oracle() {
        let lib = lib();
        let cfg = MaskConfig::default();
        let p = PolicyParams::init(shape(&lib, 8), &mut ChaCha8Rng::seed_from_u64(3));
        let empty = lib.len();
        for seed in 0..200 {
            let t = p
                .sample_trajectory(&lib, &cfg, &[true, true], &mut ChaCha8Rng::seed_from_u64(seed))
                .unwrap();
            for (i, step) in t.steps.iter().enumerate() {
                let (parent, sibling) = position_oracle(&t.traversal.tokens[..i], &lib);
                assert_eq!(step.observation.parent, parent.map_or(empty, TokenId::index));
                assert_eq!(step.observation.sibling, sibling.map_or(empty, TokenId::index));
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let lib = lib();
        let p = PolicyParams::zeros(shape(&lib, 4));
        let obs = Observation { parent: 0, sibling: 3 };
        let (logits, _) = p.policy_step(obs, &LstmState::zeros(4)).unwrap();
        assert!(logits.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn hand_computed_step() {
        let s = PolicyShape { n_tokens: 3, hidden: 2 };
        let mut p = PolicyParams::zeros(s);
        // Parent "empty" (index 3) row feeds 0.5 into every gate; forget bias 1.
        let row = s.w_in().start + 3 * 8;
        p.values[row..row + 8].fill(0.5);
        let b = s.bias().start;
        p.values[b + 2..b + 4].fill(1.0);
        p.values[s.w_out()].copy_from_slice(&[1.0, 0.0, -1.0, 2.0, 1.0, 0.0]);
        p.values[s.b_out().start + 1] = 0.1;
        let obs = Observation { parent: 3, sibling: 3 };
        let (logits, state) = p.policy_step(obs, &LstmState::zeros(2)).unwrap();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let c = sig(0.5) * 0.5f64.tanh();
        let h = sig(0.5) * c.tanh();
        assert!((state.c[0] - c).abs() < 1e-15 && (state.c[1] - c).abs() < 1e-15);
        let want = [3.0 * h, h + 0.1, -h];
        for (l, w) in logits.iter().zip(want) {
            assert!((l - w).abs() < 1e-15, "{l} vs {w}");
        }
        let again = p.policy_step(obs, &LstmState::zeros(2)).unwrap();
        assert_eq!(again.0, logits);
    }

    #[test]
    fn uniform_policy_frequencies() {
        let lib = TokenLibrary::standard(1);
        let cfg = MaskConfig::default();
        let p = PolicyParams::zeros(shape(&lib, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 100_000;
        let mut counts = vec![0usize; lib.len()];
        for _ in 0..n {
            // Only the first step matters here; the rest of the tree is cheap.
            let t = p.sample_trajectory(&lib, &cfg, &[true], &mut rng).unwrap();
            counts[t.steps[0].action.index()] += 1;
            assert_eq!(t.steps[0].mask.count(), 8);
        }
        let x1 = lib.by_name("x1").unwrap().index();
        assert_eq!(counts[x1], 0);
        let q = 1.0 / 8.0;
        let sd = (n as f64 * q * (1.0 - q)).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            if i != x1 {
                assert!((c as f64 - n as f64 * q).abs() < 3.0 * sd, "token {i}: {c}");
            }
        }
    }

    #[test]
    fn sampled_steps_respect_masks() {
        let lib = lib();
        let cfg = MaskConfig::default();
        let p = PolicyParams::init(shape(&lib, 8), &mut ChaCha8Rng::seed_from_u64(8));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10_000 {
            let t = p.sample_trajectory(&lib, &cfg, &[false, true], &mut rng).unwrap();
            assert!(t.len() >= cfg.min_length && t.len() <= cfg.max_length);
            assert_eq!(crate::expr::needed_slots(&t.traversal, &lib).unwrap(), 0);
            let mut prob = 1.0;
            let mut total = 0.0;
            for s in &t.steps {
                assert!(s.mask.legal[s.action.index()]);
                assert!(s.log_prob <= 0.0 && s.dist_entropy >= 0.0);
                assert_ne!(s.action, lib.by_name("x1").unwrap());
                prob *= s.log_prob.exp();
                total += s.log_prob;
            }
            assert_eq!(total, t.sequence_log_prob);
            assert!((t.sequence_log_prob.exp() - prob).abs() <= 1e-12 * prob.max(1e-300));
        }
    }

    #[test]
    fn uniform_entropy_is_log_k() {
        let lib = TokenLibrary::standard(1);
        let p = PolicyParams::zeros(shape(&lib, 4));
        let t = p
            .sample_trajectory(&lib, &MaskConfig::default(), &[true], &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        for s in &t.steps {
            let k = s.mask.count() as f64;
            assert!((s.dist_entropy - k.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn rescore_reproduces_sampling() {
        let lib = lib();
        let cfg = MaskConfig::default();
        let mut p = PolicyParams::init(shape(&lib, 16), &mut ChaCha8Rng::seed_from_u64(1));
        let t = p
            .sample_trajectory(&lib, &cfg, &[true, true], &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap();
        let (lps, ents) = p.rescore(&t).unwrap();
        for ((s, lp), h) in t.steps.iter().zip(&lps).zip(&ents) {
            assert_eq!((s.log_prob - lp).exp(), 1.0);
            assert_eq!(s.dist_entropy, *h);
        }
        let w = p.shape.w_out().start;
        p.values[w] += 1e-3;
        let (changed, _) = p.rescore(&t).unwrap();
        assert!(changed.iter().zip(&lps).any(|(a, b)| a != b));
    }

    #[test]
    fn score_traversal_rejects_illegal_tokens() {
        let lib = lib();
        let cfg = MaskConfig::default();
        let p = PolicyParams::zeros(shape(&lib, 4));
        let ok = p
            .score_traversal(&lib, &cfg, &[true, true], &parse("add mul x1 x1 x2", &lib))
            .unwrap();
        assert_eq!(ok.traversal, parse("add mul x1 x1 x2", &lib));
        let err = p.score_traversal(&lib, &cfg, &[true, true], &parse("log exp x1", &lib));
        assert!(matches!(err, Err(PolicyError::IllegalToken { .. })));
        let err = p.score_traversal(&lib, &cfg, &[true, false], &parse("add mul x1 x1 x2", &lib));
        assert!(matches!(err, Err(PolicyError::IllegalToken { .. })));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let lib = lib();
        let cfg = MaskConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for draw in 0..10 {
            let mut p = PolicyParams::init(shape(&lib, 6), &mut rng);
            for v in &mut p.values {
                *v *= 5.0;
            }
            let t = p.sample_trajectory(&lib, &cfg, &[true, true], &mut rng).unwrap();
            let a: Vec<f64> = (0..t.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..t.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let objective = |values: &[f64]| {
                let tape = p.forward_tape(values, &t).unwrap();
                let lp = tape.log_probs();
                let h = tape.entropies();
                (0..lp.len()).map(|i| a[i] * lp[i] + b[i] * h[i]).sum::<f64>()
            };
            let tape = p.forward_tape(&p.values, &t).unwrap();
            let mut grad = vec![0.0; p.values.len()];
            p.backward(&p.values, &tape, &a, &b, &mut grad);
            let check = finite_diff_check(objective, &grad, &p.values, 1e-4);
            let worst = (0..grad.len())
                .max_by(|&i, &j| check.relative_errors[i].total_cmp(&check.relative_errors[j]))
                .unwrap();
            assert!(
                check.max_relative_error < 1e-4,
                "draw {draw}: {} at {worst} ({} vs {})",
                check.max_relative_error,
                grad[worst],
                check.numeric[worst]
            );
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let lib = lib();
        let p = PolicyParams::init(shape(&lib, 5), &mut ChaCha8Rng::seed_from_u64(4));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        p.save(&path).unwrap();
        assert_eq!(PolicyParams::load(&path).unwrap(), p);

        let mut ckpt = Checkpoint::from_params(&p);
        ckpt.version = 99;
        assert!(ckpt.into_params().is_err());
        let mut ckpt = Checkpoint::from_params(&p);
        ckpt.blocks[1].values.pop();
        assert!(ckpt.into_params().is_err());
    }
}
