//! Group-relative advantages, score-function gradient accumulation over all
//! action terms of a trajectory, the clipped surrogate, and AdamW.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{OptimSnapshot, PolicyError, PolicyParams};
use crate::rollout::RolloutGroup;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("non-finite gradient entry at index {0}; update rejected")]
    NonFiniteGradient(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub group_size: usize,
    pub groups_per_batch: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub clip_ratio: f64,
    pub use_clip: bool,
    pub temperature: f64,
    pub total_iterations: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            groups_per_batch: 32,
            learning_rate: 3e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            clip_ratio: 0.2,
            use_clip: true,
            temperature: 1.0,
            total_iterations: 600,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Large-model step size, kept as a reference preset.
    pub fn large_model_preset() -> Self {
        Self {
            learning_rate: 1e-6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: &str| Err(OptimError::InvalidConfig(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if self.groups_per_batch < 1 {
            return bad("groups_per_batch must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.use_clip && !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return bad("clip_ratio must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) || self.weight_decay < 0.0 || self.temperature < 0.0 {
            return bad("adam_eps must be positive; weight_decay and temperature non-negative");
        }
        Ok(())
    }
}

/// `r_g - mean(r)`, computed as the mean of pairwise differences so that a
/// common shift of all rewards cancels before any rounding of the mean.
pub fn compute_advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    rewards
        .iter()
        .map(|rg| rewards.iter().map(|rh| rg - rh).sum::<f64>() / n)
        .collect()
}

/// Summed gradient of the maximization objective.
#[derive(Debug, Clone, PartialEq)]
pub struct GradAccum {
    pub grad: Vec<f64>,
    /// Number of trajectories folded in.
    pub count: usize,
}

impl GradAccum {
    pub fn zeros(len: usize) -> Self {
        Self {
            grad: vec![0.0; len],
            count: 0,
        }
    }

    pub fn for_params(params: &PolicyParams) -> Self {
        Self::zeros(params.weights.len())
    }

    /// Element-wise sum; callers merge in a fixed order for reproducibility.
    pub fn merge(&mut self, other: &GradAccum) {
        for (a, b) in self.grad.iter_mut().zip(&other.grad) {
            *a += b;
        }
        self.count += other.count;
    }

    /// Gradient averaged over trajectories.
    pub fn mean(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.grad.iter().map(|g| g / n).collect()
    }
}

fn check_len(params: &PolicyParams, acc: &GradAccum) -> Result<(), OptimError> {
    if acc.grad.len() != params.weights.len() {
        return Err(OptimError::ShapeMismatch(format!(
            "accumulator {} != params {}",
            acc.grad.len(),
            params.weights.len()
        )));
    }
    Ok(())
}

/// Adds `A_g * sum_j grad log p(a_j | f_j)` over every action term of every
/// trajectory. Visual context carries no term, so it never contributes.
pub fn accumulate_mgpo_grad(group: &RolloutGroup, params: &PolicyParams, acc: &mut GradAccum) -> Result<(), OptimError> {
    check_len(params, acc)?;
    let adv = compute_advantages(&group.rewards);
    for (traj, a) in group.trajectories.iter().zip(adv) {
        acc.count += 1;
        if a == 0.0 {
            continue;
        }
        for term in traj.action_terms() {
            params.add_grad_logprob(&term.features, &term.action, a, &mut acc.grad)?;
        }
    }
    Ok(())
}

/// Single-output specialization: identical to [`accumulate_mgpo_grad`] on
/// trajectories with one turn.
pub fn accumulate_grpo_grad(group: &RolloutGroup, params: &PolicyParams, acc: &mut GradAccum) -> Result<(), OptimError> {
    check_len(params, acc)?;
    let adv = compute_advantages(&group.rewards);
    for (traj, a) in group.trajectories.iter().zip(adv) {
        acc.count += 1;
        if a == 0.0 {
            continue;
        }
        let turn = traj.turns.first().expect("rollouts have at least one turn");
        for term in &turn.terms {
            params.add_grad_logprob(&term.features, &term.action, a, &mut acc.grad)?;
        }
    }
    Ok(())
}

/// Log-probabilities recorded at sampling time, per trajectory and term.
pub fn recorded_logprobs(group: &RolloutGroup) -> Vec<Vec<f64>> {
    group
        .trajectories
        .iter()
        .map(|t| t.action_terms().map(|x| x.logprob).collect())
        .collect()
}

fn ratio_and_adv<'a>(
    group: &'a RolloutGroup,
    params: &'a PolicyParams,
    old_logprobs: &'a [Vec<f64>],
) -> impl Iterator<Item = Result<(&'a crate::rollout::ActionTerm, f64, f64), OptimError>> + 'a {
    let adv = compute_advantages(&group.rewards);
    group
        .trajectories
        .iter()
        .zip(old_logprobs)
        .zip(adv)
        .flat_map(move |((traj, old), a)| {
            traj.action_terms().zip(old.iter()).map(move |(term, old_lp)| {
                let new_lp = params.logprob_of(&term.features, &term.action)?;
                Ok((term, (new_lp - old_lp).exp(), a))
            })
        })
}

/// Sum over action terms of `min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)`.
pub fn clipped_surrogate(group: &RolloutGroup, params: &PolicyParams, old_logprobs: &[Vec<f64>], eps: f64) -> Result<f64, OptimError> {
    let mut total = 0.0;
    for item in ratio_and_adv(group, params, old_logprobs) {
        let (_, rho, a) = item?;
        total += (rho * a).min(rho.clamp(1.0 - eps, 1.0 + eps) * a);
    }
    Ok(total)
}

/// Gradient of [`clipped_surrogate`]. A term whose ratio sits in the clipped
/// flat region contributes nothing; otherwise it contributes
/// `A * rho * grad log p`.
pub fn clipped_surrogate_grad(
    group: &RolloutGroup,
    params: &PolicyParams,
    old_logprobs: &[Vec<f64>],
    eps: f64,
) -> Result<GradAccum, OptimError> {
    if old_logprobs.len() != group.trajectories.len() {
        return Err(OptimError::ShapeMismatch("one logprob list per trajectory expected".into()));
    }
    let mut acc = GradAccum::for_params(params);
    acc.count = group.trajectories.len();
    for item in ratio_and_adv(group, params, old_logprobs) {
        let (term, rho, a) = item?;
        let clipped = (a > 0.0 && rho > 1.0 + eps) || (a < 0.0 && rho < 1.0 - eps);
        if clipped || a == 0.0 {
            continue;
        }
        params.add_grad_logprob(&term.features, &term.action, a * rho, &mut acc.grad)?;
    }
    Ok(acc)
}

/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn snapshot(&self) -> OptimSnapshot {
        OptimSnapshot {
            step: self.step,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn from_snapshot(s: &OptimSnapshot) -> Self {
        Self {
            m: s.m.clone(),
            v: s.v.clone(),
            step: s.step,
        }
    }
}

/// One bias-corrected AdamW ascent step with decoupled weight decay.
/// A non-finite gradient leaves parameters and state untouched.
pub fn adamw_step(params: &mut PolicyParams, grad: &[f64], state: &mut OptimState, cfg: &TrainConfig) -> Result<(), OptimError> {
    let n = params.weights.len();
    if grad.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(OptimError::ShapeMismatch(format!(
            "params {n}, grad {}, moments {}/{}",
            grad.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(OptimError::NonFiniteGradient(i));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = cfg.learning_rate;
    let decay = 1.0 - lr * cfg.weight_decay;
    for i in 0..n {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        let w = &mut params.weights[i];
        if cfg.weight_decay != 0.0 {
            *w *= decay;
        }
        *w += lr * mhat / (vhat.sqrt() + cfg.adam_eps);
    }
    Ok(())
}
