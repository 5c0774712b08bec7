//! Small stochastic policy: a shared (optional tanh) trunk feeding categorical
//! heads for the four box-coordinate bins, the answer choice and, in the
//! generalized multi-turn mode, the act type.
//!
//! All parameters live in one flat vector so gradients, optimizer moments and
//! checkpoints share a single layout.

use rand::Rng;
use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, Size};
use crate::imaging::{CONTRAST, PatchTokens};
use crate::rollout::{ConversationState, VisualEntry};
use crate::taskgen::QuestionKind;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("history has no visual entry")]
    EmptyHistory,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
}

/// Number of act types in the generalized multi-turn mode.
pub const ACT_KINDS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroundAction {
    pub bins: [u32; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnswerAction {
    pub choice: u32,
}

/// What a turn does in the generalized loop: crop, answer, or think without a
/// new image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActKind {
    Ground,
    Answer,
    Reason,
}

impl ActKind {
    pub fn index(self) -> usize {
        match self {
            ActKind::Ground => 0,
            ActKind::Answer => 1,
            ActKind::Reason => 2,
        }
    }

    pub fn from_index(i: usize) -> Self {
        match i {
            0 => ActKind::Ground,
            1 => ActKind::Answer,
            _ => ActKind::Reason,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Action {
    Ground(GroundAction),
    Answer(AnswerAction),
    Act { kind: ActKind },
}

/// Architecture hyper-parameters. `hidden == 0` is the affine policy; with
/// `skip` the heads read `[f; h]` instead of `h` alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub feature_dim: usize,
    pub bins: usize,
    pub choices: usize,
    pub hidden: usize,
    pub skip: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Ground(usize),
    Answer,
    Act,
}

impl PolicyShape {
    pub fn head_input_dim(&self) -> usize {
        match (self.hidden, self.skip) {
            (0, _) => self.feature_dim,
            (h, true) => self.feature_dim + h,
            (h, false) => h,
        }
    }

    fn head_outputs(&self, head: Head) -> usize {
        match head {
            Head::Ground(_) => self.bins,
            Head::Answer => self.choices,
            Head::Act => ACT_KINDS,
        }
    }

    fn hidden_len(&self) -> usize {
        self.hidden * self.feature_dim + self.hidden
    }

    fn head_len(&self, head: Head) -> usize {
        self.head_outputs(head) * (self.head_input_dim() + 1)
    }

    /// Offset of a head's weight block; its bias follows the weights.
    pub fn head_offset(&self, head: Head) -> usize {
        let base = self.hidden_len();
        let g = self.head_len(Head::Ground(0));
        match head {
            Head::Ground(axis) => base + axis * g,
            Head::Answer => base + 4 * g,
            Head::Act => base + 4 * g + self.head_len(Head::Answer),
        }
    }

    pub fn num_params(&self) -> usize {
        self.head_offset(Head::Act) + self.head_len(Head::Act)
    }

    fn validate(&self) -> Result<(), PolicyError> {
        if self.feature_dim == 0 || self.bins == 0 || self.choices == 0 {
            return Err(PolicyError::ShapeMismatch(format!("degenerate shape {self:?}")));
        }
        Ok(())
    }
}

/// All learnable weights, flat. Layout: trunk `W1 (H x F)`, `b1 (H)`, then
/// for each head in order ground x1, y1, x2, y2, answer, act: `W (n x D)`, `b (n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub shape: PolicyShape,
    pub weights: Vec<f64>,
}

/// Trunk activations for one feature vector.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Head input `z`.
    pub z: Vec<f64>,
    /// Hidden activations (empty for the affine policy).
    pub h: Vec<f64>,
}

/// A categorical distribution kept in log space.
#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    pub logits: Vec<f64>,
    pub log_probs: Vec<f64>,
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

impl Categorical {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let log_probs = log_softmax(&logits);
        Self { logits, log_probs }
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, l) in self.logits.iter().enumerate() {
            if *l > self.logits[best] {
                best = i;
            }
        }
        best
    }

    /// Draws from `softmax(logits / temperature)`; `temperature == 0` is
    /// greedy. The returned log-probability is always under temperature 1.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, temperature: f64) -> (usize, f64) {
        let idx = if temperature <= 0.0 {
            self.argmax()
        } else {
            let scaled: Vec<f64> = self.logits.iter().map(|l| l / temperature).collect();
            let lp = if temperature == 1.0 {
                self.log_probs.clone()
            } else {
                log_softmax(&scaled)
            };
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = lp.len() - 1;
            for (i, l) in lp.iter().enumerate() {
                acc += l.exp();
                if u < acc {
                    pick = i;
                    break;
                }
            }
            // never land on a zero-probability tail through rounding
            while lp[pick] == f64::NEG_INFINITY && pick > 0 {
                pick -= 1;
            }
            pick
        };
        (idx, self.log_probs[idx])
    }
}

impl PolicyParams {
    pub fn zeros(shape: PolicyShape) -> Result<Self, PolicyError> {
        shape.validate()?;
        Ok(Self {
            shape,
            weights: vec![0.0; shape.num_params()],
        })
    }

    /// Weights uniform in `[-0.01, 0.01]`, biases zero.
    pub fn init<R: Rng + ?Sized>(shape: PolicyShape, rng: &mut R) -> Result<Self, PolicyError> {
        let mut p = Self::zeros(shape)?;
        let u = Uniform::new_inclusive(-0.01, 0.01).expect("valid range");
        let (f, h) = (shape.feature_dim, shape.hidden);
        for w in &mut p.weights[..h * f] {
            *w = u.sample(rng);
        }
        let d = shape.head_input_dim();
        for head in [
            Head::Ground(0),
            Head::Ground(1),
            Head::Ground(2),
            Head::Ground(3),
            Head::Answer,
            Head::Act,
        ] {
            let off = shape.head_offset(head);
            let n = shape.head_outputs(head);
            for w in &mut p.weights[off..off + n * d] {
                *w = u.sample(rng);
            }
        }
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    fn check_features(&self, f: &[f64]) -> Result<(), PolicyError> {
        if f.len() != self.shape.feature_dim {
            return Err(PolicyError::ShapeMismatch(format!(
                "feature length {} != {}",
                f.len(),
                self.shape.feature_dim
            )));
        }
        Ok(())
    }

    pub fn forward(&self, f: &[f64]) -> Result<Forward, PolicyError> {
        self.check_features(f)?;
        let s = &self.shape;
        if s.hidden == 0 {
            return Ok(Forward {
                z: f.to_vec(),
                h: Vec::new(),
            });
        }
        let (nf, nh) = (s.feature_dim, s.hidden);
        let w1 = &self.weights[..nh * nf];
        let b1 = &self.weights[nh * nf..nh * nf + nh];
        let h: Vec<f64> = (0..nh)
            .map(|i| {
                let row = &w1[i * nf..(i + 1) * nf];
                (b1[i] + row.iter().zip(f).map(|(w, x)| w * x).sum::<f64>()).tanh()
            })
            .collect();
        let z = if s.skip {
            f.iter().chain(h.iter()).copied().collect()
        } else {
            h.clone()
        };
        Ok(Forward { z, h })
    }

    pub fn head_logits(&self, head: Head, fwd: &Forward) -> Vec<f64> {
        let n = self.shape.head_outputs(head);
        let d = self.shape.head_input_dim();
        let off = self.shape.head_offset(head);
        let w = &self.weights[off..off + n * d];
        let b = &self.weights[off + n * d..off + n * d + n];
        (0..n)
            .map(|k| b[k] + w[k * d..(k + 1) * d].iter().zip(&fwd.z).map(|(a, x)| a * x).sum::<f64>())
            .collect()
    }

    pub fn head_distribution(&self, head: Head, fwd: &Forward) -> Categorical {
        Categorical::from_logits(self.head_logits(head, fwd))
    }

    /// Four independent per-axis distributions over coordinate bins, in the
    /// order x1, y1, x2, y2.
    pub fn ground_distribution(&self, f: &[f64]) -> Result<[Categorical; 4], PolicyError> {
        let fwd = self.forward(f)?;
        Ok([0, 1, 2, 3].map(|a| self.head_distribution(Head::Ground(a), &fwd)))
    }

    pub fn answer_distribution(&self, f: &[f64]) -> Result<Categorical, PolicyError> {
        let fwd = self.forward(f)?;
        Ok(self.head_distribution(Head::Answer, &fwd))
    }

    pub fn act_distribution(&self, f: &[f64]) -> Result<Categorical, PolicyError> {
        let fwd = self.forward(f)?;
        Ok(self.head_distribution(Head::Act, &fwd))
    }

    fn check_action(&self, action: &Action) -> Result<(), PolicyError> {
        let ok = match action {
            Action::Ground(g) => g.bins.iter().all(|b| (*b as usize) < self.shape.bins),
            Action::Answer(a) => (a.choice as usize) < self.shape.choices,
            Action::Act { .. } => true,
        };
        if ok {
            Ok(())
        } else {
            Err(PolicyError::ShapeMismatch(format!("action {action:?} out of range")))
        }
    }

    /// `(head, outcome)` pairs whose log-probabilities sum to the action's.
    fn action_terms(action: &Action) -> Vec<(Head, usize)> {
        match action {
            Action::Ground(g) => (0..4).map(|a| (Head::Ground(a), g.bins[a] as usize)).collect(),
            Action::Answer(a) => vec![(Head::Answer, a.choice as usize)],
            Action::Act { kind } => vec![(Head::Act, kind.index())],
        }
    }

    pub fn logprob_of(&self, f: &[f64], action: &Action) -> Result<f64, PolicyError> {
        self.check_action(action)?;
        let fwd = self.forward(f)?;
        Ok(Self::action_terms(action)
            .into_iter()
            .map(|(head, k)| self.head_distribution(head, &fwd).log_probs[k])
            .sum())
    }

    /// Adds `scale * d log p(action | f) / d theta` into `out`.
    pub fn add_grad_logprob(&self, f: &[f64], action: &Action, scale: f64, out: &mut [f64]) -> Result<(), PolicyError> {
        self.check_action(action)?;
        if out.len() != self.weights.len() {
            return Err(PolicyError::ShapeMismatch(format!(
                "gradient buffer {} != {}",
                out.len(),
                self.weights.len()
            )));
        }
        let fwd = self.forward(f)?;
        let s = self.shape;
        let d = s.head_input_dim();
        let mut dz = vec![0.0; d];
        for (head, k) in Self::action_terms(action) {
            let dist = self.head_distribution(head, &fwd);
            let n = dist.len();
            let off = s.head_offset(head);
            for (j, lp) in dist.log_probs.iter().enumerate() {
                let delta = scale * (f64::from(u8::from(j == k)) - lp.exp());
                if delta == 0.0 {
                    continue;
                }
                let row = off + j * d;
                for (i, zi) in fwd.z.iter().enumerate() {
                    out[row + i] += delta * zi;
                    dz[i] += delta * self.weights[row + i];
                }
                out[off + n * d + j] += delta;
            }
        }
        if s.hidden > 0 {
            let (nf, nh) = (s.feature_dim, s.hidden);
            let dh = if s.skip { &dz[nf..] } else { &dz[..] };
            for i in 0..nh {
                let dpre = dh[i] * (1.0 - fwd.h[i] * fwd.h[i]);
                if dpre == 0.0 {
                    continue;
                }
                for (j, fj) in f.iter().enumerate() {
                    out[i * nf + j] += dpre * fj;
                }
                out[nh * nf + i] += dpre;
            }
        }
        Ok(())
    }

    pub fn grad_logprob(&self, f: &[f64], action: &Action) -> Result<Vec<f64>, PolicyError> {
        let mut g = vec![0.0; self.weights.len()];
        self.add_grad_logprob(f, action, 1.0, &mut g)?;
        Ok(g)
    }

    /// Samples a box action; returns it with its temperature-1 log-probability.
    pub fn sample_ground<R: Rng + ?Sized>(
        &self,
        f: &[f64],
        rng: &mut R,
        temperature: f64,
    ) -> Result<(GroundAction, f64), PolicyError> {
        let dists = self.ground_distribution(f)?;
        let mut bins = [0u32; 4];
        let mut lp = 0.0;
        for (axis, dist) in dists.iter().enumerate() {
            let (k, l) = dist.sample(rng, temperature);
            bins[axis] = k as u32;
            lp += l;
        }
        Ok((GroundAction { bins }, lp))
    }

    pub fn sample_answer<R: Rng + ?Sized>(
        &self,
        f: &[f64],
        rng: &mut R,
        temperature: f64,
    ) -> Result<(AnswerAction, f64), PolicyError> {
        let (k, lp) = self.answer_distribution(f)?.sample(rng, temperature);
        Ok((AnswerAction { choice: k as u32 }, lp))
    }

    pub fn sample_act<R: Rng + ?Sized>(&self, f: &[f64], rng: &mut R, temperature: f64) -> Result<(ActKind, f64), PolicyError> {
        let (k, lp) = self.act_distribution(f)?.sample(rng, temperature);
        Ok((ActKind::from_index(k), lp))
    }
}

/// Maps coordinate bins to a box in `frame`. No reordering: reversed bins
/// decode to reversed or degenerate boxes.
pub fn decode_ground_action(a: &GroundAction, frame: Size, bins: usize) -> BBox {
    let cw = frame.width() as f64 / bins as f64;
    let ch = frame.height() as f64 / bins as f64;
    let [bx1, by1, bx2, by2] = a.bins.map(f64::from);
    BBox::new(bx1 * cw, by1 * ch, (bx2 + 1.0) * cw, (by2 + 1.0) * ch)
}

// ---------------------------------------------------------------------------
// Features
// ---------------------------------------------------------------------------

/// Controls the feature layout; `bins` is shared with the grounding heads so
/// saliency profiles line up with coordinate bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub bins: usize,
    pub max_turns: usize,
}

/// Colors and contrast are centered on mid-gray and amplified so every block
/// of the vector has comparable scale.
const COLOR_GAIN: f64 = 4.0;
const CONTRAST_GAIN: f64 = 4.0;

/// mean(6) + max(6) + peak-token color(3).
const POOLED: usize = 15;
/// Token contrast below which a view counts as having no salient token; the
/// peak color and saliency profiles are then left at zero.
pub const SALIENCY_FLOOR: f64 = 0.01;

impl FeatureConfig {
    pub fn slot_dim(&self) -> usize {
        POOLED + 2 * self.bins
    }

    /// Two visual slots, turn one-hot, question-kind one-hot, choice count.
    pub fn feature_dim(&self) -> usize {
        2 * self.slot_dim() + self.max_turns + 3
    }
}

fn scale_token_feature(i: usize, v: f64) -> f64 {
    match i {
        0..=2 => (v - 0.5) * COLOR_GAIN,
        3 | 4 => v - 0.5,
        CONTRAST => v * CONTRAST_GAIN,
        _ => v,
    }
}

/// Pooled statistics of one visual entry.
///
/// The saliency profile holds, for each coordinate bin along an axis, the
/// largest token contrast whose center falls in the bin, relative to the
/// largest contrast overall. The salient color is the contrast-weighted mean
/// chroma of the tokens relative to the mean chroma of the view. Both stay
/// zero when no token reaches [`SALIENCY_FLOOR`].
pub fn slot_features(tokens: &PatchTokens, bins: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), POOLED + 2 * bins);
    out.fill(0.0);
    let n = tokens.len();
    if n == 0 {
        return;
    }
    let used = tokens.dim.min(6);
    let mut mean = [0.0; 6];
    let mut max = [f64::NEG_INFINITY; 6];
    let mut peak = 0;
    for i in 0..n {
        let t = tokens.token(i);
        for k in 0..used {
            mean[k] += t[k] / n as f64;
            max[k] = max[k].max(t[k]);
        }
        if used > CONTRAST && t[CONTRAST] > tokens.token(peak)[CONTRAST] {
            peak = i;
        }
    }
    for k in 0..used {
        out[k] = scale_token_feature(k, mean[k]);
        out[6 + k] = scale_token_feature(k, max[k]);
    }
    if used <= CONTRAST {
        return;
    }
    let pt = tokens.token(peak);
    let top = pt[CONTRAST];
    if top < SALIENCY_FLOOR {
        return;
    }
    let chroma = |c: &[f64]| {
        let l = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
        [c[0] - l, c[1] - l, c[2] - l]
    };
    let mut weighted = [0.0; 3];
    let mut total = 0.0;
    for i in 0..n {
        let t = tokens.token(i);
        let c = chroma(t);
        for k in 0..3 {
            weighted[k] += t[CONTRAST] * c[k];
        }
        total += t[CONTRAST];
    }
    let mc = chroma(&mean);
    for k in 0..3 {
        out[12 + k] = (weighted[k] / total - mc[k]) * COLOR_GAIN;
    }
    let (px, py) = out[POOLED..].split_at_mut(bins);
    for r in 0..tokens.rows {
        let by = bin_of_center(r, tokens.rows, bins);
        for c in 0..tokens.columns {
            let bx = bin_of_center(c, tokens.columns, bins);
            let v = tokens.token_at(c, r)[CONTRAST] / top;
            px[bx] = px[bx].max(v);
            py[by] = py[by].max(v);
        }
    }
}

/// Bin containing the center of cell `i` of `n`.
fn bin_of_center(i: usize, n: usize, bins: usize) -> usize {
    (((2 * i + 1) * bins) / (2 * n)).min(bins - 1)
}

/// Feature vector from explicit visual slots (oldest first, at most two) and
/// conversation metadata.
pub fn featurize_views(
    views: &[&VisualEntry],
    turn: usize,
    kind: QuestionKind,
    num_choices: usize,
    cfg: &FeatureConfig,
) -> Result<Vec<f64>, PolicyError> {
    if views.is_empty() {
        return Err(PolicyError::EmptyHistory);
    }
    let sd = cfg.slot_dim();
    let mut f = vec![0.0; cfg.feature_dim()];
    let recent = &views[views.len().saturating_sub(2)..];
    for (slot, v) in recent.iter().enumerate() {
        slot_features(&v.tokens, cfg.bins, &mut f[slot * sd..(slot + 1) * sd]);
    }
    let base = 2 * sd;
    if turn >= 1 && turn <= cfg.max_turns {
        f[base + turn - 1] = 1.0;
    }
    let q = base + cfg.max_turns;
    match kind {
        QuestionKind::NeedleChoice => f[q] = 1.0,
        QuestionKind::Count => f[q + 1] = 1.0,
    }
    f[q + 2] = num_choices as f64 / 10.0;
    Ok(f)
}

/// Features of the conversation so far: the two most recent visual entries,
/// the current turn and the question.
pub fn featurize(history: &ConversationState, cfg: &FeatureConfig) -> Result<Vec<f64>, PolicyError> {
    let views: Vec<&VisualEntry> = history.visuals().collect();
    featurize_views(&views, history.current_turn(), history.question_kind, history.num_choices, cfg)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_VERSION: u32 = 1;

/// Counter state from which all training randomness is derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_iteration: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimSnapshot {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Versioned checkpoint record. Floats are written in shortest round-trip
/// form, so a save/load cycle is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    #[serde(rename = "F")]
    pub f: usize,
    #[serde(rename = "B")]
    pub b: usize,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "H")]
    pub h: usize,
    pub skip: bool,
    pub weights: Vec<f64>,
    pub rng_state: RngState,
    pub iteration: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimSnapshot>,
}

impl Checkpoint {
    pub fn new(params: &PolicyParams, rng_state: RngState, iteration: u64, optimizer: Option<OptimSnapshot>) -> Self {
        let s = params.shape;
        Self {
            version: CHECKPOINT_VERSION,
            f: s.feature_dim,
            b: s.bins,
            c: s.choices,
            h: s.hidden,
            skip: s.skip,
            weights: params.weights.clone(),
            rng_state,
            iteration,
            optimizer,
        }
    }

    pub fn params(&self) -> Result<PolicyParams, PolicyError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(PolicyError::Version(self.version));
        }
        let shape = PolicyShape {
            feature_dim: self.f,
            bins: self.b,
            choices: self.c,
            hidden: self.h,
            skip: self.skip,
        };
        shape.validate()?;
        if self.weights.len() != shape.num_params() {
            return Err(PolicyError::ShapeMismatch(format!(
                "checkpoint has {} weights, shape needs {}",
                self.weights.len(),
                shape.num_params()
            )));
        }
        if let Some(o) = &self.optimizer {
            if o.m.len() != self.weights.len() || o.v.len() != self.weights.len() {
                return Err(PolicyError::ShapeMismatch("optimizer moments do not match weights".into()));
            }
        }
        Ok(PolicyParams {
            shape,
            weights: self.weights.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(hidden: usize, skip: bool) -> PolicyShape {
        PolicyShape {
            feature_dim: 5,
            bins: 4,
            choices: 4,
            hidden,
            skip,
        }
    }

    fn random_params(s: PolicyShape, rng: &mut ChaCha8Rng, scale: f64) -> PolicyParams {
        let mut p = PolicyParams::zeros(s).unwrap();
        for w in &mut p.weights {
            *w = rng.random_range(-scale..scale);
        }
        p
    }

    fn random_action(s: PolicyShape, rng: &mut ChaCha8Rng) -> Action {
        match rng.random_range(0..3) {
            0 => Action::Ground(GroundAction {
                bins: [0; 4].map(|_| rng.random_range(0..s.bins as u32)),
            }),
            1 => Action::Answer(AnswerAction {
                choice: rng.random_range(0..s.choices as u32),
            }),
            _ => Action::Act {
                kind: ActKind::from_index(rng.random_range(0..ACT_KINDS)),
            },
        }
    }

    #[test]
    fn zero_params_are_uniform() {
        let p = PolicyParams::zeros(shape(3, true)).unwrap();
        let f = [0.3, -1.0, 2.0, 0.0, 1.0];
        for d in p.ground_distribution(&f).unwrap() {
            for q in d.probs() {
                assert!((q - 0.25).abs() < 1e-12);
            }
        }
        let a = p.answer_distribution(&f).unwrap();
        assert!(a.probs().iter().all(|q| (q - 0.25).abs() < 1e-12));
        let g = Action::Ground(GroundAction { bins: [1, 2, 3, 0] });
        assert!((p.logprob_of(&f, &g).unwrap() - 4.0 * (0.25f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn closed_form_distributions() {
        let d = Categorical::from_logits(vec![0.0, 3f64.ln()]);
        let p = d.probs();
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);
        let d = Categorical::from_logits(vec![0.0, 0.0, 0.0, 9f64.ln()]);
        let p = d.probs();
        for (a, b) in p.iter().zip([1.0 / 12.0, 1.0 / 12.0, 1.0 / 12.0, 0.75]) {
            assert!((a - b).abs() < 1e-9);
        }
        let shifted = Categorical::from_logits(vec![5.0, 5.0, 5.0, 5.0 + 9f64.ln()]);
        for (a, b) in shifted.probs().iter().zip(&p) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_and_point_mass_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = Categorical::from_logits(vec![0.1f64.ln(), 0.9f64.ln()]);
        for _ in 0..100 {
            assert_eq!(d.sample(&mut rng, 0.0).0, 1);
        }
        let pm = Categorical::from_logits(vec![-1e9, 0.0, -1e9]);
        for _ in 0..100 {
            let (k, lp) = pm.sample(&mut rng, 1.0);
            assert_eq!(k, 1);
            assert_eq!(lp, 0.0);
        }
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = Categorical::from_logits(vec![0.0; 4]);
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[d.sample(&mut rng, 1.0).0] += 1;
        }
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * 0.25).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn sampled_logprob_matches_logprob_of() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = shape(6, true);
        let p = random_params(s, &mut rng, 1.0);
        let f: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        for _ in 0..50 {
            let (g, lp) = p.sample_ground(&f, &mut rng, 1.0).unwrap();
            assert!((p.logprob_of(&f, &Action::Ground(g)).unwrap() - lp).abs() < 1e-12);
            let (a, lp) = p.sample_answer(&f, &mut rng, 1.5).unwrap();
            assert!((p.logprob_of(&f, &Action::Answer(a)).unwrap() - lp).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..60 {
            let s = match trial % 3 {
                0 => shape(0, false),
                1 => shape(4, true),
                _ => shape(4, false),
            };
            let mut p = random_params(s, &mut rng, 0.8);
            let f: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = random_action(s, &mut rng);
            let g = p.grad_logprob(&f, &a).unwrap();
            let h = 1e-5;
            for i in 0..p.weights.len() {
                let w = p.weights[i];
                p.weights[i] = w + h;
                let up = p.logprob_of(&f, &a).unwrap();
                p.weights[i] = w - h;
                let down = p.logprob_of(&f, &a).unwrap();
                p.weights[i] = w;
                let fd = (up - down) / (2.0 * h);
                let err = (g[i] - fd).abs() / fd.abs().max(g[i].abs()).max(1e-6);
                assert!(err < 1e-4, "trial {trial} weight {i}: analytic {} fd {fd}", g[i]);
            }
        }
    }

    #[test]
    fn answer_gradient_leaves_ground_heads_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = shape(4, true);
        let p = random_params(s, &mut rng, 0.5);
        let f = [0.1, 0.2, -0.3, 0.4, 0.5];
        let g = p.grad_logprob(&f, &Action::Answer(AnswerAction { choice: 2 })).unwrap();
        let lo = s.head_offset(Head::Ground(0));
        let hi = s.head_offset(Head::Answer);
        assert!(g[lo..hi].iter().all(|v| *v == 0.0));
        assert!(g[hi..s.head_offset(Head::Act)].iter().any(|v| *v != 0.0));
        assert!(g[s.head_offset(Head::Act)..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn saturated_softmax_has_tiny_gradient() {
        let s = shape(0, false);
        let mut p = PolicyParams::zeros(s).unwrap();
        let off = s.head_offset(Head::Answer);
        let n = s.choices * s.feature_dim;
        p.weights[off + n + 1] = 40.0;
        let g = p
            .grad_logprob(&[0.0; 5], &Action::Answer(AnswerAction { choice: 1 }))
            .unwrap();
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-6);
    }

    #[test]
    fn score_has_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = PolicyShape {
            feature_dim: 3,
            bins: 3,
            choices: 3,
            hidden: 2,
            skip: true,
        };
        let p = random_params(s, &mut rng, 0.7);
        let f = [0.4, -0.6, 0.9];
        let n = 50_000;
        let mut sum = vec![0.0; p.weights.len()];
        let mut sq = vec![0.0; p.weights.len()];
        for _ in 0..n {
            let (g, _) = p.sample_ground(&f, &mut rng, 1.0).unwrap();
            let (a, _) = p.sample_answer(&f, &mut rng, 1.0).unwrap();
            for action in [Action::Ground(g), Action::Answer(a)] {
                let grad = p.grad_logprob(&f, &action).unwrap();
                for (i, v) in grad.iter().enumerate() {
                    sum[i] += v;
                    sq[i] += v * v;
                }
            }
        }
        for i in 0..sum.len() {
            let mean = sum[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            let se = (var / n as f64).sqrt();
            assert!(mean.abs() <= 5.0 * se + 1e-12, "param {i}: mean {mean} se {se}");
        }
    }

    #[test]
    fn logit_shift_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let s = shape(0, false);
        let p = random_params(s, &mut rng, 1.0);
        let mut q = p.clone();
        let off = s.head_offset(Head::Answer) + s.choices * s.feature_dim;
        for k in 0..s.choices {
            q.weights[off + k] += 3.25;
        }
        let f = [0.2, 0.1, -0.4, 0.8, -0.3];
        let a = Action::Answer(AnswerAction { choice: 3 });
        let (dp, dq) = (p.answer_distribution(&f).unwrap(), q.answer_distribution(&f).unwrap());
        for (x, y) in dp.probs().iter().zip(dq.probs()) {
            assert!((x - y).abs() < 1e-12);
        }
        let (gp, gq) = (p.grad_logprob(&f, &a).unwrap(), q.grad_logprob(&f, &a).unwrap());
        for (x, y) in gp.iter().zip(&gq) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            assert_eq!(dp.sample(&mut r1, 1.0).0, dq.sample(&mut r2, 1.0).0);
        }
    }

    #[test]
    fn decode_examples() {
        let frame = Size::square(64);
        let b = decode_ground_action(&GroundAction { bins: [0, 0, 3, 3] }, frame, 4);
        assert_eq!(b, BBox::new(0.0, 0.0, 64.0, 64.0));
        let b = decode_ground_action(&GroundAction { bins: [2, 0, 1, 3] }, frame, 4);
        assert_eq!((b.x1, b.x2), (32.0, 32.0));
        assert_eq!(
            crate::geometry::validate_bbox(&b, frame),
            crate::geometry::Validity::Invalid(crate::geometry::InvalidReason::DegenerateOrder)
        );
        let b = decode_ground_action(&GroundAction { bins: [1, 1, 1, 1] }, frame, 4);
        assert_eq!(b, BBox::new(16.0, 16.0, 32.0, 32.0));
        assert!(crate::geometry::validate_bbox(&b, frame).is_valid());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let s = shape(4, true);
        let p = random_params(s, &mut rng, 1.0);
        let opt = OptimSnapshot {
            step: 3,
            m: p.weights.iter().map(|w| w / 3.0).collect(),
            v: p.weights.iter().map(|w| w * w / 7.0).collect(),
        };
        let ck = Checkpoint::new(&p, RngState { seed: 5, next_iteration: 3 }, 3, Some(opt));
        let text = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(back, ck);
        let q = back.params().unwrap();
        for (a, b) in p.weights.iter().zip(&q.weights) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let mut bad = ck.clone();
        bad.weights.pop();
        assert!(matches!(bad.params(), Err(PolicyError::ShapeMismatch(_))));
    }

    #[test]
    fn init_is_small_with_zero_biases() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let s = shape(4, true);
        let p = PolicyParams::init(s, &mut rng).unwrap();
        assert!(p.weights.iter().all(|w| w.abs() <= 0.01));
        let d = s.head_input_dim();
        let off = s.head_offset(Head::Answer);
        assert!(p.weights[off + s.choices * d..off + s.choices * (d + 1)].iter().all(|b| *b == 0.0));
        let f = [1.0; 5];
        assert!(matches!(p.forward(&f[..4]), Err(PolicyError::ShapeMismatch(_))));
    }

    proptest! {
        #[test]
        fn distributions_normalize(seed in any::<u64>(), scale in 0.01f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = shape(3, true);
            let p = random_params(s, &mut rng, scale);
            let f: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            for d in p.ground_distribution(&f).unwrap() {
                prop_assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            let a = p.answer_distribution(&f).unwrap();
            prop_assert!((a.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
