//! Rollout state machines: the fixed two-turn crop-and-answer template, its
//! generalized K-turn form, the single-turn baseline, counting rollouts, group
//! sampling, and the text protocol used for transcripts.

use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    self, BBox, PixelRect, Point, PointSet, Size, Validity, align_rect, clamp_and_round_crop_rect,
    remap_to_original, validate_bbox,
};
use crate::imaging::{self, ImageBuffer, ImagingConfig, ImagingError, PatchTokens};
use crate::policy::{
    self, ActKind, Action, AnswerAction, FeatureConfig, GroundAction, PolicyError, PolicyParams,
    decode_ground_action, featurize,
};
use crate::rewards::{RewardConfig, RewardError, combined_reward};
use crate::taskgen::{QuestionKind, Scene, SceneTask, VisualTask};

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("group size must be at least 2, got {0}")]
    GroupTooSmall(usize),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Mode {
    Mgpo,
    Grpo,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "mgpo" => Ok(Mode::Mgpo),
            "grpo" => Ok(Mode::Grpo),
            other => Err(format!("unknown mode '{other}' (expected mgpo or grpo)")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Mgpo => "MGPO",
            Mode::Grpo => "GRPO",
        })
    }
}

/// Where a visual entry came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Provenance {
    /// The original image, already within budget.
    Original,
    /// The budget-resized original (also the fallback after an invalid box).
    Resized,
    /// A crop of the original over `source`, then budget-resized.
    Crop { source: PixelRect },
}

#[derive(Debug, Clone)]
pub struct VisualEntry {
    pub image: Arc<ImageBuffer>,
    pub tokens: Arc<PatchTokens>,
    pub provenance: Provenance,
    /// Image pixels per original pixel.
    pub scale: f64,
}

impl VisualEntry {
    pub fn new(image: ImageBuffer, provenance: Provenance, scale: f64, imaging: &ImagingConfig) -> Result<Self, ImagingError> {
        let tokens = imaging::tokenize(&image, imaging)?;
        Ok(Self {
            image: Arc::new(image),
            tokens: Arc::new(tokens),
            provenance,
            scale,
        })
    }

    /// The frame boxes emitted against this entry refer to.
    pub fn frame(&self) -> Size {
        self.image.size()
    }
}

/// One sampled action plus the features it was conditioned on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionTerm {
    #[serde(skip)]
    pub features: Vec<f64>,
    pub action: Action,
    pub logprob: f64,
}

/// All actions emitted in one assistant turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub terms: Vec<ActionTerm>,
}

#[derive(Debug, Clone)]
pub enum Entry {
    Visual(VisualEntry),
    Action { turn: usize, terms: Vec<(Action, f64)> },
}

/// The interaction history: images and actions in conversation order.
#[derive(Debug, Clone)]
pub struct ConversationState {
    entries: Vec<Entry>,
    pub question_kind: QuestionKind,
    pub num_choices: usize,
}

impl ConversationState {
    pub fn new(first: VisualEntry, question_kind: QuestionKind, num_choices: usize) -> Self {
        Self {
            entries: vec![Entry::Visual(first)],
            question_kind,
            num_choices,
        }
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn visuals(&self) -> impl Iterator<Item = &VisualEntry> {
        self.entries.iter().filter_map(|e| match e {
            Entry::Visual(v) => Some(v),
            Entry::Action { .. } => None,
        })
    }

    pub fn last_visual(&self) -> &VisualEntry {
        self.visuals().last().expect("first entry is visual")
    }

    /// Number of action entries so far plus one.
    pub fn current_turn(&self) -> usize {
        1 + self
            .entries
            .iter()
            .filter(|e| matches!(e, Entry::Action { .. }))
            .count()
    }

    pub fn push_action(&mut self, turn: &Turn) {
        let turn_index = self.current_turn();
        self.entries.push(Entry::Action {
            turn: turn_index,
            terms: turn.terms.iter().map(|t| (t.action, t.logprob)).collect(),
        });
    }

    pub fn push_visual(&mut self, v: VisualEntry) {
        self.entries.push(Entry::Visual(v));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Termination {
    Answer,
    TurnLimit,
}

/// One rollout. Box fields describe the first grounding action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub turns: Vec<Turn>,
    pub k_g: usize,
    pub final_answer: Option<u32>,
    /// Decoded box in the frame of the image it was emitted against.
    pub grounding_bbox_input: Option<BBox>,
    pub grounding_bbox_original: Option<BBox>,
    pub validity: Option<Validity>,
    /// Pixel rectangle of the original that was (or would be) cropped.
    pub crop_rect: Option<PixelRect>,
    pub terminated_by: Termination,
    /// Point proposals in the original frame (counting tasks).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<PointSet>,
}

impl Trajectory {
    pub fn action_terms(&self) -> impl Iterator<Item = &ActionTerm> {
        self.turns.iter().flat_map(|t| t.terms.iter())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub task_id: String,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub baseline: f64,
}

/// Everything a rollout needs besides parameters and randomness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub imaging: ImagingConfig,
    pub features: FeatureConfig,
    pub temperature: f64,
    /// Smallest crop side in original pixels.
    pub min_side: u32,
}

impl RolloutConfig {
    pub fn max_turns(&self) -> usize {
        self.features.max_turns
    }
}

/// Debug overrides for the grounding action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GroundOverride {
    /// Emit these bins instead of sampling.
    Bins(GroundAction),
    /// Emit the task's ground-truth target box exactly (recorded action: the
    /// covering bins).
    TargetBox,
}

/// Full-resolution pixels of a task: a stored raster or a procedural scene
/// rendered on demand.
#[derive(Debug, Clone)]
pub enum ImageSource {
    Image(Arc<ImageBuffer>),
    Scene(Arc<Scene>),
}

impl ImageSource {
    pub fn size(&self) -> Size {
        match self {
            ImageSource::Image(img) => img.size(),
            ImageSource::Scene(s) => s.size,
        }
    }

    pub fn crop(&self, rect: PixelRect) -> ImageBuffer {
        match self {
            ImageSource::Image(img) => img.crop(rect),
            ImageSource::Scene(s) => s.render_rect(rect),
        }
    }

    pub fn full(&self) -> ImageBuffer {
        match self {
            ImageSource::Image(img) => (**img).clone(),
            ImageSource::Scene(s) => s.render(),
        }
    }
}

/// A task with its original image and the budget-resized input, shared by all
/// rollouts of a group.
#[derive(Debug, Clone)]
pub struct PreparedTask {
    pub task: VisualTask,
    pub original: ImageSource,
    pub input: VisualEntry,
}

impl PreparedTask {
    pub fn new(task: VisualTask, original: ImageBuffer, imaging: &ImagingConfig) -> Result<Self, ImagingError> {
        let input = Self::input_entry(&original, imaging)?;
        Ok(Self {
            task,
            original: ImageSource::Image(Arc::new(original)),
            input,
        })
    }

    /// Keeps only the scene description and the resized input in memory.
    pub fn from_scene(st: SceneTask, imaging: &ImagingConfig) -> Result<Self, ImagingError> {
        let input = Self::input_entry(&st.scene.render(), imaging)?;
        Ok(Self {
            task: st.task,
            original: ImageSource::Scene(Arc::new(st.scene)),
            input,
        })
    }

    fn input_entry(original: &ImageBuffer, imaging: &ImagingConfig) -> Result<VisualEntry, ImagingError> {
        let resized = imaging::fit_for_encoder(original, imaging.max_pixels, imaging.align);
        let provenance = if resized.size() == original.size() {
            Provenance::Original
        } else {
            Provenance::Resized
        };
        let scale = resized.width() as f64 / original.width() as f64;
        VisualEntry::new(resized, provenance, scale, imaging)
    }

    fn fallback_entry(&self) -> VisualEntry {
        VisualEntry {
            provenance: Provenance::Resized,
            ..self.input.clone()
        }
    }
}

/// Result of turning a decoded box into the next visual.
#[derive(Debug, Clone)]
pub struct GroundingOutcome {
    pub validity: Validity,
    pub bbox_original: Option<BBox>,
    pub crop_rect: Option<PixelRect>,
    pub entry: VisualEntry,
}

/// Validity check, coordinate remap and crop from the original; invalid boxes
/// fall back to the resized original.
pub fn ground_and_crop(
    prepared: &PreparedTask,
    bbox_input: &BBox,
    cfg: &RolloutConfig,
) -> Result<GroundingOutcome, RolloutError> {
    let input_frame = prepared.input.frame();
    let validity = validate_bbox(bbox_input, input_frame);
    if !validity.is_valid() {
        return Ok(GroundingOutcome {
            validity,
            bbox_original: None,
            crop_rect: None,
            entry: prepared.fallback_entry(),
        });
    }
    let ori_frame = prepared.original.size();
    let bbox_original = remap_to_original(bbox_input, input_frame, ori_frame).expect("validated box");
    let (rect, image) = crop_original(&prepared.original, &bbox_original, cfg)?;
    let scale = image.width() as f64 / rect.width() as f64;
    let entry = VisualEntry::new(image, Provenance::Crop { source: rect }, scale, &cfg.imaging)?;
    Ok(GroundingOutcome {
        validity,
        bbox_original: Some(bbox_original),
        crop_rect: Some(rect),
        entry,
    })
}

/// Pixel rectangle and encoder-ready image for a crop of the original at a
/// valid original-frame box.
pub fn crop_original(
    original: &ImageSource,
    bbox_original: &BBox,
    cfg: &RolloutConfig,
) -> Result<(PixelRect, ImageBuffer), RolloutError> {
    let rect = crop_rect_for(original.size(), bbox_original, cfg);
    let crop = original.crop(rect);
    let image = imaging::fit_for_encoder(&crop, cfg.imaging.max_pixels, cfg.imaging.align);
    Ok((rect, image))
}

/// Bins whose decoded box covers `b` (a box in `frame`).
pub fn covering_bins(b: &BBox, frame: Size, bins: usize) -> GroundAction {
    let cw = frame.width() as f64 / bins as f64;
    let ch = frame.height() as f64 / bins as f64;
    let clampb = |v: f64| (v.max(0.0) as u32).min(bins as u32 - 1);
    GroundAction {
        bins: [
            clampb((b.x1 / cw).floor()),
            clampb((b.y1 / ch).floor()),
            clampb((b.x2 / cw).ceil() - 1.0),
            clampb((b.y2 / ch).ceil() - 1.0),
        ],
    }
}

/// Samples (or forces) a grounding action; returns the term and the decoded box.
fn ground_term(
    params: &PolicyParams,
    prepared: &PreparedTask,
    f: Vec<f64>,
    cfg: &RolloutConfig,
    rng: &mut ChaCha8Rng,
    force: Option<GroundOverride>,
) -> Result<(ActionTerm, BBox), RolloutError> {
    let frame = prepared.input.frame();
    let bins = cfg.features.bins;
    let (action, bbox) = match force {
        None => {
            let (a, _) = params.sample_ground(&f, rng, cfg.temperature)?;
            (a, decode_ground_action(&a, frame, bins))
        }
        Some(GroundOverride::Bins(a)) => (a, decode_ground_action(&a, frame, bins)),
        Some(GroundOverride::TargetBox) => {
            let t = prepared.task.target_bbox.unwrap_or(prepared.original.size().full_box());
            let b = remap_to_original(&t, prepared.original.size(), frame).unwrap_or(frame.full_box());
            (covering_bins(&b, frame, bins), b)
        }
    };
    let action = Action::Ground(action);
    let logprob = params.logprob_of(&f, &action)?;
    Ok((
        ActionTerm {
            features: f,
            action,
            logprob,
        },
        bbox,
    ))
}

fn answer_term(params: &PolicyParams, f: Vec<f64>, cfg: &RolloutConfig, rng: &mut ChaCha8Rng) -> Result<ActionTerm, RolloutError> {
    let (a, logprob) = params.sample_answer(&f, rng, cfg.temperature)?;
    Ok(ActionTerm {
        features: f,
        action: Action::Answer(a),
        logprob,
    })
}

fn answer_of(term: &ActionTerm) -> Option<u32> {
    match term.action {
        Action::Answer(AnswerAction { choice }) => Some(choice),
        _ => None,
    }
}

fn new_state(prepared: &PreparedTask) -> ConversationState {
    ConversationState::new(
        prepared.input.clone(),
        prepared.task.question_kind,
        prepared.task.num_choices(),
    )
}

/// Multi-turn rollout. With `max_turns == 2` this is the fixed template:
/// ground, crop (or fall back), answer. Larger limits run the general loop in
/// which an act head chooses to ground, answer or reason each turn.
pub fn run_mgpo_rollout(
    params: &PolicyParams,
    prepared: &PreparedTask,
    cfg: &RolloutConfig,
    rng: &mut ChaCha8Rng,
    force: Option<GroundOverride>,
) -> Result<(Trajectory, ConversationState), RolloutError> {
    let mut state = new_state(prepared);
    let mut traj = Trajectory {
        task_id: prepared.task.task_id.clone(),
        turns: Vec::new(),
        k_g: 0,
        final_answer: None,
        grounding_bbox_input: None,
        grounding_bbox_original: None,
        validity: None,
        crop_rect: None,
        terminated_by: Termination::TurnLimit,
        points: None,
    };
    let fixed = cfg.max_turns() <= 2;
    for k in 1..=cfg.max_turns() {
        let f = featurize(&state, &cfg.features)?;
        let mut terms = Vec::new();
        let kind = if fixed {
            if k == 1 { ActKind::Ground } else { ActKind::Answer }
        } else {
            let (kind, logprob) = params.sample_act(&f, rng, cfg.temperature)?;
            terms.push(ActionTerm {
                features: f.clone(),
                action: Action::Act { kind },
                logprob,
            });
            kind
        };
        let mut next_visual = None;
        match kind {
            ActKind::Ground => {
                let (term, bbox) = ground_term(params, prepared, f, cfg, rng, force)?;
                terms.push(term);
                // boxes refer to the most recent image; only the input frame
                // maps onto the original, so later boxes are read against it
                let outcome = ground_and_crop(prepared, &bbox, cfg)?;
                if traj.validity.is_none() {
                    traj.grounding_bbox_input = Some(bbox);
                    traj.grounding_bbox_original = outcome.bbox_original;
                    traj.validity = Some(outcome.validity);
                    traj.crop_rect = outcome.crop_rect;
                }
                next_visual = Some(outcome.entry);
            }
            ActKind::Answer => {
                let term = answer_term(params, f, cfg, rng)?;
                traj.final_answer = answer_of(&term);
                terms.push(term);
            }
            ActKind::Reason => {}
        }
        let turn = Turn { terms };
        state.push_action(&turn);
        traj.turns.push(turn);
        if let Some(v) = next_visual {
            state.push_visual(v);
        }
        if traj.final_answer.is_some() {
            traj.terminated_by = Termination::Answer;
            break;
        }
    }
    traj.k_g = traj.turns.len();
    Ok((traj, state))
}

/// Single-turn baseline: coordinates then answer in one response, both
/// conditioned on the downsampled input alone. No crop is taken.
pub fn run_grpo_rollout(
    params: &PolicyParams,
    prepared: &PreparedTask,
    cfg: &RolloutConfig,
    rng: &mut ChaCha8Rng,
    force: Option<GroundOverride>,
) -> Result<Trajectory, RolloutError> {
    let state = new_state(prepared);
    let f = featurize(&state, &cfg.features)?;
    let (ground, bbox) = ground_term(params, prepared, f, cfg, rng, force)?;
    let frame = prepared.input.frame();
    let validity = validate_bbox(&bbox, frame);
    let (bbox_original, crop_rect) = if validity.is_valid() {
        let b = remap_to_original(&bbox, frame, prepared.original.size()).expect("validated box");
        (Some(b), Some(crop_rect_for(prepared.original.size(), &b, cfg)))
    } else {
        (None, None)
    };
    let f2 = ground.features.clone();
    let answer = answer_term(params, f2, cfg, rng)?;
    Ok(Trajectory {
        task_id: prepared.task.task_id.clone(),
        final_answer: answer_of(&answer),
        turns: vec![Turn {
            terms: vec![ground, answer],
        }],
        k_g: 1,
        grounding_bbox_input: Some(bbox),
        grounding_bbox_original: bbox_original,
        validity: Some(validity),
        crop_rect,
        terminated_by: Termination::Answer,
        points: None,
    })
}

/// Pixel rectangle a crop at the original-frame box `b` would cover.
pub fn crop_rect_for(frame: Size, b: &BBox, cfg: &RolloutConfig) -> PixelRect {
    let min_side = cfg.min_side.min(frame.width()).min(frame.height());
    let rect = clamp_and_round_crop_rect(b, frame, min_side).expect("validated box");
    align_rect(rect, frame, cfg.imaging.align)
}

/// Counting rollout: one turn that emits a count and then that many point
/// proposals, each the center of a sampled box. Proposals whose box is
/// invalid are dropped.
pub fn run_count_rollout(
    params: &PolicyParams,
    prepared: &PreparedTask,
    cfg: &RolloutConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory, RolloutError> {
    let state = new_state(prepared);
    let f = featurize(&state, &cfg.features)?;
    let answer = answer_term(params, f.clone(), cfg, rng)?;
    let count = answer_of(&answer).unwrap_or(0);
    let frame = prepared.input.frame();
    let ori = prepared.original.size();
    let mut terms = vec![answer];
    let mut points = Vec::new();
    for _ in 0..count {
        let (term, bbox) = ground_term(params, prepared, f.clone(), cfg, rng, None)?;
        terms.push(term);
        if validate_bbox(&bbox, frame).is_valid() {
            let b = remap_to_original(&bbox, frame, ori).expect("validated box");
            points.push(b.center());
        }
    }
    Ok(Trajectory {
        task_id: prepared.task.task_id.clone(),
        turns: vec![Turn { terms }],
        k_g: 1,
        final_answer: Some(count),
        grounding_bbox_input: None,
        grounding_bbox_original: None,
        validity: None,
        crop_rect: None,
        terminated_by: Termination::Answer,
        points: Some(points),
    })
}

/// Dispatches on task kind and mode.
pub fn run_rollout(
    params: &PolicyParams,
    prepared: &PreparedTask,
    mode: Mode,
    cfg: &RolloutConfig,
    rng: &mut ChaCha8Rng,
    force: Option<GroundOverride>,
) -> Result<Trajectory, RolloutError> {
    match (prepared.task.question_kind, mode) {
        (QuestionKind::Count, _) => run_count_rollout(params, prepared, cfg, rng),
        (QuestionKind::NeedleChoice, Mode::Mgpo) => Ok(run_mgpo_rollout(params, prepared, cfg, rng, force)?.0),
        (QuestionKind::NeedleChoice, Mode::Grpo) => run_grpo_rollout(params, prepared, cfg, rng, force),
    }
}

/// Random stream of group member `g`: the group seed xor-ed with `g`.
pub fn member_rng(group_seed: u64, g: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(group_seed ^ g as u64)
}

/// `G` independent rollouts of one task with rewards and the group baseline.
/// Members run in parallel but are returned in index order.
pub fn run_group(
    params: &PolicyParams,
    prepared: &PreparedTask,
    group_size: usize,
    mode: Mode,
    cfg: &RolloutConfig,
    reward: &RewardConfig,
    group_seed: u64,
) -> Result<RolloutGroup, RolloutError> {
    if group_size < 2 {
        return Err(RolloutError::GroupTooSmall(group_size));
    }
    let trajectories = (0..group_size)
        .into_par_iter()
        .map(|g| run_rollout(params, prepared, mode, cfg, &mut member_rng(group_seed, g), None))
        .collect::<Result<Vec<_>, _>>()?;
    let rewards = trajectories
        .iter()
        .map(|t| combined_reward(t, &prepared.task, reward))
        .collect::<Result<Vec<_>, _>>()?;
    let baseline = rewards.iter().sum::<f64>() / group_size as f64;
    Ok(RolloutGroup {
        task_id: prepared.task.task_id.clone(),
        trajectories,
        rewards,
        baseline,
    })
}

// ---------------------------------------------------------------------------
// Text protocol
// ---------------------------------------------------------------------------

pub const GROUNDING_PROMPT: &str = "The image shows a large scene. First, output only the coordinates of the key image \
region that helps answer the question, in JSON format: {\"bbox_2d\": [x1, y1, x2, y2]}.";
pub const ANSWER_PROMPT: &str = "Answer the question using the image(s) above. Put the answer letter (A, B, C, D, or E) \
within \\boxed{}.";
pub const CROP_NOTICE: &str = "[tool] Cropped region returned from the original image.";
pub const FALLBACK_NOTICE: &str = "[tool] The coordinates were invalid; the original image is returned.";

fn answer_text(task: &VisualTask, answer: u32) -> String {
    match task.question_kind {
        QuestionKind::NeedleChoice => VisualTask::choice_letter(answer as usize).to_string(),
        QuestionKind::Count => answer.to_string(),
    }
}

fn bbox_json(b: &BBox) -> String {
    serde_json::json!({ "bbox_2d": b.to_array() }).to_string()
}

/// Human-readable conversation for one trajectory.
pub fn render_transcript(traj: &Trajectory, task: &VisualTask) -> String {
    let mut out = String::new();
    let mut line = |s: &str| {
        out.push_str(s);
        out.push('\n');
    };
    line(&format!("# task {}", traj.task_id));
    line("[system] You are a helpful assistant that can zoom into image regions.");
    line(&format!("[user] <image {}x{}>", task.original_size.width(), task.original_size.height()));
    line(&format!("[user] Question: {}", task.question));
    for (i, c) in task.choices.iter().enumerate() {
        if task.question_kind == QuestionKind::NeedleChoice {
            line(&format!("[user] ({}) {}", VisualTask::choice_letter(i), c));
        }
    }
    line(&format!("[user] {GROUNDING_PROMPT}"));
    let mut grounded = false;
    for (k, turn) in traj.turns.iter().enumerate() {
        for term in &turn.terms {
            match term.action {
                Action::Act { kind } => line(&format!("[assistant turn {}] <act {kind:?}>", k + 1)),
                Action::Ground(g) => {
                    if grounded || task.question_kind == QuestionKind::Count {
                        line(&format!("[assistant turn {}] <bins {:?}>", k + 1, g.bins));
                        continue;
                    }
                    grounded = true;
                    let b = traj.grounding_bbox_input.unwrap_or(BBox::new(0.0, 0.0, 0.0, 0.0));
                    line(&format!("[assistant turn {}] {}", k + 1, bbox_json(&b)));
                    match (&traj.validity, traj.k_g) {
                        (_, 1) => {}
                        (Some(v), _) if v.is_valid() => {
                            let r = traj.crop_rect.expect("valid grounding has a crop");
                            line(&format!("{CROP_NOTICE} source=[{}, {}, {}, {}]", r.x0, r.y0, r.x1, r.y1));
                        }
                        _ => line(FALLBACK_NOTICE),
                    }
                    if traj.k_g > 1 {
                        line(&format!("[user] {ANSWER_PROMPT}"));
                    }
                }
                Action::Answer(a) => {
                    line(&format!("[assistant turn {}] The answer is \\boxed{{{}}}", k + 1, answer_text(task, a.choice)));
                }
            }
        }
    }
    if traj.terminated_by == Termination::TurnLimit {
        line("[system] turn limit reached without an answer");
    }
    if out.ends_with('\n') {
        out.pop();
    }
    out
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("no JSON object with a \"bbox_2d\" key found")]
    NoJsonFound,
    #[error("\"bbox_2d\" must be an array of four numbers")]
    BadShape,
    #[error("no \\boxed{{}} answer found")]
    NoBoxedAnswer,
    #[error("boxed content '{0}' is not a letter A-E")]
    BadLetter(String),
}

/// First JSON object in `text` that has a `bbox_2d` key, as a raw box.
pub fn parse_coordinates_json(text: &str) -> Result<BBox, ParseError> {
    for (i, _) in text.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<serde_json::Value>();
        let Some(Ok(serde_json::Value::Object(obj))) = stream.next() else {
            continue;
        };
        let Some(v) = obj.get("bbox_2d") else {
            continue;
        };
        let nums: Option<Vec<f64>> = v
            .as_array()
            .filter(|a| a.len() == 4)
            .and_then(|a| a.iter().map(serde_json::Value::as_f64).collect());
        return match nums {
            Some(n) => Ok(BBox::new(n[0], n[1], n[2], n[3])),
            None => Err(ParseError::BadShape),
        };
    }
    Err(ParseError::NoJsonFound)
}

/// Letter inside the last `\boxed{...}`.
pub fn parse_boxed_answer(text: &str) -> Result<char, ParseError> {
    let start = text.rfind("\\boxed{").ok_or(ParseError::NoBoxedAnswer)?;
    let rest = &text[start + "\\boxed{".len()..];
    let end = rest.find('}').ok_or(ParseError::NoBoxedAnswer)?;
    let inner = rest[..end].trim();
    let mut chars = inner.chars();
    match (chars.next(), chars.next()) {
        (Some(c @ 'A'..='E'), None) => Ok(c),
        _ => Err(ParseError::BadLetter(inner.to_string())),
    }
}

// ---------------------------------------------------------------------------
// Rollout log
// ---------------------------------------------------------------------------

/// One JSONL line per trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutLogRecord {
    pub task_id: String,
    pub actions: Vec<Action>,
    pub logprobs: Vec<f64>,
    pub validity: Option<Validity>,
    pub reward: f64,
}

impl RolloutLogRecord {
    pub fn new(traj: &Trajectory, reward: f64) -> Self {
        Self {
            task_id: traj.task_id.clone(),
            actions: traj.action_terms().map(|t| t.action).collect(),
            logprobs: traj.action_terms().map(|t| t.logprob).collect(),
            validity: traj.validity,
            reward,
        }
    }
}

pub fn append_rollout_log(path: &Path, groups: &[RolloutGroup]) -> Result<(), RolloutError> {
    let mut file = io::BufWriter::new(fs::OpenOptions::new().create(true).append(true).open(path)?);
    for group in groups {
        for (traj, r) in group.trajectories.iter().zip(&group.rewards) {
            serde_json::to_writer(&mut file, &RolloutLogRecord::new(traj, *r)).map_err(io::Error::other)?;
            file.write_all(b"\n")?;
        }
    }
    file.flush()?;
    Ok(())
}

/// Exposed for tests and replay: the features the policy sees at turn 1.
pub fn initial_features(prepared: &PreparedTask, cfg: &RolloutConfig) -> Result<Vec<f64>, RolloutError> {
    Ok(policy::featurize(&new_state(prepared), &cfg.features)?)
}

/// Points of a task that fall inside a box (used by grounding diagnostics).
pub fn points_inside(points: &[Point], b: &BBox) -> usize {
    points.iter().filter(|p| geometry::point_in_bbox(p, b)).count()
}
