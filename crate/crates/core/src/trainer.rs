//! Run configuration, the seeded training loop, evaluation, checkpointing,
//! pixel-budget sweeps, replay and run comparison.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Size;
use crate::imaging::{self, ImagingConfig};
use crate::optimizer::{
    GradAccum, OptimError, OptimState, TrainConfig, accumulate_mgpo_grad, adamw_step, clipped_surrogate_grad,
    recorded_logprobs,
};
use crate::policy::{Checkpoint, FeatureConfig, PolicyError, PolicyParams, PolicyShape, RngState};
use crate::rewards::{RewardConfig, accuracy_reward};
use crate::rollout::{
    self, GroundOverride, Mode, PreparedTask, RolloutConfig, RolloutError, RolloutGroup, Trajectory,
    append_rollout_log, run_group, run_mgpo_rollout, run_rollout,
};
use crate::taskgen::{self, GenConfig, QuestionKind, TaskGenError, oracle_answer};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("metrics logs are not aligned: {0}")]
    MisalignedLogs(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    TaskGen(#[from] TaskGenError),
}

impl TrainerError {
    /// Process exit code: 2 for configuration problems, 3 for I/O, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            TrainerError::Config(_) => 2,
            TrainerError::Io { .. } | TrainerError::NotFound(_) => 3,
            TrainerError::TaskGen(TaskGenError::Io(_) | TaskGenError::Imaging(_) | TaskGenError::MalformedRecord { .. }) => 3,
            TrainerError::TaskGen(TaskGenError::InvalidConfig(_)) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TrainerError + '_ {
    move |source| TrainerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Policy architecture knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Coordinate bins per axis.
    pub bins: usize,
    /// Hidden width; 0 gives the affine policy.
    pub hidden: usize,
    /// Heads also read the raw features.
    pub skip: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            bins: 4,
            hidden: 64,
            skip: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub question_kind: QuestionKind,
    pub output_dir: PathBuf,
    pub eval_every: u64,
    pub eval_set_size: usize,
    /// Number of distinct training tasks cycled through; 0 draws a fresh task
    /// for every group.
    pub train_pool: u64,
    /// Turn limit; 2 is the fixed crop-then-answer template.
    pub max_turns: usize,
    /// Smallest crop side in original pixels.
    pub min_side: u32,
    pub sweep_budgets: Vec<u64>,
    /// Append every trajectory to `rollouts.jsonl`.
    pub rollout_log: bool,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub reward: RewardConfig,
    pub imaging: ImagingConfig,
    pub gen_train: GenConfig,
    pub gen_eval_id: GenConfig,
    pub gen_eval_ood: GenConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let gen_train = GenConfig::default();
        Self {
            mode: Mode::Mgpo,
            question_kind: QuestionKind::NeedleChoice,
            output_dir: PathBuf::from("runs/default"),
            eval_every: 20,
            eval_set_size: 500,
            train_pool: 0,
            max_turns: 2,
            min_side: 8,
            sweep_budgets: vec![128 * 128, 256 * 256],
            rollout_log: false,
            policy: PolicyConfig::default(),
            train: TrainConfig::default(),
            reward: RewardConfig::default(),
            imaging: ImagingConfig::default(),
            gen_eval_id: GenConfig {
                seed: 1_000_003,
                ..gen_train.clone()
            },
            gen_eval_ood: GenConfig {
                image_size: Size::new(1536, 1152).expect("positive"),
                glyph_alphabet_id: 1,
                seed: 2_000_003,
                ..gen_train.clone()
            },
            gen_train,
        }
    }
}

impl RunConfig {
    /// Counting environment with the accuracy-only reward.
    pub fn counting() -> Self {
        let gen_train = GenConfig {
            image_size: Size::square(512),
            distractor_count: 4,
            count_range: (1, 6),
            ..GenConfig::default()
        };
        Self {
            question_kind: QuestionKind::Count,
            mode: Mode::Grpo,
            train_pool: 3000,
            imaging: ImagingConfig {
                max_pixels: 64 * 64,
                ..ImagingConfig::default()
            },
            gen_eval_id: GenConfig {
                seed: 1_000_003,
                ..gen_train.clone()
            },
            gen_eval_ood: GenConfig {
                image_size: Size::new(768, 576).expect("positive"),
                glyph_alphabet_id: 1,
                seed: 2_000_003,
                ..gen_train.clone()
            },
            gen_train,
            ..Self::default()
        }
    }

    /// Parses `text` as overrides of [`RunConfig::default`]. Nested tables
    /// merge key by key, so a partial `[gen_eval_ood]` keeps the remaining
    /// OOD defaults rather than those of a plain generator.
    pub fn from_toml(text: &str) -> Result<Self, TrainerError> {
        let cfg_err = |e: &dyn std::fmt::Display| TrainerError::Config(e.to_string());
        let overrides: toml::Table = toml::from_str(text).map_err(|e| cfg_err(&e))?;
        let mut merged = toml::Table::try_from(Self::default()).expect("config serializes");
        overlay(&mut merged, overrides);
        let cfg: RunConfig = toml::Value::Table(merged).try_into().map_err(|e| cfg_err(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TrainerError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), TrainerError> {
        let bad = |m: String| Err(TrainerError::Config(m));
        self.train.validate().map_err(|e| TrainerError::Config(e.to_string()))?;
        self.reward.validate().map_err(|e| TrainerError::Config(e.to_string()))?;
        self.imaging.validate().map_err(|e| TrainerError::Config(e.to_string()))?;
        for g in [&self.gen_train, &self.gen_eval_id, &self.gen_eval_ood] {
            g.validate().map_err(|e| TrainerError::Config(e.to_string()))?;
        }
        let train_seed = self.train_gen().seed;
        if self.gen_eval_id.seed == train_seed || self.gen_eval_ood.seed == train_seed {
            return bad("evaluation seeds must differ from the training seed".into());
        }
        if self.eval_set_size < 1 {
            return bad("eval_set_size must be at least 1".into());
        }
        if self.eval_every < 1 {
            return bad("eval_every must be at least 1".into());
        }
        if self.max_turns < 2 {
            return bad("max_turns must be at least 2".into());
        }
        if self.policy.bins < 1 {
            return bad("policy.bins must be positive".into());
        }
        if self.question_kind == QuestionKind::NeedleChoice && self.reward.kind != crate::rewards::RewardKind::Accuracy {
            return bad("the point reward needs counting tasks".into());
        }
        Ok(())
    }

    /// Generator of the training stream. The run seed is mixed in so different
    /// seeds see different tasks while both modes share one stream.
    pub fn train_gen(&self) -> GenConfig {
        GenConfig {
            seed: self.gen_train.seed ^ mix(self.train.seed, 0x7a5c),
            ..self.gen_train.clone()
        }
    }

    pub fn rollout_config(&self) -> RolloutConfig {
        RolloutConfig {
            imaging: self.imaging,
            features: self.feature_config(),
            temperature: self.train.temperature,
            min_side: self.min_side,
        }
    }

    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            bins: self.policy.bins,
            max_turns: self.max_turns,
        }
    }

    pub fn num_choices(&self) -> usize {
        match self.question_kind {
            QuestionKind::NeedleChoice => taskgen::NUM_CLASSES,
            QuestionKind::Count => self.gen_train.count_range.1 as usize + 1,
        }
    }

    pub fn policy_shape(&self) -> PolicyShape {
        PolicyShape {
            feature_dim: self.feature_config().feature_dim(),
            bins: self.policy.bins,
            choices: self.num_choices(),
            hidden: self.policy.hidden,
            skip: self.policy.skip,
        }
    }

    /// Index of the task used by group `group` of `iteration`.
    pub fn task_index(&self, iteration: u64, group: usize) -> u64 {
        let k = iteration * self.train.groups_per_batch as u64 + group as u64;
        if self.train_pool > 0 { k % self.train_pool } else { k }
    }
}

fn overlay(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => overlay(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// SplitMix64 finalizer over a pair of words.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One line of `metrics.jsonl`. Training fields describe the rollouts sampled
/// at this iteration; evaluation fields are present on evaluation iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_reward: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_ground_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_id_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_ood_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_answerable_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_valid_ground_ratio: Option<f64>,
}

impl MetricsRecord {
    fn empty(iteration: u64) -> Self {
        Self {
            iteration,
            mean_reward: None,
            train_accuracy: None,
            valid_ground_ratio: None,
            eval_id_accuracy: None,
            eval_ood_accuracy: None,
            crop_answerable_ratio: None,
            eval_valid_ground_ratio: None,
        }
    }

    pub fn is_eval(&self) -> bool {
        self.eval_id_accuracy.is_some()
    }

    /// Every ratio lies in `[0, 1]` and every value is finite.
    pub fn check(&self) -> Result<(), String> {
        let fields = [
            ("train_accuracy", self.train_accuracy),
            ("valid_ground_ratio", self.valid_ground_ratio),
            ("eval_id_accuracy", self.eval_id_accuracy),
            ("eval_ood_accuracy", self.eval_ood_accuracy),
            ("crop_answerable_ratio", self.crop_answerable_ratio),
            ("eval_valid_ground_ratio", self.eval_valid_ground_ratio),
        ];
        for (name, v) in fields {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(format!("{name} = {v} outside [0, 1]"));
                }
            }
        }
        match self.mean_reward {
            Some(r) if !r.is_finite() => Err("mean_reward is not finite".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    /// `None` for counting tasks, which emit no box.
    pub valid_ground_ratio: Option<f64>,
    pub crop_answerable_ratio: Option<f64>,
}

/// Builds `n` prepared tasks from `gen` (indices `0..n`).
pub fn build_eval_set(gen: &GenConfig, kind: QuestionKind, n: usize, imaging: &ImagingConfig) -> Result<Vec<PreparedTask>, TrainerError> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let st = taskgen::gen_scene(gen, kind, i)?;
            PreparedTask::from_scene(st, imaging).map_err(|e| TrainerError::TaskGen(e.into()))
        })
        .collect()
}

/// Whether the crop at a trajectory's (real or hypothetical) crop rectangle
/// lets the oracle read the right answer.
pub fn crop_answerable(prepared: &PreparedTask, traj: &Trajectory, imaging: &ImagingConfig) -> bool {
    let Some(rect) = traj.crop_rect else {
        return false;
    };
    let crop = prepared.original.crop(rect);
    let img = imaging::fit_for_encoder(&crop, imaging.max_pixels, imaging.align);
    let scale = img.width() as f64 / rect.width() as f64;
    oracle_answer(&prepared.task, &img, scale) == Some(prepared.task.answer_index)
}

/// Greedy evaluation of `params` on `tasks`.
pub fn evaluate(
    params: &PolicyParams,
    tasks: &[PreparedTask],
    mode: Mode,
    rollout_cfg: &RolloutConfig,
    force: Option<GroundOverride>,
) -> Result<EvalResult, TrainerError> {
    let greedy = RolloutConfig {
        temperature: 0.0,
        ..*rollout_cfg
    };
    let per_task: Vec<(f64, Option<bool>, bool)> = tasks
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
            let traj = run_rollout(params, p, mode, &greedy, &mut rng, force)?;
            let acc = accuracy_reward(&traj, &p.task);
            let valid = traj.validity.map(|v| v.is_valid());
            let answerable = p.task.question_kind == QuestionKind::NeedleChoice && crop_answerable(p, &traj, &greedy.imaging);
            Ok((acc, valid, answerable))
        })
        .collect::<Result<_, RolloutError>>()?;
    let n = per_task.len().max(1) as f64;
    let accuracy = per_task.iter().map(|t| t.0).sum::<f64>() / n;
    let grounded: Vec<bool> = per_task.iter().filter_map(|t| t.1).collect();
    let valid_ground_ratio =
        (!grounded.is_empty()).then(|| grounded.iter().filter(|v| **v).count() as f64 / grounded.len() as f64);
    let needle = tasks.iter().any(|t| t.task.question_kind == QuestionKind::NeedleChoice);
    let crop_answerable_ratio = needle.then(|| per_task.iter().filter(|t| t.2).count() as f64 / n);
    Ok(EvalResult {
        accuracy,
        valid_ground_ratio,
        crop_answerable_ratio,
    })
}

/// Both evaluation sets of a run, built once and reusable across runs that
/// share generator and imaging settings.
#[derive(Debug, Clone)]
pub struct EvalSets {
    pub id: Vec<PreparedTask>,
    pub ood: Vec<PreparedTask>,
}

impl EvalSets {
    pub fn build(cfg: &RunConfig) -> Result<Self, TrainerError> {
        Ok(Self {
            id: build_eval_set(&cfg.gen_eval_id, cfg.question_kind, cfg.eval_set_size, &cfg.imaging)?,
            ood: build_eval_set(&cfg.gen_eval_ood, cfg.question_kind, cfg.eval_set_size, &cfg.imaging)?,
        })
    }
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(CHECKPOINT_DIR).join(format!("ckpt_{iteration}.json"))
}

/// Writes via a temporary file and rename so readers never see partial data.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), TrainerError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainerError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| TrainerError::Config(format!("{}: {e}", path.display())))
}

/// Highest-iteration checkpoint in a run directory.
pub fn latest_checkpoint(dir: &Path) -> Option<(u64, PathBuf)> {
    let entries = fs::read_dir(dir.join(CHECKPOINT_DIR)).ok()?;
    entries
        .filter_map(|e| {
            let path = e.ok()?.path();
            let name = path.file_name()?.to_str()?;
            let it = name.strip_prefix("ckpt_")?.strip_suffix(".json")?.parse().ok()?;
            Some((it, path))
        })
        .max_by_key(|(it, _)| *it)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, TrainerError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricsRecord = serde_json::from_str(&line)
            .map_err(|e| TrainerError::Config(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

fn metrics_line(rec: &MetricsRecord) -> String {
    let mut s = serde_json::to_string(rec).expect("metrics serialize");
    s.push('\n');
    s
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub metrics: Vec<MetricsRecord>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Continue from the latest checkpoint in the output directory.
    pub resume: bool,
    /// Stop after this iteration count without the final evaluation (used to
    /// simulate interruptions).
    pub stop_after: Option<u64>,
}

fn sample_groups(
    cfg: &RunConfig,
    params: &PolicyParams,
    iteration: u64,
    rcfg: &RolloutConfig,
) -> Result<Vec<(PreparedTask, RolloutGroup)>, TrainerError> {
    let gen = cfg.train_gen();
    (0..cfg.train.groups_per_batch)
        .into_par_iter()
        .map(|j| {
            let st = taskgen::gen_scene(&gen, cfg.question_kind, cfg.task_index(iteration, j))?;
            let prepared = PreparedTask::from_scene(st, &cfg.imaging).map_err(|e| TrainerError::TaskGen(e.into()))?;
            let group_seed = mix(mix(cfg.train.seed, iteration), j as u64);
            let group = run_group(params, &prepared, cfg.train.group_size, cfg.mode, rcfg, &cfg.reward, group_seed)?;
            Ok((prepared, group))
        })
        .collect()
}

fn train_record(iteration: u64, groups: &[(PreparedTask, RolloutGroup)]) -> MetricsRecord {
    let mut rec = MetricsRecord::empty(iteration);
    let (mut reward, mut acc, mut n) = (0.0, 0.0, 0.0);
    let (mut valid, mut grounded) = (0usize, 0usize);
    for (p, g) in groups {
        for (t, r) in g.trajectories.iter().zip(&g.rewards) {
            reward += r;
            acc += accuracy_reward(t, &p.task);
            n += 1.0;
            if let Some(v) = t.validity {
                grounded += 1;
                valid += usize::from(v.is_valid());
            }
        }
    }
    rec.mean_reward = Some(reward / n);
    rec.train_accuracy = Some(acc / n);
    rec.valid_ground_ratio = (grounded > 0).then(|| valid as f64 / grounded as f64);
    rec
}

fn fill_eval(rec: &mut MetricsRecord, params: &PolicyParams, cfg: &RunConfig, sets: &EvalSets) -> Result<(), TrainerError> {
    let rcfg = cfg.rollout_config();
    let id = evaluate(params, &sets.id, cfg.mode, &rcfg, None)?;
    let ood = evaluate(params, &sets.ood, cfg.mode, &rcfg, None)?;
    rec.eval_id_accuracy = Some(id.accuracy);
    rec.eval_ood_accuracy = Some(ood.accuracy);
    rec.crop_answerable_ratio = id.crop_answerable_ratio;
    rec.eval_valid_ground_ratio = id.valid_ground_ratio;
    Ok(())
}

fn save_checkpoint(cfg: &RunConfig, params: &PolicyParams, opt: &OptimState, iteration: u64) -> Result<(), TrainerError> {
    let ck = Checkpoint::new(
        params,
        RngState {
            seed: cfg.train.seed,
            next_iteration: iteration,
        },
        iteration,
        Some(opt.snapshot()),
    );
    let text = serde_json::to_string(&ck).expect("checkpoint serializes");
    write_atomic(&checkpoint_path(&cfg.output_dir, iteration), text.as_bytes())
}

/// Initial parameters of a run.
pub fn init_params(cfg: &RunConfig) -> Result<PolicyParams, TrainerError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.train.seed, 0x1417));
    Ok(PolicyParams::init(cfg.policy_shape(), &mut rng)?)
}

/// Runs training as configured, writing metrics, timing and checkpoints into
/// `cfg.output_dir`. Pass prebuilt evaluation sets to share them across runs.
pub fn train(cfg: &RunConfig, sets: Option<&EvalSets>, opts: TrainOptions) -> Result<TrainOutcome, TrainerError> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_atomic(&out.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
    let owned;
    let sets = match sets {
        Some(s) => s,
        None => {
            owned = EvalSets::build(cfg)?;
            &owned
        }
    };

    let metrics_path = out.join(METRICS_FILE);
    let timing_path = out.join(TIMING_FILE);
    let mut params = init_params(cfg)?;
    let mut opt = OptimState::new(params.weights.len());
    let mut metrics = Vec::new();
    let mut start = 0;
    if let Some((it, path)) = latest_checkpoint(out).filter(|_| opts.resume) {
        let ck = load_checkpoint(&path)?;
        if ck.rng_state.seed != cfg.train.seed {
            return Err(TrainerError::Config(format!(
                "checkpoint seed {} differs from config seed {}",
                ck.rng_state.seed, cfg.train.seed
            )));
        }
        params = ck.params()?;
        if params.shape != cfg.policy_shape() {
            return Err(TrainerError::Config("checkpoint shape differs from config".into()));
        }
        opt = ck.optimizer.as_ref().map(OptimState::from_snapshot).unwrap_or(opt);
        start = it;
        metrics = read_metrics(&metrics_path)?.into_iter().filter(|r| r.iteration < it).collect();
    }
    let mut text = String::new();
    for r in &metrics {
        text.push_str(&metrics_line(r));
    }
    write_atomic(&metrics_path, text.as_bytes())?;
    if start == 0 {
        write_atomic(&timing_path, b"")?;
    }

    let mut metrics_file = fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(io_err(&metrics_path))?;
    let mut timing_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&timing_path)
        .map_err(io_err(&timing_path))?;
    let clock = Instant::now();
    let rcfg = cfg.rollout_config();
    let total = cfg.train.total_iterations;
    let stop = opts.stop_after.unwrap_or(total).min(total);
    let mut emit = |rec: MetricsRecord, metrics: &mut Vec<MetricsRecord>| -> Result<(), TrainerError> {
        metrics_file
            .write_all(metrics_line(&rec).as_bytes())
            .map_err(io_err(&metrics_path))?;
        let t = serde_json::json!({ "iteration": rec.iteration, "wall_time": clock.elapsed().as_secs_f64() });
        writeln!(timing_file, "{t}").map_err(io_err(&timing_path))?;
        metrics.push(rec);
        Ok(())
    };

    for iteration in start..stop {
        if iteration % cfg.eval_every == 0 {
            save_checkpoint(cfg, &params, &opt, iteration)?;
        }
        let groups = sample_groups(cfg, &params, iteration, &rcfg)?;
        let mut rec = train_record(iteration, &groups);
        if iteration % cfg.eval_every == 0 {
            fill_eval(&mut rec, &params, cfg, sets)?;
        }
        if cfg.rollout_log {
            let gs: Vec<RolloutGroup> = groups.iter().map(|(_, g)| g.clone()).collect();
            append_rollout_log(&out.join("rollouts.jsonl"), &gs)?;
        }
        let mut acc = GradAccum::for_params(&params);
        for (_, group) in &groups {
            if cfg.train.use_clip {
                let old = recorded_logprobs(group);
                acc.merge(&clipped_surrogate_grad(group, &params, &old, cfg.train.clip_ratio)?);
            } else {
                accumulate_mgpo_grad(group, &params, &mut acc)?;
            }
        }
        adamw_step(&mut params, &acc.mean(), &mut opt, &cfg.train)?;
        emit(rec, &mut metrics)?;
    }
    if stop == total {
        let mut rec = MetricsRecord::empty(total);
        fill_eval(&mut rec, &params, cfg, sets)?;
        emit(rec, &mut metrics)?;
        save_checkpoint(cfg, &params, &opt, total)?;
    } else {
        save_checkpoint(cfg, &params, &opt, stop)?;
    }
    Ok(TrainOutcome { params, metrics })
}

/// Moving average over the trailing `window` values.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Sweep, comparison, replay
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub budget: u64,
    pub mode: Mode,
    pub seed: u64,
    pub eval_id_accuracy: f64,
    pub eval_ood_accuracy: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("budget,mode,seed,eval_id_accuracy,eval_ood_accuracy\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.budget, r.mode, r.seed, r.eval_id_accuracy, r.eval_ood_accuracy
        ));
    }
    s
}

/// Trains one run per (budget, mode) under `cfg.output_dir/sweep/` and writes
/// `sweep.csv` with the final evaluation of each.
pub fn sweep_max_pixels(cfg: &RunConfig, budgets: &[u64], modes: &[Mode]) -> Result<Vec<SweepRow>, TrainerError> {
    if budgets.len() < 2 {
        return Err(TrainerError::Config("a sweep needs at least two budgets".into()));
    }
    let mut rows = Vec::new();
    for &budget in budgets {
        let base = RunConfig {
            imaging: ImagingConfig {
                max_pixels: budget,
                ..cfg.imaging
            },
            ..cfg.clone()
        };
        base.validate()?;
        let sets = EvalSets::build(&base)?;
        for &mode in modes {
            let run = RunConfig {
                mode,
                output_dir: cfg.output_dir.join("sweep").join(format!("{budget}_{mode}")),
                ..base.clone()
            };
            let outcome = train(&run, Some(&sets), TrainOptions::default())?;
            let last = outcome.metrics.last().expect("final evaluation record");
            rows.push(SweepRow {
                budget,
                mode,
                seed: cfg.train.seed,
                eval_id_accuracy: last.eval_id_accuracy.unwrap_or(0.0),
                eval_ood_accuracy: last.eval_ood_accuracy.unwrap_or(0.0),
            });
        }
    }
    write_atomic(&cfg.output_dir.join("sweep.csv"), sweep_csv(&rows).as_bytes())?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub iteration: u64,
    pub a_id: f64,
    pub b_id: f64,
    pub a_ood: f64,
    pub b_ood: f64,
    pub a_crop: Option<f64>,
    pub b_crop: Option<f64>,
    pub a_valid: Option<f64>,
    pub b_valid: Option<f64>,
}

impl CompareRow {
    pub fn delta_id(&self) -> f64 {
        self.a_id - self.b_id
    }

    pub fn delta_ood(&self) -> f64 {
        self.a_ood - self.b_ood
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<CompareRow>,
}

fn opt_delta(a: Option<f64>, b: Option<f64>) -> String {
    match (a, b) {
        (Some(a), Some(b)) => format!("{}", a - b),
        _ => String::new(),
    }
}

fn opt_str(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Comparison {
    pub fn csv(&self) -> String {
        let mut s = String::from(
            "iteration,a_eval_id,b_eval_id,delta_eval_id,a_eval_ood,b_eval_ood,delta_eval_ood,a_crop,b_crop,delta_crop,a_valid,b_valid,delta_valid\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.iteration,
                r.a_id,
                r.b_id,
                r.delta_id(),
                r.a_ood,
                r.b_ood,
                r.delta_ood(),
                opt_str(r.a_crop),
                opt_str(r.b_crop),
                opt_delta(r.a_crop, r.b_crop),
                opt_str(r.a_valid),
                opt_str(r.b_valid),
                opt_delta(r.a_valid, r.b_valid),
            ));
        }
        s
    }

    /// Final-evaluation deltas and the sign pattern of the OOD delta column.
    pub fn summary(&self) -> String {
        let Some(last) = self.rows.last() else {
            return "no evaluation records".into();
        };
        let signs: String = self
            .rows
            .iter()
            .map(|r| match r.delta_ood() {
                d if d > 0.0 => '+',
                d if d < 0.0 => '-',
                _ => '0',
            })
            .collect();
        format!(
            "final iteration {}: delta_eval_id {:+.4}, delta_eval_ood {:+.4}, delta_crop {}, ood sign pattern {}",
            last.iteration,
            last.delta_id(),
            last.delta_ood(),
            opt_delta(last.a_crop, last.b_crop),
            signs
        )
    }
}

/// Aligns the evaluation records of two runs by iteration.
pub fn compare(a: &[MetricsRecord], b: &[MetricsRecord]) -> Result<Comparison, TrainerError> {
    let ea: Vec<&MetricsRecord> = a.iter().filter(|r| r.is_eval()).collect();
    let eb: Vec<&MetricsRecord> = b.iter().filter(|r| r.is_eval()).collect();
    let ia: Vec<u64> = ea.iter().map(|r| r.iteration).collect();
    let ib: Vec<u64> = eb.iter().map(|r| r.iteration).collect();
    if ia != ib {
        return Err(TrainerError::MisalignedLogs(format!(
            "evaluation iterations differ: {ia:?} vs {ib:?}"
        )));
    }
    let rows = ea
        .iter()
        .zip(&eb)
        .map(|(x, y)| CompareRow {
            iteration: x.iteration,
            a_id: x.eval_id_accuracy.unwrap_or(0.0),
            b_id: y.eval_id_accuracy.unwrap_or(0.0),
            a_ood: x.eval_ood_accuracy.unwrap_or(0.0),
            b_ood: y.eval_ood_accuracy.unwrap_or(0.0),
            a_crop: x.crop_answerable_ratio,
            b_crop: y.crop_answerable_ratio,
            a_valid: x.eval_valid_ground_ratio,
            b_valid: y.eval_valid_ground_ratio,
        })
        .collect();
    Ok(Comparison { rows })
}

/// Compares two run directories and writes `compare.csv` into `out`.
pub fn compare_dirs(a: &Path, b: &Path, out: &Path) -> Result<Comparison, TrainerError> {
    let ma = read_metrics(&a.join(METRICS_FILE))?;
    let mb = read_metrics(&b.join(METRICS_FILE))?;
    let cmp = compare(&ma, &mb)?;
    write_atomic(&out.join("compare.csv"), cmp.csv().as_bytes())?;
    Ok(cmp)
}

/// Files written by [`replay`].
#[derive(Debug, Clone)]
pub struct ReplayOutput {
    pub transcript: PathBuf,
    pub visuals: Vec<PathBuf>,
    pub trajectory: Trajectory,
}

/// Greedy rollout of one dataset task; writes the transcript and a PPM per
/// visual entry of the conversation.
pub fn replay(
    params: &PolicyParams,
    cfg: &RunConfig,
    dataset_dir: &Path,
    task_id: &str,
    out: &Path,
) -> Result<ReplayOutput, TrainerError> {
    let ds = taskgen::load_dataset(dataset_dir)?;
    let idx = ds
        .find(task_id)
        .ok_or_else(|| TrainerError::NotFound(format!("task {task_id} in {}", dataset_dir.display())))?;
    let image = ds.load_image(idx)?;
    let prepared = PreparedTask::new(ds.tasks[idx].clone(), image, &cfg.imaging).map_err(|e| TrainerError::TaskGen(e.into()))?;
    let rcfg = RolloutConfig {
        temperature: 0.0,
        ..cfg.rollout_config()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (traj, visuals): (Trajectory, Vec<imaging::ImageBuffer>) =
        match (prepared.task.question_kind, cfg.mode) {
            (QuestionKind::NeedleChoice, Mode::Mgpo) => {
                let (t, state) = run_mgpo_rollout(params, &prepared, &rcfg, &mut rng, None)?;
                (t, state.visuals().map(|v| (*v.image).clone()).collect())
            }
            _ => {
                let t = rollout::run_rollout(params, &prepared, cfg.mode, &rcfg, &mut rng, None)?;
                (t, vec![(*prepared.input.image).clone()])
            }
        };
    let tdir = out.join("transcripts");
    let cdir = out.join("crops");
    let transcript = tdir.join(format!("{task_id}.txt"));
    write_atomic(&transcript, rollout::render_transcript(&traj, &prepared.task).as_bytes())?;
    let mut paths = Vec::new();
    for (k, img) in visuals.iter().enumerate() {
        let p = cdir.join(format!("{task_id}_{k}.ppm"));
        write_atomic(&p, &imaging::encode_ppm(img))?;
        paths.push(p);
    }
    Ok(ReplayOutput {
        transcript,
        visuals: paths,
        trajectory: traj,
    })
}
