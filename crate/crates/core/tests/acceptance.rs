//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Criteria 1-5 are exact property suites; 6-10 train the full desk-scale
//! protocol (three seeds, both modes, two pixel budgets, counting rewards);
//! 11 checks byte-level reproducibility. The report is informational: the
//! binary exits non-zero only when `ACCEPTANCE_STRICT=1` and a hard criterion
//! fails. `ACCEPTANCE_ONLY=1,2,11` restricts the report to the listed
//! criteria. Run with `cargo test --release --test acceptance`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mgpo::geometry::{validate_bbox, remap_to_original, BBox, Point, Size, Validity};
use mgpo::imaging::{self, ImageBuffer};
use mgpo::optimizer::{
    accumulate_grpo_grad, accumulate_mgpo_grad, adamw_step, clipped_surrogate, clipped_surrogate_grad,
    compute_advantages, GradAccum, OptimState, TrainConfig,
};
use mgpo::policy::{Action, ActKind, AnswerAction, GroundAction, PolicyParams, PolicyShape};
use mgpo::rewards::{hungarian, point_reward, RewardConfig, RewardKind};
use mgpo::rollout::{
    run_group, run_mgpo_rollout, ActionTerm, GroundOverride, Mode, PreparedTask, Provenance, RolloutGroup,
    Termination, Trajectory, Turn,
};
use mgpo::taskgen::{self, QuestionKind};
use mgpo::trainer::{self, MetricsRecord, RunConfig, TrainOptions};

const SEEDS: [u64; 3] = [1, 2, 3];

#[derive(Clone, Copy, PartialEq)]
enum Level {
    Hard,
    Warn,
}

struct Report {
    lines: Vec<(usize, bool, Level, String)>,
}

impl Report {
    fn record(&mut self, id: usize, pass: bool, level: Level, detail: String, started: Instant) {
        let tag = match (pass, level) {
            (true, _) => "PASS",
            (false, Level::Hard) => "FAIL",
            (false, Level::Warn) => "WARN",
        };
        println!("criterion {id:>2}: {tag}  {detail}  [{:.1}s]", started.elapsed().as_secs_f64());
        self.lines.push((id, pass, level, detail));
    }
}

fn at_least_two(flags: &[bool]) -> bool {
    flags.iter().filter(|f| **f).count() >= 2
}

fn fmt_flags(flags: &[bool]) -> String {
    flags.iter().map(|f| if *f { '1' } else { '0' }).collect()
}

// ---------------------------------------------------------------------------
// 1. Geometry
// ---------------------------------------------------------------------------

fn criterion_geometry() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut ok_total = true;
    let specials = [f64::NAN, f64::INFINITY, f64::NEG_INFINITY, -0.0, 0.0, f64::MAX, f64::MIN, 1e-300];
    for i in 0..1_000_000u32 {
        let frame = Size::new(rng.random_range(1..4096), rng.random_range(1..4096)).unwrap();
        let (w, h) = (frame.width() as f64, frame.height() as f64);
        let mut c = [0.0f64; 4];
        for (k, v) in c.iter_mut().enumerate() {
            let span = if k % 2 == 0 { w } else { h };
            *v = if rng.random_bool(0.02) {
                specials[rng.random_range(0..specials.len())]
            } else {
                rng.random_range(-0.25 * span..1.25 * span)
            };
        }
        let b = BBox::from(c);
        let v1 = validate_bbox(&b, frame);
        let v2 = validate_bbox(&b, frame);
        // Reference predicate written from the definition.
        let expect = c.iter().all(|x| x.is_finite())
            && c[0] < c[2]
            && c[1] < c[3]
            && c[0] >= 0.0
            && c[1] >= 0.0
            && c[2] <= w
            && c[3] <= h;
        if v1 != v2 || v1.is_valid() != expect {
            ok_total = false;
        }
        if i % 10 == 0 && v1.is_valid() {
            let ori = Size::new(rng.random_range(1..8192), rng.random_range(1..8192)).unwrap();
            let there = remap_to_original(&b, frame, ori).unwrap();
            if validate_bbox(&there, ori) != Validity::Valid {
                continue;
            }
            let back = remap_to_original(&there, ori, frame).unwrap();
            let err = b
                .to_array()
                .iter()
                .zip(back.to_array())
                .map(|(a, z)| (a - z).abs())
                .fold(0.0, f64::max);
            worst = worst.max(err);
        }
    }
    (
        ok_total && worst < 1e-9,
        format!("validity total/deterministic={ok_total}, max round-trip error {worst:.2e} (< 1e-9)"),
    )
}

// ---------------------------------------------------------------------------
// 2. Gradients
// ---------------------------------------------------------------------------

fn random_params(shape: PolicyShape, rng: &mut ChaCha8Rng) -> PolicyParams {
    let mut p = PolicyParams::zeros(shape).unwrap();
    for w in &mut p.weights {
        *w = rng.random_range(-0.5..0.5);
    }
    p
}

fn random_action(shape: &PolicyShape, rng: &mut ChaCha8Rng) -> Action {
    match rng.random_range(0..3) {
        0 => Action::Ground(GroundAction {
            bins: std::array::from_fn(|_| rng.random_range(0..shape.bins as u32)),
        }),
        1 => Action::Answer(AnswerAction {
            choice: rng.random_range(0..shape.choices as u32),
        }),
        _ => Action::Act {
            kind: ActKind::from_index(rng.random_range(0..3)),
        },
    }
}

/// `max |g - fd| / max |fd|` over a random subset of coordinates.
fn fd_error(weights: &[f64], analytic: &[f64], idx: &[usize], f: impl Fn(&[f64]) -> f64) -> f64 {
    let h = 1e-6;
    let mut w = weights.to_vec();
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for &i in idx {
        let orig = w[i];
        w[i] = orig + h;
        let up = f(&w);
        w[i] = orig - h;
        let down = f(&w);
        w[i] = orig;
        let fd = (up - down) / (2.0 * h);
        num = num.max((analytic[i] - fd).abs());
        den = den.max(fd.abs());
    }
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

fn sample_indices(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    (0..k).map(|_| rng.random_range(0..n)).collect()
}

fn synthetic_group(params: &PolicyParams, rng: &mut ChaCha8Rng, g: usize) -> (RolloutGroup, Vec<Vec<f64>>) {
    let s = params.shape;
    let mut trajectories = Vec::new();
    let mut old = Vec::new();
    for _ in 0..g {
        let mut terms = Vec::new();
        let mut lps = Vec::new();
        for action in [
            Action::Ground(GroundAction {
                bins: std::array::from_fn(|_| rng.random_range(0..s.bins as u32)),
            }),
            Action::Answer(AnswerAction {
                choice: rng.random_range(0..s.choices as u32),
            }),
        ] {
            let features: Vec<f64> = (0..s.feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let lp = params.logprob_of(&features, &action).unwrap();
            // Keep ratios away from the clip kinks so the objective is smooth
            // in a neighbourhood of the point.
            let shift = loop {
                let d: f64 = rng.random_range(-0.4..0.4);
                let rho = (-d).exp();
                if (rho - 0.8).abs() > 1e-3 && (rho - 1.2).abs() > 1e-3 {
                    break d;
                }
            };
            lps.push(lp + shift);
            terms.push(ActionTerm {
                features,
                action,
                logprob: lp + shift,
            });
        }
        trajectories.push(Trajectory {
            task_id: "synthetic".into(),
            turns: vec![
                Turn {
                    terms: vec![terms[0].clone()],
                },
                Turn {
                    terms: vec![terms[1].clone()],
                },
            ],
            k_g: 1,
            final_answer: None,
            grounding_bbox_input: None,
            grounding_bbox_original: None,
            validity: None,
            crop_rect: None,
            terminated_by: Termination::Answer,
            points: None,
        });
        old.push(lps);
    }
    let rewards: Vec<f64> = (0..g).map(|_| rng.random_range(0..4) as f64 / 4.0).collect();
    let baseline = rewards.iter().sum::<f64>() / g as f64;
    (
        RolloutGroup {
            task_id: "synthetic".into(),
            trajectories,
            rewards,
            baseline,
        },
        old,
    )
}

fn criterion_gradients() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst_lp = 0.0f64;
    let mut worst_clip = 0.0f64;
    let mut instances = 0;
    for (hidden, skip) in [(0, false), (16, true), (16, false)] {
        let shape = PolicyShape {
            feature_dim: 12,
            bins: 4,
            choices: 4,
            hidden,
            skip,
        };
        for _ in 0..60 {
            let p = random_params(shape, &mut rng);
            let f: Vec<f64> = (0..shape.feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = random_action(&shape, &mut rng);
            let g = p.grad_logprob(&f, &a).unwrap();
            let idx = sample_indices(p.weights.len(), 400, &mut rng);
            let err = fd_error(&p.weights, &g, &idx, |w| {
                let q = PolicyParams {
                    shape,
                    weights: w.to_vec(),
                };
                q.logprob_of(&f, &a).unwrap()
            });
            worst_lp = worst_lp.max(err);
            instances += 1;
        }
        for _ in 0..40 {
            let p = random_params(shape, &mut rng);
            let (group, old) = synthetic_group(&p, &mut rng, 4);
            let g = clipped_surrogate_grad(&group, &p, &old, 0.2).unwrap();
            let idx = sample_indices(p.weights.len(), 400, &mut rng);
            let err = fd_error(&p.weights, &g.grad, &idx, |w| {
                let q = PolicyParams {
                    shape,
                    weights: w.to_vec(),
                };
                clipped_surrogate(&group, &q, &old, 0.2).unwrap()
            });
            worst_clip = worst_clip.max(err);
            instances += 1;
        }
    }
    (
        worst_lp < 1e-4 && worst_clip < 1e-4 && instances >= 100,
        format!("{instances} instances; max rel. error logprob {worst_lp:.2e}, clipped surrogate {worst_clip:.2e} (< 1e-4)"),
    )
}

// ---------------------------------------------------------------------------
// 3. Group-relative algebra
// ---------------------------------------------------------------------------

fn small_run_config(bins: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.policy.bins = bins;
    cfg.gen_train.image_size = Size::square(512);
    cfg.gen_eval_id.image_size = Size::square(512);
    cfg.imaging.max_pixels = 64 * 64;
    cfg
}

fn criterion_algebra() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut sums_ok = true;
    for _ in 0..10_000 {
        let g = rng.random_range(2..17);
        let r: Vec<f64> = (0..g).map(|_| rng.random_range(-5.0..5.0)).collect();
        let s: f64 = compute_advantages(&r).iter().sum();
        sums_ok &= s.abs() <= 1e-12;
    }

    let cfg = small_run_config(4);
    let rcfg = cfg.rollout_config();
    let params = trainer::init_params(&cfg).unwrap();
    let train = TrainConfig::default();
    let mut zero_ok = true;
    let mut shift_ok = true;
    let mut kg1_ok = true;
    for i in 0..20u64 {
        let st = taskgen::gen_scene(&cfg.gen_train, QuestionKind::NeedleChoice, i).unwrap();
        let prepared = PreparedTask::from_scene(st, &cfg.imaging).unwrap();
        let single = run_group(&params, &prepared, 8, Mode::Grpo, &rcfg, &RewardConfig::default(), 100 + i).unwrap();
        kg1_ok &= single.trajectories.iter().all(|t| t.k_g == 1 && t.turns.len() == 1);
        let mut a = GradAccum::for_params(&params);
        accumulate_mgpo_grad(&single, &params, &mut a).unwrap();
        let mut b = GradAccum::for_params(&params);
        accumulate_grpo_grad(&single, &params, &mut b).unwrap();
        kg1_ok &= a == b && a.grad.iter().any(|g| *g != 0.0) == single.rewards.iter().any(|r| *r != single.rewards[0]);

        let mut group = run_group(&params, &prepared, 8, Mode::Mgpo, &rcfg, &RewardConfig::default(), 100 + i).unwrap();
        // dyadic rewards and integer shifts: every sum is exactly representable
        group.rewards = (0..8).map(|_| rng.random_range(0..=256) as f64 / 256.0).collect();
        let c = rng.random_range(-100..=100) as f64;
        let mut shifted = group.clone();
        shifted.rewards.iter_mut().for_each(|r| *r += c);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        shift_ok &= bits(&compute_advantages(&group.rewards)) == bits(&compute_advantages(&shifted.rewards));
        let mut ga = GradAccum::for_params(&params);
        accumulate_mgpo_grad(&group, &params, &mut ga).unwrap();
        let mut gb = GradAccum::for_params(&params);
        accumulate_mgpo_grad(&shifted, &params, &mut gb).unwrap();
        shift_ok &= bits(&ga.grad) == bits(&gb.grad);
        let n = params.weights.len();
        let (mut pa, mut pb) = (params.clone(), params.clone());
        adamw_step(&mut pa, &ga.mean(), &mut OptimState::new(n), &train).unwrap();
        adamw_step(&mut pb, &gb.mean(), &mut OptimState::new(n), &train).unwrap();
        shift_ok &= bits(&pa.weights) == bits(&pb.weights);

        let level = rng.random_range(-3.0..3.0);
        group.rewards = vec![level; 8];
        let mut z = GradAccum::for_params(&params);
        accumulate_mgpo_grad(&group, &params, &mut z).unwrap();
        let old = mgpo::optimizer::recorded_logprobs(&group);
        let zc = clipped_surrogate_grad(&group, &params, &old, 0.2).unwrap();
        let mut p = params.clone();
        adamw_step(&mut p, &z.mean(), &mut OptimState::new(n), &train).unwrap();
        zero_ok &= z.grad.iter().chain(&zc.grad).all(|g| *g == 0.0) && bits(&p.weights) == bits(&params.weights);
    }
    (
        sums_ok && zero_ok && shift_ok && kg1_ok,
        format!("advantage sums {sums_ok}, equal-reward zero update {zero_ok}, shift invariance {shift_ok}, k_g=1 MGPO == GRPO {kg1_ok}"),
    )
}

// ---------------------------------------------------------------------------
// 4. Assignment
// ---------------------------------------------------------------------------

fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
    let (n, m) = (cost.len(), cost[0].len());
    let (rows, cols, transpose) = if n <= m { (n, m, false) } else { (m, n, true) };
    let at = |r: usize, c: usize| if transpose { cost[c][r] } else { cost[r][c] };
    let mut best = f64::INFINITY;
    let mut perm: Vec<usize> = (0..cols).collect();
    permute(&mut perm, 0, &mut |p| {
        let total: f64 = (0..rows).map(|r| at(r, p[r])).sum();
        best = best.min(total);
    });
    best
}

fn permute(p: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == p.len() {
        visit(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, visit);
        p.swap(k, i);
    }
}

fn criterion_assignment() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=6);
        let m = rng.random_range(1..=6);
        let cost: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..m).map(|_| rng.random_range(0.0..100.0)).collect())
            .collect();
        let a = hungarian(&cost).unwrap();
        worst = worst.max((a.total_cost - brute_force_min(&cost)).abs());
    }
    let mut bound_ok = true;
    for _ in 0..10_000 {
        let pts = |rng: &mut ChaCha8Rng, k: usize| -> Vec<Point> {
            (0..k)
                .map(|_| Point::new(rng.random_range(0.0..512.0), rng.random_range(0.0..512.0)))
                .collect()
        };
        let n = rng.random_range(0..10);
        let m = rng.random_range(0..10);
        let (pred, gt) = (pts(&mut rng, n), pts(&mut rng, m));
        let radius = rng.random_range(0.0..300.0);
        let r = point_reward(&pred, &gt, radius);
        let bound = if n.max(m) == 0 { 0.0 } else { n.min(m) as f64 / n.max(m) as f64 };
        bound_ok &= (0.0..=bound).contains(&r);
    }
    (
        worst < 1e-9 && bound_ok,
        format!("max |hungarian - brute force| {worst:.1e}; point reward bound {bound_ok}"),
    )
}

// ---------------------------------------------------------------------------
// 5. Rollout totality and crop fidelity
// ---------------------------------------------------------------------------

fn criterion_rollout() -> (bool, String) {
    let mut cfg = RunConfig::default();
    cfg.policy.bins = 8;
    let rcfg = cfg.rollout_config();
    let params = trainer::init_params(&cfg).unwrap();
    let st = taskgen::gen_scene(&cfg.gen_train, QuestionKind::NeedleChoice, 0).unwrap();
    let full: ImageBuffer = st.scene.render();
    let prepared = PreparedTask::new(st.task.clone(), full.clone(), &cfg.imaging).unwrap();
    let frame = prepared.input.frame();
    let ori = full.size();
    let b = 8u32;
    let (cw, ch) = (frame.width() as f64 / b as f64, frame.height() as f64 / b as f64);
    let (sx, sy) = (ori.width() as f64 / frame.width() as f64, ori.height() as f64 / frame.height() as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let (mut valid, mut invalid, mut bad) = (0, 0, 0);
    for t in 0..b.pow(4) {
        let bins = [t % b, (t / b) % b, (t / b / b) % b, t / b / b / b];
        let (traj, state) = run_mgpo_rollout(
            &params,
            &prepared,
            &rcfg,
            &mut rng,
            Some(GroundOverride::Bins(GroundAction { bins })),
        )
        .unwrap();
        let visuals: Vec<_> = state.visuals().collect();
        let complete = traj.turns.len() == 2 && traj.final_answer.is_some() && visuals.len() == 2;
        if !complete {
            bad += 1;
            continue;
        }
        let second = visuals[1];
        if bins[0] <= bins[2] && bins[1] <= bins[3] {
            valid += 1;
            let x0 = (bins[0] as f64 * cw * sx).floor() as u32;
            let y0 = (bins[1] as f64 * ch * sy).floor() as u32;
            let x1 = ((bins[2] + 1) as f64 * cw * sx).ceil() as u32;
            let y1 = ((bins[3] + 1) as f64 * ch * sy).ceil() as u32;
            let crop = full.crop(mgpo::geometry::PixelRect::new(x0, y0, x1, y1));
            let expect = imaging::fit_for_encoder(&crop, cfg.imaging.max_pixels, cfg.imaging.align);
            let same_bits = second.image.data().len() == expect.data().len()
                && second.image.data().iter().zip(expect.data()).all(|(a, e)| a.to_bits() == e.to_bits());
            let is_crop = matches!(second.provenance, Provenance::Crop { .. });
            if !(same_bits && is_crop && second.image.size() == expect.size()) {
                bad += 1;
            }
        } else {
            invalid += 1;
            let fallback = second.provenance == Provenance::Resized
                && second.image.data() == prepared.input.image.data()
                && traj.validity.is_some_and(|v| !v.is_valid());
            if !fallback {
                bad += 1;
            }
        }
    }
    (
        bad == 0 && valid + invalid == 4096,
        format!("{} tuples: {valid} valid (crop byte-equal), {invalid} invalid (resized fallback), {bad} mismatches", valid + invalid),
    )
}

// ---------------------------------------------------------------------------
// 6-10. Training protocol
// ---------------------------------------------------------------------------

fn out_root() -> PathBuf {
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    fs::create_dir_all(&root).unwrap();
    root
}

fn metrics(dir: &Path) -> Vec<MetricsRecord> {
    trainer::read_metrics(&dir.join(trainer::METRICS_FILE)).unwrap()
}

/// Mean training validity over the first and the last `window` iterations.
fn validity_ends(ms: &[MetricsRecord], window: usize) -> (f64, f64) {
    let v: Vec<f64> = ms.iter().filter_map(|r| r.valid_ground_ratio).collect();
    let smoothed = trainer::smooth(&v, window);
    let head = v[..window.min(v.len())].iter().sum::<f64>() / window.min(v.len()) as f64;
    (head, *smoothed.last().unwrap())
}

fn last_eval(ms: &[MetricsRecord]) -> &MetricsRecord {
    ms.iter().rev().find(|r| r.is_eval()).unwrap()
}

struct SeedRuns {
    mgpo: Vec<MetricsRecord>,
    grpo: Vec<MetricsRecord>,
    mgpo_large: Vec<MetricsRecord>,
    grpo_large: Vec<MetricsRecord>,
}

fn run_needle_protocol(root: &Path) -> Vec<SeedRuns> {
    let base = RunConfig::default();
    let (small, large) = (base.sweep_budgets[0], base.sweep_budgets[1]);
    assert!(small < large && small == base.imaging.max_pixels);
    SEEDS
        .iter()
        .map(|&seed| {
            let mut cfg = base.clone();
            cfg.train.seed = seed;
            cfg.output_dir = root.join(format!("needle_seed{seed}"));
            let t = Instant::now();
            trainer::sweep_max_pixels(&cfg, &[small, large], &[Mode::Mgpo, Mode::Grpo]).unwrap();
            eprintln!("needle seed {seed}: four runs in {:.0}s", t.elapsed().as_secs_f64());
            let dir = |b: u64, m: Mode| cfg.output_dir.join("sweep").join(format!("{b}_{m}"));
            SeedRuns {
                mgpo: metrics(&dir(small, Mode::Mgpo)),
                grpo: metrics(&dir(small, Mode::Grpo)),
                mgpo_large: metrics(&dir(large, Mode::Mgpo)),
                grpo_large: metrics(&dir(large, Mode::Grpo)),
            }
        })
        .collect()
}

const SMOOTH_WINDOW: usize = 10;

fn criterion_emergent_grounding(runs: &[SeedRuns]) -> (bool, String) {
    let mut rise = Vec::new();
    let mut beats = Vec::new();
    let mut detail = Vec::new();
    for r in runs {
        let (m0, m1) = validity_ends(&r.mgpo, SMOOTH_WINDOW);
        let (_, g1) = validity_ends(&r.grpo, SMOOTH_WINDOW);
        rise.push(m1 - m0 >= 0.25);
        beats.push(m1 - g1 >= 0.10);
        detail.push(format!("{m0:.3}->{m1:.3} vs GRPO {g1:.3}"));
    }
    (
        rise.iter().all(|x| *x) && at_least_two(&beats),
        format!(
            "MGPO valid ratio rise>=0.25 [{}], beats GRPO by >=0.10 [{}]: {}",
            fmt_flags(&rise),
            fmt_flags(&beats),
            detail.join("; ")
        ),
    )
}

fn chance_bound(n: usize) -> f64 {
    let p = 1.0 / taskgen::NUM_CLASSES as f64;
    p + 3.0 * (p * (1.0 - p) / n as f64).sqrt()
}

fn criterion_ood_accuracy(runs: &[SeedRuns], n: usize) -> (bool, String) {
    let chance = chance_bound(n);
    let mut gaps = Vec::new();
    let mut above = Vec::new();
    let mut detail = Vec::new();
    for r in runs {
        let m = last_eval(&r.mgpo).eval_ood_accuracy.unwrap();
        let g = last_eval(&r.grpo).eval_ood_accuracy.unwrap();
        gaps.push(m - g >= 0.10);
        above.push(m > chance && g > chance);
        detail.push(format!("{m:.3} vs {g:.3}"));
    }
    (
        at_least_two(&gaps) && at_least_two(&above),
        format!(
            "OOD MGPO-GRPO >= 0.10 [{}], both > {chance:.3} [{}]: {}",
            fmt_flags(&gaps),
            fmt_flags(&above),
            detail.join("; ")
        ),
    )
}

fn criterion_budget(runs: &[SeedRuns]) -> (bool, String) {
    let mut flags = Vec::new();
    let mut detail = Vec::new();
    for r in runs {
        let gap = |m: &[MetricsRecord], g: &[MetricsRecord]| {
            last_eval(m).eval_ood_accuracy.unwrap() - last_eval(g).eval_ood_accuracy.unwrap()
        };
        let small = gap(&r.mgpo, &r.grpo);
        let large = gap(&r.mgpo_large, &r.grpo_large);
        flags.push(small > large);
        detail.push(format!("{small:+.3} vs {large:+.3}"));
    }
    (
        at_least_two(&flags),
        format!("OOD gap small > large budget [{}]: {}", fmt_flags(&flags), detail.join("; ")),
    )
}

fn criterion_crop_ratio(runs: &[SeedRuns]) -> (bool, String) {
    let mut flags = Vec::new();
    let mut detail = Vec::new();
    for r in runs {
        let init = r.mgpo.first().and_then(|x| x.crop_answerable_ratio).unwrap();
        let m = last_eval(&r.mgpo).crop_answerable_ratio.unwrap();
        let g = last_eval(&r.grpo).crop_answerable_ratio.unwrap();
        flags.push(m > g && g > init);
        detail.push(format!("{m:.3} > {g:.3} > {init:.3}"));
    }
    (
        at_least_two(&flags),
        format!("MGPO > GRPO (hypothetical) > init [{}]: {}", fmt_flags(&flags), detail.join("; ")),
    )
}

fn criterion_point_reward(root: &Path) -> (bool, String) {
    let mut flags = Vec::new();
    let mut detail = Vec::new();
    for &seed in &SEEDS {
        let dirs: Vec<PathBuf> = [RewardKind::Accuracy, RewardKind::AccuracyPlusPoint]
            .iter()
            .map(|&kind| {
                let mut cfg = RunConfig::counting();
                cfg.train.seed = seed;
                cfg.reward.kind = kind;
                cfg.output_dir = root.join(format!("count_seed{seed}_{kind:?}"));
                trainer::train(&cfg, None, TrainOptions::default()).unwrap();
                cfg.output_dir
            })
            .collect();
        let cmp = trainer::compare_dirs(&dirs[0], &dirs[1], &root.join(format!("count_seed{seed}"))).unwrap();
        let last = cmp.rows.last().unwrap();
        flags.push(last.delta_id().abs() <= 0.05);
        detail.push(format!("{:.3} vs {:.3}", last.a_id, last.b_id));
    }
    (
        at_least_two(&flags),
        format!("final ID accuracy, accuracy vs accuracy+point within 0.05 [{}]: {}", fmt_flags(&flags), detail.join("; ")),
    )
}

// ---------------------------------------------------------------------------
// 11. Reproducibility
// ---------------------------------------------------------------------------

fn criterion_reproducibility(root: &Path) -> (bool, String) {
    let mut ok = true;
    let mut detail = Vec::new();
    for (name, mut cfg) in [("needle", RunConfig::default()), ("count", RunConfig::counting())] {
        cfg.train.total_iterations = 24;
        cfg.train.groups_per_batch = 8;
        cfg.eval_every = 8;
        cfg.eval_set_size = 40;
        cfg.train.seed = 9;
        let run = |dir: &str, opts: TrainOptions| {
            let mut c = cfg.clone();
            c.output_dir = root.join(format!("repro_{name}_{dir}"));
            let _ = fs::remove_dir_all(&c.output_dir);
            trainer::train(&c, None, opts).unwrap();
            c.output_dir
        };
        let a = run("a", TrainOptions::default());
        let b = run("b", TrainOptions::default());
        let mut rc = cfg.clone();
        rc.output_dir = run("resumed", TrainOptions {
            resume: false,
            stop_after: Some(13),
        });
        trainer::train(&rc, None, TrainOptions {
            resume: true,
            stop_after: None,
        })
        .unwrap();
        let bytes = |d: &Path| fs::read(d.join(trainer::METRICS_FILE)).unwrap();
        let same = bytes(&a) == bytes(&b);
        let resumed = bytes(&a) == bytes(&rc.output_dir);
        ok &= same && resumed;
        detail.push(format!("{name}: repeat identical {same}, resume identical {resumed}"));
    }
    (ok, detail.join("; "))
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; only a filter
    // that excludes this binary's name skips it.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let root = out_root();
    let mut report = Report { lines: Vec::new() };

    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |id: usize| only.as_ref().is_none_or(|o| o.contains(&id));

    let suites: [(usize, fn() -> (bool, String)); 5] = [
        (1, criterion_geometry),
        (2, criterion_gradients),
        (3, criterion_algebra),
        (4, criterion_assignment),
        (5, criterion_rollout),
    ];
    for (id, f) in suites.into_iter().filter(|(id, _)| wanted(*id)) {
        let t = Instant::now();
        let (pass, detail) = f();
        report.record(id, pass, Level::Hard, detail, t);
    }

    if (6..=9).any(wanted) {
        let t = Instant::now();
        let runs = run_needle_protocol(&root);
        let n = RunConfig::default().eval_set_size;
        let checks: [(usize, Box<dyn Fn() -> (bool, String)>); 4] = [
            (6, Box::new(|| criterion_emergent_grounding(&runs))),
            (7, Box::new(|| criterion_ood_accuracy(&runs, n))),
            (8, Box::new(|| criterion_budget(&runs))),
            (9, Box::new(|| criterion_crop_ratio(&runs))),
        ];
        for (id, f) in checks.iter().filter(|(id, _)| wanted(*id)) {
            let (pass, detail) = f();
            report.record(*id, pass, Level::Hard, detail, t);
        }
    }

    if wanted(10) {
        let t = Instant::now();
        let (pass, detail) = criterion_point_reward(&root);
        report.record(10, pass, Level::Warn, detail, t);
    }

    if wanted(11) {
        let t = Instant::now();
        let (pass, detail) = criterion_reproducibility(&root);
        report.record(11, pass, Level::Hard, detail, t);
    }

    let hard_failures = report
        .lines
        .iter()
        .filter(|(_, pass, level, _)| !pass && *level == Level::Hard)
        .count();
    let passed = report.lines.iter().filter(|l| l.1).count();
    println!("acceptance: {passed}/{} criteria passed, {hard_failures} hard failures", report.lines.len());
    if hard_failures > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
