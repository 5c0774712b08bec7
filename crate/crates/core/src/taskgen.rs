//! Seeded generators for synthetic high-resolution tasks.
//!
//! Two task families:
//!
//! * `NeedleChoice`: one small target glyph (dark ring around a colored core)
//!   hidden among solid colored distractors on a blocky chroma background. The
//!   question asks for the core color class. At full resolution the ring and
//!   core are distinct; after strong downsampling they blur into a dark spot
//!   whose tint is weaker than the background variation.
//! * `Count`: several ring glyphs plus solid distractors; the answer is the
//!   number of ring glyphs and their centers are recorded as point annotations.
//!
//! Background and distractor colors are luminance-matched, so luma contrast
//! only comes from ring glyphs. Every field of a task is a pure function of
//! `(seed, index)` through a ChaCha8 stream.

use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, PixelRect, Point, PointSet, Size};
use crate::imaging::{self, ImageBuffer, ImagingError};

#[derive(Debug, Error)]
pub enum TaskGenError {
    #[error("could not place {what} without overlap after {tries} tries")]
    PlacementFailure { what: &'static str, tries: u32 },
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed record on line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

/// Number of attribute classes in every alphabet.
pub const NUM_CLASSES: usize = 4;

/// Background gray level; palette colors share its luma.
pub const BACKGROUND: f32 = 0.5;

const PLACEMENT_TRIES: u32 = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum QuestionKind {
    NeedleChoice,
    Count,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlyphShape {
    Square,
    Disc,
}

/// A glyph family: shape plus a palette of [`NUM_CLASSES`] colors.
#[derive(Debug, Clone, PartialEq)]
pub struct Alphabet {
    pub id: u32,
    pub shape: GlyphShape,
    pub names: [&'static str; NUM_CLASSES],
    pub palette: [[f32; 3]; NUM_CLASSES],
}

/// Orthonormal chroma basis orthogonal to the luma weights.
fn chroma_basis() -> ([f64; 3], [f64; 3]) {
    let w = [0.299, 0.587, 0.114];
    let u = [0.587, -0.299, 0.0];
    let norm = |v: [f64; 3]| {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    };
    let u = norm(u);
    let v = norm([
        w[1] * u[2] - w[2] * u[1],
        w[2] * u[0] - w[0] * u[2],
        w[0] * u[1] - w[1] * u[0],
    ]);
    (u, v)
}

/// Luma-neutral color offset at `angle` degrees in the chroma plane.
pub fn chroma_offset(angle_deg: f64, amplitude: f64) -> [f64; 3] {
    let (u, v) = chroma_basis();
    let (s, c) = angle_deg.to_radians().sin_cos();
    [0, 1, 2].map(|i| amplitude * (c * u[i] + s * v[i]))
}

fn palette_color(angle_deg: f64, amplitude: f64) -> [f32; 3] {
    chroma_offset(angle_deg, amplitude).map(|d| (BACKGROUND as f64 + d) as f32)
}

impl Alphabet {
    /// Alphabet 0 is the training distribution (square glyphs); alphabet 1 is the
    /// shifted one (disc glyphs, rotated hues, different saturation).
    pub fn get(id: u32) -> Result<Self, TaskGenError> {
        match id {
            0 => Ok(Self {
                id,
                shape: GlyphShape::Square,
                names: ["crimson", "olive", "teal", "violet"],
                palette: [0.0, 90.0, 180.0, 270.0].map(|a| palette_color(a, 0.30)),
            }),
            1 => Ok(Self {
                id,
                shape: GlyphShape::Disc,
                names: ["rose", "moss", "cyan", "indigo"],
                palette: [25.0, 115.0, 205.0, 295.0].map(|a| palette_color(a, 0.26)),
            }),
            other => Err(TaskGenError::InvalidConfig(format!("unknown alphabet {other}"))),
        }
    }
}

/// Generator parameters for one task distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub image_size: Size,
    pub glyph_side: u32,
    pub distractor_count: u32,
    pub glyph_alphabet_id: u32,
    /// Inclusive `(min, max)` number of counted glyphs for `Count` tasks.
    pub count_range: (u32, u32),
    pub seed: u64,
    /// Amplitude of the blocky luma-neutral background chroma field.
    pub background_noise: f32,
    /// Side of the background chroma blocks in pixels.
    pub background_block: u32,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            image_size: Size::square(1024),
            glyph_side: 16,
            distractor_count: 6,
            glyph_alphabet_id: 0,
            count_range: (1, 6),
            seed: 1,
            background_noise: 0.12,
            background_block: 64,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), TaskGenError> {
        let bad = |m: String| Err(TaskGenError::InvalidConfig(m));
        if self.glyph_side < 4 {
            return bad(format!("glyph_side {} < 4", self.glyph_side));
        }
        if self.count_range.0 > self.count_range.1 {
            return bad("count_range min exceeds max".into());
        }
        if self.background_block == 0 {
            return bad("background_block must be positive".into());
        }
        if !(0.0..=0.2).contains(&self.background_noise) {
            return bad("background_noise must lie in [0, 0.2]".into());
        }
        Alphabet::get(self.glyph_alphabet_id)?;
        let cell = (self.glyph_side + 2) as u64;
        let needed = cell * cell * (self.distractor_count as u64 + self.count_range.1.max(1) as u64);
        if self.image_size.width() < self.glyph_side
            || self.image_size.height() < self.glyph_side
            || needed * 2 > self.image_size.area()
        {
            return bad(format!(
                "image {} too small for {} glyphs of side {}",
                self.image_size,
                self.distractor_count + self.count_range.1,
                self.glyph_side
            ));
        }
        Ok(())
    }

    pub fn alphabet(&self) -> Alphabet {
        Alphabet::get(self.glyph_alphabet_id).expect("validated alphabet")
    }
}

/// One generated question with its ground truth. Coordinates are in the
/// original image frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualTask {
    pub task_id: String,
    pub original_size: Size,
    pub question_kind: QuestionKind,
    pub question: String,
    pub alphabet_id: u32,
    pub glyph_side: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub choices: Vec<String>,
    pub answer_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_bbox: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_points: Option<PointSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_count: Option<u32>,
}

impl VisualTask {
    /// Number of answer options the policy chooses among.
    pub fn num_choices(&self) -> usize {
        self.choices.len()
    }

    pub fn choice_letter(index: usize) -> char {
        (b'A' + index as u8) as char
    }
}

/// Stream derived from `(seed, index)`; the same pair always yields the same
/// numbers on every platform.
pub fn task_rng(seed: u64, index: u64, domain: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

const NEEDLE_DOMAIN: u64 = 1;
const COUNT_DOMAIN: u64 = 2;

fn background_blocks(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Vec<[f32; 3]> {
    let block = cfg.background_block;
    let bx = cfg.image_size.width().div_ceil(block);
    let by = cfg.image_size.height().div_ceil(block);
    let mut offsets: Vec<[f64; 3]> = (0..bx * by)
        .map(|_| {
            let angle = rng.random::<f64>() * 360.0;
            let amp = rng.random::<f64>() * cfg.background_noise as f64;
            chroma_offset(angle, amp)
        })
        .collect();
    // zero-mean field so the global color mean only reflects glyphs
    let n = offsets.len() as f64;
    let mean = offsets.iter().fold([0.0; 3], |acc, o| [0, 1, 2].map(|c| acc[c] + o[c] / n));
    offsets
        .iter_mut()
        .map(|o| [0, 1, 2].map(|c| (BACKGROUND as f64 + o[c] - mean[c]).clamp(0.0, 1.0) as f32))
        .collect()
}

/// Ring thickness for a glyph of the given side.
pub fn ring_thickness(side: u32) -> u32 {
    ((side * 3 + 8) / 16).max(1)
}

/// Dark ring color; near-black so ring pixels stand out in luma.
pub const RING: [f32; 3] = [0.05, 0.05, 0.05];

/// Which part of a glyph a pixel offset `(dx, dy)` falls on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlyphPart {
    Outside,
    Ring,
    Core,
}

pub fn glyph_part(shape: GlyphShape, side: u32, dx: u32, dy: u32) -> GlyphPart {
    let t = ring_thickness(side);
    match shape {
        GlyphShape::Square => {
            let edge = dx.min(dy).min(side - 1 - dx).min(side - 1 - dy);
            if edge < t {
                GlyphPart::Ring
            } else {
                GlyphPart::Core
            }
        }
        GlyphShape::Disc => {
            let r = side as f64 / 2.0;
            let (px, py) = (dx as f64 + 0.5 - r, dy as f64 + 0.5 - r);
            let d = (px * px + py * py).sqrt();
            if d > r {
                GlyphPart::Outside
            } else if d > r - t as f64 {
                GlyphPart::Ring
            } else {
                GlyphPart::Core
            }
        }
    }
}

/// One glyph of a scene. Ringed glyphs are targets (needle) or counted
/// objects; solid glyphs are distractors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Glyph {
    pub x: u32,
    pub y: u32,
    pub side: u32,
    pub shape: GlyphShape,
    pub ringed: bool,
    pub color: [f32; 3],
}

impl Glyph {
    fn color_at(&self, dx: u32, dy: u32) -> Option<[f32; 3]> {
        match glyph_part(self.shape, self.side, dx, dy) {
            GlyphPart::Outside => None,
            GlyphPart::Ring if self.ringed => Some(RING),
            _ => Some(self.color),
        }
    }
}

/// Procedural description of a generated image: a blocky background plus
/// non-overlapping glyphs. Any sub-rectangle can be rendered on its own and
/// equals the same window of the full rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub size: Size,
    pub block: u32,
    pub background: Vec<[f32; 3]>,
    pub glyphs: Vec<Glyph>,
}

impl Scene {
    pub fn render(&self) -> ImageBuffer {
        self.render_rect(PixelRect::new(0, 0, self.size.width(), self.size.height()))
    }

    /// Pixels of the scene over `rect` (which must lie inside the frame).
    pub fn render_rect(&self, rect: PixelRect) -> ImageBuffer {
        let out_size = rect.size();
        let mut img = ImageBuffer::filled(out_size, [BACKGROUND; 3]);
        let blocks_x = self.size.width().div_ceil(self.block);
        let (bx0, bx1) = (rect.x0 / self.block, rect.x1.div_ceil(self.block));
        let (by0, by1) = (rect.y0 / self.block, rect.y1.div_ceil(self.block));
        for j in by0..by1 {
            for i in bx0..bx1 {
                let rgb = self.background[(j * blocks_x + i) as usize];
                let x0 = (i * self.block).max(rect.x0) - rect.x0;
                let y0 = (j * self.block).max(rect.y0) - rect.y0;
                let x1 = ((i + 1) * self.block).min(rect.x1) - rect.x0;
                let y1 = ((j + 1) * self.block).min(rect.y1) - rect.y0;
                img.fill_rect(x0, y0, x1, y1, rgb);
            }
        }
        for g in &self.glyphs {
            let gx0 = g.x.max(rect.x0);
            let gy0 = g.y.max(rect.y0);
            let gx1 = (g.x + g.side).min(rect.x1);
            let gy1 = (g.y + g.side).min(rect.y1);
            for y in gy0..gy1 {
                for x in gx0..gx1 {
                    if let Some(c) = g.color_at(x - g.x, y - g.y) {
                        img.set_pixel(x - rect.x0, y - rect.y0, c);
                    }
                }
            }
        }
        img
    }
}

/// Rejection sampler for non-overlapping glyph slots with a two-pixel gap.
struct Placer {
    frame: Size,
    side: u32,
    taken: Vec<BBox>,
}

impl Placer {
    fn new(frame: Size, side: u32) -> Self {
        Self {
            frame,
            side,
            taken: Vec::new(),
        }
    }

    fn place(&mut self, rng: &mut ChaCha8Rng, what: &'static str) -> Result<(u32, u32), TaskGenError> {
        let max_x = self.frame.width() - self.side;
        let max_y = self.frame.height() - self.side;
        for _ in 0..PLACEMENT_TRIES {
            let x = rng.random_range(0..=max_x);
            let y = rng.random_range(0..=max_y);
            let s = self.side as f64;
            let padded = BBox::new(x as f64 - 2.0, y as f64 - 2.0, x as f64 + s + 2.0, y as f64 + s + 2.0);
            if self.taken.iter().all(|t| !t.intersects(&padded)) {
                self.taken.push(BBox::new(x as f64, y as f64, x as f64 + s, y as f64 + s));
                return Ok((x, y));
            }
        }
        Err(TaskGenError::PlacementFailure {
            what,
            tries: PLACEMENT_TRIES,
        })
    }
}

/// A generated task together with its full-resolution image.
#[derive(Debug, Clone)]
pub struct TaskInstance {
    pub task: VisualTask,
    pub image: ImageBuffer,
}

/// A generated task with its procedural scene.
#[derive(Debug, Clone)]
pub struct SceneTask {
    pub task: VisualTask,
    pub scene: Scene,
}

impl SceneTask {
    pub fn instance(&self) -> TaskInstance {
        TaskInstance {
            task: self.task.clone(),
            image: self.scene.render(),
        }
    }
}

fn scene_base(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Scene {
    Scene {
        size: cfg.image_size,
        block: cfg.background_block,
        background: background_blocks(cfg, rng),
        glyphs: Vec::new(),
    }
}

/// Needle-in-a-haystack multiple-choice scene number `index` of `cfg`.
pub fn gen_needle_scene(cfg: &GenConfig, index: u64) -> Result<SceneTask, TaskGenError> {
    cfg.validate()?;
    let alphabet = cfg.alphabet();
    let mut rng = task_rng(cfg.seed, index, NEEDLE_DOMAIN);
    let mut scene = scene_base(cfg, &mut rng);

    let side = cfg.glyph_side;
    let shape = alphabet.shape;
    let answer = rng.random_range(0..NUM_CLASSES);
    let mut placer = Placer::new(cfg.image_size, side);
    let (tx, ty) = placer.place(&mut rng, "target glyph")?;
    scene.glyphs.push(Glyph {
        x: tx,
        y: ty,
        side,
        shape,
        ringed: true,
        color: alphabet.palette[answer],
    });
    for _ in 0..cfg.distractor_count {
        let (x, y) = placer.place(&mut rng, "distractor glyph")?;
        let class = rng.random_range(0..NUM_CLASSES);
        scene.glyphs.push(Glyph {
            x,
            y,
            side,
            shape,
            ringed: false,
            color: alphabet.palette[class],
        });
    }

    let shape_name = match shape {
        GlyphShape::Square => "square",
        GlyphShape::Disc => "disc",
    };
    let task = VisualTask {
        task_id: format!("needle-a{}-{:x}-{}", alphabet.id, cfg.seed, index),
        original_size: cfg.image_size,
        question_kind: QuestionKind::NeedleChoice,
        question: format!("What is the color inside the dark-ringed {shape_name}?"),
        alphabet_id: alphabet.id,
        glyph_side: side,
        choices: alphabet.names.iter().map(|s| s.to_string()).collect(),
        answer_index: answer as u32,
        target_bbox: Some(BBox::new(tx as f64, ty as f64, (tx + side) as f64, (ty + side) as f64)),
        gt_points: None,
        gt_count: None,
    };
    Ok(SceneTask { task, scene })
}

/// Counting scene number `index`: `count` ring glyphs (count uniform over
/// `count_range`) plus solid distractors.
pub fn gen_count_scene(cfg: &GenConfig, index: u64) -> Result<SceneTask, TaskGenError> {
    cfg.validate()?;
    let alphabet = cfg.alphabet();
    let mut rng = task_rng(cfg.seed, index, COUNT_DOMAIN);
    let mut scene = scene_base(cfg, &mut rng);

    let side = cfg.glyph_side;
    let shape = alphabet.shape;
    let (lo, hi) = cfg.count_range;
    let count = rng.random_range(lo..=hi);
    let mut placer = Placer::new(cfg.image_size, side);
    let mut points = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let (x, y) = placer.place(&mut rng, "counted glyph")?;
        let class = rng.random_range(0..NUM_CLASSES);
        scene.glyphs.push(Glyph {
            x,
            y,
            side,
            shape,
            ringed: true,
            color: alphabet.palette[class],
        });
        let half = side as f64 / 2.0;
        points.push(Point::new(x as f64 + half, y as f64 + half));
    }
    for _ in 0..cfg.distractor_count {
        let (x, y) = placer.place(&mut rng, "distractor glyph")?;
        let class = rng.random_range(0..NUM_CLASSES);
        scene.glyphs.push(Glyph {
            x,
            y,
            side,
            shape,
            ringed: false,
            color: alphabet.palette[class],
        });
    }

    let task = VisualTask {
        task_id: format!("count-a{}-{:x}-{}", alphabet.id, cfg.seed, index),
        original_size: cfg.image_size,
        question_kind: QuestionKind::Count,
        question: "How many dark-ringed glyphs are in the image?".to_string(),
        alphabet_id: alphabet.id,
        glyph_side: side,
        choices: (0..=hi).map(|c| c.to_string()).collect(),
        answer_index: count,
        target_bbox: None,
        gt_points: Some(points),
        gt_count: Some(count),
    };
    Ok(SceneTask { task, scene })
}

pub fn gen_scene(cfg: &GenConfig, kind: QuestionKind, index: u64) -> Result<SceneTask, TaskGenError> {
    match kind {
        QuestionKind::NeedleChoice => gen_needle_scene(cfg, index),
        QuestionKind::Count => gen_count_scene(cfg, index),
    }
}

/// Needle task number `index` of `cfg`, rendered.
pub fn gen_needle_task(cfg: &GenConfig, index: u64) -> Result<TaskInstance, TaskGenError> {
    Ok(gen_needle_scene(cfg, index)?.instance())
}

/// Counting task number `index` of `cfg`, rendered.
pub fn gen_count_task(cfg: &GenConfig, index: u64) -> Result<TaskInstance, TaskGenError> {
    Ok(gen_count_scene(cfg, index)?.instance())
}

/// Generates task `index` of the requested kind.
pub fn gen_task(cfg: &GenConfig, kind: QuestionKind, index: u64) -> Result<TaskInstance, TaskGenError> {
    Ok(gen_scene(cfg, kind, index)?.instance())
}

// ---------------------------------------------------------------------------
// Oracle
// ---------------------------------------------------------------------------

/// Minimum normalized cross-correlation for a glyph detection.
pub const DETECTION_THRESHOLD: f64 = 0.9;

/// A pixel counts as ring when every channel is at most this value.
const RING_LEVEL: f32 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub x: u32,
    pub y: u32,
    pub side: u32,
    pub class: usize,
    pub score: f64,
}

/// Glyph template for `class`: the full-resolution glyph placed at offset
/// `(px, py)` on a flat gray canvas of `canvas` pixels, area-resampled to
/// `side` pixels.
fn template(alphabet: &Alphabet, glyph_side: u32, class: usize, canvas: u32, (px, py): (u32, u32), side: u32) -> ImageBuffer {
    let scene = Scene {
        size: Size::square(canvas),
        block: canvas,
        background: vec![[BACKGROUND; 3]],
        glyphs: vec![Glyph {
            x: px,
            y: py,
            side: glyph_side,
            shape: alphabet.shape,
            ringed: true,
            color: alphabet.palette[class],
        }],
    };
    imaging::resize_area(&scene.render(), Size::square(side))
}

/// Class templates for every sampling phase of the glyph grid. An integer
/// downsampling factor `f` puts the glyph at one of `f x f` sub-pixel phases;
/// other scales use a single phase-aligned template.
fn phase_templates(alphabet: &Alphabet, glyph_side: u32, scale: f64) -> Vec<(u32, Vec<Vec<f64>>)> {
    let factor = (1.0 / scale).round();
    let exact = factor >= 2.0 && (1.0 / scale - factor).abs() < 1e-6 && factor <= 8.0;
    let to_vec = |img: ImageBuffer| img.data().iter().map(|v| *v as f64).collect::<Vec<f64>>();
    if !exact {
        let side = (glyph_side as f64 * scale).round() as u32;
        let classes = (0..NUM_CLASSES)
            .map(|k| to_vec(template(alphabet, glyph_side, k, glyph_side, (0, 0), side)))
            .collect();
        return vec![(side, classes)];
    }
    let f = factor as u32;
    let mut out = Vec::new();
    for py in 0..f {
        for px in 0..f {
            let canvas = (glyph_side + px.max(py)).div_ceil(f) * f;
            let side = canvas / f;
            let classes = (0..NUM_CLASSES)
                .map(|k| to_vec(template(alphabet, glyph_side, k, canvas, (px, py), side)))
                .collect();
            out.push((side, classes));
        }
    }
    out
}

fn ncc(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        da += (x - ma) * (x - ma);
        db += (y - mb) * (y - mb);
    }
    if da < 1e-9 || db < 1e-9 {
        return None;
    }
    Some(num / (da * db).sqrt())
}

fn window(img: &ImageBuffer, x: u32, y: u32, side: u32) -> Vec<f64> {
    let mut v = Vec::with_capacity((side * side * 3) as usize);
    for yy in y..y + side {
        for xx in x..x + side {
            v.extend(img.pixel(xx, yy).iter().map(|c| *c as f64));
        }
    }
    v
}

/// Finds ring glyphs in `img`, which shows the original scene at `scale`
/// image pixels per original pixel.
///
/// Candidates are connected components of ring-dark pixels whose bounding box
/// matches the expected glyph side; each is scored against every class
/// template by normalized cross-correlation.
pub fn detect_glyphs(task: &VisualTask, img: &ImageBuffer, scale: f64) -> Vec<Detection> {
    let Ok(alphabet) = Alphabet::get(task.alphabet_id) else {
        return Vec::new();
    };
    let side = (task.glyph_side as f64 * scale).round() as u32;
    if side < 3 || side > img.width() || side > img.height() {
        return Vec::new();
    }
    let templates = phase_templates(&alphabet, task.glyph_side, scale);
    let (w, h) = (img.width() as usize, img.height() as usize);
    let dark: Vec<bool> = img
        .data()
        .chunks_exact(3)
        .map(|p| p.iter().all(|c| *c <= RING_LEVEL))
        .collect();
    let mut seen = vec![false; w * h];
    let mut detections = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !dark[start] || seen[start] {
            continue;
        }
        // flood fill, 8-connected
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if dark[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        let (bw, bh) = ((x1 - x0 + 1) as i64, (y1 - y0 + 1) as i64);
        if (bw - side as i64).abs() > 2 || (bh - side as i64).abs() > 2 {
            continue;
        }
        let mut best: Option<Detection> = None;
        for (tside, classes) in &templates {
            let tside = *tside as i64;
            for oy in -1i64..=1 {
                for ox in -1i64..=1 {
                    let (wx, wy) = (x0 as i64 + ox, y0 as i64 + oy);
                    if wx < 0 || wy < 0 || wx + tside > w as i64 || wy + tside > h as i64 {
                        continue;
                    }
                    let win = window(img, wx as u32, wy as u32, tside as u32);
                    for (k, t) in classes.iter().enumerate() {
                        if let Some(score) = ncc(&win, t) {
                            if best.is_none_or(|b| score > b.score) {
                                best = Some(Detection {
                                    x: wx as u32,
                                    y: wy as u32,
                                    side: tside as u32,
                                    class: k,
                                    score,
                                });
                            }
                        }
                    }
                }
            }
        }
        if let Some(d) = best.filter(|d| d.score >= DETECTION_THRESHOLD) {
            detections.push(d);
        }
    }
    detections
}

/// Ground-truth adjudicator: the answer readable from `img`, or `None`
/// (abstain) when no glyph signature clears the detection threshold.
///
/// `scale` is image pixels per original pixel (1 for full-resolution crops).
/// Needle tasks answer with the class of the strongest detection; count tasks
/// with the number of detections.
pub fn oracle_answer(task: &VisualTask, img: &ImageBuffer, scale: f64) -> Option<u32> {
    let detections = detect_glyphs(task, img, scale);
    match task.question_kind {
        QuestionKind::NeedleChoice => detections
            .iter()
            .max_by(|a, b| a.score.total_cmp(&b.score))
            .map(|d| d.class as u32),
        QuestionKind::Count => {
            let n = detections.len() as u32;
            (n > 0 && (n as usize) < task.num_choices()).then_some(n)
        }
    }
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

pub const MANIFEST: &str = "manifest.jsonl";
pub const IMAGE_DIR: &str = "images";

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    #[serde(flatten)]
    task: VisualTask,
    image: String,
}

/// A saved dataset: manifest records plus image paths relative to `root`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub tasks: Vec<VisualTask>,
    pub images: Vec<String>,
}

impl Dataset {
    pub fn load_image(&self, i: usize) -> Result<ImageBuffer, TaskGenError> {
        Ok(imaging::read_ppm(&self.root.join(&self.images[i]))?)
    }

    pub fn find(&self, task_id: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.task_id == task_id)
    }
}

/// Writes `manifest.jsonl` (one task per line) and `images/<task_id>.ppm`.
pub fn save_dataset(tasks: &[TaskInstance], dir: &Path) -> Result<(), TaskGenError> {
    fs::create_dir_all(dir.join(IMAGE_DIR))?;
    let mut manifest = io::BufWriter::new(fs::File::create(dir.join(MANIFEST))?);
    for inst in tasks {
        let rel = format!("{IMAGE_DIR}/{}.ppm", inst.task.task_id);
        imaging::write_ppm(&inst.image, &dir.join(&rel))?;
        let record = ManifestRecord {
            task: inst.task.clone(),
            image: rel,
        };
        serde_json::to_writer(&mut manifest, &record).map_err(io::Error::other)?;
        manifest.write_all(b"\n")?;
    }
    manifest.flush()?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, TaskGenError> {
    let file = fs::File::open(dir.join(MANIFEST))?;
    let mut tasks = Vec::new();
    let mut images = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| TaskGenError::MalformedRecord {
                line: i + 1,
                message: e.to_string(),
            })?;
        tasks.push(record.task);
        images.push(record.image);
    }
    Ok(Dataset {
        root: dir.to_path_buf(),
        tasks,
        images,
    })
}
