//! Image buffers, area resampling, pixel-budget enforcement, patch tokens and
//! binary PPM persistence.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{PixelRect, Size};

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("image {size} is not divisible into {cell}x{cell} merged patches")]
    DimensionMismatch { size: Size, cell: u32 },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed ppm: {0}")]
    MalformedPpm(String),
    #[error("pixel buffer of length {got} does not match {size} rgb")]
    BadBuffer { size: Size, got: usize },
    #[error("invalid imaging config: {0}")]
    InvalidConfig(String),
}

/// Owned RGB raster, row-major, channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    size: Size,
    data: Vec<f32>,
}

impl ImageBuffer {
    /// Filled with a single color.
    pub fn filled(size: Size, rgb: [f32; 3]) -> Self {
        let n = size.area() as usize;
        let mut data = Vec::with_capacity(n * 3);
        for _ in 0..n {
            data.extend_from_slice(&rgb);
        }
        Self { size, data }
    }

    pub fn from_data(size: Size, data: Vec<f32>) -> Result<Self, ImagingError> {
        if data.len() != size.area() as usize * 3 {
            return Err(ImagingError::BadBuffer {
                size,
                got: data.len(),
            });
        }
        debug_assert!(data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        Ok(Self { size, data })
    }

    pub fn size(&self) -> Size {
        self.size
    }

    pub fn width(&self) -> u32 {
        self.size.width()
    }

    pub fn height(&self) -> u32 {
        self.size.height()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [f32; 3] {
        let i = (y as usize * self.width() as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [f32; 3]) {
        let i = (y as usize * self.width() as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Fills a rectangle, clipped to the frame.
    pub fn fill_rect(&mut self, x0: u32, y0: u32, x1: u32, y1: u32, rgb: [f32; 3]) {
        let w = self.width() as usize;
        let x1 = x1.min(self.width()) as usize;
        let y1 = y1.min(self.height());
        for y in y0..y1 {
            let row = y as usize * w;
            for x in x0 as usize..x1 {
                let i = (row + x) * 3;
                self.data[i..i + 3].copy_from_slice(&rgb);
            }
        }
    }

    /// Copies out the pixels inside `rect` at full resolution.
    pub fn crop(&self, rect: PixelRect) -> ImageBuffer {
        assert!(rect.x1 <= self.width() && rect.y1 <= self.height(), "crop outside frame");
        let w = self.width() as usize;
        let mut data = Vec::with_capacity(rect.area() as usize * 3);
        for y in rect.y0..rect.y1 {
            let start = (y as usize * w + rect.x0 as usize) * 3;
            let end = (y as usize * w + rect.x1 as usize) * 3;
            data.extend_from_slice(&self.data[start..end]);
        }
        ImageBuffer {
            size: rect.size(),
            data,
        }
    }

    /// Per-channel mean over the whole image.
    pub fn mean_rgb(&self) -> [f64; 3] {
        let mut acc = [0.0f64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += px[c] as f64;
            }
        }
        let n = self.size.area() as f64;
        acc.map(|v| v / n)
    }
}

/// Rec. 601 luma.
#[inline]
pub fn luminance(rgb: [f32; 3]) -> f64 {
    0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64
}

/// Source index ranges and overlap weights for one output sample of a 1-D
/// area resampler.
fn area_weights(src: u32, dst: u32) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let lo = o as f64 * ratio;
            let hi = (o + 1) as f64 * ratio;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src as usize);
            let mut taps = Vec::with_capacity(last - first);
            for s in first..last {
                let overlap = (hi.min((s + 1) as f64) - lo.max(s as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((s, overlap / ratio));
                }
            }
            taps
        })
        .collect()
}

/// Area-weighted average resampling to `target`.
///
/// Each output pixel is the mean of the source area it covers, so constant
/// images stay constant and integer-factor reductions are exact block means.
pub fn resize_area(img: &ImageBuffer, target: Size) -> ImageBuffer {
    if img.size == target {
        return img.clone();
    }
    let (sw, sh) = (img.width() as usize, img.height() as usize);
    let (tw, th) = (target.width() as usize, target.height() as usize);
    let wx = area_weights(sw as u32, tw as u32);
    let wy = area_weights(sh as u32, th as u32);

    // horizontal pass: sh rows of tw pixels
    let mut tmp = vec![0.0f64; sh * tw * 3];
    for y in 0..sh {
        let src_row = &img.data[y * sw * 3..(y + 1) * sw * 3];
        let dst_row = &mut tmp[y * tw * 3..(y + 1) * tw * 3];
        for (ox, taps) in wx.iter().enumerate() {
            let mut acc = [0.0f64; 3];
            for &(sx, wgt) in taps {
                let p = &src_row[sx * 3..sx * 3 + 3];
                acc[0] += p[0] as f64 * wgt;
                acc[1] += p[1] as f64 * wgt;
                acc[2] += p[2] as f64 * wgt;
            }
            dst_row[ox * 3..ox * 3 + 3].copy_from_slice(&acc);
        }
    }

    let mut out = vec![0.0f32; tw * th * 3];
    let mut acc = vec![0.0f64; tw * 3];
    for (oy, taps) in wy.iter().enumerate() {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for &(sy, wgt) in taps {
            let row = &tmp[sy * tw * 3..(sy + 1) * tw * 3];
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v * wgt;
            }
        }
        for (o, a) in out[oy * tw * 3..(oy + 1) * tw * 3].iter_mut().zip(&acc) {
            *o = a.clamp(0.0, 1.0) as f32;
        }
    }
    ImageBuffer {
        size: target,
        data: out,
    }
}

/// Output side lengths for the pixel budget rule, or `None` when the image
/// already fits.
pub fn budget_size(size: Size, max_pixels: u64, align: u32) -> Option<(Size, f64)> {
    let area = size.area();
    if area <= max_pixels {
        return None;
    }
    let align = align.max(1) as u64;
    let scale = (max_pixels as f64 / area as f64).sqrt();
    let snap = |side: u32| -> u64 {
        let s = (side as f64 * scale).floor() as u64;
        ((s / align) * align).max(align)
    };
    let (mut w, mut h) = (snap(size.width()), snap(size.height()));
    // Extreme aspect ratios: the minimum-align clamp on one side can overshoot.
    if w * h > max_pixels {
        if w > h {
            w = ((max_pixels / h) / align * align).max(align);
        } else {
            h = ((max_pixels / w) / align * align).max(align);
        }
    }
    Some((Size::new(w as u32, h as u32).expect("aligned sides positive"), scale))
}

/// Shrinks an over-budget image so its area is at most `max_pixels`.
///
/// Under-budget images come back unchanged with scale 1. Otherwise the nominal
/// scale is `sqrt(max_pixels / area)` and each side is floored to a multiple of
/// `align` (at least `align`).
pub fn resize_to_budget(img: &ImageBuffer, max_pixels: u64, align: u32) -> (ImageBuffer, f64) {
    match budget_size(img.size, max_pixels, align) {
        None => (img.clone(), 1.0),
        Some((target, scale)) => (resize_area(img, target), scale),
    }
}

/// Budget resize followed, if needed, by an area resize that floors each side
/// to a multiple of `align`, so the result can be tokenized.
pub fn fit_for_encoder(img: &ImageBuffer, max_pixels: u64, align: u32) -> ImageBuffer {
    let (img, _) = resize_to_budget(img, max_pixels, align);
    let align = align.max(1);
    let snap = |s: u32| ((s / align) * align).max(align);
    let target = Size::new(snap(img.width()), snap(img.height())).expect("positive");
    if target == img.size {
        img
    } else {
        resize_area(&img, target)
    }
}

/// Patch and merge geometry plus the pixel budget of the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImagingConfig {
    pub patch_size: u32,
    pub merge: u32,
    pub max_pixels: u64,
    pub feature_dim: usize,
    /// Side alignment used when resizing to the budget.
    pub align: u32,
}

impl Default for ImagingConfig {
    fn default() -> Self {
        Self {
            patch_size: 2,
            merge: 2,
            max_pixels: 128 * 128,
            feature_dim: TOKEN_FEATURES,
            align: 4,
        }
    }
}

impl ImagingConfig {
    pub fn cell(&self) -> u32 {
        self.patch_size * self.merge
    }

    pub fn validate(&self) -> Result<(), ImagingError> {
        if self.patch_size < 1 || self.merge < 1 {
            return Err(ImagingError::InvalidConfig("patch_size and merge must be >= 1".into()));
        }
        if self.max_pixels < (self.cell() as u64).pow(2) {
            return Err(ImagingError::InvalidConfig(format!(
                "max_pixels {} below one merged cell ({}^2)",
                self.max_pixels,
                self.cell()
            )));
        }
        if self.align < 1 || self.feature_dim < 1 {
            return Err(ImagingError::InvalidConfig("align and feature_dim must be >= 1".into()));
        }
        if self.align % self.cell() != 0 {
            return Err(ImagingError::InvalidConfig(format!(
                "align {} must be a multiple of the merged cell {}",
                self.align,
                self.cell()
            )));
        }
        Ok(())
    }
}

/// Number of fixed per-token features before padding.
pub const TOKEN_FEATURES: usize = 6;
/// Index of the luminance-contrast feature inside a token vector.
pub const CONTRAST: usize = 5;

/// One feature vector per merged cell, row-major over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTokens {
    pub columns: usize,
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl PatchTokens {
    pub fn len(&self) -> usize {
        self.columns * self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn token_at(&self, col: usize, row: usize) -> &[f64] {
        self.token(row * self.columns + col)
    }
}

/// Per-patch sufficient statistics: channel sums, luma sum and luma square sum.
#[derive(Debug, Clone, Copy, Default)]
struct PatchStats {
    rgb: [f64; 3],
    luma: f64,
    luma_sq: f64,
    count: f64,
}

impl std::ops::AddAssign for PatchStats {
    fn add_assign(&mut self, o: Self) {
        for c in 0..3 {
            self.rgb[c] += o.rgb[c];
        }
        self.luma += o.luma;
        self.luma_sq += o.luma_sq;
        self.count += o.count;
    }
}

fn patchify(img: &ImageBuffer, p: u32) -> (usize, usize, Vec<PatchStats>) {
    let cols = (img.width() / p) as usize;
    let rows = (img.height() / p) as usize;
    let w = img.width() as usize;
    let mut stats = vec![PatchStats::default(); cols * rows];
    for y in 0..img.height() as usize {
        let prow = y / p as usize;
        for x in 0..w {
            let i = (y * w + x) * 3;
            let px = [img.data[i], img.data[i + 1], img.data[i + 2]];
            let l = luminance(px);
            let s = &mut stats[prow * cols + x / p as usize];
            s.rgb[0] += px[0] as f64;
            s.rgb[1] += px[1] as f64;
            s.rgb[2] += px[2] as f64;
            s.luma += l;
            s.luma_sq += l * l;
            s.count += 1.0;
        }
    }
    (cols, rows, stats)
}

/// Splits the image into `p x p` patches, merges `m x m` groups and projects
/// each group with a fixed featurizer:
/// `[mean R, mean G, mean B, center x, center y, luma std]`, zero-padded or
/// truncated to `feature_dim`.
pub fn tokenize(img: &ImageBuffer, cfg: &ImagingConfig) -> Result<PatchTokens, ImagingError> {
    let cell = cfg.cell();
    if cell == 0 || img.width() % cell != 0 || img.height() % cell != 0 {
        return Err(ImagingError::DimensionMismatch {
            size: img.size,
            cell,
        });
    }
    let (pcols, _prows, patches) = patchify(img, cfg.patch_size);
    let m = cfg.merge as usize;
    let columns = (img.width() / cell) as usize;
    let rows = (img.height() / cell) as usize;
    let dim = cfg.feature_dim;
    let mut data = vec![0.0; columns * rows * dim];
    for r in 0..rows {
        for c in 0..columns {
            let mut s = PatchStats::default();
            for dy in 0..m {
                for dx in 0..m {
                    s += patches[(r * m + dy) * pcols + c * m + dx];
                }
            }
            let n = s.count;
            let mean_l = s.luma / n;
            let var = (s.luma_sq / n - mean_l * mean_l).max(0.0);
            let feats = [
                s.rgb[0] / n,
                s.rgb[1] / n,
                s.rgb[2] / n,
                (c as f64 + 0.5) / columns as f64,
                (r as f64 + 0.5) / rows as f64,
                var.sqrt(),
            ];
            let out = &mut data[(r * columns + c) * dim..(r * columns + c + 1) * dim];
            for (o, f) in out.iter_mut().zip(feats) {
                *o = f;
            }
        }
    }
    Ok(PatchTokens {
        columns,
        rows,
        dim,
        data,
    })
}

/// Writes a binary P6 PPM with maxval 255, quantizing by `round(v * 255)`.
pub fn write_ppm(img: &ImageBuffer, path: &Path) -> Result<(), ImagingError> {
    fs::write(path, encode_ppm(img))?;
    Ok(())
}

pub fn encode_ppm(img: &ImageBuffer) -> Vec<u8> {
    let header = format!("P6\n{} {}\n255\n", img.width(), img.height());
    let mut out = Vec::with_capacity(header.len() + img.data.len());
    out.write_all(header.as_bytes()).expect("vec write");
    out.extend(img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn read_ppm(path: &Path) -> Result<ImageBuffer, ImagingError> {
    decode_ppm(&fs::read(path)?)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageBuffer, ImagingError> {
    let bad = |m: &str| ImagingError::MalformedPpm(m.to_string());
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(bad("missing P6 magic"));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|b| *b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("header field out of range"))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(bad("missing whitespace after maxval"));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit maxval is supported"));
    }
    let size = Size::new(w, h).map_err(|_| bad("zero dimension"))?;
    let n = size.area() as usize * 3;
    let body = &bytes[pos..];
    if body.len() != n {
        return Err(bad(&format!("expected {n} data bytes, found {}", body.len())));
    }
    let scale = maxval as f32;
    let data = body.iter().map(|&b| (b as f32 / scale).min(1.0)).collect();
    Ok(ImageBuffer { size, data })
}
