//! Bounding-box and point arithmetic.
//!
//! Boxes are half-open `[x1, x2) x [y1, y2)` in continuous pixel coordinates of
//! some reference frame. Validation is always explicit: a raw [`BBox`] may be
//! reversed, degenerate or out of bounds until [`validate_bbox`] says otherwise.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid input box: {0:?}")]
    InvalidInputBox(InvalidReason),
    #[error("frame {frame} is smaller than the minimum crop side {min_side}")]
    FrameTooSmall { frame: Size, min_side: u32 },
    #[error("size must be positive, got {0}x{1}")]
    NonPositiveSize(u32, u32),
}

/// Width and height of an image frame in pixels. Both sides are at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "SizeRepr", into = "SizeRepr")]
pub struct Size {
    width: u32,
    height: u32,
}

#[derive(Serialize, Deserialize)]
struct SizeRepr {
    width: u32,
    height: u32,
}

impl TryFrom<SizeRepr> for Size {
    type Error = GeometryError;
    fn try_from(r: SizeRepr) -> Result<Self, Self::Error> {
        Size::new(r.width, r.height)
    }
}

impl From<Size> for SizeRepr {
    fn from(s: Size) -> Self {
        SizeRepr {
            width: s.width,
            height: s.height,
        }
    }
}

impl Size {
    pub fn new(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::NonPositiveSize(width, height));
        }
        Ok(Self { width, height })
    }

    /// Square frame; panics on zero, for constants and tests.
    pub fn square(side: u32) -> Self {
        Self::new(side, side).expect("square side must be positive")
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    /// The box covering the whole frame.
    pub fn full_box(&self) -> BBox {
        BBox::new(0.0, 0.0, self.width as f64, self.height as f64)
    }
}

impl std::fmt::Display for Size {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// Grounding coordinates `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(a: [f64; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> Point {
        Point::new((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    /// True when `other` lies entirely inside `self`.
    pub fn contains_box(&self, other: &BBox) -> bool {
        other.x1 >= self.x1 && other.y1 >= self.y1 && other.x2 <= self.x2 && other.y2 <= self.y2
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.x1 < other.x2 && other.x1 < self.x2 && self.y1 < other.y2 && other.y1 < self.y2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Ordered point annotations in a declared frame.
pub type PointSet = Vec<Point>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InvalidReason {
    OutOfBounds,
    DegenerateOrder,
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE", tag = "verdict", content = "reason")]
pub enum Validity {
    Valid,
    Invalid(InvalidReason),
}

impl Validity {
    pub fn is_valid(&self) -> bool {
        matches!(self, Validity::Valid)
    }
}

/// Checks ordering and bounds of a raw box against `frame`.
///
/// Non-finite coordinates are reported first, then reversed or zero-area
/// boxes, then boxes leaving the frame. `x2 == width` is in bounds.
pub fn validate_bbox(b: &BBox, frame: Size) -> Validity {
    let coords = b.to_array();
    if coords.iter().any(|c| !c.is_finite()) {
        return Validity::Invalid(InvalidReason::NonFinite);
    }
    if b.x2 <= b.x1 || b.y2 <= b.y1 {
        return Validity::Invalid(InvalidReason::DegenerateOrder);
    }
    let (w, h) = (frame.width as f64, frame.height as f64);
    if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > w || b.y2 > h {
        return Validity::Invalid(InvalidReason::OutOfBounds);
    }
    Validity::Valid
}

/// Maps a box predicted on the resized input back into the original frame,
/// scaling x by the width ratio and y by the height ratio.
pub fn remap_to_original(b: &BBox, s_input: Size, s_ori: Size) -> Result<BBox, GeometryError> {
    if let Validity::Invalid(reason) = validate_bbox(b, s_input) {
        return Err(GeometryError::InvalidInputBox(reason));
    }
    let sx = s_ori.width as f64 / s_input.width as f64;
    let sy = s_ori.height as f64 / s_input.height as f64;
    let (w, h) = (s_ori.width as f64, s_ori.height as f64);
    // Rounding in the products can push a boundary box past the frame edge.
    Ok(BBox::new(
        (b.x1 * sx).clamp(0.0, w),
        (b.y1 * sy).clamp(0.0, h),
        (b.x2 * sx).clamp(0.0, w),
        (b.y2 * sy).clamp(0.0, h),
    ))
}

/// Integer half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelRect {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        debug_assert!(x0 < x1 && y0 < y1);
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn size(&self) -> Size {
        Size::new(self.width(), self.height()).expect("pixel rect is non-empty")
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn to_bbox(&self) -> BBox {
        BBox::new(self.x0 as f64, self.y0 as f64, self.x1 as f64, self.y1 as f64)
    }
}

fn grow_span(lo: i64, hi: i64, min_len: i64, limit: i64) -> (u32, u32) {
    let (mut lo, mut hi) = (lo, hi);
    let len = hi - lo;
    if len < min_len {
        let deficit = min_len - len;
        lo -= deficit / 2;
        hi += deficit - deficit / 2;
    }
    if lo < 0 {
        hi -= lo;
        lo = 0;
    }
    if hi > limit {
        lo -= hi - limit;
        hi = limit;
    }
    (lo.max(0) as u32, hi as u32)
}

/// Snaps a valid box to the pixel grid for cropping.
///
/// `x1`/`y1` are floored and `x2`/`y2` ceiled, then clamped to the frame. A side
/// shorter than `min_side` is grown around its center and shifted back inside
/// the frame.
pub fn clamp_and_round_crop_rect(
    b: &BBox,
    frame: Size,
    min_side: u32,
) -> Result<PixelRect, GeometryError> {
    if frame.width < min_side || frame.height < min_side {
        return Err(GeometryError::FrameTooSmall { frame, min_side });
    }
    if let Validity::Invalid(reason) = validate_bbox(b, frame) {
        return Err(GeometryError::InvalidInputBox(reason));
    }
    let (w, h) = (frame.width as i64, frame.height as i64);
    let x0 = (b.x1.floor() as i64).clamp(0, w);
    let x1 = (b.x2.ceil() as i64).clamp(0, w);
    let y0 = (b.y1.floor() as i64).clamp(0, h);
    let y1 = (b.y2.ceil() as i64).clamp(0, h);
    let min_side = (min_side as i64).max(1);
    let (x0, x1) = grow_span(x0, x1, min_side, w);
    let (y0, y1) = grow_span(y0, y1, min_side, h);
    Ok(PixelRect::new(x0, y0, x1, y1))
}

/// Grows each side of `rect` to a multiple of `align` where the frame allows it.
///
/// Sides that cannot reach a multiple (frame side itself not aligned) are left
/// at the full frame extent; the caller resamples those.
pub fn align_rect(rect: PixelRect, frame: Size, align: u32) -> PixelRect {
    if align <= 1 {
        return rect;
    }
    let span = |lo: u32, hi: u32, limit: u32| -> (u32, u32) {
        let len = hi - lo;
        let target = len.div_ceil(align) * align;
        if target > limit {
            return (0, limit);
        }
        grow_span(lo as i64, hi as i64, target as i64, limit as i64)
    };
    let (x0, x1) = span(rect.x0, rect.x1, frame.width);
    let (y0, y1) = span(rect.y0, rect.y1, frame.height);
    PixelRect::new(x0, y0, x1, y1)
}

/// Half-open membership test.
pub fn point_in_bbox(p: &Point, b: &BBox) -> bool {
    b.x1 <= p.x && p.x < b.x2 && b.y1 <= p.y && p.y < b.y2
}
