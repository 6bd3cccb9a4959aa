//! Single-channel facade sketches and the pixel operations the compositing
//! and fidelity contracts are stated in.
//!
//! Pixel coverage of a normalized box follows the pixel-center rule: pixel
//! `(px, py)` on a `w × h` canvas belongs to box `b` iff its center
//! `((px + 0.5) / w, (py + 0.5) / h)` satisfies `b.x0 <= cx < b.x1` and
//! `b.y0 <= cy < b.y1`.

use std::ops::Range;

use image::{GrayImage, ImageFormat, Luma, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{dilate, BBox};

/// Smallest accepted sketch side, in pixels.
pub const MIN_SKETCH_SIDE: u32 = 64;
pub const BACKGROUND: u8 = 255;
pub const STROKE: u8 = 0;
/// Default threshold for [`edge_map`].
pub const DEFAULT_EDGE_THRESHOLD: u8 = 128;

#[derive(Debug, Error)]
pub enum SketchError {
    #[error("sketch is {width}x{height}; both sides must be at least {MIN_SKETCH_SIDE}px")]
    TooSmall { width: u32, height: u32 },
    #[error("sketch background mode is {0}, expected white (255) with dark strokes")]
    NotDarkOnWhite(u8),
    #[error("dimension mismatch: {a:?} vs {b:?}")]
    DimensionMismatch { a: (u32, u32), b: (u32, u32) },
    #[error("invalid sketch metadata: {0}")]
    InvalidMeta(String),
    #[error("image decode failed: {0}")]
    Decode(#[from] image::ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoofType {
    Pitched,
    Flat,
}

/// JSON sidecar carried with every sketch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SketchMeta {
    pub source_id: String,
    #[serde(default)]
    pub width_m: Option<f64>,
    #[serde(default)]
    pub height_m: Option<f64>,
    #[serde(default)]
    pub roof_type: Option<RoofType>,
}

impl SketchMeta {
    pub fn new(source_id: impl Into<String>) -> Self {
        Self {
            source_id: source_id.into(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), SketchError> {
        for (name, v) in [("width_m", self.width_m), ("height_m", self.height_m)] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err(SketchError::InvalidMeta(format!(
                        "{name} must be > 0, got {v}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A validated facade sketch: at least 64×64, dark strokes on a white background.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchImage {
    raster: GrayImage,
    meta: SketchMeta,
}

impl SketchImage {
    pub fn new(raster: GrayImage, meta: SketchMeta) -> Result<Self, SketchError> {
        let (width, height) = raster.dimensions();
        if width < MIN_SKETCH_SIDE || height < MIN_SKETCH_SIDE {
            return Err(SketchError::TooSmall { width, height });
        }
        meta.validate()?;
        let mode = intensity_mode(&raster);
        if mode != BACKGROUND {
            return Err(SketchError::NotDarkOnWhite(mode));
        }
        Ok(Self { raster, meta })
    }

    /// Blank white canvas.
    pub fn blank(width: u32, height: u32, meta: SketchMeta) -> Result<Self, SketchError> {
        Self::new(
            GrayImage::from_pixel(width, height, Luma([BACKGROUND])),
            meta,
        )
    }

    pub fn from_png(bytes: &[u8], meta: SketchMeta) -> Result<Self, SketchError> {
        Self::new(decode_gray(bytes)?, meta)
    }

    pub fn raster(&self) -> &GrayImage {
        &self.raster
    }

    pub fn into_raster(self) -> GrayImage {
        self.raster
    }

    pub fn meta(&self) -> &SketchMeta {
        &self.meta
    }

    pub fn width(&self) -> u32 {
        self.raster.width()
    }

    pub fn height(&self) -> u32 {
        self.raster.height()
    }

    pub fn dims(&self) -> (u32, u32) {
        self.raster.dimensions()
    }

    pub fn to_png(&self) -> Vec<u8> {
        encode_gray(&self.raster)
    }
}

fn intensity_mode(img: &GrayImage) -> u8 {
    let mut hist = [0usize; 256];
    for p in img.as_raw() {
        hist[*p as usize] += 1;
    }
    // Ties resolve toward the brighter value.
    (0..=255u8)
        .rev()
        .max_by_key(|v| hist[*v as usize])
        .unwrap_or(BACKGROUND)
}

/// Decode any PNG to 8-bit grayscale.
pub fn decode_gray(bytes: &[u8]) -> Result<GrayImage, SketchError> {
    Ok(image::load_from_memory_with_format(bytes, ImageFormat::Png)?.into_luma8())
}

pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage, SketchError> {
    Ok(image::load_from_memory_with_format(bytes, ImageFormat::Png)?.into_rgb8())
}

pub fn encode_gray(img: &GrayImage) -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .expect("PNG encoding into memory cannot fail");
    out.into_inner()
}

pub fn encode_rgb(img: &RgbImage) -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .expect("PNG encoding into memory cannot fail");
    out.into_inner()
}

/// Pixel indices along one axis whose centers fall in `[lo, hi)`.
pub fn pixel_span(lo: f64, hi: f64, n: u32) -> Range<u32> {
    let center = |i: u32| (i as f64 + 0.5) / n as f64;
    let first_at_least = |v: f64| {
        let mut i = ((v * n as f64) - 0.5).ceil().clamp(0.0, n as f64) as u32;
        while i > 0 && center(i - 1) >= v {
            i -= 1;
        }
        while i < n && center(i) < v {
            i += 1;
        }
        i
    };
    let start = first_at_least(lo);
    let end = first_at_least(hi).max(start);
    start..end
}

/// Pixel rectangle covered by `b` on a `width × height` canvas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelExtent {
    pub cols: Range<u32>,
    pub rows: Range<u32>,
}

impl PixelExtent {
    pub fn of(b: &BBox, width: u32, height: u32) -> Self {
        Self {
            cols: pixel_span(b.x0(), b.x1(), width),
            rows: pixel_span(b.y0(), b.y1(), height),
        }
    }

    pub fn width(&self) -> u32 {
        self.cols.len() as u32
    }

    pub fn height(&self) -> u32 {
        self.rows.len() as u32
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width(), self.height())
    }

    pub fn is_empty(&self) -> bool {
        self.cols.is_empty() || self.rows.is_empty()
    }
}

/// Boolean per-pixel mask with the dimensions of the sketch it is bound to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl RegionMask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; (width as usize) * (height as usize)],
        }
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    fn idx(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[self.idx(x, y)]
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        let i = self.idx(x, y);
        self.bits[i] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_subset_of(&self, other: &RegionMask) -> bool {
        self.dims() == other.dims() && self.bits.iter().zip(&other.bits).all(|(a, b)| !a || *b)
    }

    pub fn intersection_count(&self, other: &RegionMask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a && **b)
            .count()
    }

    pub fn union_count(&self, other: &RegionMask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a || **b)
            .count()
    }

    /// Row-major iterator over `(x, y, value)`.
    pub fn iter(&self) -> impl Iterator<Item = (u32, u32, bool)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .map(move |(i, b)| ((i as u32) % w, (i as u32) / w, *b))
    }
}

/// Union of the dilated boxes, rasterized by the pixel-center rule.
pub fn rasterize_mask(width: u32, height: u32, boxes: &[BBox], margin: f64) -> RegionMask {
    let mut mask = RegionMask::empty(width, height);
    for b in boxes {
        let ext = PixelExtent::of(&dilate(b, margin), width, height);
        for y in ext.rows.clone() {
            for x in ext.cols.clone() {
                mask.set(x, y, true);
            }
        }
    }
    mask
}

/// Pixels whose intensity differs from some 4-neighbor by at least `threshold`.
///
/// A threshold of 0 is treated as 1.
pub fn edge_map(img: &GrayImage, threshold: u8) -> RegionMask {
    let threshold = threshold.max(1);
    let (w, h) = img.dimensions();
    let mut mask = RegionMask::empty(w, h);
    let at = |x: u32, y: u32| img.get_pixel(x, y)[0];
    for y in 0..h {
        for x in 0..w {
            let v = at(x, y);
            let mut max_diff = 0u8;
            if x > 0 {
                max_diff = max_diff.max(v.abs_diff(at(x - 1, y)));
            }
            if x + 1 < w {
                max_diff = max_diff.max(v.abs_diff(at(x + 1, y)));
            }
            if y > 0 {
                max_diff = max_diff.max(v.abs_diff(at(x, y - 1)));
            }
            if y + 1 < h {
                max_diff = max_diff.max(v.abs_diff(at(x, y + 1)));
            }
            if max_diff >= threshold {
                mask.set(x, y, true);
            }
        }
    }
    mask
}

/// True iff `a` and `b` are bit-identical wherever `mask` is false.
pub fn pixels_equal_outside(
    a: &GrayImage,
    b: &GrayImage,
    mask: &RegionMask,
) -> Result<bool, SketchError> {
    if a.dimensions() != b.dimensions() {
        return Err(SketchError::DimensionMismatch {
            a: a.dimensions(),
            b: b.dimensions(),
        });
    }
    if a.dimensions() != mask.dims() {
        return Err(SketchError::DimensionMismatch {
            a: a.dimensions(),
            b: mask.dims(),
        });
    }
    Ok(a.as_raw()
        .iter()
        .zip(b.as_raw())
        .zip(&mask.bits)
        .all(|((pa, pb), m)| *m || pa == pb))
}

/// Fill the pixel rectangle `[x0, x1) × [y0, y1)`, clipped to the image.
pub fn fill_rect(img: &mut GrayImage, x0: u32, y0: u32, x1: u32, y1: u32, value: u8) {
    let (w, h) = img.dimensions();
    for y in y0.min(h)..y1.min(h) {
        for x in x0.min(w)..x1.min(w) {
            img.put_pixel(x, y, Luma([value]));
        }
    }
}

/// Stroke the outline of `[x0, x1) × [y0, y1)` with the given thickness, inward.
pub fn stroke_rect(
    img: &mut GrayImage,
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
    thickness: u32,
    value: u8,
) {
    let t = thickness;
    fill_rect(img, x0, y0, x1, (y0 + t).min(y1), value);
    fill_rect(img, x0, y1.saturating_sub(t).max(y0), x1, y1, value);
    fill_rect(img, x0, y0, (x0 + t).min(x1), y1, value);
    fill_rect(img, x1.saturating_sub(t).max(x0), y0, x1, y1, value);
}
