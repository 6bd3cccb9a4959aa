//! Rule-based stand-in for the fine-tuned vision-language model.

use std::collections::BTreeMap;

use image::{GrayImage, Luma};
use imageproc::region_labelling::{connected_components, Connectivity};

use super::{
    parse_grounding, serialize_grounding, serialize_modifications, Detection, DetectionSet,
    GuidanceBackend, GuidanceError, Label, Modification, RenovationPlan, DEFAULT_OVERLAP_TOLERANCE,
};
use crate::geometry::BBox;
use crate::sketch::{PixelExtent, SketchImage};
use crate::synthesis::MIN_PATCH_SIDE;

/// Pixels darker than this count as stroke.
const DARK_BELOW: u8 = 128;
/// Required background share of a rectangle's interior.
const MIN_INTERIOR_BACKGROUND: f64 = 0.95;
/// A box whose bottom lies within this fraction of the canvas bottom is grounded.
const DOOR_BOTTOM_SLACK: f64 = 0.02;
const DOOR_MIN_ASPECT: f64 = 1.5;

#[derive(Debug, Clone, Copy)]
struct PixelRect {
    x0: u32,
    y0: u32,
    // inclusive
    x1: u32,
    y1: u32,
}

impl PixelRect {
    fn width(&self) -> u32 {
        self.x1 - self.x0 + 1
    }
    fn height(&self) -> u32 {
        self.y1 - self.y0 + 1
    }
    fn strictly_contains(&self, o: &PixelRect) -> bool {
        self.x0 <= o.x0
            && self.y0 <= o.y0
            && o.x1 <= self.x1
            && o.y1 <= self.y1
            && (self.x0, self.y0, self.x1, self.y1) != (o.x0, o.y0, o.x1, o.y1)
    }
}

fn is_dark(img: &GrayImage, x: u32, y: u32) -> bool {
    img.get_pixel(x, y)[0] < DARK_BELOW
}

/// Closed stroke rectangle test: full dark perimeter, and an interior
/// (inset by the stroke thickness) that is mostly background.
fn is_closed_rectangle(img: &GrayImage, r: &PixelRect) -> bool {
    if r.width() < 3 || r.height() < 3 {
        return false;
    }
    let perimeter_dark = (r.x0..=r.x1).all(|x| is_dark(img, x, r.y0) && is_dark(img, x, r.y1))
        && (r.y0..=r.y1).all(|y| is_dark(img, r.x0, y) && is_dark(img, r.x1, y));
    if !perimeter_dark {
        return false;
    }
    // Stroke thickness, probed a quarter of the way along each side.
    let qx = r.x0 + r.width() / 4;
    let qy = r.y0 + r.height() / 4;
    let run = |it: Box<dyn Iterator<Item = (u32, u32)>>| -> u32 {
        it.take_while(|&(x, y)| is_dark(img, x, y)).count() as u32
    };
    let t = [
        run(Box::new((r.y0..=r.y1).map(move |y| (qx, y)))),
        run(Box::new((r.y0..=r.y1).rev().map(move |y| (qx, y)))),
        run(Box::new((r.x0..=r.x1).map(move |x| (x, qy)))),
        run(Box::new((r.x0..=r.x1).rev().map(move |x| (x, qy)))),
    ]
    .into_iter()
    .min()
    .unwrap_or(0);
    if 2 * t >= r.width() || 2 * t >= r.height() {
        return false;
    }
    let (ix0, iy0, ix1, iy1) = (r.x0 + t, r.y0 + t, r.x1 - t, r.y1 - t);
    let total = ((ix1 - ix0 + 1) * (iy1 - iy0 + 1)) as f64;
    let background = (iy0..=iy1)
        .flat_map(|y| (ix0..=ix1).map(move |x| (x, y)))
        .filter(|(x, y)| !is_dark(img, *x, *y))
        .count() as f64;
    background / total >= MIN_INTERIOR_BACKGROUND
}

/// Find closed stroke rectangles and classify them as doors or windows.
///
/// Rectangles that enclose another detected rectangle are treated as frames
/// (building outlines, bays) and dropped. Output is ordered top-to-bottom,
/// then left-to-right.
pub fn stub_detect(sketch: &SketchImage, sketch_id: &str) -> DetectionSet {
    let img = sketch.raster();
    let (w, h) = img.dimensions();
    let binary = GrayImage::from_fn(w, h, |x, y| {
        Luma([if is_dark(img, x, y) { 0 } else { 255 }])
    });
    let labels = connected_components(&binary, Connectivity::Eight, Luma([255u8]));

    let mut extents: BTreeMap<u32, PixelRect> = BTreeMap::new();
    for (x, y, l) in labels.enumerate_pixels() {
        let l = l[0];
        if l == 0 {
            continue;
        }
        extents
            .entry(l)
            .and_modify(|r| {
                r.x0 = r.x0.min(x);
                r.y0 = r.y0.min(y);
                r.x1 = r.x1.max(x);
                r.y1 = r.y1.max(y);
            })
            .or_insert(PixelRect {
                x0: x,
                y0: y,
                x1: x,
                y1: y,
            });
    }

    let candidates: Vec<PixelRect> = extents
        .into_values()
        .filter(|r| is_closed_rectangle(img, r))
        .collect();
    let mut rects: Vec<PixelRect> = candidates
        .iter()
        .filter(|r| !candidates.iter().any(|o| r.strictly_contains(o)))
        .copied()
        .collect();
    rects.sort_by_key(|r| (r.y0, r.x0, r.y1, r.x1));

    let items = rects
        .iter()
        .filter_map(|r| {
            let bbox = BBox::new(
                r.x0 as f64 / w as f64,
                r.y0 as f64 / h as f64,
                (r.x1 + 1) as f64 / w as f64,
                (r.y1 + 1) as f64 / h as f64,
            )
            .ok()?;
            let grounded = 1.0 - bbox.y1() <= DOOR_BOTTOM_SLACK;
            let tall = r.height() as f64 / r.width() as f64 >= DOOR_MIN_ASPECT;
            let label = if grounded && tall {
                Label::Door
            } else {
                Label::Window
            };
            Some(Detection::new(label, bbox))
        })
        .collect();
    DetectionSet::new(sketch_id, items)
}

/// Geometry of the grid-fill proposal rule. Lengths are canvas fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposeParams {
    pub band_top: f64,
    pub band_bottom: f64,
    pub window_width: f64,
    /// Window height over width, in pixels.
    pub window_aspect: f64,
    pub door_width: f64,
    pub door_height: f64,
    pub tolerance: f64,
}

impl Default for ProposeParams {
    fn default() -> Self {
        Self {
            band_top: 0.35,
            band_bottom: 0.75,
            window_width: 0.12,
            window_aspect: 1.5,
            door_width: 0.10,
            door_height: 0.25,
            tolerance: DEFAULT_OVERLAP_TOLERANCE,
        }
    }
}

impl ProposeParams {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            tolerance,
            ..Self::default()
        }
    }
}

/// Snap a box to the quantized grid so the in-memory plan equals its wire form.
fn snapped(x0: f64, y0: f64, x1: f64, y1: f64) -> Option<BBox> {
    BBox::new(x0.max(0.0), y0.max(0.0), x1.min(1.0), y1.min(1.0))
        .ok()?
        .quantize()
        .ok()
        .map(|q| q.dequantize())
}

fn rationale(label: Label, brief: &str) -> String {
    let base = match label {
        Label::Window => "New window in the free wall band",
        Label::Door => "New centered entrance",
    };
    match brief.trim() {
        "" => base.to_string(),
        b => format!("{base}: {b}"),
    }
}

/// Deterministic grid-fill proposal.
///
/// Windows fill the wall band row by row with a gap of one window width,
/// centered on the canvas; a slot is skipped when it overlaps an existing
/// component or an earlier addition beyond the tolerance, or when it covers
/// fewer than [`MIN_PATCH_SIDE`] pixels on a side. One centered door
/// at the bottom is added when the basis has none and its slot is free.
pub fn stub_propose(
    sketch: &SketchImage,
    basis: &DetectionSet,
    brief: &str,
    params: &ProposeParams,
) -> RenovationPlan {
    let (w_px, h_px) = sketch.dims();
    let px_ratio = w_px as f64 / h_px as f64;
    let ww = params.window_width;
    let wh = ww * params.window_aspect * px_ratio;
    let gap_x = ww;
    let gap_y = ww * px_ratio;
    let band_h = params.band_bottom - params.band_top;

    let count = |span: f64, size: f64, gap: f64| -> usize {
        if size > span {
            0
        } else {
            ((span + gap) / (size + gap) + 1e-9).floor() as usize
        }
    };
    let cols = count(1.0, ww, gap_x);
    let rows = count(band_h, wh, gap_y);
    let x_start = (1.0 - (cols as f64 * ww + cols.saturating_sub(1) as f64 * gap_x)) / 2.0;
    let y_start = params.band_top
        + (band_h - (rows as f64 * wh + rows.saturating_sub(1) as f64 * gap_y)) / 2.0;

    let mut mods: Vec<Modification> = Vec::new();
    let free = |b: &BBox, mods: &[Modification]| {
        let (pw, ph) = PixelExtent::of(b, w_px, h_px).dims();
        pw >= MIN_PATCH_SIDE
            && ph >= MIN_PATCH_SIDE
            && basis
                .items
                .iter()
                .all(|d| d.bbox.iou(b) <= params.tolerance)
            && mods.iter().all(|m| m.bbox.iou(b) <= params.tolerance)
    };
    for r in 0..rows {
        for c in 0..cols {
            let x0 = x_start + c as f64 * (ww + gap_x);
            let y0 = y_start + r as f64 * (wh + gap_y);
            let Some(slot) = snapped(x0, y0, x0 + ww, y0 + wh) else {
                continue;
            };
            if free(&slot, &mods) {
                mods.push(
                    Modification::add(Label::Window, slot)
                        .with_rationale(rationale(Label::Window, brief)),
                );
            }
        }
    }
    if !basis.has_label(Label::Door) {
        let dx0 = 0.5 - params.door_width / 2.0;
        if let Some(slot) = snapped(dx0, 1.0 - params.door_height, dx0 + params.door_width, 1.0) {
            if free(&slot, &mods) {
                mods.push(
                    Modification::add(Label::Door, slot)
                        .with_rationale(rationale(Label::Door, brief)),
                );
            }
        }
    }
    RenovationPlan::new(basis.clone(), mods, brief)
}

/// [`GuidanceBackend`] wrapping [`stub_detect`] and [`stub_propose`].
#[derive(Debug, Clone, Default)]
pub struct StubGuidance {
    pub params: ProposeParams,
}

impl StubGuidance {
    pub fn new(params: ProposeParams) -> Self {
        Self { params }
    }
}

impl GuidanceBackend for StubGuidance {
    fn id(&self) -> &str {
        "stub"
    }

    fn detect(&self, sketch: &SketchImage) -> Result<String, GuidanceError> {
        let set = stub_detect(sketch, &sketch.meta().source_id);
        Ok(serialize_grounding(&set.items)?)
    }

    fn propose(
        &self,
        sketch: &SketchImage,
        detection_text: &str,
        brief: &str,
    ) -> Result<String, GuidanceError> {
        let basis = DetectionSet::new(
            sketch.meta().source_id.clone(),
            parse_grounding(detection_text)?.detections(),
        );
        let plan = stub_propose(sketch, &basis, brief, &self.params);
        Ok(serialize_modifications(&plan.mods, true)?)
    }

    fn is_stateless(&self) -> bool {
        true
    }
}
