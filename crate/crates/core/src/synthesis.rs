//! Stage 2: synthesize a patch per added component and merge the patches into
//! the sketch.
//!
//! Whatever compositor is plugged in, its output is post-masked: pixels outside
//! the dilated modification boxes are copied back from the base sketch, so the
//! original structure survives bit-for-bit.

use image::{GrayImage, Luma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, GeometryError, QuantBBox};
use crate::guidance::{
    validate_plan, Label, RenovationPlan, ValidationReport, DEFAULT_OVERLAP_TOLERANCE,
};
use crate::sketch::{
    encode_gray, fill_rect, rasterize_mask, stroke_rect, PixelExtent, SketchImage, BACKGROUND,
    STROKE,
};

/// Blend margin around each target box, as a fraction of the canvas.
pub const DEFAULT_MARGIN: f64 = 0.01;
pub const MIN_PATCH_SIDE: u32 = 8;
const STROKE_WIDTH: u32 = 2;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("patch {width}x{height} is below the {MIN_PATCH_SIDE}x{MIN_PATCH_SIDE} minimum")]
    PatchTooSmall { width: u32, height: u32 },
    #[error("patch {index} is {got:?} but its target covers {expected:?} pixels")]
    PatchDimMismatch {
        index: usize,
        expected: (u32, u32),
        got: (u32, u32),
    },
    #[error("plan rejected: {0}")]
    InvalidPlan(ValidationReport),
    #[error("component backend failed on modification {index}: {source}")]
    Component {
        index: usize,
        #[source]
        source: Box<SynthesisError>,
    },
    #[error("compositor returned {got:?}, expected {expected:?}")]
    CompositorDims {
        expected: (u32, u32),
        got: (u32, u32),
    },
    #[error("backend error: {0}")]
    Backend(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub backend_id: String,
    pub seed: u64,
}

/// A synthesized component raster bound to its destination box.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentPatch {
    pub label: Label,
    pub target: BBox,
    pub patch: GrayImage,
    pub provenance: Provenance,
}

/// Generates component rasters (a diffusion model in production).
pub trait ComponentBackend: Send + Sync {
    fn id(&self) -> &str;

    /// Must be deterministic in `(label, dims, style_ref, seed)`.
    fn generate(
        &self,
        label: Label,
        dims: (u32, u32),
        style_ref: Option<&GrayImage>,
        seed: u64,
    ) -> Result<GrayImage, SynthesisError>;

    /// Whether `generate` may be called from several threads at once.
    fn allows_concurrent(&self) -> bool {
        false
    }
}

/// Blends patches into a base sketch (an inpainting model in production).
pub trait CompositorBackend: Send + Sync {
    fn id(&self) -> &str;

    fn merge(
        &self,
        base: &GrayImage,
        patches: &[ComponentPatch],
        margin: f64,
    ) -> Result<GrayImage, SynthesisError>;
}

/// Procedural line drawing of a window or door, 2px strokes on white.
///
/// Windows: border inset 1px plus centered vertical and horizontal mullions.
/// Doors: border inset 1px, a horizontal panel line at half height and a 3×3
/// handle at mid-height, 20% of the width in from the right edge.
pub fn stub_generate(label: Label, dims: (u32, u32)) -> Result<GrayImage, SynthesisError> {
    let (w, h) = dims;
    if w < MIN_PATCH_SIDE || h < MIN_PATCH_SIDE {
        return Err(SynthesisError::PatchTooSmall {
            width: w,
            height: h,
        });
    }
    let mut img = GrayImage::from_pixel(w, h, Luma([BACKGROUND]));
    stroke_rect(&mut img, 1, 1, w - 1, h - 1, STROKE_WIDTH, STROKE);
    let cx = (w - STROKE_WIDTH) / 2;
    let cy = (h - STROKE_WIDTH) / 2;
    match label {
        Label::Window => {
            fill_rect(&mut img, cx, 1, cx + STROKE_WIDTH, h - 1, STROKE);
            fill_rect(&mut img, 1, cy, w - 1, cy + STROKE_WIDTH, STROKE);
        }
        Label::Door => {
            fill_rect(&mut img, 1, cy, w - 1, cy + STROKE_WIDTH, STROKE);
            let hx = w - 1 - (0.2 * w as f64).round() as u32;
            let hy = h / 2;
            fill_rect(&mut img, hx - 1, hy - 1, hx + 2, hy + 2, STROKE);
        }
    }
    Ok(img)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StubComponents;

impl ComponentBackend for StubComponents {
    fn id(&self) -> &str {
        "stub"
    }

    fn generate(
        &self,
        label: Label,
        dims: (u32, u32),
        _style_ref: Option<&GrayImage>,
        _seed: u64,
    ) -> Result<GrayImage, SynthesisError> {
        stub_generate(label, dims)
    }

    fn allows_concurrent(&self) -> bool {
        true
    }
}

fn check_patch_dims(
    base: &GrayImage,
    patches: &[ComponentPatch],
) -> Result<Vec<PixelExtent>, SynthesisError> {
    let (w, h) = base.dimensions();
    patches
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let ext = PixelExtent::of(&p.target, w, h);
            if ext.dims() != p.patch.dimensions() {
                return Err(SynthesisError::PatchDimMismatch {
                    index,
                    expected: ext.dims(),
                    got: p.patch.dimensions(),
                });
            }
            Ok(ext)
        })
        .collect()
}

/// Darker-wins merge inside each target box; everything else is left as is.
pub fn stub_merge(
    base: &GrayImage,
    patches: &[ComponentPatch],
    _margin: f64,
) -> Result<GrayImage, SynthesisError> {
    let extents = check_patch_dims(base, patches)?;
    let mut out = base.clone();
    for (p, ext) in patches.iter().zip(&extents) {
        for (py, y) in ext.rows.clone().enumerate() {
            for (px, x) in ext.cols.clone().enumerate() {
                let v = out.get_pixel(x, y)[0].min(p.patch.get_pixel(px as u32, py as u32)[0]);
                out.put_pixel(x, y, Luma([v]));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StubCompositor;

impl CompositorBackend for StubCompositor {
    fn id(&self) -> &str {
        "stub"
    }

    fn merge(
        &self,
        base: &GrayImage,
        patches: &[ComponentPatch],
        margin: f64,
    ) -> Result<GrayImage, SynthesisError> {
        stub_merge(base, patches, margin)
    }
}

/// Darker-wins merge plus a soft ink halo fading out over `feather_px` pixels
/// around each box. The halo ignores the margin, so it exercises the
/// pipeline's post-masking.
#[derive(Debug, Clone, Copy)]
pub struct FeatherCompositor {
    pub feather_px: u32,
}

impl Default for FeatherCompositor {
    fn default() -> Self {
        Self { feather_px: 6 }
    }
}

impl CompositorBackend for FeatherCompositor {
    fn id(&self) -> &str {
        "feather"
    }

    fn merge(
        &self,
        base: &GrayImage,
        patches: &[ComponentPatch],
        margin: f64,
    ) -> Result<GrayImage, SynthesisError> {
        let mut out = stub_merge(base, patches, margin)?;
        let (w, h) = base.dimensions();
        let f = self.feather_px as i64;
        for p in patches {
            let ext = PixelExtent::of(&p.target, w, h);
            if ext.is_empty() {
                continue;
            }
            let (c0, c1) = (ext.cols.start as i64, ext.cols.end as i64 - 1);
            let (r0, r1) = (ext.rows.start as i64, ext.rows.end as i64 - 1);
            for y in (r0 - f).max(0)..=(r1 + f).min(h as i64 - 1) {
                for x in (c0 - f).max(0)..=(c1 + f).min(w as i64 - 1) {
                    let nx = x.clamp(c0, c1);
                    let ny = y.clamp(r0, r1);
                    let d = (x - nx).abs().max((y - ny).abs());
                    if d == 0 {
                        continue;
                    }
                    // Darkest patch pixel within the outer stroke band next to (nx, ny).
                    let (sx, sy) = ((x - nx).signum(), (y - ny).signum());
                    let darkest = (0..=STROKE_WIDTH as i64)
                        .map(|k| {
                            let px = (nx - sx * k).clamp(c0, c1);
                            let py = (ny - sy * k).clamp(r0, r1);
                            p.patch.get_pixel((px - c0) as u32, (py - r0) as u32)[0]
                        })
                        .min()
                        .unwrap_or(BACKGROUND);
                    let ink = 255.0 - darkest as f64;
                    let fade = 1.0 - d as f64 / (f + 1) as f64;
                    let v = (255.0 - ink * fade).round() as u8;
                    let px = out.get_pixel_mut(x as u32, y as u32);
                    px[0] = px[0].min(v);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnhanceConfig {
    pub margin: f64,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            seed: 0,
            tolerance: DEFAULT_OVERLAP_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub label: Label,
    pub bbox_2d: QuantBBox,
    pub backend_id: String,
    pub seed: u64,
}

/// Result of stage 2. Serializes (without the raster) as the `enhanced.json` sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhancedSketch {
    #[serde(skip)]
    pub image: GrayImage,
    pub plan: RenovationPlan,
    pub patches: Vec<PatchRecord>,
    pub margin: f64,
}

impl EnhancedSketch {
    pub fn to_png(&self) -> Vec<u8> {
        encode_gray(&self.image)
    }

    pub fn sidecar_json(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(self).expect("enhanced sidecar serializes")
    }
}

/// Generate one patch per modification and merge them into `sketch`.
///
/// Modification `i` is generated with seed `cfg.seed + i`. The merged output is
/// clamped to the base outside `rasterize_mask(mod boxes, cfg.margin)`.
pub fn enhance(
    sketch: &SketchImage,
    plan: &RenovationPlan,
    components: &dyn ComponentBackend,
    compositor: &dyn CompositorBackend,
    cfg: &EnhanceConfig,
) -> Result<EnhancedSketch, SynthesisError> {
    let report = validate_plan(plan, cfg.tolerance);
    if !report.is_valid() {
        return Err(SynthesisError::InvalidPlan(report));
    }
    plan.check_quantizable()?;
    let base = sketch.raster();
    let (w, h) = base.dimensions();

    let make_patch = |(index, m): (usize, &crate::guidance::Modification)| {
        let seed = cfg.seed.wrapping_add(index as u64);
        let dims = PixelExtent::of(&m.bbox, w, h).dims();
        let patch = components
            .generate(m.label, dims, Some(base), seed)
            .map_err(|e| SynthesisError::Component {
                index,
                source: Box::new(e),
            })?;
        Ok(ComponentPatch {
            label: m.label,
            target: m.bbox,
            patch,
            provenance: Provenance {
                backend_id: components.id().to_string(),
                seed,
            },
        })
    };
    let patches: Vec<ComponentPatch> = if components.allows_concurrent() {
        plan.mods
            .par_iter()
            .enumerate()
            .map(make_patch)
            .collect::<Result<_, SynthesisError>>()?
    } else {
        plan.mods
            .iter()
            .enumerate()
            .map(make_patch)
            .collect::<Result<_, SynthesisError>>()?
    };

    let merged = compositor.merge(base, &patches, cfg.margin)?;
    if merged.dimensions() != (w, h) {
        return Err(SynthesisError::CompositorDims {
            expected: (w, h),
            got: merged.dimensions(),
        });
    }
    let mask = rasterize_mask(w, h, &plan.mod_boxes(), cfg.margin);
    let image = GrayImage::from_fn(w, h, |x, y| {
        if mask.get(x, y) {
            *merged.get_pixel(x, y)
        } else {
            *base.get_pixel(x, y)
        }
    });

    let patches = patches
        .iter()
        .map(|p| {
            Ok(PatchRecord {
                label: p.label,
                bbox_2d: p.target.quantize()?,
                backend_id: p.provenance.backend_id.clone(),
                seed: p.provenance.seed,
            })
        })
        .collect::<Result<_, GeometryError>>()?;
    Ok(EnhancedSketch {
        image,
        plan: plan.clone(),
        patches,
        margin: cfg.margin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::{DetectionSet, Modification};
    use crate::sketch::{edge_map, pixels_equal_outside, SketchMeta};
    use std::collections::HashSet;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    /// Stroke pixels of the stub window, enumerated from the drawing rules.
    fn window_strokes(w: u32, h: u32) -> HashSet<(u32, u32)> {
        let mut s = HashSet::new();
        let (cx, cy) = ((w - 2) / 2, (h - 2) / 2);
        for y in 0..h {
            for x in 0..w {
                let in_frame = (1..w - 1).contains(&x) && (1..h - 1).contains(&y);
                let border = x <= 2 || x >= w - 3 || y <= 2 || y >= h - 3;
                let mullion = x == cx || x == cx + 1 || y == cy || y == cy + 1;
                if in_frame && (border || mullion) {
                    s.insert((x, y));
                }
            }
        }
        s
    }

    #[test]
    fn window_edges_are_border_and_mullions() {
        let (w, h) = (40u32, 60u32);
        let img = stub_generate(Label::Window, (w, h)).unwrap();
        let strokes = window_strokes(w, h);
        for y in 0..h {
            for x in 0..w {
                assert_eq!(
                    img.get_pixel(x, y)[0] == 0,
                    strokes.contains(&(x, y)),
                    "({x},{y})"
                );
            }
        }
        // An edge is any pixel whose 4-neighborhood crosses the stroke boundary.
        let edges = edge_map(&img, 128);
        for y in 0..h {
            for x in 0..w {
                let me = strokes.contains(&(x, y));
                let nbrs = [
                    (x.wrapping_sub(1), y),
                    (x + 1, y),
                    (x, y.wrapping_sub(1)),
                    (x, y + 1),
                ];
                let expect = nbrs
                    .iter()
                    .filter(|(nx, ny)| *nx < w && *ny < h)
                    .any(|n| strokes.contains(n) != me);
                assert_eq!(edges.get(x, y), expect, "({x},{y})");
            }
        }
        // Mullions sit on the center lines.
        assert_eq!(img.get_pixel(19, 10)[0], 0);
        assert_eq!(img.get_pixel(20, 10)[0], 0);
        assert_eq!(img.get_pixel(10, 29)[0], 0);
        assert_eq!(img.get_pixel(10, 30)[0], 0);
        assert_eq!(img.get_pixel(10, 10)[0], 255);
    }

    #[test]
    fn door_handle_position() {
        let img = stub_generate(Label::Door, (30, 75)).unwrap();
        // mid-height row 37; 20% of 30 px in from the right edge → column 23
        for y in 36..=38 {
            for x in 22..=24 {
                assert_eq!(img.get_pixel(x, y)[0], 0);
            }
        }
        assert_eq!(img.get_pixel(23, 32)[0], 255);
        assert_eq!(img.get_pixel(23, 42)[0], 255);
        // No mullion on doors.
        assert_eq!(img.get_pixel(14, 20)[0], 255);
    }

    #[test]
    fn tiny_patches_are_rejected() {
        for label in Label::ALL {
            assert!(matches!(
                stub_generate(label, (7, 7)),
                Err(SynthesisError::PatchTooSmall { .. })
            ));
            assert!(stub_generate(label, (8, 8)).is_ok());
        }
    }

    fn white(w: u32, h: u32) -> GrayImage {
        GrayImage::from_pixel(w, h, Luma([255]))
    }

    fn patch(target: BBox, img: GrayImage) -> ComponentPatch {
        ComponentPatch {
            label: Label::Window,
            target,
            patch: img,
            provenance: Provenance {
                backend_id: "t".into(),
                seed: 0,
            },
        }
    }

    #[test]
    fn merge_identities() {
        let mut base = white(100, 100);
        stroke_rect(&mut base, 10, 10, 60, 60, 2, 0);
        assert_eq!(stub_merge(&base, &[], 0.01).unwrap(), base);
        let t = b(0.25, 0.25, 0.5, 0.5);
        let p = patch(t, white(25, 25));
        assert_eq!(stub_merge(&base, &[p], 0.01).unwrap(), base);
    }

    #[test]
    fn black_patch_fills_exactly_its_extent() {
        let base = white(100, 100);
        let t = b(0.25, 0.25, 0.5, 0.5);
        let out = stub_merge(
            &base,
            &[patch(t, GrayImage::from_pixel(25, 25, Luma([0])))],
            0.0,
        )
        .unwrap();
        for y in 0..100u32 {
            for x in 0..100u32 {
                let (cx, cy) = ((x as f64 + 0.5) / 100.0, (y as f64 + 0.5) / 100.0);
                let inside = (0.25..0.5).contains(&cx) && (0.25..0.5).contains(&cy);
                assert_eq!(out.get_pixel(x, y)[0], if inside { 0 } else { 255 });
            }
        }
    }

    #[test]
    fn merge_rejects_wrong_patch_dims() {
        let base = white(100, 100);
        let err =
            stub_merge(&base, &[patch(b(0.25, 0.25, 0.5, 0.5), white(24, 25))], 0.0).unwrap_err();
        assert!(matches!(
            err,
            SynthesisError::PatchDimMismatch {
                index: 0,
                expected: (25, 25),
                got: (24, 25)
            }
        ));
    }

    fn sketch() -> SketchImage {
        let mut img = white(200, 160);
        stroke_rect(&mut img, 20, 20, 180, 160, 2, 0);
        SketchImage::new(img, SketchMeta::new("s")).unwrap()
    }

    fn plan_with(mods: Vec<Modification>) -> RenovationPlan {
        RenovationPlan::new(DetectionSet::new("s", vec![]), mods, "")
    }

    #[test]
    fn empty_plan_is_identity() {
        let s = sketch();
        let out = enhance(
            &s,
            &plan_with(vec![]),
            &StubComponents,
            &StubCompositor,
            &EnhanceConfig::default(),
        )
        .unwrap();
        assert_eq!(&out.image, s.raster());
        assert!(out.patches.is_empty());
    }

    #[test]
    fn one_window_changes_only_its_box() {
        let s = sketch();
        let m = Modification::add(Label::Window, b(0.3, 0.4, 0.45, 0.7));
        let plan = plan_with(vec![m.clone()]);
        let cfg = EnhanceConfig {
            seed: 11,
            ..Default::default()
        };
        let out = enhance(&s, &plan, &StubComponents, &StubCompositor, &cfg).unwrap();
        let mask0 = rasterize_mask(200, 160, &[m.bbox], 0.0);
        assert!(pixels_equal_outside(s.raster(), &out.image, &mask0).unwrap());
        assert_ne!(&out.image, s.raster());
        assert_eq!(out.patches[0].seed, 11);
        assert_eq!(out.patches[0].backend_id, "stub");
        let again = enhance(&s, &plan, &StubComponents, &StubCompositor, &cfg).unwrap();
        assert_eq!(again.to_png(), out.to_png());
    }

    #[test]
    fn feather_halo_is_clamped_to_margin() {
        let s = sketch();
        let m = Modification::add(Label::Door, b(0.4, 0.5, 0.55, 0.9));
        let plan = plan_with(vec![m.clone()]);
        let cfg = EnhanceConfig {
            margin: 0.01,
            ..Default::default()
        };
        let raw = FeatherCompositor { feather_px: 8 }
            .merge(
                s.raster(),
                &[patch(
                    m.bbox,
                    stub_generate(Label::Door, PixelExtent::of(&m.bbox, 200, 160).dims()).unwrap(),
                )],
                0.01,
            )
            .unwrap();
        let mask = rasterize_mask(200, 160, &[m.bbox], 0.01);
        assert!(
            !pixels_equal_outside(s.raster(), &raw, &mask).unwrap(),
            "halo should leak before clamping"
        );
        let out = enhance(
            &s,
            &plan,
            &StubComponents,
            &FeatherCompositor { feather_px: 8 },
            &cfg,
        )
        .unwrap();
        assert!(pixels_equal_outside(s.raster(), &out.image, &mask).unwrap());
    }

    #[test]
    fn invalid_plan_is_refused() {
        let m = Modification::add(Label::Window, b(0.3, 0.4, 0.45, 0.7));
        let err = enhance(
            &sketch(),
            &plan_with(vec![m.clone(), m]),
            &StubComponents,
            &StubCompositor,
            &EnhanceConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, SynthesisError::InvalidPlan(_)));
    }

    #[test]
    fn backend_errors_carry_mod_index() {
        let ok = Modification::add(Label::Window, b(0.3, 0.4, 0.45, 0.7));
        let tiny = Modification::add(Label::Window, b(0.6, 0.4, 0.62, 0.42));
        let err = enhance(
            &sketch(),
            &plan_with(vec![ok, tiny]),
            &StubComponents,
            &StubCompositor,
            &EnhanceConfig::default(),
        )
        .unwrap_err();
        assert!(
            matches!(err, SynthesisError::Component { index: 1, .. }),
            "{err}"
        );
    }

    #[test]
    fn adding_a_mod_only_touches_its_region() {
        let s = sketch();
        let a = Modification::add(Label::Window, b(0.2, 0.3, 0.35, 0.6));
        let c = Modification::add(Label::Door, b(0.6, 0.5, 0.75, 1.0));
        let cfg = EnhanceConfig::default();
        let one = enhance(
            &s,
            &plan_with(vec![a.clone()]),
            &StubComponents,
            &StubCompositor,
            &cfg,
        )
        .unwrap();
        let two = enhance(
            &s,
            &plan_with(vec![a, c.clone()]),
            &StubComponents,
            &StubCompositor,
            &cfg,
        )
        .unwrap();
        let mask = rasterize_mask(200, 160, &[c.bbox], cfg.margin);
        assert!(pixels_equal_outside(&one.image, &two.image, &mask).unwrap());
    }

    #[test]
    fn sidecar_shape() {
        let s = sketch();
        let plan = plan_with(vec![Modification::add(
            Label::Window,
            b(0.3, 0.4, 0.45, 0.7),
        )]);
        let out = enhance(
            &s,
            &plan,
            &StubComponents,
            &StubCompositor,
            &EnhanceConfig {
                seed: 3,
                ..Default::default()
            },
        )
        .unwrap();
        let v: serde_json::Value = serde_json::from_slice(&out.sidecar_json()).unwrap();
        assert_eq!(v["margin"], 0.01);
        assert_eq!(
            v["patches"][0],
            serde_json::json!({"label":"window","bbox_2d":[300,400,450,700],"backend_id":"stub","seed":3})
        );
        assert_eq!(v["plan"]["mods"][0]["action"], "ADD");
    }
}
