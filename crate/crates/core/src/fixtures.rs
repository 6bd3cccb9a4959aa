//! Seeded synthetic facade sketches and corpora for demos and tests.
//!
//! A fixture facade is two walls open at the bottom under a flat or pitched
//! roof, with closed 2px rectangles for windows and optionally a door standing
//! on the bottom edge. Ground-truth detections are returned alongside.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use imageproc::drawing::draw_line_segment_mut;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{write_pair, ComponentManifest, DatasetError, ManifestEntry, MANIFEST_FILE};
use crate::geometry::BBox;
use crate::guidance::{Detection, DetectionSet, Label};
use crate::sketch::{
    fill_rect, stroke_rect, RoofType, SketchImage, SketchMeta, BACKGROUND, STROKE,
};
use crate::synthesis::stub_generate;

pub const DEFAULT_WIDTH: u32 = 512;
pub const DEFAULT_HEIGHT: u32 = 384;
const STROKE_PX: u32 = 2;
/// Minimum clear space between drawn components.
const CLEARANCE_PX: u32 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Rect {
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
}

impl Rect {
    fn grown(&self, by: u32) -> Rect {
        Rect {
            x0: self.x0.saturating_sub(by),
            y0: self.y0.saturating_sub(by),
            x1: self.x1 + by,
            y1: self.y1 + by,
        }
    }
    fn overlaps(&self, o: &Rect) -> bool {
        self.x0 < o.x1 && o.x0 < self.x1 && self.y0 < o.y1 && o.y0 < self.y1
    }
}

/// A drawn facade with its ground truth.
#[derive(Debug, Clone)]
pub struct FacadeFixture {
    pub sketch: SketchImage,
    pub detections: DetectionSet,
}

#[derive(Debug, Clone)]
struct Canvas {
    img: GrayImage,
    meta: SketchMeta,
    /// Usable wall area: x in [left, right), y in [eave, height).
    left: u32,
    right: u32,
    eave: u32,
    parts: Vec<(Label, Rect)>,
}

impl Canvas {
    fn new(rng: &mut ChaCha8Rng, source_id: &str, width: u32, height: u32) -> Self {
        let mut img = GrayImage::from_pixel(width, height, Luma([BACKGROUND]));
        let xl = (width as f64 * 0.05).round() as u32;
        let xr = width - 1 - xl;
        let pitched = rng.random_bool(0.5);
        let eave = (height as f64 * if pitched { 0.28 } else { 0.18 }).round() as u32;
        fill_rect(&mut img, xl, eave, xl + STROKE_PX, height, STROKE);
        fill_rect(&mut img, xr + 1 - STROKE_PX, eave, xr + 1, height, STROKE);
        if pitched {
            let ridge = (height as f64 * 0.06).round() as f32;
            let mid = width as f32 / 2.0;
            for d in 0..STROKE_PX as i32 {
                let e = eave as f32 + d as f32;
                draw_line_segment_mut(
                    &mut img,
                    (xl as f32, e),
                    (mid, ridge + d as f32),
                    Luma([STROKE]),
                );
                draw_line_segment_mut(
                    &mut img,
                    (mid, ridge + d as f32),
                    (xr as f32, e),
                    Luma([STROKE]),
                );
            }
        } else {
            fill_rect(&mut img, xl, eave, xr + 1, eave + STROKE_PX, STROKE);
        }
        let meta = SketchMeta {
            source_id: source_id.to_string(),
            width_m: Some(rng.random_range(10.0..=20.0f64).round()),
            height_m: Some(rng.random_range(5.0..=10.0f64).round()),
            roof_type: Some(if pitched {
                RoofType::Pitched
            } else {
                RoofType::Flat
            }),
        };
        Self {
            img,
            meta,
            left: xl + STROKE_PX + CLEARANCE_PX,
            right: xr + 1 - STROKE_PX - CLEARANCE_PX,
            eave: eave + STROKE_PX + CLEARANCE_PX,
            parts: Vec::new(),
        }
    }

    fn is_free(&self, r: &Rect) -> bool {
        self.parts
            .iter()
            .all(|(_, p)| !p.grown(CLEARANCE_PX).overlaps(r))
    }

    fn place(&mut self, label: Label, r: Rect) {
        stroke_rect(&mut self.img, r.x0, r.y0, r.x1, r.y1, STROKE_PX, STROKE);
        self.parts.push((label, r));
    }

    fn try_window(&mut self, rng: &mut ChaCha8Rng) -> bool {
        let (w, h) = self.img.dimensions();
        let max_bottom = (h as f64 * 0.8) as u32;
        for _ in 0..60 {
            let ww = rng
                .random_range((w as f64 * 0.05) as u32..=(w as f64 * 0.09) as u32)
                .max(12);
            let wh = ((ww as f64) * rng.random_range(1.0..1.6)).round() as u32;
            if self.left + ww >= self.right || self.eave + wh >= max_bottom {
                return false;
            }
            let x0 = rng.random_range(self.left..self.right - ww);
            let y0 = rng.random_range(self.eave..max_bottom - wh);
            let r = Rect {
                x0,
                y0,
                x1: x0 + ww,
                y1: y0 + wh,
            };
            if self.is_free(&r) {
                self.place(Label::Window, r);
                return true;
            }
        }
        false
    }

    fn try_door(&mut self, rng: &mut ChaCha8Rng) -> bool {
        let (w, h) = self.img.dimensions();
        for _ in 0..60 {
            let dw = rng
                .random_range((w as f64 * 0.07) as u32..=(w as f64 * 0.10) as u32)
                .max(12);
            let dh = (rng.random_range(0.20..0.28) * h as f64)
                .round()
                .max(dw as f64 * 1.6) as u32;
            if self.left + dw >= self.right || dh >= h - self.eave {
                return false;
            }
            let x0 = rng.random_range(self.left..self.right - dw);
            let r = Rect {
                x0,
                y0: h - dh,
                x1: x0 + dw,
                y1: h,
            };
            if self.is_free(&r) {
                self.place(Label::Door, r);
                return true;
            }
        }
        false
    }

    fn fixture(&self) -> FacadeFixture {
        let (w, h) = self.img.dimensions();
        let mut parts = self.parts.clone();
        parts.sort_by_key(|(_, r)| (r.y0, r.x0));
        let items = parts
            .iter()
            .map(|(label, r)| {
                let bbox = BBox::new(
                    r.x0 as f64 / w as f64,
                    r.y0 as f64 / h as f64,
                    r.x1 as f64 / w as f64,
                    r.y1 as f64 / h as f64,
                )
                .expect("fixture rectangles lie on the canvas");
                Detection::new(*label, bbox)
            })
            .collect();
        FacadeFixture {
            sketch: SketchImage::new(self.img.clone(), self.meta.clone())
                .expect("fixture is a valid sketch"),
            detections: DetectionSet::new(self.meta.source_id.clone(), items),
        }
    }
}

fn base_canvas(rng: &mut ChaCha8Rng, source_id: &str, width: u32, height: u32) -> Canvas {
    let mut c = Canvas::new(rng, source_id, width, height);
    for _ in 0..rng.random_range(0..=5) {
        c.try_window(rng);
    }
    if rng.random_bool(0.5) {
        c.try_door(rng);
    }
    c
}

/// One synthetic facade.
pub fn synth_facade(seed: u64, width: u32, height: u32) -> FacadeFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    base_canvas(&mut rng, &format!("facade_{seed:04}"), width, height).fixture()
}

/// A before/after pair: the after sketch adds one to three windows, and a door
/// when the before has none (half the time).
#[derive(Debug, Clone)]
pub struct PairFixture {
    pub pair_id: String,
    pub before: FacadeFixture,
    pub after: FacadeFixture,
}

pub fn synth_pair(seed: u64, width: u32, height: u32) -> PairFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0000);
    let pair_id = format!("pair_{seed:04}");
    let mut canvas = base_canvas(&mut rng, &pair_id, width, height);
    let before = canvas.fixture();
    let mut added = 0;
    for _ in 0..rng.random_range(1..=3) {
        added += canvas.try_window(&mut rng) as usize;
    }
    let has_door = canvas.parts.iter().any(|(l, _)| *l == Label::Door);
    if (!has_door && rng.random_bool(0.5)) || added == 0 {
        canvas.try_door(&mut rng);
    }
    PairFixture {
        pair_id,
        before,
        after: canvas.fixture(),
    }
}

/// Write `count` pairs in the dataset layout under `dir`.
pub fn write_pair_corpus(dir: &Path, count: usize, seed: u64) -> Result<Vec<String>, DatasetError> {
    (0..count)
        .map(|i| {
            let p = synth_pair(seed + i as u64, DEFAULT_WIDTH, DEFAULT_HEIGHT);
            write_pair(
                dir,
                &p.pair_id,
                &p.before.sketch.to_png(),
                &p.before.detections,
                &p.after.sketch.to_png(),
                &p.after.detections,
                p.before.sketch.meta(),
            )?;
            Ok(p.pair_id)
        })
        .collect()
}

/// Write `count` standalone sketches (`<id>.png` plus `<id>.json` metadata).
pub fn write_sketch_corpus(dir: &Path, count: usize, seed: u64) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    (0..count)
        .map(|i| {
            let f = synth_facade(seed + i as u64, DEFAULT_WIDTH, DEFAULT_HEIGHT);
            let stem = f.sketch.meta().source_id.clone();
            let png = dir.join(format!("{stem}.png"));
            fs::write(&png, f.sketch.to_png())?;
            fs::write(
                dir.join(format!("{stem}.json")),
                serde_json::to_vec_pretty(f.sketch.meta()).expect("meta serializes"),
            )?;
            Ok(png)
        })
        .collect()
}

/// Write a component corpus of procedurally drawn doors and windows plus its manifest.
pub fn write_component_corpus(
    dir: &Path,
    doors: usize,
    windows: usize,
    seed: u64,
) -> Result<ComponentManifest, DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(doors + windows);
    let jobs =
        std::iter::repeat_n(Label::Door, doors).chain(std::iter::repeat_n(Label::Window, windows));
    for (i, label) in jobs.enumerate() {
        let dims = match label {
            Label::Door => (rng.random_range(24..=48), rng.random_range(56..=110)),
            Label::Window => (rng.random_range(24..=64), rng.random_range(24..=90)),
        };
        let img = stub_generate(label, dims).expect("fixture dims exceed the minimum");
        let component_id = format!("{}_{i:04}", label.as_str());
        let rel = PathBuf::from(label.as_str()).join(format!("{component_id}.png"));
        let path = dir.join(&rel);
        fs::create_dir_all(path.parent().expect("component path has a parent")).map_err(
            |source| DatasetError::Io {
                path: path.clone(),
                source,
            },
        )?;
        img.save(&path).map_err(|source| DatasetError::Image {
            path: path.clone(),
            source,
        })?;
        entries.push(ManifestEntry {
            component_id,
            label: label.as_str().to_string(),
            path: rel,
            dims: [dims.0, dims.1],
        });
    }
    let manifest = ComponentManifest { entries };
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(
        &mpath,
        serde_json::to_vec_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|source| DatasetError::Io {
        path: mpath,
        source,
    })?;
    Ok(manifest)
}
