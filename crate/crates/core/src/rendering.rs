//! Stage 3: render the enhanced sketch and score how well the render keeps
//! its structure.

use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sketch::{edge_map, DEFAULT_EDGE_THRESHOLD};
use crate::synthesis::EnhancedSketch;

pub const PROMPT_PREFIX: &str = "photorealistic industrial building facade, ";
pub const QUALITY_SUFFIX: &str =
    ", high detail, natural daylight, sharp focus, architectural photography";
pub const NEGATIVE_PROMPT: &str = "cartoon, blurry, extra structures";
/// Flag threshold for real backends.
pub const DEFAULT_MIN_FIDELITY: f64 = 0.5;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("dimension mismatch: sketch {sketch:?}, render {render:?}")]
    DimensionMismatch {
        sketch: (u32, u32),
        render: (u32, u32),
    },
    #[error("invalid render spec: {0}")]
    InvalidSpec(String),
    #[error("render backend {backend} failed for seed {}: {message}", spec.seed)]
    Backend {
        backend: String,
        spec: Box<RenderSpec>,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderSpec {
    pub prompt: String,
    pub negative_prompt: String,
    pub seed: u64,
    pub conditioning_scale: f64,
    pub steps: u32,
}

impl RenderSpec {
    /// Assemble the fixed prompt around the user's brief.
    pub fn for_brief(brief: &str, seed: u64) -> Self {
        Self {
            prompt: format!("{PROMPT_PREFIX}{}{QUALITY_SUFFIX}", brief.trim()),
            negative_prompt: NEGATIVE_PROMPT.to_string(),
            seed,
            conditioning_scale: 1.0,
            steps: 30,
        }
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if self.steps < 1 {
            return Err(RenderError::InvalidSpec("steps must be >= 1".into()));
        }
        if !(0.0..=2.0).contains(&self.conditioning_scale) {
            return Err(RenderError::InvalidSpec(format!(
                "conditioning_scale {} outside [0, 2]",
                self.conditioning_scale
            )));
        }
        Ok(())
    }
}

/// Structure-conditioned image generator.
pub trait RenderBackend: Send + Sync {
    fn id(&self) -> &str;

    /// Must be deterministic in `(sketch, spec)`.
    fn render(&self, sketch: &GrayImage, spec: &RenderSpec) -> Result<RgbImage, String>;

    fn allows_concurrent(&self) -> bool {
        false
    }
}

/// Grayscale passthrough with a warm tint: `(v, v + 8, v + 16)`, saturating.
pub fn stub_render(sketch: &GrayImage, _spec: &RenderSpec) -> RgbImage {
    RgbImage::from_fn(sketch.width(), sketch.height(), |x, y| {
        let v = sketch.get_pixel(x, y)[0];
        Rgb([v, v.saturating_add(8), v.saturating_add(16)])
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StubRenderer;

impl RenderBackend for StubRenderer {
    fn id(&self) -> &str {
        "stub"
    }

    fn render(&self, sketch: &GrayImage, spec: &RenderSpec) -> Result<RgbImage, String> {
        Ok(stub_render(sketch, spec))
    }

    fn allows_concurrent(&self) -> bool {
        true
    }
}

/// Which single channel of the render is compared against the sketch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeChannel {
    /// `round(0.299 R + 0.587 G + 0.114 B)`
    #[default]
    Luminance,
    Red,
}

pub fn luminance(img: &RgbImage) -> GrayImage {
    GrayImage::from_fn(img.width(), img.height(), |x, y| {
        let Rgb([r, g, b]) = *img.get_pixel(x, y);
        let l = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
        Luma([l.round().clamp(0.0, 255.0) as u8])
    })
}

pub fn red_channel(img: &RgbImage) -> GrayImage {
    GrayImage::from_fn(img.width(), img.height(), |x, y| {
        Luma([img.get_pixel(x, y)[0]])
    })
}

/// Edge-set IoU between sketch and render; 1.0 when both have no edges.
pub fn structure_fidelity(
    sketch: &GrayImage,
    rendered: &RgbImage,
    threshold: u8,
) -> Result<f64, RenderError> {
    structure_fidelity_on(sketch, rendered, threshold, EdgeChannel::Luminance)
}

pub fn structure_fidelity_on(
    sketch: &GrayImage,
    rendered: &RgbImage,
    threshold: u8,
    channel: EdgeChannel,
) -> Result<f64, RenderError> {
    if sketch.dimensions() != rendered.dimensions() {
        return Err(RenderError::DimensionMismatch {
            sketch: sketch.dimensions(),
            render: rendered.dimensions(),
        });
    }
    let gray = match channel {
        EdgeChannel::Luminance => luminance(rendered),
        EdgeChannel::Red => red_channel(rendered),
    };
    let a = edge_map(sketch, threshold);
    let b = edge_map(&gray, threshold);
    let union = a.union_count(&b);
    if union == 0 {
        return Ok(1.0);
    }
    Ok(a.intersection_count(&b) as f64 / union as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedResult {
    #[serde(skip)]
    pub image: RgbImage,
    pub spec: RenderSpec,
    pub fidelity: f64,
    /// Fidelity fell below the configured minimum. Flagged results are kept.
    pub flagged: bool,
}

impl RenderedResult {
    pub fn to_png(&self) -> Vec<u8> {
        crate::sketch::encode_rgb(&self.image)
    }

    /// `render.json`: `{spec, fidelity, flagged}`.
    pub fn sidecar_json(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(self).expect("render sidecar serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderStageConfig {
    pub min_fidelity: f64,
    pub edge_threshold: u8,
}

impl Default for RenderStageConfig {
    fn default() -> Self {
        Self {
            min_fidelity: DEFAULT_MIN_FIDELITY,
            edge_threshold: DEFAULT_EDGE_THRESHOLD,
        }
    }
}

pub fn render_stage(
    enhanced: &EnhancedSketch,
    backend: &dyn RenderBackend,
    spec: &RenderSpec,
    cfg: &RenderStageConfig,
) -> Result<RenderedResult, RenderError> {
    spec.validate()?;
    let image = backend
        .render(&enhanced.image, spec)
        .map_err(|message| RenderError::Backend {
            backend: backend.id().to_string(),
            spec: Box::new(spec.clone()),
            message,
        })?;
    let fidelity = structure_fidelity(&enhanced.image, &image, cfg.edge_threshold)?;
    Ok(RenderedResult {
        image,
        spec: spec.clone(),
        fidelity,
        flagged: fidelity < cfg.min_fidelity,
    })
}
