//! Sketch-based facade renovation in three stages: guidance (detect existing
//! windows and doors, propose additions as boxes), synthesis (draw the new
//! components into the sketch without touching anything else) and rendering
//! (structure-conditioned image generation scored by edge fidelity).
//!
//! Every generative step sits behind a backend trait with a deterministic stub,
//! so the whole pipeline runs without models.

pub mod dataset;
pub mod fixtures;
pub mod geometry;
pub mod guidance;
pub mod rendering;
pub mod sketch;
pub mod synthesis;

pub use geometry::{BBox, GeometryError, QuantBBox};
pub use guidance::{Detection, DetectionSet, Label, Modification, RenovationPlan};
pub use sketch::{RegionMask, SketchImage, SketchMeta};
