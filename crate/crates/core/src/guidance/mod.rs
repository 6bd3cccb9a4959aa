//! Stage 1: detect existing components and propose a renovation plan.
//!
//! The backend contract is two text calls mirroring the two conversation
//! turns. Everything the pipeline consumes goes through [`parse_grounding`],
//! so a real model and the rule-based stub are interchangeable.

mod grounding;
mod stub;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, GeometryError, QuantBBox};
use crate::sketch::SketchImage;

pub use grounding::{
    parse_grounding, serialize_grounding, serialize_modifications, GroundedEntry, GroundingParse,
    RejectedEntry,
};
pub use stub::{stub_detect, stub_propose, ProposeParams, StubGuidance};

/// Turn-one instruction, fixed verbatim for both training export and inference.
pub const DETECT_INSTRUCTION: &str = "Detect all windows and doors in the image";
/// Turn-two instruction.
pub const PROPOSE_INSTRUCTION: &str = "Update the layout based on the detected boxes";
/// Maximum IoU tolerated between two plan boxes.
pub const DEFAULT_OVERLAP_TOLERANCE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("no well-formed grounding array found: {0}")]
    ParseFailure(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("guidance backend failed: {0}")]
    Backend(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Window,
    Door,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Window, Label::Door];

    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Window => "window",
            Label::Door => "door",
        }
    }

    /// Case-insensitive lookup; `None` for labels outside the fixed set.
    pub fn parse(s: &str) -> Option<Label> {
        match s.trim().to_ascii_lowercase().as_str() {
            "window" => Some(Label::Window),
            "door" => Some(Label::Door),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Plan action. Only additions exist today; the enum leaves room for more.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    #[serde(rename = "ADD")]
    Add,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub label: Label,
    pub bbox: BBox,
    pub confidence: Option<f64>,
}

impl Detection {
    pub fn new(label: Label, bbox: BBox) -> Self {
        Self {
            label,
            bbox,
            confidence: None,
        }
    }
}

/// `{"label", "bbox_2d"}`: the one wire and file shape of a labeled box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledBox {
    pub label: Label,
    pub bbox_2d: QuantBBox,
}

impl LabeledBox {
    pub fn from_detection(d: &Detection) -> Result<Self, GeometryError> {
        Ok(Self {
            label: d.label,
            bbox_2d: d.bbox.quantize()?,
        })
    }

    pub fn to_detection(self) -> Detection {
        Detection::new(self.label, self.bbox_2d.dequantize())
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(from = "DetectionSetWire")]
pub struct DetectionSet {
    pub sketch_id: String,
    pub items: Vec<Detection>,
}

impl DetectionSet {
    pub fn new(sketch_id: impl Into<String>, items: Vec<Detection>) -> Self {
        Self {
            sketch_id: sketch_id.into(),
            items,
        }
    }

    pub fn has_label(&self, label: Label) -> bool {
        self.items.iter().any(|d| d.label == label)
    }

    /// Round every box through the quantized form.
    pub fn quantized(&self) -> Result<DetectionSet, GeometryError> {
        let items = self
            .items
            .iter()
            .map(|d| {
                Ok(Detection {
                    bbox: d.bbox.quantize()?.dequantize(),
                    ..d.clone()
                })
            })
            .collect::<Result<_, GeometryError>>()?;
        Ok(DetectionSet::new(self.sketch_id.clone(), items))
    }
}

#[derive(Serialize, Deserialize)]
struct DetectionSetWire {
    sketch_id: String,
    items: Vec<LabeledBox>,
}

impl TryFrom<&DetectionSet> for DetectionSetWire {
    type Error = GeometryError;
    fn try_from(s: &DetectionSet) -> Result<Self, Self::Error> {
        Ok(Self {
            sketch_id: s.sketch_id.clone(),
            items: s
                .items
                .iter()
                .map(LabeledBox::from_detection)
                .collect::<Result<_, _>>()?,
        })
    }
}

impl From<DetectionSetWire> for DetectionSet {
    fn from(w: DetectionSetWire) -> Self {
        DetectionSet::new(
            w.sketch_id,
            w.items.into_iter().map(LabeledBox::to_detection).collect(),
        )
    }
}

impl Serialize for DetectionSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        DetectionSetWire::try_from(self)
            .map_err(serde::ser::Error::custom)?
            .serialize(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Modification {
    pub action: Action,
    pub label: Label,
    pub bbox: BBox,
    pub rationale: Option<String>,
}

impl Modification {
    pub fn add(label: Label, bbox: BBox) -> Self {
        Self {
            action: Action::Add,
            label,
            bbox,
            rationale: None,
        }
    }

    pub fn with_rationale(mut self, r: impl Into<String>) -> Self {
        self.rationale = Some(r.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModificationWire {
    action: Action,
    label: Label,
    bbox_2d: QuantBBox,
    rationale: Option<String>,
}

/// Typed renovation plan: the detected basis plus the additions to make.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(from = "PlanWire")]
pub struct RenovationPlan {
    pub sketch_id: String,
    pub basis: DetectionSet,
    pub mods: Vec<Modification>,
    pub brief: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanWire {
    sketch_id: String,
    basis: Vec<LabeledBox>,
    mods: Vec<ModificationWire>,
    brief: String,
}

impl TryFrom<&RenovationPlan> for PlanWire {
    type Error = GeometryError;
    fn try_from(p: &RenovationPlan) -> Result<Self, Self::Error> {
        Ok(Self {
            sketch_id: p.sketch_id.clone(),
            basis: p
                .basis
                .items
                .iter()
                .map(LabeledBox::from_detection)
                .collect::<Result<_, _>>()?,
            mods: p
                .mods
                .iter()
                .map(|m| {
                    Ok(ModificationWire {
                        action: m.action,
                        label: m.label,
                        bbox_2d: m.bbox.quantize()?,
                        rationale: m.rationale.clone(),
                    })
                })
                .collect::<Result<_, GeometryError>>()?,
            brief: p.brief.clone(),
        })
    }
}

impl From<PlanWire> for RenovationPlan {
    fn from(w: PlanWire) -> Self {
        Self {
            basis: DetectionSet::new(
                w.sketch_id.clone(),
                w.basis.into_iter().map(LabeledBox::to_detection).collect(),
            ),
            sketch_id: w.sketch_id,
            mods: w
                .mods
                .into_iter()
                .map(|m| Modification {
                    action: m.action,
                    label: m.label,
                    bbox: m.bbox_2d.dequantize(),
                    rationale: m.rationale,
                })
                .collect(),
            brief: w.brief,
        }
    }
}

impl Serialize for RenovationPlan {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PlanWire::try_from(self)
            .map_err(serde::ser::Error::custom)?
            .serialize(s)
    }
}

impl RenovationPlan {
    pub fn new(basis: DetectionSet, mods: Vec<Modification>, brief: impl Into<String>) -> Self {
        Self {
            sketch_id: basis.sketch_id.clone(),
            basis,
            mods,
            brief: brief.into(),
        }
    }

    pub fn mod_boxes(&self) -> Vec<BBox> {
        self.mods.iter().map(|m| m.bbox).collect()
    }

    /// Check that every box survives quantization, so the wire form is lossless
    /// up to rounding.
    pub fn check_quantizable(&self) -> Result<(), GeometryError> {
        for d in &self.basis.items {
            d.bbox.quantize()?;
        }
        for m in &self.mods {
            m.bbox.quantize()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlanViolation {
    /// Two modifications overlap more than the tolerance.
    ModOverlap {
        first: usize,
        second: usize,
        iou: f64,
    },
    /// A modification overlaps an existing component.
    BasisOverlap {
        modification: usize,
        basis: usize,
        iou: f64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub tolerance: f64,
    pub violations: Vec<PlanViolation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_valid() {
            return write!(f, "plan valid at tolerance {}", self.tolerance);
        }
        write!(
            f,
            "{} violation(s) at tolerance {}:",
            self.violations.len(),
            self.tolerance
        )?;
        for v in &self.violations {
            match v {
                PlanViolation::ModOverlap { first, second, iou } => {
                    write!(f, " mod {first} overlaps mod {second} (iou {iou:.3});")?
                }
                PlanViolation::BasisOverlap {
                    modification,
                    basis,
                    iou,
                } => write!(
                    f,
                    " mod {modification} overlaps existing {basis} (iou {iou:.3});"
                )?,
            }
        }
        Ok(())
    }
}

/// Report every pairwise overlap above `tolerance` among mods and between mods and basis.
pub fn validate_plan(plan: &RenovationPlan, tolerance: f64) -> ValidationReport {
    let mut violations = Vec::new();
    for (i, a) in plan.mods.iter().enumerate() {
        for (j, b) in plan.mods.iter().enumerate().skip(i + 1) {
            let iou = a.bbox.iou(&b.bbox);
            if iou > tolerance {
                violations.push(PlanViolation::ModOverlap {
                    first: i,
                    second: j,
                    iou,
                });
            }
        }
    }
    for (i, m) in plan.mods.iter().enumerate() {
        for (j, d) in plan.basis.items.iter().enumerate() {
            let iou = m.bbox.iou(&d.bbox);
            if iou > tolerance {
                violations.push(PlanViolation::BasisOverlap {
                    modification: i,
                    basis: j,
                    iou,
                });
            }
        }
    }
    ValidationReport {
        tolerance,
        violations,
    }
}

/// Pluggable vision-language backend; text in, text out, one call per turn.
pub trait GuidanceBackend: Send + Sync {
    fn id(&self) -> &str;

    /// Turn one: describe existing windows and doors as grounding text.
    fn detect(&self, sketch: &SketchImage) -> Result<String, GuidanceError>;

    /// Turn two: given the turn-one text and the user's brief, propose additions.
    fn propose(
        &self,
        sketch: &SketchImage,
        detection_text: &str,
        brief: &str,
    ) -> Result<String, GuidanceError>;

    /// Whether one instance may serve several runs at once.
    fn is_stateless(&self) -> bool {
        false
    }
}

/// Outcome of running the detect turn through a backend.
#[derive(Debug, Clone)]
pub struct DetectOutcome {
    pub detections: DetectionSet,
    pub raw: String,
    pub unknown_labels: Vec<String>,
    pub rejected: Vec<RejectedEntry>,
}

pub fn run_detect(
    backend: &dyn GuidanceBackend,
    sketch: &SketchImage,
    sketch_id: &str,
) -> Result<DetectOutcome, GuidanceError> {
    let raw = backend.detect(sketch)?;
    let parsed = parse_grounding(&raw)?;
    Ok(DetectOutcome {
        detections: DetectionSet::new(sketch_id, parsed.detections()),
        raw,
        unknown_labels: parsed.unknown_labels,
        rejected: parsed.rejected,
    })
}

/// Outcome of the propose turn.
#[derive(Debug, Clone)]
pub struct ProposeOutcome {
    pub plan: RenovationPlan,
    pub raw: String,
    pub unknown_labels: Vec<String>,
    pub rejected: Vec<RejectedEntry>,
}

pub fn run_propose(
    backend: &dyn GuidanceBackend,
    sketch: &SketchImage,
    basis: &DetectionSet,
    brief: &str,
) -> Result<ProposeOutcome, GuidanceError> {
    let detection_text = serialize_grounding(&basis.items)?;
    let raw = backend.propose(sketch, &detection_text, brief)?;
    let parsed = parse_grounding(&raw)?;
    let mods = parsed
        .entries
        .iter()
        .map(|e| Modification {
            action: Action::Add,
            label: e.detection.label,
            bbox: e.detection.bbox,
            rationale: e.rationale.clone(),
        })
        .collect();
    Ok(ProposeOutcome {
        plan: RenovationPlan::new(basis.clone(), mods, brief),
        raw,
        unknown_labels: parsed.unknown_labels,
        rejected: parsed.rejected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    /// Pixel-count IoU oracle on a 1000×1000 grid.
    fn raster_iou(a: &BBox, c: &BBox) -> f64 {
        let n = 1000;
        let span = |lo: f64, hi: f64| {
            (0..n)
                .filter(|i| {
                    let c = (*i as f64 + 0.5) / n as f64;
                    lo <= c && c < hi
                })
                .collect::<Vec<_>>()
        };
        let (ax, ay, cx, cy) = (
            span(a.x0(), a.x1()),
            span(a.y0(), a.y1()),
            span(c.x0(), c.x1()),
            span(c.y0(), c.y1()),
        );
        let ix = ax.iter().filter(|i| cx.contains(i)).count();
        let iy = ay.iter().filter(|i| cy.contains(i)).count();
        let inter = (ix * iy) as f64;
        inter / ((ax.len() * ay.len() + cx.len() * cy.len()) as f64 - inter)
    }

    fn plan(basis: Vec<Detection>, mods: Vec<Modification>) -> RenovationPlan {
        RenovationPlan::new(DetectionSet::new("s", basis), mods, "")
    }

    #[test]
    fn empty_plan_is_valid() {
        assert!(validate_plan(&plan(vec![], vec![]), 0.05).is_valid());
    }

    #[test]
    fn identical_mods_violate_once() {
        let w = b(0.1, 0.1, 0.2, 0.3);
        let p = plan(
            vec![],
            vec![
                Modification::add(Label::Window, w),
                Modification::add(Label::Window, w),
            ],
        );
        let r = validate_plan(&p, 0.05);
        assert_eq!(
            r.violations,
            vec![PlanViolation::ModOverlap {
                first: 0,
                second: 1,
                iou: 1.0
            }]
        );
    }

    #[test]
    fn small_basis_overlap_within_tolerance() {
        // Door 0.1 × 0.3; window of the same size shifted right by 0.094 →
        // overlap strip 0.006 wide → iou = 0.006 / (0.2 - 0.006) ≈ 0.0309.
        let door = b(0.40, 0.70, 0.50, 1.00);
        let window = b(0.494, 0.70, 0.594, 1.00);
        let oracle = raster_iou(&door, &window);
        assert!((oracle - 0.030_927_835).abs() < 1e-6, "oracle {oracle}");
        assert!((door.iou(&window) - oracle).abs() < 1e-9);
        let p = plan(
            vec![Detection::new(Label::Door, door)],
            vec![Modification::add(Label::Window, window)],
        );
        assert!(validate_plan(&p, 0.05).is_valid());
        assert!(!validate_plan(&p, 0.02).is_valid());
    }

    #[test]
    fn plan_wire_shape() {
        let p = RenovationPlan::new(
            DetectionSet::new(
                "s1",
                vec![Detection::new(Label::Door, b(0.45, 0.7, 0.55, 1.0))],
            ),
            vec![Modification::add(Label::Window, b(0.1, 0.4, 0.2, 0.55)).with_rationale("light")],
            "more light",
        );
        let v = serde_json::to_value(&p).unwrap();
        assert_eq!(
            v,
            serde_json::json!({
                "sketch_id": "s1",
                "basis": [{"label": "door", "bbox_2d": [450, 700, 550, 1000]}],
                "mods": [{"action": "ADD", "label": "window", "bbox_2d": [100, 400, 200, 550], "rationale": "light"}],
                "brief": "more light"
            })
        );
        let back: RenovationPlan = serde_json::from_value(v).unwrap();
        assert_eq!(back.mods[0].bbox.to_array(), [0.1, 0.4, 0.2, 0.55]);
        assert_eq!(back.basis.sketch_id, "s1");
    }

    #[test]
    fn labels_are_a_closed_set() {
        assert_eq!(Label::parse("Door"), Some(Label::Door));
        assert_eq!(Label::parse("chimney"), None);
        assert!(serde_json::from_str::<Label>("\"chimney\"").is_err());
    }

    #[test]
    fn instructions_are_verbatim() {
        assert_eq!(
            DETECT_INSTRUCTION,
            "Detect all windows and doors in the image"
        );
        assert_eq!(
            PROPOSE_INSTRUCTION,
            "Update the layout based on the detected boxes"
        );
    }
}
