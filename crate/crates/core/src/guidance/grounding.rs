//! Grounding text: a JSON array of `{"label", "bbox_2d"}` objects, possibly
//! wrapped in prose or code fences by a chatty model.

use serde::Serialize;
use serde_json::{Map, Value};

use super::{Detection, GuidanceError, Label, LabeledBox, Modification};
use crate::geometry::{GeometryError, QuantBBox};

/// An accepted entry; `rationale` is only present when the model supplied one.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundedEntry {
    pub detection: Detection,
    pub rationale: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectedEntry {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundingParse {
    pub entries: Vec<GroundedEntry>,
    /// Labels outside `{window, door}`, in order of appearance.
    pub unknown_labels: Vec<String>,
    /// Entries skipped for malformed or degenerate boxes.
    pub rejected: Vec<RejectedEntry>,
}

impl GroundingParse {
    pub fn detections(&self) -> Vec<Detection> {
        self.entries.iter().map(|e| e.detection.clone()).collect()
    }
}

/// Serialize detections to compact grounding JSON with quantized boxes.
pub fn serialize_grounding(items: &[Detection]) -> Result<String, GeometryError> {
    let boxes = items
        .iter()
        .map(LabeledBox::from_detection)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(serde_json::to_string(&boxes).expect("labeled boxes always serialize"))
}

#[derive(Serialize)]
struct ModEntry<'a> {
    label: Label,
    bbox_2d: QuantBBox,
    #[serde(skip_serializing_if = "Option::is_none")]
    rationale: Option<&'a str>,
}

/// Serialize modifications as grounding JSON, keeping rationale when asked.
///
/// Training responses use `with_rationale = false`, so the turn-two target is
/// boxes only.
pub fn serialize_modifications(
    mods: &[Modification],
    with_rationale: bool,
) -> Result<String, GeometryError> {
    let entries = mods
        .iter()
        .map(|m| {
            Ok(ModEntry {
                label: m.label,
                bbox_2d: m.bbox.quantize()?,
                rationale: if with_rationale {
                    m.rationale.as_deref()
                } else {
                    None
                },
            })
        })
        .collect::<Result<Vec<_>, GeometryError>>()?;
    Ok(serde_json::to_string(&entries).expect("grounding entries always serialize"))
}

/// First JSON array in `raw` whose elements are all objects.
fn find_object_array(raw: &str) -> Option<Vec<Value>> {
    for (i, _) in raw.match_indices('[') {
        let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
        if let Some(Ok(Value::Array(items))) = stream.next() {
            if items.iter().all(Value::is_object) {
                return Some(items);
            }
        }
    }
    None
}

fn parse_quant(v: &Value) -> Result<QuantBBox, String> {
    let arr = v.as_array().ok_or("bbox_2d is not an array")?;
    if arr.len() != 4 {
        return Err(format!("bbox_2d has {} coordinates, expected 4", arr.len()));
    }
    let mut q = [0i32; 4];
    for (slot, c) in q.iter_mut().zip(arr) {
        let f = c.as_f64().ok_or("bbox_2d coordinate is not a number")?;
        if f.fract() != 0.0 || !(0.0..=1000.0).contains(&f) {
            return Err(format!(
                "bbox_2d coordinate {f} is not an integer in [0, 1000]"
            ));
        }
        *slot = f as i32;
    }
    QuantBBox::try_from(q).map_err(|e| e.to_string())
}

enum EntryOutcome {
    Accepted(GroundedEntry),
    Unknown(String),
    Rejected(String),
}

fn parse_entry(obj: &Map<String, Value>) -> EntryOutcome {
    let Some(label_str) = obj.get("label").and_then(Value::as_str) else {
        return EntryOutcome::Rejected("missing string field \"label\"".into());
    };
    let Some(label) = Label::parse(label_str) else {
        return EntryOutcome::Unknown(label_str.to_string());
    };
    let Some(raw_box) = obj.get("bbox_2d") else {
        return EntryOutcome::Rejected("missing field \"bbox_2d\"".into());
    };
    let q = match parse_quant(raw_box) {
        Ok(q) => q,
        Err(reason) => return EntryOutcome::Rejected(reason),
    };
    let confidence = obj
        .get("confidence")
        .and_then(Value::as_f64)
        .filter(|c| (0.0..=1.0).contains(c));
    let rationale = obj
        .get("rationale")
        .and_then(Value::as_str)
        .map(str::to_string);
    EntryOutcome::Accepted(GroundedEntry {
        detection: Detection {
            label,
            bbox: q.dequantize(),
            confidence,
        },
        rationale,
    })
}

/// Extract grounding entries from raw model text.
///
/// Unknown labels are dropped and reported; malformed entries (including
/// zero-area boxes) are skipped and recorded. Fails only when the text holds
/// no JSON array of objects at all.
pub fn parse_grounding(raw: &str) -> Result<GroundingParse, GuidanceError> {
    let items = find_object_array(raw).ok_or_else(|| {
        let preview: String = raw.chars().take(80).collect();
        GuidanceError::ParseFailure(format!("text starting {preview:?}"))
    })?;
    let mut out = GroundingParse::default();
    for (index, item) in items.iter().enumerate() {
        let obj = item.as_object().expect("checked by find_object_array");
        match parse_entry(obj) {
            EntryOutcome::Accepted(e) => out.entries.push(e),
            EntryOutcome::Unknown(l) => out.unknown_labels.push(l),
            EntryOutcome::Rejected(reason) => out.rejected.push(RejectedEntry { index, reason }),
        }
    }
    Ok(out)
}
