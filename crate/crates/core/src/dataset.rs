//! Training corpora: before/after facade pairs exported as two-turn
//! conversations, and the component-sketch manifest.
//!
//! On-disk layout:
//!
//! ```text
//! pairs/<pair_id>/{before.png, after.png, before.json, after.json, meta.json}
//! components/manifest.json
//! components/<label>/<component_id>.png
//! ```
//!
//! `before.json` and `after.json` hold grounding arrays
//! (`[{"label", "bbox_2d"}, ...]`).

use std::collections::HashSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::GeometryError;
use crate::guidance::{
    parse_grounding, serialize_grounding, serialize_modifications, DetectionSet, GuidanceError,
    Label, LabeledBox, Modification, RenovationPlan, DETECT_INSTRUCTION, PROPOSE_INSTRUCTION,
};
use crate::sketch::SketchMeta;

pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.5;
pub const TRAIN_FILE: &str = "train.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{}before detection {index} ({label}) has no after-detection at iou >= {threshold}",
        pair_id.as_deref().map(|p| format!("pair {p}: ")).unwrap_or_default())]
    UnmatchedBefore {
        pair_id: Option<String>,
        index: usize,
        label: Label,
        threshold: f64,
    },
    #[error("pair {pair_id}: before is {before:?} but after is {after:?}")]
    DimMismatch {
        pair_id: String,
        before: (u32, u32),
        after: (u32, u32),
    },
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One side of a facade pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSide {
    pub image: PathBuf,
    pub dims: (u32, u32),
    pub detections: DetectionSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FacadePair {
    pub pair_id: String,
    pub before: PairSide,
    pub after: PairSide,
    pub meta: SketchMeta,
}

/// Matching found by [`match_detections`].
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// `(before index, after index)` in the order they were selected.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_before: Vec<usize>,
    pub unmatched_after: Vec<usize>,
}

/// Greedy maximum-IoU matching between same-label detections.
///
/// Repeatedly takes the highest-IoU unmatched pair with IoU at least
/// `threshold`; ties go to the smaller before index, then the smaller after
/// index.
pub fn match_detections(before: &DetectionSet, after: &DetectionSet, threshold: f64) -> Matching {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, b) in before.items.iter().enumerate() {
        for (j, a) in after.items.iter().enumerate() {
            if b.label != a.label {
                continue;
            }
            let iou = b.bbox.iou(&a.bbox);
            if iou >= threshold {
                candidates.push((iou, i, j));
            }
        }
    }
    candidates.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));

    let mut used_before = vec![false; before.items.len()];
    let mut used_after = vec![false; after.items.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !used_before[i] && !used_after[j] {
            used_before[i] = true;
            used_after[j] = true;
            pairs.push((i, j));
        }
    }
    Matching {
        pairs,
        unmatched_before: (0..before.items.len())
            .filter(|i| !used_before[*i])
            .collect(),
        unmatched_after: (0..after.items.len()).filter(|j| !used_after[*j]).collect(),
    }
}

/// Turn an annotated before/after pair into the plan that produces it: every
/// after-detection without a before counterpart becomes an addition.
pub fn derive_plan(
    before: &DetectionSet,
    after: &DetectionSet,
    match_threshold: f64,
) -> Result<RenovationPlan, DatasetError> {
    let m = match_detections(before, after, match_threshold);
    if let Some(&index) = m.unmatched_before.first() {
        return Err(DatasetError::UnmatchedBefore {
            pair_id: None,
            index,
            label: before.items[index].label,
            threshold: match_threshold,
        });
    }
    let mods = m
        .unmatched_after
        .iter()
        .map(|&j| Modification::add(after.items[j].label, after.items[j].bbox))
        .collect();
    Ok(RenovationPlan::new(before.clone(), mods, ""))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

/// One training record: `{"image", "conversations": [user, assistant, user, assistant]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConversationSample {
    pub image: String,
    pub conversations: Vec<Message>,
}

impl ConversationSample {
    pub fn new(
        image: impl Into<String>,
        detect_response: String,
        propose_response: String,
    ) -> Self {
        let msg = |role, content: &str| Message {
            role,
            content: content.to_string(),
        };
        Self {
            image: image.into(),
            conversations: vec![
                msg(Role::User, DETECT_INSTRUCTION),
                msg(Role::Assistant, &detect_response),
                msg(Role::User, PROPOSE_INSTRUCTION),
                msg(Role::Assistant, &propose_response),
            ],
        }
    }

    /// Schema check: four messages alternating user/assistant with the fixed
    /// instructions in the user turns.
    pub fn check_schema(&self) -> Result<(), String> {
        let roles: Vec<Role> = self.conversations.iter().map(|m| m.role).collect();
        if roles != [Role::User, Role::Assistant, Role::User, Role::Assistant] {
            return Err(format!("unexpected role sequence {roles:?}"));
        }
        if self.conversations[0].content != DETECT_INSTRUCTION {
            return Err("turn 1 instruction differs".into());
        }
        if self.conversations[2].content != PROPOSE_INSTRUCTION {
            return Err("turn 2 instruction differs".into());
        }
        if self.image.is_empty() {
            return Err("empty image reference".into());
        }
        Ok(())
    }

    pub fn detect_response(&self) -> &str {
        &self.conversations[1].content
    }

    pub fn propose_response(&self) -> &str {
        &self.conversations[3].content
    }
}

/// Build the conversation for one pair. The turn-two response carries boxes only.
pub fn build_conversation(
    pair: &FacadePair,
    match_threshold: f64,
) -> Result<ConversationSample, DatasetError> {
    let plan = derive_plan(
        &pair.before.detections,
        &pair.after.detections,
        match_threshold,
    )
    .map_err(|e| match e {
        DatasetError::UnmatchedBefore {
            index,
            label,
            threshold,
            ..
        } => DatasetError::UnmatchedBefore {
            pair_id: Some(pair.pair_id.clone()),
            index,
            label,
            threshold,
        },
        other => other,
    })?;
    Ok(ConversationSample::new(
        pair.before.image.to_string_lossy(),
        serialize_grounding(&pair.before.detections.items)?,
        serialize_modifications(&plan.mods, false)?,
    ))
}

/// Write one JSON line per pair, in input order. Returns the number of lines.
pub fn export_conversations<W: Write>(
    pairs: &[FacadePair],
    match_threshold: f64,
    out: &mut W,
) -> Result<usize, DatasetError> {
    let lines = pairs
        .par_iter()
        .map(|p| {
            let sample = build_conversation(p, match_threshold)?;
            Ok(serde_json::to_string(&sample).expect("conversation serializes"))
        })
        .collect::<Result<Vec<String>, DatasetError>>()?;
    let sink = PathBuf::from("<output>");
    for line in &lines {
        writeln!(out, "{line}").map_err(io_err(&sink))?;
    }
    out.flush().map_err(io_err(&sink))?;
    Ok(lines.len())
}

/// Parse a `train.jsonl` stream back into samples.
pub fn read_conversations(text: &str) -> Result<Vec<ConversationSample>, DatasetError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|source| DatasetError::Json {
                path: PathBuf::from(TRAIN_FILE),
                source,
            })
        })
        .collect()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| DatasetError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn read_side(dir: &Path, stem: &str, sketch_id: &str) -> Result<PairSide, DatasetError> {
    let image = dir.join(format!("{stem}.png"));
    let dims = image::image_dimensions(&image).map_err(|source| DatasetError::Image {
        path: image.clone(),
        source,
    })?;
    let boxes: Vec<LabeledBox> = read_json(&dir.join(format!("{stem}.json")))?;
    Ok(PairSide {
        image,
        dims,
        detections: DetectionSet::new(
            sketch_id,
            boxes.into_iter().map(LabeledBox::to_detection).collect(),
        ),
    })
}

/// Load one pair directory; `meta.json` is optional and defaults to the pair id.
pub fn load_pair(dir: &Path) -> Result<FacadePair, DatasetError> {
    let pair_id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let meta_path = dir.join("meta.json");
    let meta = if meta_path.exists() {
        read_json::<SketchMeta>(&meta_path)?
    } else {
        SketchMeta::new(pair_id.clone())
    };
    let before = read_side(dir, "before", &pair_id)?;
    let after = read_side(dir, "after", &pair_id)?;
    if before.dims != after.dims {
        return Err(DatasetError::DimMismatch {
            pair_id,
            before: before.dims,
            after: after.dims,
        });
    }
    Ok(FacadePair {
        pair_id,
        before,
        after,
        meta,
    })
}

/// Load every pair under `root`, sorted by pair id.
pub fn load_pairs(root: &Path) -> Result<Vec<FacadePair>, DatasetError> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_pair(d)).collect()
}

/// Write a pair in the on-disk layout.
pub fn write_pair(
    root: &Path,
    pair_id: &str,
    before_png: &[u8],
    before: &DetectionSet,
    after_png: &[u8],
    after: &DetectionSet,
    meta: &SketchMeta,
) -> Result<PathBuf, DatasetError> {
    let dir = root.join(pair_id);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(io_err(&p))
    };
    write("before.png", before_png)?;
    write("after.png", after_png)?;
    write(
        "before.json",
        serialize_grounding(&before.items)?.as_bytes(),
    )?;
    write("after.json", serialize_grounding(&after.items)?.as_bytes())?;
    write(
        "meta.json",
        &serde_json::to_vec_pretty(meta).expect("meta serializes"),
    )?;
    Ok(dir)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub component_id: String,
    /// Kept as text so labels outside the fixed set can be reported rather than rejected.
    pub label: String,
    /// Relative to the components directory.
    pub path: PathBuf,
    /// `[width, height]`
    pub dims: [u32; 2],
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentManifest {
    pub entries: Vec<ManifestEntry>,
}

impl ComponentManifest {
    pub fn load(components_dir: &Path) -> Result<Self, DatasetError> {
        read_json(&components_dir.join(MANIFEST_FILE))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifestViolation {
    MissingFile {
        component_id: String,
        path: PathBuf,
    },
    DuplicateId {
        component_id: String,
    },
    UnknownLabel {
        component_id: String,
        label: String,
    },
    DimMismatch {
        component_id: String,
        declared: [u32; 2],
        actual: [u32; 2],
    },
    Unreadable {
        component_id: String,
        reason: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub door: usize,
    pub window: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestReport {
    pub violations: Vec<ManifestViolation>,
    pub counts: LabelCounts,
}

impl ManifestReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check files, ids, labels and dimensions; count entries per label.
///
/// Counts include every entry with a known label, valid or not.
pub fn validate_manifest(m: &ComponentManifest, components_dir: &Path) -> ManifestReport {
    let mut report = ManifestReport::default();
    let mut seen = HashSet::new();
    for e in &m.entries {
        let id = e.component_id.clone();
        if !seen.insert(e.component_id.as_str()) {
            report.violations.push(ManifestViolation::DuplicateId {
                component_id: id.clone(),
            });
        }
        match Label::parse(&e.label) {
            Some(Label::Door) => report.counts.door += 1,
            Some(Label::Window) => report.counts.window += 1,
            None => report.violations.push(ManifestViolation::UnknownLabel {
                component_id: id.clone(),
                label: e.label.clone(),
            }),
        }
        let path = components_dir.join(&e.path);
        if !path.is_file() {
            report.violations.push(ManifestViolation::MissingFile {
                component_id: id,
                path: e.path.clone(),
            });
            continue;
        }
        match image::image_dimensions(&path) {
            Ok((w, h)) if [w, h] != e.dims => {
                report.violations.push(ManifestViolation::DimMismatch {
                    component_id: id,
                    declared: e.dims,
                    actual: [w, h],
                })
            }
            Ok(_) => {}
            Err(err) => report.violations.push(ManifestViolation::Unreadable {
                component_id: id,
                reason: err.to_string(),
            }),
        }
    }
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildSummary {
    pub pairs: usize,
    pub lines: usize,
    pub train_file: PathBuf,
    pub manifest: Option<ManifestReport>,
}

/// Export `train.jsonl` from a pairs directory and, when given, validate the
/// component manifest (report written to `components_report.json`).
pub fn build_dataset(
    pairs_dir: &Path,
    components_dir: Option<&Path>,
    out_dir: &Path,
    match_threshold: f64,
) -> Result<BuildSummary, DatasetError> {
    let pairs = load_pairs(pairs_dir)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let train_file = out_dir.join(TRAIN_FILE);
    let mut buf = Vec::new();
    let lines = export_conversations(&pairs, match_threshold, &mut buf)?;
    fs::write(&train_file, buf).map_err(io_err(&train_file))?;

    let manifest = match components_dir {
        Some(dir) => {
            let report = validate_manifest(&ComponentManifest::load(dir)?, dir);
            let p = out_dir.join("components_report.json");
            fs::write(
                &p,
                serde_json::to_vec_pretty(&report).expect("report serializes"),
            )
            .map_err(io_err(&p))?;
            Some(report)
        }
        None => None,
    };
    Ok(BuildSummary {
        pairs: pairs.len(),
        lines,
        train_file,
        manifest,
    })
}

/// Re-parse a sample's responses: `(turn-one detections, turn-two additions)`.
pub fn reparse_sample(
    sample: &ConversationSample,
) -> Result<
    (
        Vec<crate::guidance::Detection>,
        Vec<crate::guidance::Detection>,
    ),
    DatasetError,
> {
    Ok((
        parse_grounding(sample.detect_response())?.detections(),
        parse_grounding(sample.propose_response())?.detections(),
    ))
}
