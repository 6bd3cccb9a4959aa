//! Batch harness: the full auto-approved pipeline over a corpus, one report row per sketch.
//!
//! `reconstruct` reads a pairs corpus (`<pair>/before.png`, optional
//! `<pair>/meta.json`) and, where the pair is complete, also scores the
//! proposal against the recorded additions. `generate` reads a flat directory
//! of `*.png` sketches with optional `<stem>.json` metadata.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use facade_core::dataset::{derive_plan, load_pair, match_detections};
use facade_core::guidance::{validate_plan, Modification};
use facade_core::sketch::{decode_gray, pixels_equal_outside, rasterize_mask};
use facade_core::{Detection, DetectionSet, SketchMeta};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::run::{artifact, RunState};
use crate::service::PipelineService;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    Reconstruct,
    Generate,
}

impl std::str::FromStr for BatchMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "reconstruct" => Ok(BatchMode::Reconstruct),
            "generate" => Ok(BatchMode::Generate),
            other => Err(format!("unknown mode `{other}` (reconstruct|generate)")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BatchError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("thread pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRow {
    pub item: String,
    pub plan_valid: bool,
    /// Pixels outside the dilated modification boxes are unchanged.
    pub preserved: bool,
    pub fidelity: f64,
    pub flagged: bool,
    pub mods: usize,
    /// Reconstruct mode: recorded additions, and how many the proposal matched.
    pub reference_mods: Option<usize>,
    pub matched_reference: Option<usize>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchFailure {
    pub item: String,
    pub cause: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub mode: BatchMode,
    pub rows: Vec<BatchRow>,
    pub failures: Vec<BatchFailure>,
}

impl BatchReport {
    pub fn preservation_failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.preserved).count()
    }
}

impl fmt::Display for BatchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<24} {:>5} {:>9} {:>8} {:>4} {:>9} {:>8}",
            "item", "valid", "preserved", "fidelity", "mods", "reference", "wall_ms"
        )?;
        for r in &self.rows {
            let reference = match (r.matched_reference, r.reference_mods) {
                (Some(m), Some(n)) => format!("{m}/{n}"),
                _ => "-".into(),
            };
            writeln!(
                f,
                "{:<24} {:>5} {:>9} {:>8.4} {:>4} {:>9} {:>8}",
                r.item, r.plan_valid, r.preserved, r.fidelity, r.mods, reference, r.wall_ms
            )?;
        }
        for x in &self.failures {
            writeln!(f, "{:<24} FAILED: {}", x.item, x.cause)?;
        }
        write!(
            f,
            "{} rows, {} failures, {} preservation failures",
            self.rows.len(),
            self.failures.len(),
            self.preservation_failures()
        )
    }
}

struct Item {
    name: String,
    png: PathBuf,
    meta: Option<PathBuf>,
    /// Reconstruct mode: a complete pair directory to derive the reference plan from.
    reference: Option<PathBuf>,
}

fn list_items(corpus: &Path, mode: BatchMode) -> Result<Vec<Item>, BatchError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| BatchError::Io { path, source }
    };
    let mut items = Vec::new();
    for entry in fs::read_dir(corpus).map_err(io(corpus))? {
        let path = entry.map_err(io(corpus))?.path();
        let name = path
            .file_name()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        match mode {
            BatchMode::Reconstruct if path.is_dir() && path.join("before.png").exists() => {
                let complete = ["before.json", "after.json", "after.png"]
                    .iter()
                    .all(|f| path.join(f).exists());
                items.push(Item {
                    png: path.join("before.png"),
                    meta: Some(path.join("meta.json")).filter(|p| p.exists()),
                    reference: complete.then(|| path.clone()),
                    name,
                });
            }
            BatchMode::Generate if path.extension().is_some_and(|e| e == "png") => {
                let stem = path
                    .file_stem()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned();
                items.push(Item {
                    meta: Some(path.with_extension("json")).filter(|p| p.exists()),
                    png: path,
                    reference: None,
                    name: stem,
                });
            }
            _ => {}
        }
    }
    items.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(items)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, String> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_slice(&bytes).map_err(|e| format!("{}: {e}", path.display()))
}

fn run_item(item: &Item, cfg: &PipelineConfig) -> Result<BatchRow, String> {
    let t0 = Instant::now();
    let png = fs::read(&item.png).map_err(|e| format!("{}: {e}", item.png.display()))?;
    let meta = match &item.meta {
        Some(p) => read_json(p)?,
        None => SketchMeta::new(item.name.clone()),
    };
    // Each item gets its own ephemeral service: items share nothing.
    let svc = PipelineService::in_memory();
    let run = svc
        .create_run(&png, meta, "", Some(cfg.clone()))
        .map_err(|e| e.to_string())?;
    let run = svc.drive(&run.run_id).map_err(|e| e.to_string())?;
    if run.state != RunState::Rendered {
        let cause = run
            .failure
            .map(|f| f.cause)
            .unwrap_or_else(|| format!("stopped in {}", run.state));
        return Err(cause);
    }
    let plan = run.plan.as_ref().expect("rendered run has a plan");
    let load = |name| -> Result<image::GrayImage, String> {
        let (_, bytes) = svc.artifact(&run.run_id, name).map_err(|e| e.to_string())?;
        decode_gray(&bytes).map_err(|e| e.to_string())
    };
    let base = load(artifact::SKETCH)?;
    let enhanced = load(artifact::ENHANCED)?;
    let (w, h) = base.dimensions();
    let mask = rasterize_mask(w, h, &plan.mod_boxes(), run.config.margin);
    let preserved = pixels_equal_outside(&base, &enhanced, &mask).map_err(|e| e.to_string())?;

    let (reference_mods, matched_reference) = match &item.reference {
        Some(dir) => {
            let pair = load_pair(dir).map_err(|e| e.to_string())?;
            let reference = derive_plan(
                &pair.before.detections,
                &pair.after.detections,
                cfg.match_threshold,
            )
            .map_err(|e| e.to_string())?;
            let as_set = |mods: &[Modification]| {
                DetectionSet::new(
                    "",
                    mods.iter()
                        .map(|m| Detection::new(m.label, m.bbox))
                        .collect(),
                )
            };
            let m = match_detections(
                &as_set(&reference.mods),
                &as_set(&plan.mods),
                cfg.match_threshold,
            );
            (Some(reference.mods.len()), Some(m.pairs.len()))
        }
        None => (None, None),
    };

    Ok(BatchRow {
        item: item.name.clone(),
        plan_valid: validate_plan(plan, run.config.tolerance).is_valid(),
        preserved,
        fidelity: run.fidelity.unwrap_or(0.0),
        flagged: run.flagged.unwrap_or(false),
        mods: plan.mods.len(),
        reference_mods,
        matched_reference,
        wall_ms: t0.elapsed().as_millis() as u64,
    })
}

/// Run every sketch in `corpus` through the stub pipeline with auto-approval,
/// `jobs` at a time. Failing items are recorded and the batch carries on.
pub fn run_batch(
    corpus: &Path,
    mode: BatchMode,
    cfg: &PipelineConfig,
    jobs: usize,
) -> Result<BatchReport, BatchError> {
    let items = list_items(corpus, mode)?;
    let cfg = PipelineConfig {
        auto_approve: true,
        ..cfg.clone()
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| BatchError::Pool(e.to_string()))?;
    let results: Vec<Result<BatchRow, BatchFailure>> = pool.install(|| {
        items
            .par_iter()
            .map(|it| {
                run_item(it, &cfg).map_err(|cause| BatchFailure {
                    item: it.name.clone(),
                    cause,
                })
            })
            .collect()
    });
    let mut report = BatchReport {
        mode,
        rows: Vec::new(),
        failures: Vec::new(),
    };
    for r in results {
        match r {
            Ok(row) => report.rows.push(row),
            Err(f) => report.failures.push(f),
        }
    }
    Ok(report)
}
