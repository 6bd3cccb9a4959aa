//! The run orchestrator: one stage per `advance`, a human gate before
//! enhancement, and every state change committed to the event log first.

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::{mpsc, Arc, Mutex, MutexGuard, RwLock, TryLockError};
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use facade_core::guidance::{run_detect, run_propose, validate_plan, ValidationReport};
use facade_core::rendering::{render_stage, RenderSpec, RenderStageConfig};
use facade_core::sketch::decode_gray;
use facade_core::synthesis::{enhance, EnhanceConfig, EnhancedSketch};
use facade_core::{DetectionSet, RenovationPlan, SketchImage, SketchMeta};

use crate::config::{BackendFactory, Backends, DefaultBackends, PipelineConfig};
use crate::run::{
    artifact, ArtifactRef, EditError, PipelineRun, PlanEdit, ReplayError, RunEvent, RunState,
};
use crate::store::{RunStore, StoreError};

pub const PNG: &str = "image/png";
pub const JSON: &str = "application/json";
pub const TEXT: &str = "text/plain; charset=utf-8";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("no run {0}")]
    NotFound(String),
    #[error("run {run_id} is {state}; cannot {action}")]
    InvalidState {
        run_id: String,
        state: RunState,
        action: &'static str,
    },
    #[error("run {0} is being modified by another request")]
    Conflict(String),
    #[error("plan rejected: {0}")]
    ValidationRejected(ValidationReport),
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
}

impl From<EditError> for ServiceError {
    fn from(e: EditError) -> Self {
        ServiceError::BadRequest(e.to_string())
    }
}

struct RunSlot {
    run: RwLock<PipelineRun>,
    /// Held for the whole of a mutation. Contention is reported, not waited on.
    writer: Mutex<()>,
}

impl RunSlot {
    fn new(run: PipelineRun) -> Arc<Self> {
        Arc::new(Self {
            run: RwLock::new(run),
            writer: Mutex::new(()),
        })
    }

    fn snapshot(&self) -> PipelineRun {
        self.run.read().expect("run lock").clone()
    }
}

pub struct PipelineService {
    store: RunStore,
    runs: RwLock<HashMap<String, Arc<RunSlot>>>,
    factory: Arc<dyn BackendFactory>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// What a successful stage hands back for committing.
enum StageOutput {
    Detected {
        detections: DetectionSet,
        blobs: Vec<(&'static str, Vec<u8>, &'static str)>,
    },
    Planned {
        plan: RenovationPlan,
        blobs: Vec<(&'static str, Vec<u8>, &'static str)>,
    },
    Enhanced {
        blobs: Vec<(&'static str, Vec<u8>, &'static str)>,
    },
    Rendered {
        fidelity: f64,
        flagged: bool,
        blobs: Vec<(&'static str, Vec<u8>, &'static str)>,
    },
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "backend panicked".into())
}

/// Run `f` on its own thread and give up after `limit`. A timed-out worker is
/// left to finish on its own; its result is discarded.
fn with_timeout<T: Send + 'static>(
    limit: Duration,
    f: impl FnOnce() -> Result<T, String> + Send + 'static,
) -> Result<T, String> {
    let (tx, rx) = mpsc::channel();
    let spawned = thread::Builder::new()
        .name("facade-stage".into())
        .spawn(move || {
            let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| Err(panic_message(p)));
            let _ = tx.send(r);
        });
    if let Err(e) = spawned {
        return Err(format!("could not start stage worker: {e}"));
    }
    match rx.recv_timeout(limit) {
        Ok(r) => r,
        Err(mpsc::RecvTimeoutError::Timeout) => {
            Err(format!("backend timed out after {}s", limit.as_secs_f64()))
        }
        Err(mpsc::RecvTimeoutError::Disconnected) => {
            Err("stage worker exited without a result".into())
        }
    }
}

fn json_bytes<T: serde::Serialize>(v: &T) -> Result<Vec<u8>, String> {
    serde_json::to_vec_pretty(v).map_err(|e| e.to_string())
}

/// The work of the stage that follows `run.state`. Pure apart from backend calls.
fn execute_stage(
    run: &PipelineRun,
    sketch: &SketchImage,
    enhanced: Option<EnhancedSketch>,
    backends: &Backends,
) -> Result<StageOutput, String> {
    let cfg = &run.config;
    match run.state {
        RunState::Created => {
            let out = run_detect(
                backends.guidance.as_ref(),
                sketch,
                &run.sketch_meta.source_id,
            )
            .map_err(|e| format!("detect: {e}"))?;
            if !out.unknown_labels.is_empty() || !out.rejected.is_empty() {
                tracing::warn!(run = %run.run_id, unknown = ?out.unknown_labels, rejected = out.rejected.len(), "detect output had unusable entries");
            }
            Ok(StageOutput::Detected {
                blobs: vec![
                    (artifact::DETECTIONS, json_bytes(&out.detections)?, JSON),
                    (artifact::DETECT_RAW, out.raw.into_bytes(), TEXT),
                ],
                detections: out.detections,
            })
        }
        RunState::Detected => {
            let basis = run.detections.as_ref().ok_or("run has no detections")?;
            let out = run_propose(backends.guidance.as_ref(), sketch, basis, &run.brief)
                .map_err(|e| format!("propose: {e}"))?;
            let plan_json = json_bytes(&out.plan)?;
            Ok(StageOutput::Planned {
                blobs: vec![
                    (artifact::PROPOSAL, plan_json.clone(), JSON),
                    (artifact::PROPOSE_RAW, out.raw.into_bytes(), TEXT),
                    (artifact::PLAN, plan_json, JSON),
                ],
                plan: out.plan,
            })
        }
        RunState::PlanApproved => {
            let plan = run.plan.as_ref().ok_or("run has no plan")?;
            let ecfg = EnhanceConfig {
                margin: cfg.margin,
                seed: run.seed,
                tolerance: cfg.tolerance,
            };
            let out = enhance(
                sketch,
                plan,
                backends.components.as_ref(),
                backends.compositor.as_ref(),
                &ecfg,
            )
            .map_err(|e| format!("enhance: {e}"))?;
            Ok(StageOutput::Enhanced {
                blobs: vec![
                    (artifact::ENHANCED, out.to_png(), PNG),
                    (artifact::ENHANCED_META, out.sidecar_json(), JSON),
                ],
            })
        }
        RunState::Enhanced => {
            let enhanced = enhanced.ok_or("run has no enhanced sketch")?;
            let spec = RenderSpec::for_brief(&run.brief, run.seed);
            let rcfg = RenderStageConfig {
                min_fidelity: cfg.min_fidelity,
                edge_threshold: cfg.edge_threshold,
            };
            let out = render_stage(&enhanced, backends.render.as_ref(), &spec, &rcfg)
                .map_err(|e| format!("render: {e}"))?;
            Ok(StageOutput::Rendered {
                fidelity: out.fidelity,
                flagged: out.flagged,
                blobs: vec![
                    (artifact::RENDER, out.to_png(), PNG),
                    (artifact::RENDER_META, out.sidecar_json(), JSON),
                ],
            })
        }
        s => Err(format!("no stage follows {s}")),
    }
}

impl PipelineService {
    pub fn new(store: RunStore, factory: Arc<dyn BackendFactory>) -> Self {
        Self {
            store,
            runs: RwLock::default(),
            factory,
        }
    }

    /// Ephemeral service with the configured backends.
    pub fn in_memory() -> Self {
        Self::new(RunStore::in_memory(), Arc::new(DefaultBackends))
    }

    /// Open a store directory, rebuilding all runs from its log.
    pub fn open(root: &Path, factory: Arc<dyn BackendFactory>) -> Result<Self, ServiceError> {
        let (store, events) = RunStore::open(root)?;
        let runs = crate::run::replay(&events)?;
        let svc = Self::new(store, factory);
        *svc.runs.write().expect("runs lock") = runs
            .into_iter()
            .map(|(id, r)| (id, RunSlot::new(r)))
            .collect();
        Ok(svc)
    }

    pub fn store(&self) -> &RunStore {
        &self.store
    }

    fn slot(&self, run_id: &str) -> Result<Arc<RunSlot>, ServiceError> {
        self.runs
            .read()
            .expect("runs lock")
            .get(run_id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(run_id.to_string()))
    }

    fn lock_writer<'a>(
        slot: &'a RunSlot,
        run_id: &str,
    ) -> Result<MutexGuard<'a, ()>, ServiceError> {
        match slot.writer.try_lock() {
            Ok(g) => Ok(g),
            Err(TryLockError::Poisoned(p)) => Ok(p.into_inner()),
            Err(TryLockError::WouldBlock) => Err(ServiceError::Conflict(run_id.to_string())),
        }
    }

    /// Persist `ev`, then fold the persisted form into the cached run.
    fn commit(&self, slot: &RunSlot, ev: RunEvent) -> Result<PipelineRun, ServiceError> {
        let ev = self.store.append(&ev)?;
        let mut run = slot.run.write().expect("run lock");
        run.apply(&ev)?;
        Ok(run.clone())
    }

    pub fn create_run(
        &self,
        sketch_png: &[u8],
        meta: SketchMeta,
        brief: &str,
        config: Option<PipelineConfig>,
    ) -> Result<PipelineRun, ServiceError> {
        let config = config.unwrap_or_default();
        config
            .validate()
            .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        let sketch = SketchImage::from_png(sketch_png, meta)
            .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        // Re-encoded so that equal rasters give equal hashes whatever the upload's encoder.
        let sketch_ref = self.store.put_blob(&sketch.to_png(), PNG)?;
        let run_id = uuid::Uuid::new_v4().simple().to_string();
        let ev = self.store.append(&RunEvent::Created {
            run_id: run_id.clone(),
            at_ms: now_ms(),
            brief: brief.to_string(),
            sketch_meta: sketch.meta().clone(),
            config,
            sketch: sketch_ref,
        })?;
        let run = ev.create().expect("creation event");
        self.runs
            .write()
            .expect("runs lock")
            .insert(run_id, RunSlot::new(run.clone()));
        tracing::info!(run = %run.run_id, "run created");
        Ok(run)
    }

    pub fn get(&self, run_id: &str) -> Result<PipelineRun, ServiceError> {
        Ok(self.slot(run_id)?.snapshot())
    }

    pub fn run_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .runs
            .read()
            .expect("runs lock")
            .keys()
            .cloned()
            .collect();
        ids.sort();
        ids
    }

    pub fn artifact(
        &self,
        run_id: &str,
        name: &str,
    ) -> Result<(ArtifactRef, Vec<u8>), ServiceError> {
        let run = self.get(run_id)?;
        let r = run
            .artifacts
            .get(name)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("{run_id}/{name}")))?;
        let bytes = self.store.get_blob(&r.hash)?;
        Ok((r, bytes))
    }

    /// Every artifact of a run, name to hash.
    pub fn artifact_hashes(&self, run_id: &str) -> Result<BTreeMap<String, String>, ServiceError> {
        Ok(self
            .get(run_id)?
            .artifacts
            .into_iter()
            .map(|(k, v)| (k, v.hash))
            .collect())
    }

    fn load_sketch(&self, run: &PipelineRun) -> Result<SketchImage, ServiceError> {
        let bytes = self.store.get_blob(&run.artifacts[artifact::SKETCH].hash)?;
        SketchImage::from_png(&bytes, run.sketch_meta.clone())
            .map_err(|e| ServiceError::BadRequest(e.to_string()))
    }

    fn load_enhanced(&self, run: &PipelineRun) -> Result<EnhancedSketch, ServiceError> {
        let corrupt =
            |e: String| ServiceError::BadRequest(format!("stored enhanced sketch unreadable: {e}"));
        let meta = self
            .store
            .get_blob(&run.artifacts[artifact::ENHANCED_META].hash)?;
        let png = self
            .store
            .get_blob(&run.artifacts[artifact::ENHANCED].hash)?;
        let mut e: EnhancedSketch =
            serde_json::from_slice(&meta).map_err(|e| corrupt(e.to_string()))?;
        e.image = decode_gray(&png).map_err(|e| corrupt(e.to_string()))?;
        Ok(e)
    }

    /// Execute exactly the next stage. Stage failures move the run to FAILED
    /// and are returned as the run's new state, not as an error.
    pub fn advance(&self, run_id: &str) -> Result<PipelineRun, ServiceError> {
        let slot = self.slot(run_id)?;
        let _w = Self::lock_writer(&slot, run_id)?;
        let run = slot.snapshot();
        match run.state {
            RunState::Created
            | RunState::Detected
            | RunState::PlanApproved
            | RunState::Enhanced => {}
            RunState::Planned => {
                return Err(ServiceError::InvalidState {
                    run_id: run_id.into(),
                    state: run.state,
                    action: "advance before the plan is approved",
                })
            }
            RunState::Rendered | RunState::Failed => {
                return Err(ServiceError::InvalidState {
                    run_id: run_id.into(),
                    state: run.state,
                    action: "advance",
                })
            }
        }
        let sketch = self.load_sketch(&run)?;
        let enhanced = match run.state {
            RunState::Enhanced => Some(self.load_enhanced(&run)?),
            _ => None,
        };
        let backends = self.factory.build(&run.config);
        let limit = run.config.timeout();
        let job_run = run.clone();
        let outcome = with_timeout(limit, move || {
            execute_stage(&job_run, &sketch, enhanced, &backends)
        });

        let at_ms = now_ms();
        let run_id = run.run_id.clone();
        let ev = match outcome {
            Err(cause) => {
                tracing::warn!(run = %run_id, from = %run.state, %cause, "stage failed");
                RunEvent::Failed {
                    run_id,
                    at_ms,
                    cause,
                }
            }
            Ok(out) => {
                let put = |blobs: Vec<(&'static str, Vec<u8>, &'static str)>| {
                    blobs
                        .into_iter()
                        .map(|(name, bytes, media)| {
                            Ok((name.to_string(), self.store.put_blob(&bytes, media)?))
                        })
                        .collect::<Result<BTreeMap<_, _>, StoreError>>()
                };
                match out {
                    StageOutput::Detected { detections, blobs } => RunEvent::Detected {
                        run_id,
                        at_ms,
                        detections,
                        artifacts: put(blobs)?,
                    },
                    StageOutput::Planned { plan, blobs } => RunEvent::Planned {
                        run_id,
                        at_ms,
                        plan,
                        artifacts: put(blobs)?,
                    },
                    StageOutput::Enhanced { blobs } => RunEvent::Enhanced {
                        run_id,
                        at_ms,
                        artifacts: put(blobs)?,
                    },
                    StageOutput::Rendered {
                        fidelity,
                        flagged,
                        blobs,
                    } => RunEvent::Rendered {
                        run_id,
                        at_ms,
                        fidelity,
                        flagged,
                        artifacts: put(blobs)?,
                    },
                }
            }
        };
        self.commit(&slot, ev)
    }

    fn planned(
        &self,
        run: &PipelineRun,
        action: &'static str,
    ) -> Result<RenovationPlan, ServiceError> {
        match (&run.state, &run.plan) {
            (RunState::Planned, Some(p)) => Ok(p.clone()),
            _ => Err(ServiceError::InvalidState {
                run_id: run.run_id.clone(),
                state: run.state,
                action,
            }),
        }
    }

    /// Apply a designer edit. An edit is rejected when the resulting plan has
    /// violations and no fewer than before, so edits that repair a bad
    /// proposal one step at a time still go through.
    pub fn edit_plan(&self, run_id: &str, edit: PlanEdit) -> Result<RenovationPlan, ServiceError> {
        let slot = self.slot(run_id)?;
        let _w = Self::lock_writer(&slot, run_id)?;
        let run = slot.snapshot();
        let plan = self.planned(&run, "edit the plan")?;
        let next = edit.apply(&plan)?;
        next.check_quantizable()
            .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        let before = validate_plan(&plan, run.config.tolerance).violations.len();
        let report = validate_plan(&next, run.config.tolerance);
        if !report.is_valid() && report.violations.len() >= before {
            return Err(ServiceError::ValidationRejected(report));
        }
        let plan_ref = self
            .store
            .put_blob(&json_bytes(&next).map_err(ServiceError::BadRequest)?, JSON)?;
        let run = self.commit(
            &slot,
            RunEvent::PlanEdited {
                run_id: run_id.to_string(),
                at_ms: now_ms(),
                edit,
                plan: plan_ref,
            },
        )?;
        Ok(run.plan.expect("planned run has a plan"))
    }

    /// The human gate. Only a plan that passes validation can be approved.
    pub fn approve(&self, run_id: &str) -> Result<PipelineRun, ServiceError> {
        let slot = self.slot(run_id)?;
        let _w = Self::lock_writer(&slot, run_id)?;
        let run = slot.snapshot();
        let plan = self.planned(&run, "approve")?;
        let report = validate_plan(&plan, run.config.tolerance);
        if !report.is_valid() {
            return Err(ServiceError::ValidationRejected(report));
        }
        self.commit(
            &slot,
            RunEvent::Approved {
                run_id: run_id.to_string(),
                at_ms: now_ms(),
            },
        )
    }

    /// Return a FAILED run to its last good state so the failed stage can be retried.
    pub fn reset(&self, run_id: &str) -> Result<PipelineRun, ServiceError> {
        let slot = self.slot(run_id)?;
        let _w = Self::lock_writer(&slot, run_id)?;
        let run = slot.snapshot();
        if run.state != RunState::Failed {
            return Err(ServiceError::InvalidState {
                run_id: run_id.into(),
                state: run.state,
                action: "reset",
            });
        }
        self.commit(
            &slot,
            RunEvent::Reset {
                run_id: run_id.to_string(),
                at_ms: now_ms(),
            },
        )
    }

    /// Advance until RENDERED, FAILED, or a plan that needs a human. Plans are
    /// approved here only when the run's config has `auto_approve`.
    pub fn drive(&self, run_id: &str) -> Result<PipelineRun, ServiceError> {
        loop {
            let run = self.get(run_id)?;
            match run.state {
                RunState::Rendered | RunState::Failed => return Ok(run),
                RunState::Planned if !run.config.auto_approve => return Ok(run),
                RunState::Planned => {
                    self.approve(run_id)?;
                }
                _ => {
                    self.advance(run_id)?;
                }
            }
        }
    }
}
