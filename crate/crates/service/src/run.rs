//! Run state machine and the events that drive it.
//!
//! A run's state is a fold of its events with [`PipelineRun::apply`]. The live
//! service and log replay use the same fold, so replay reproduces the cached
//! state exactly.

use std::collections::BTreeMap;
use std::fmt;

use facade_core::guidance::{Action, Label, Modification};
use facade_core::{DetectionSet, QuantBBox, RenovationPlan, SketchMeta};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunState {
    Created,
    Detected,
    Planned,
    PlanApproved,
    Enhanced,
    Rendered,
    Failed,
}

impl RunState {
    /// The success path, in order.
    pub const PATH: [RunState; 6] = [
        RunState::Created,
        RunState::Detected,
        RunState::Planned,
        RunState::PlanApproved,
        RunState::Enhanced,
        RunState::Rendered,
    ];

    pub fn next(self) -> Option<RunState> {
        let i = Self::PATH.iter().position(|s| *s == self)?;
        Self::PATH.get(i + 1).copied()
    }

    /// Artifacts that exist once a run has reached this state.
    pub fn artifacts(self) -> &'static [&'static str] {
        use artifact::*;
        const ALL: [&str; 10] = [
            SKETCH,
            DETECTIONS,
            DETECT_RAW,
            PROPOSAL,
            PROPOSE_RAW,
            PLAN,
            ENHANCED,
            ENHANCED_META,
            RENDER,
            RENDER_META,
        ];
        match self {
            RunState::Created => &ALL[..1],
            RunState::Detected => &ALL[..3],
            RunState::Planned | RunState::PlanApproved => &ALL[..6],
            RunState::Enhanced => &ALL[..8],
            RunState::Rendered => &ALL,
            RunState::Failed => &[],
        }
    }
}

impl fmt::Display for RunState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("state serializes");
        f.write_str(s.as_str().expect("state is a string"))
    }
}

pub mod artifact {
    pub const SKETCH: &str = "sketch";
    pub const DETECTIONS: &str = "detections";
    pub const DETECT_RAW: &str = "detect_raw";
    /// The plan as first proposed. Never rewritten by edits.
    pub const PROPOSAL: &str = "proposal";
    pub const PROPOSE_RAW: &str = "propose_raw";
    /// The current plan; each accepted edit points this at a new blob.
    pub const PLAN: &str = "plan";
    pub const ENHANCED: &str = "enhanced";
    pub const ENHANCED_META: &str = "enhanced_meta";
    pub const RENDER: &str = "render";
    pub const RENDER_META: &str = "render_meta";
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    /// sha256 of the content, lowercase hex.
    pub hash: String,
    pub media_type: String,
    pub size: u64,
}

/// One designer edit to a PLANNED run's modifications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum PlanEdit {
    Add {
        label: Label,
        bbox_2d: QuantBBox,
        /// Insert position; appends when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        index: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rationale: Option<String>,
    },
    Move {
        index: usize,
        bbox_2d: QuantBBox,
    },
    Delete {
        index: usize,
    },
    Relabel {
        index: usize,
        label: Label,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("modification index {index} out of range for a plan with {len} modifications")]
pub struct EditError {
    pub index: usize,
    pub len: usize,
}

impl PlanEdit {
    /// Apply to a copy of `plan`. Validation against the overlap rule is the caller's job.
    pub fn apply(&self, plan: &RenovationPlan) -> Result<RenovationPlan, EditError> {
        let mut out = plan.clone();
        let len = out.mods.len();
        let at = |index: usize, limit: usize| {
            if index < limit {
                Ok(index)
            } else {
                Err(EditError { index, len })
            }
        };
        match self {
            PlanEdit::Add {
                label,
                bbox_2d,
                index,
                rationale,
            } => {
                let i = at(index.unwrap_or(len), len + 1)?;
                out.mods.insert(
                    i,
                    Modification {
                        action: Action::Add,
                        label: *label,
                        bbox: bbox_2d.dequantize(),
                        rationale: rationale.clone(),
                    },
                );
            }
            PlanEdit::Move { index, bbox_2d } => {
                out.mods[at(*index, len)?].bbox = bbox_2d.dequantize()
            }
            PlanEdit::Delete { index } => {
                out.mods.remove(at(*index, len)?);
            }
            PlanEdit::Relabel { index, label } => out.mods[at(*index, len)?].label = *label,
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditLogEntry {
    pub at_ms: u64,
    #[serde(flatten)]
    pub edit: PlanEdit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    /// Last good state; `reset` returns here.
    pub from: RunState,
    pub cause: String,
    pub at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub run_id: String,
    pub brief: String,
    pub sketch_meta: SketchMeta,
    pub state: RunState,
    pub seed: u64,
    pub config: PipelineConfig,
    pub artifacts: BTreeMap<String, ArtifactRef>,
    pub detections: Option<DetectionSet>,
    pub plan: Option<RenovationPlan>,
    pub edit_log: Vec<EditLogEntry>,
    pub fidelity: Option<f64>,
    pub flagged: Option<bool>,
    pub failure: Option<Failure>,
    pub created_ms: u64,
}

impl PipelineRun {
    /// The state whose artifacts are present: the current one, or the last good one when FAILED.
    pub fn effective_state(&self) -> RunState {
        match (&self.state, &self.failure) {
            (RunState::Failed, Some(f)) => f.from,
            (s, _) => *s,
        }
    }

    /// Artifact presence matches the state reached.
    pub fn artifacts_consistent(&self) -> bool {
        let want = self.effective_state().artifacts();
        self.artifacts.len() == want.len() && want.iter().all(|k| self.artifacts.contains_key(*k))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RunEvent {
    Created {
        run_id: String,
        at_ms: u64,
        brief: String,
        sketch_meta: SketchMeta,
        config: PipelineConfig,
        sketch: ArtifactRef,
    },
    Detected {
        run_id: String,
        at_ms: u64,
        detections: DetectionSet,
        artifacts: BTreeMap<String, ArtifactRef>,
    },
    Planned {
        run_id: String,
        at_ms: u64,
        plan: RenovationPlan,
        artifacts: BTreeMap<String, ArtifactRef>,
    },
    PlanEdited {
        run_id: String,
        at_ms: u64,
        edit: PlanEdit,
        plan: ArtifactRef,
    },
    Approved {
        run_id: String,
        at_ms: u64,
    },
    Enhanced {
        run_id: String,
        at_ms: u64,
        artifacts: BTreeMap<String, ArtifactRef>,
    },
    Rendered {
        run_id: String,
        at_ms: u64,
        fidelity: f64,
        flagged: bool,
        artifacts: BTreeMap<String, ArtifactRef>,
    },
    Failed {
        run_id: String,
        at_ms: u64,
        cause: String,
    },
    Reset {
        run_id: String,
        at_ms: u64,
    },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReplayError {
    #[error("event for unknown run {0}")]
    UnknownRun(String),
    #[error("run {0} created twice")]
    DuplicateRun(String),
    #[error("run {run_id}: `{event}` not allowed in state {state}")]
    IllegalTransition {
        run_id: String,
        event: &'static str,
        state: RunState,
    },
    #[error("run {run_id}: {source}")]
    Edit { run_id: String, source: EditError },
}

impl RunEvent {
    pub fn run_id(&self) -> &str {
        match self {
            RunEvent::Created { run_id, .. }
            | RunEvent::Detected { run_id, .. }
            | RunEvent::Planned { run_id, .. }
            | RunEvent::PlanEdited { run_id, .. }
            | RunEvent::Approved { run_id, .. }
            | RunEvent::Enhanced { run_id, .. }
            | RunEvent::Rendered { run_id, .. }
            | RunEvent::Failed { run_id, .. }
            | RunEvent::Reset { run_id, .. } => run_id,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RunEvent::Created { .. } => "created",
            RunEvent::Detected { .. } => "detected",
            RunEvent::Planned { .. } => "planned",
            RunEvent::PlanEdited { .. } => "plan_edited",
            RunEvent::Approved { .. } => "approved",
            RunEvent::Enhanced { .. } => "enhanced",
            RunEvent::Rendered { .. } => "rendered",
            RunEvent::Failed { .. } => "failed",
            RunEvent::Reset { .. } => "reset",
        }
    }

    /// Start a run from its creation event.
    pub fn create(&self) -> Option<PipelineRun> {
        let RunEvent::Created {
            run_id,
            at_ms,
            brief,
            sketch_meta,
            config,
            sketch,
        } = self
        else {
            return None;
        };
        Some(PipelineRun {
            run_id: run_id.clone(),
            brief: brief.clone(),
            sketch_meta: sketch_meta.clone(),
            state: RunState::Created,
            seed: config.seed,
            config: config.clone(),
            artifacts: BTreeMap::from([(artifact::SKETCH.to_string(), sketch.clone())]),
            detections: None,
            plan: None,
            edit_log: Vec::new(),
            fidelity: None,
            flagged: None,
            failure: None,
            created_ms: *at_ms,
        })
    }
}

impl PipelineRun {
    /// Fold one (non-creation) event into the run.
    pub fn apply(&mut self, ev: &RunEvent) -> Result<(), ReplayError> {
        let illegal = || ReplayError::IllegalTransition {
            run_id: self.run_id.clone(),
            event: ev.name(),
            state: self.state,
        };
        let expect = |from: RunState| {
            if self.state == from {
                Ok(())
            } else {
                Err(illegal())
            }
        };
        match ev {
            RunEvent::Created { .. } => return Err(ReplayError::DuplicateRun(self.run_id.clone())),
            RunEvent::Detected {
                detections,
                artifacts,
                ..
            } => {
                expect(RunState::Created)?;
                self.detections = Some(detections.clone());
                self.artifacts.extend(artifacts.clone());
                self.state = RunState::Detected;
            }
            RunEvent::Planned {
                plan, artifacts, ..
            } => {
                expect(RunState::Detected)?;
                self.plan = Some(plan.clone());
                self.artifacts.extend(artifacts.clone());
                self.state = RunState::Planned;
            }
            RunEvent::PlanEdited {
                at_ms, edit, plan, ..
            } => {
                expect(RunState::Planned)?;
                let current = self.plan.as_ref().ok_or_else(illegal)?;
                let next = edit.apply(current).map_err(|source| ReplayError::Edit {
                    run_id: self.run_id.clone(),
                    source,
                })?;
                self.plan = Some(next);
                self.artifacts
                    .insert(artifact::PLAN.to_string(), plan.clone());
                self.edit_log.push(EditLogEntry {
                    at_ms: *at_ms,
                    edit: edit.clone(),
                });
            }
            RunEvent::Approved { .. } => {
                expect(RunState::Planned)?;
                self.state = RunState::PlanApproved;
            }
            RunEvent::Enhanced { artifacts, .. } => {
                expect(RunState::PlanApproved)?;
                self.artifacts.extend(artifacts.clone());
                self.state = RunState::Enhanced;
            }
            RunEvent::Rendered {
                fidelity,
                flagged,
                artifacts,
                ..
            } => {
                expect(RunState::Enhanced)?;
                self.fidelity = Some(*fidelity);
                self.flagged = Some(*flagged);
                self.artifacts.extend(artifacts.clone());
                self.state = RunState::Rendered;
            }
            RunEvent::Failed { at_ms, cause, .. } => {
                if matches!(self.state, RunState::Failed | RunState::Rendered) {
                    return Err(illegal());
                }
                self.failure = Some(Failure {
                    from: self.state,
                    cause: cause.clone(),
                    at_ms: *at_ms,
                });
                self.state = RunState::Failed;
            }
            RunEvent::Reset { .. } => {
                let from = match (&self.state, &self.failure) {
                    (RunState::Failed, Some(f)) => f.from,
                    _ => return Err(illegal()),
                };
                self.state = from;
                self.failure = None;
            }
        }
        Ok(())
    }
}

/// Rebuild every run from an event sequence.
pub fn replay<'a>(
    events: impl IntoIterator<Item = &'a RunEvent>,
) -> Result<BTreeMap<String, PipelineRun>, ReplayError> {
    let mut runs = BTreeMap::new();
    for ev in events {
        match ev.create() {
            Some(run) => {
                if runs.insert(run.run_id.clone(), run).is_some() {
                    return Err(ReplayError::DuplicateRun(ev.run_id().to_string()));
                }
            }
            None => runs
                .get_mut(ev.run_id())
                .ok_or_else(|| ReplayError::UnknownRun(ev.run_id().to_string()))?
                .apply(ev)?,
        }
    }
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use facade_core::BBox;

    fn q(a: [i32; 4]) -> QuantBBox {
        QuantBBox::new(a[0], a[1], a[2], a[3]).unwrap()
    }

    fn plan() -> RenovationPlan {
        RenovationPlan::new(
            DetectionSet::new("s", vec![]),
            vec![
                Modification::add(Label::Window, BBox::new(0.1, 0.1, 0.2, 0.2).unwrap()),
                Modification::add(Label::Door, BBox::new(0.4, 0.7, 0.5, 1.0).unwrap())
                    .with_rationale("entry"),
            ],
            "b",
        )
    }

    #[test]
    fn path_order() {
        let mut s = RunState::Created;
        let mut seen = vec![s];
        while let Some(n) = s.next() {
            seen.push(n);
            s = n;
        }
        assert_eq!(seen, RunState::PATH);
        assert_eq!(RunState::Failed.next(), None);
        assert_eq!(RunState::PlanApproved.to_string(), "PLAN_APPROVED");
    }

    #[test]
    fn edit_wire_form() {
        let e: PlanEdit =
            serde_json::from_str(r#"{"op":"move","index":0,"bbox_2d":[1,2,30,40]}"#).unwrap();
        assert_eq!(
            e,
            PlanEdit::Move {
                index: 0,
                bbox_2d: q([1, 2, 30, 40])
            }
        );
        let add = PlanEdit::Add {
            label: Label::Door,
            bbox_2d: q([0, 0, 10, 10]),
            index: None,
            rationale: None,
        };
        assert_eq!(
            serde_json::to_string(&add).unwrap(),
            r#"{"op":"add","label":"door","bbox_2d":[0,0,10,10]}"#
        );
    }

    #[test]
    fn delete_then_reinsert_restores_the_plan() {
        let p = plan();
        let deleted = PlanEdit::Delete { index: 0 }.apply(&p).unwrap();
        let m = &p.mods[0];
        let back = PlanEdit::Add {
            label: m.label,
            bbox_2d: m.bbox.quantize().unwrap(),
            index: Some(0),
            rationale: m.rationale.clone(),
        }
        .apply(&deleted)
        .unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn out_of_range_edits() {
        let p = plan();
        assert_eq!(
            PlanEdit::Delete { index: 2 }.apply(&p).unwrap_err(),
            EditError { index: 2, len: 2 }
        );
        assert!(PlanEdit::Add {
            label: Label::Window,
            bbox_2d: q([0, 0, 5, 5]),
            index: Some(2),
            rationale: None
        }
        .apply(&p)
        .is_ok());
        assert!(PlanEdit::Relabel {
            index: 9,
            label: Label::Door
        }
        .apply(&p)
        .is_err());
    }

    #[test]
    fn artifact_sets_grow_along_the_path() {
        for w in RunState::PATH.windows(2) {
            let (a, b) = (w[0].artifacts(), w[1].artifacts());
            assert!(a.len() <= b.len());
            assert!(a.iter().all(|x| b.contains(x)));
        }
    }
}
