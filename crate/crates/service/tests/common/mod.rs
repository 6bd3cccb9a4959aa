//! Shared by the state-machine tests and the acceptance harness.
#![allow(dead_code)]

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use facade_core::fixtures::synth_facade;
use facade_core::guidance::{GuidanceBackend, GuidanceError, Label};
use facade_core::rendering::{RenderBackend, RenderSpec};
use facade_core::synthesis::{ComponentPatch, CompositorBackend, SynthesisError};
use facade_core::{QuantBBox, SketchImage};
use facade_service::config::{BackendFactory, Backends, DefaultBackends, PipelineConfig};
use facade_service::run::{replay, PipelineRun};
use facade_service::store::parse_log;
use facade_service::{PipelineService, PlanEdit, RunState, ServiceError};
use image::{GrayImage, RgbImage};
use proptest::prelude::*;

/// Backends that fail once, on the next stage call, after `armed` is set.
/// `delay` slows every guidance call down.
#[derive(Default)]
pub struct Armable {
    pub armed: Arc<AtomicBool>,
    pub delay: Duration,
}

struct Trip<T: ?Sized> {
    inner: Arc<T>,
    armed: Arc<AtomicBool>,
    delay: Duration,
}

impl<T: ?Sized> Trip<T> {
    fn tripped(&self) -> bool {
        self.armed.swap(false, Ordering::SeqCst)
    }
}

impl GuidanceBackend for Trip<dyn GuidanceBackend> {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn detect(&self, sketch: &SketchImage) -> Result<String, GuidanceError> {
        std::thread::sleep(self.delay);
        if self.tripped() {
            return Err(GuidanceError::Backend("injected detect failure".into()));
        }
        self.inner.detect(sketch)
    }
    fn propose(
        &self,
        sketch: &SketchImage,
        text: &str,
        brief: &str,
    ) -> Result<String, GuidanceError> {
        std::thread::sleep(self.delay);
        if self.tripped() {
            return Err(GuidanceError::Backend("injected propose failure".into()));
        }
        self.inner.propose(sketch, text, brief)
    }
}

impl CompositorBackend for Trip<dyn CompositorBackend> {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn merge(
        &self,
        base: &GrayImage,
        patches: &[ComponentPatch],
        margin: f64,
    ) -> Result<GrayImage, SynthesisError> {
        if self.tripped() {
            return Err(SynthesisError::Backend("injected merge failure".into()));
        }
        self.inner.merge(base, patches, margin)
    }
}

impl RenderBackend for Trip<dyn RenderBackend> {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn render(&self, sketch: &GrayImage, spec: &RenderSpec) -> Result<RgbImage, String> {
        if self.tripped() {
            return Err("injected render failure".into());
        }
        self.inner.render(sketch, spec)
    }
}

impl BackendFactory for Armable {
    fn build(&self, cfg: &PipelineConfig) -> Backends {
        let b = DefaultBackends.build(cfg);
        Backends {
            guidance: Arc::new(Trip {
                inner: b.guidance,
                armed: self.armed.clone(),
                delay: self.delay,
            }),
            components: b.components,
            compositor: Arc::new(Trip {
                inner: b.compositor,
                armed: self.armed.clone(),
                delay: Duration::ZERO,
            }),
            render: Arc::new(Trip {
                inner: b.render,
                armed: self.armed.clone(),
                delay: Duration::ZERO,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Advance,
    Approve,
    /// Delete modification 0.
    Delete,
    /// Relabel modification 0; overlap validation ignores labels, so this is always valid.
    Relabel,
    /// Add a copy of modification 0, which must be rejected (IoU 1).
    AddDuplicate,
    Reset,
    ArmFailure,
}

pub fn action() -> impl Strategy<Value = Action> {
    prop_oneof![
        4 => Just(Action::Advance),
        2 => Just(Action::Approve),
        1 => Just(Action::Delete),
        1 => Just(Action::Relabel),
        1 => Just(Action::AddDuplicate),
        1 => Just(Action::Reset),
        1 => Just(Action::ArmFailure),
    ]
}

#[derive(Debug, PartialEq, Eq)]
enum Outcome {
    Ok,
    InvalidState,
    Rejected,
    BadRequest,
}

fn outcome<T>(r: &Result<T, ServiceError>) -> Result<Outcome, String> {
    match r {
        Ok(_) => Ok(Outcome::Ok),
        Err(ServiceError::InvalidState { .. }) => Ok(Outcome::InvalidState),
        Err(ServiceError::ValidationRejected(_)) => Ok(Outcome::Rejected),
        Err(ServiceError::BadRequest(_)) => Ok(Outcome::BadRequest),
        Err(e) => Err(format!("unexpected error {e}")),
    }
}

/// Reference model of the state machine: the state after `a`, and the expected outcome.
fn model(
    state: RunState,
    failed_from: Option<RunState>,
    mods: usize,
    armed: bool,
    a: Action,
) -> (RunState, Outcome) {
    use RunState::*;
    match a {
        Action::ArmFailure => (state, Outcome::Ok),
        Action::Advance => match state {
            Created | Detected | PlanApproved | Enhanced if armed => (Failed, Outcome::Ok),
            Created | Detected | PlanApproved | Enhanced => (state.next().unwrap(), Outcome::Ok),
            _ => (state, Outcome::InvalidState),
        },
        Action::Approve if state == Planned => (PlanApproved, Outcome::Ok),
        Action::Reset if state == Failed => (
            failed_from.expect("failed run records its origin"),
            Outcome::Ok,
        ),
        Action::Delete | Action::Relabel if state == Planned && mods == 0 => {
            (state, Outcome::BadRequest)
        }
        Action::Delete | Action::Relabel if state == Planned => (state, Outcome::Ok),
        Action::AddDuplicate if state == Planned && mods == 0 => (state, Outcome::BadRequest),
        Action::AddDuplicate if state == Planned => (state, Outcome::Rejected),
        _ => (state, Outcome::InvalidState),
    }
}

fn apply(
    svc: &PipelineService,
    id: &str,
    run: &PipelineRun,
    a: Action,
    factory: &Armable,
) -> Result<Outcome, String> {
    let first = run.plan.as_ref().and_then(|p| p.mods.first()).cloned();
    let q = |b: &facade_core::BBox| -> QuantBBox { b.quantize().expect("plan boxes quantize") };
    match a {
        Action::ArmFailure => {
            factory.armed.store(true, Ordering::SeqCst);
            Ok(Outcome::Ok)
        }
        Action::Advance => outcome(&svc.advance(id)),
        Action::Approve => outcome(&svc.approve(id)),
        Action::Reset => outcome(&svc.reset(id)),
        Action::Delete => outcome(&svc.edit_plan(id, PlanEdit::Delete { index: 0 })),
        Action::Relabel => {
            let label = match first.as_ref().map(|m| m.label) {
                Some(Label::Window) => Label::Door,
                _ => Label::Window,
            };
            outcome(&svc.edit_plan(id, PlanEdit::Relabel { index: 0, label }))
        }
        Action::AddDuplicate => match first {
            Some(m) => outcome(&svc.edit_plan(
                id,
                PlanEdit::Add {
                    label: m.label,
                    bbox_2d: q(&m.bbox),
                    index: None,
                    rationale: None,
                },
            )),
            // Nothing to duplicate: an out-of-range move stands in for it.
            None => outcome(&svc.edit_plan(
                id,
                PlanEdit::Move {
                    index: 0,
                    bbox_2d: QuantBBox::new(0, 0, 10, 10).unwrap(),
                },
            )),
        },
    }
}

/// Drive one run through `actions`, checking every step against the model and
/// every log prefix (clean and torn) against the state it must replay to.
pub fn check_state_machine(seed: u64, actions: &[Action]) -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let factory = Arc::new(Armable::default());
    let svc = PipelineService::open(dir.path(), factory.clone()).map_err(|e| e.to_string())?;
    let f = synth_facade(seed, 160, 120);
    let run = svc
        .create_run(&f.sketch.to_png(), f.sketch.meta().clone(), "brief", None)
        .map_err(|e| e.to_string())?;
    let id = run.run_id.clone();
    let mut snapshots = vec![run];

    for (step, &a) in actions.iter().enumerate() {
        let before = svc.get(&id).map_err(|e| e.to_string())?;
        let mods = before.plan.as_ref().map_or(0, |p| p.mods.len());
        let armed = factory.armed.load(Ordering::SeqCst) || a == Action::ArmFailure;
        let (want_state, want) = model(
            before.state,
            before.failure.as_ref().map(|f| f.from),
            mods,
            armed && a != Action::ArmFailure,
            a,
        );
        let got = apply(&svc, &id, &before, a, &factory)?;
        let after = svc.get(&id).map_err(|e| e.to_string())?;
        let ctx = format!("step {step} {a:?} from {}", before.state);
        if got != want {
            return Err(format!("{ctx}: outcome {got:?}, model says {want:?}"));
        }
        if after.state != want_state {
            return Err(format!(
                "{ctx}: state {}, model says {want_state}",
                after.state
            ));
        }
        if !after.artifacts_consistent() {
            return Err(format!(
                "{ctx}: artifacts {:?} inconsistent with {}",
                after.artifacts.keys(),
                after.state
            ));
        }
        if after != before {
            snapshots.push(after);
        }
    }

    let log = svc.store().log_text().map_err(|e| e.to_string())?;
    let lines: Vec<&str> = log.split_inclusive('\n').collect();
    if lines.len() != snapshots.len() {
        return Err(format!(
            "{} events for {} state changes",
            lines.len(),
            snapshots.len()
        ));
    }
    for k in 0..=lines.len() {
        let prefix: String = lines[..k].concat();
        let torn = match lines.get(k) {
            Some(next) => format!("{prefix}{}", &next[..next.len() / 2]),
            None => prefix.clone(),
        };
        for text in [&prefix, &torn] {
            let (events, _) = parse_log(text).map_err(|e| e.to_string())?;
            let runs = replay(&events).map_err(|e| e.to_string())?;
            let got = runs.get(&id);
            let want = k.checked_sub(1).map(|i| &snapshots[i]);
            if got != want {
                return Err(format!("replay of {k} events differs from the live state"));
            }
        }
    }

    // A real reopen from a torn copy of the log directory.
    let copy = tempfile::tempdir().map_err(|e| e.to_string())?;
    let k = lines.len() / 2;
    let torn = format!(
        "{}{}",
        lines[..k].concat(),
        lines.get(k).map_or("", |l| &l[..l.len() / 3])
    );
    std::fs::write(copy.path().join(facade_service::store::EVENTS_FILE), torn)
        .map_err(|e| e.to_string())?;
    let reopened =
        PipelineService::open(copy.path(), Arc::new(DefaultBackends)).map_err(|e| e.to_string())?;
    let got = reopened.get(&id).ok();
    let want = k.checked_sub(1).map(|i| snapshots[i].clone());
    if got != want {
        return Err(format!("reopened store at {k} events differs"));
    }
    Ok(())
}
