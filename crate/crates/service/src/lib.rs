//! Orchestration around the facade pipeline stages: a resumable run state
//! machine with a human approval gate, an event-sourced artifact store, a
//! batch harness and the HTTP API.

pub mod batch;
pub mod config;
pub mod http;
pub mod http_guidance;
pub mod run;
pub mod service;
pub mod store;

pub use config::PipelineConfig;
pub use run::{PipelineRun, PlanEdit, RunState};
pub use service::{PipelineService, ServiceError};
