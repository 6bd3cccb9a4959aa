use std::sync::Arc;
use std::time::Duration;

use facade_core::dataset::DEFAULT_MATCH_THRESHOLD;
use facade_core::guidance::{
    GuidanceBackend, ProposeParams, StubGuidance, DEFAULT_OVERLAP_TOLERANCE,
};
use facade_core::rendering::{RenderBackend, StubRenderer, DEFAULT_MIN_FIDELITY};
use facade_core::sketch::DEFAULT_EDGE_THRESHOLD;
use facade_core::synthesis::{
    ComponentBackend, CompositorBackend, FeatherCompositor, StubComponents, StubCompositor,
    DEFAULT_MARGIN,
};
use serde::{Deserialize, Serialize};

use crate::http_guidance::HttpGuidance;

pub const DEFAULT_TIMEOUT_S: u64 = 120;
pub const DEFAULT_SEED: u64 = 7;

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("config field `{field}` = {value} is outside {range}")]
pub struct ConfigError {
    pub field: &'static str,
    pub value: String,
    pub range: &'static str,
}

/// Which guidance backend answers the two turns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GuidanceChoice {
    #[default]
    Stub,
    /// A model server speaking the JSON turn protocol in [`crate::http_guidance`].
    Http { endpoint: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ComponentChoice {
    #[default]
    Stub,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CompositorChoice {
    #[default]
    Stub,
    /// Soft-edged merge; its halo is clipped by the modification mask.
    Feather,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RenderChoice {
    #[default]
    Stub,
}

/// Everything a run needs to be reproduced. A copy is frozen into each run at creation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub guidance: GuidanceChoice,
    pub components: ComponentChoice,
    pub compositor: CompositorChoice,
    pub render: RenderChoice,
    /// Largest IoU a modification may have with the basis or another modification.
    pub tolerance: f64,
    /// Dilation of modification boxes, as a fraction of the canvas, when masking.
    pub margin: f64,
    pub match_threshold: f64,
    pub min_fidelity: f64,
    pub edge_threshold: u8,
    pub seed: u64,
    /// Per backend call.
    pub timeout_s: u64,
    /// Let drivers (CLI, batch) approve plans themselves. `advance` never does.
    pub auto_approve: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            guidance: GuidanceChoice::Stub,
            components: ComponentChoice::Stub,
            compositor: CompositorChoice::Stub,
            render: RenderChoice::Stub,
            tolerance: DEFAULT_OVERLAP_TOLERANCE,
            margin: DEFAULT_MARGIN,
            match_threshold: DEFAULT_MATCH_THRESHOLD,
            min_fidelity: DEFAULT_MIN_FIDELITY,
            edge_threshold: DEFAULT_EDGE_THRESHOLD,
            seed: DEFAULT_SEED,
            timeout_s: DEFAULT_TIMEOUT_S,
            auto_approve: false,
        }
    }
}

fn check(field: &'static str, v: f64, ok: bool, range: &'static str) -> Result<(), ConfigError> {
    if ok && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError {
            field,
            value: v.to_string(),
            range,
        })
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        check(
            "tolerance",
            self.tolerance,
            (0.0..1.0).contains(&self.tolerance),
            "[0, 1)",
        )?;
        check(
            "margin",
            self.margin,
            (0.0..=0.5).contains(&self.margin),
            "[0, 0.5]",
        )?;
        check(
            "match_threshold",
            self.match_threshold,
            self.match_threshold > 0.0 && self.match_threshold <= 1.0,
            "(0, 1]",
        )?;
        check(
            "min_fidelity",
            self.min_fidelity,
            (0.0..=1.0).contains(&self.min_fidelity),
            "[0, 1]",
        )?;
        check(
            "edge_threshold",
            self.edge_threshold as f64,
            self.edge_threshold > 0,
            "[1, 255]",
        )?;
        check(
            "timeout_s",
            self.timeout_s as f64,
            (1..=86_400).contains(&self.timeout_s),
            "[1, 86400]",
        )?;
        if let GuidanceChoice::Http { endpoint } = &self.guidance {
            if !(endpoint.starts_with("http://") || endpoint.starts_with("https://")) {
                return Err(ConfigError {
                    field: "guidance.endpoint",
                    value: endpoint.clone(),
                    range: "an http(s) URL",
                });
            }
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_s)
    }
}

/// Instantiated backends for one run.
#[derive(Clone)]
pub struct Backends {
    pub guidance: Arc<dyn GuidanceBackend>,
    pub components: Arc<dyn ComponentBackend>,
    pub compositor: Arc<dyn CompositorBackend>,
    pub render: Arc<dyn RenderBackend>,
}

/// Maps a config snapshot to backends. Tests swap in failing or slow ones.
pub trait BackendFactory: Send + Sync {
    fn build(&self, cfg: &PipelineConfig) -> Backends;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct DefaultBackends;

impl BackendFactory for DefaultBackends {
    fn build(&self, cfg: &PipelineConfig) -> Backends {
        let guidance: Arc<dyn GuidanceBackend> = match &cfg.guidance {
            GuidanceChoice::Stub => Arc::new(StubGuidance::new(ProposeParams::with_tolerance(
                cfg.tolerance,
            ))),
            GuidanceChoice::Http { endpoint } => {
                Arc::new(HttpGuidance::new(endpoint.clone(), cfg.timeout()))
            }
        };
        let compositor: Arc<dyn CompositorBackend> = match cfg.compositor {
            CompositorChoice::Stub => Arc::new(StubCompositor),
            CompositorChoice::Feather => Arc::new(FeatherCompositor::default()),
        };
        Backends {
            guidance,
            components: Arc::new(StubComponents),
            compositor,
            render: Arc::new(StubRenderer),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&text).unwrap(), c);
        assert_eq!(c.timeout_s, 120);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: PipelineConfig = serde_json::from_str(
            r#"{"compositor":"feather","guidance":{"kind":"http","endpoint":"http://h:1/vlm"}}"#,
        )
        .unwrap();
        assert_eq!(c.compositor, CompositorChoice::Feather);
        assert_eq!(c.margin, DEFAULT_MARGIN);
        c.validate().unwrap();
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"margins":0.1}"#).is_err());
    }

    #[test]
    fn out_of_range_values_are_named() {
        let c = PipelineConfig {
            tolerance: 1.0,
            ..Default::default()
        };
        assert_eq!(c.validate().unwrap_err().field, "tolerance");
        let c = PipelineConfig {
            margin: f64::NAN,
            ..Default::default()
        };
        assert_eq!(c.validate().unwrap_err().field, "margin");
        let c = PipelineConfig {
            guidance: GuidanceChoice::Http {
                endpoint: "ftp://x".into(),
            },
            ..Default::default()
        };
        assert_eq!(c.validate().unwrap_err().field, "guidance.endpoint");
    }
}
