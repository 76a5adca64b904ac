//! JSON expansion plans:
//!
//! ```json
//! {"steps": [{"transform": "mlp_expand", "target": 48,
//!             "init": {"kind": "random_normal", "seed": 1, "stddev": 0.02}}]}
//! ```
//!
//! `target` is the new size for the `*_expand` transforms, the number of heads
//! for `add_heads`, and the 1-based position for `add_layer`. An optional
//! `unsafe_fill` init object overrides the zero-constrained blocks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transforms::{InitPolicy, TransformKind, TransformSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanStep {
    pub transform: String,
    pub target: usize,
    pub init: InitPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unsafe_fill: Option<InitPolicy>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plan {
    pub steps: Vec<PlanStep>,
}

impl Plan {
    pub fn parse(text: &str) -> Result<Plan> {
        serde_json::from_str(text).map_err(|e| Error::Plan(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Plan> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn from_specs(specs: &[TransformSpec]) -> Plan {
        Plan {
            steps: specs
                .iter()
                .map(|s| PlanStep {
                    transform: s.kind.name().to_string(),
                    target: s.kind.target(),
                    init: s.init,
                    unsafe_fill: s.unsafe_fill,
                })
                .collect(),
        }
    }

    pub fn has_unsafe(&self) -> bool {
        self.steps.iter().any(|s| s.unsafe_fill.is_some())
    }

    pub fn to_specs(&self) -> Result<Vec<TransformSpec>> {
        self.steps
            .iter()
            .enumerate()
            .map(|(i, step)| {
                let kind = TransformKind::from_name(&step.transform, step.target)
                    .ok_or_else(|| Error::Plan(format!("step {i}: unknown transform {:?}", step.transform)))?;
                let spec = TransformSpec {
                    kind,
                    init: step.init,
                    unsafe_fill: step.unsafe_fill,
                };
                spec.check().map_err(|e| Error::Plan(format!("step {i}: {e}")))?;
                Ok(spec)
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}
