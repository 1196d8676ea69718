//! Run configuration. Every field has a default, so all commands work without
//! a config file; a JSON document can override any subset and CLI flags
//! override the document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::OpConfig;
use crate::error::{Error, Result};
use crate::pyramid::STRIDES;
use crate::training::SgdConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub grad_epsilon: f64,
    pub grad_threshold: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { grad_epsilon: 1e-5, grad_threshold: 1e-4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamInit {
    /// Random initialization from the run seed.
    Seeded,
    /// Residual-identity parameters: the whole path reproduces its input.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub channels: usize,
    pub heads: usize,
    pub strides: [u32; 5],
    pub temperature: f64,
    pub batch: usize,
    pub s2_height: usize,
    pub s2_width: usize,
    pub seed: u64,
    /// Synthetic box sample count for the mismatch metric.
    pub boxes: usize,
    pub param_init: ParamInit,
    pub tolerances: Tolerances,
    pub sgd: SgdConfig,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            channels: 256,
            heads: 2,
            strides: STRIDES,
            temperature: 1.0,
            batch: 1,
            s2_height: 64,
            s2_width: 64,
            seed: 42,
            boxes: 500,
            param_init: ParamInit::Seeded,
            tolerances: Tolerances::default(),
            sgd: SgdConfig::default(),
        }
    }
}

impl HarnessConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(HarnessConfig::default()),
            Some(p) => {
                let body = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&body)
                    .map_err(|e| Error::config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.batch == 0 || self.s2_height == 0 || self.s2_width == 0 {
            return Err(Error::config(format!(
                "channels/batch/s2 extents must be positive, got {}x{} S2 {}x{}",
                self.channels, self.batch, self.s2_height, self.s2_width
            )));
        }
        if self.strides != STRIDES {
            return Err(Error::config(format!(
                "strides must be exactly {STRIDES:?}, got {:?}",
                self.strides
            )));
        }
        self.op_config().validate(self.channels)?;
        self.sgd.validate()?;
        if !(self.tolerances.grad_epsilon > 0.0) {
            return Err(Error::config("grad_epsilon must be positive".to_string()));
        }
        Ok(())
    }

    pub fn op_config(&self) -> OpConfig {
        OpConfig { heads: self.heads, temperature: self.temperature }
    }

    /// Cross-level block configuration: single head over the five levels,
    /// sharing the run temperature.
    pub fn cross_config(&self) -> OpConfig {
        OpConfig { heads: 1, temperature: self.temperature }
    }
}
