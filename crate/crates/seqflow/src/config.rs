//! Run configuration: one TOML file covering model geometry, training,
//! sampling, Jacobi inversion, streaming, and data generation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticVideoSpec;
use crate::error::{Error, Result};
use crate::jacobi::{JacobiPlan, WarmStart};
use crate::model::{Condition, ModelGeometry};
use crate::sampler::SampleOpts;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelGeometry,
    pub train: TrainConfig,
    pub sample: SampleSection,
    pub jacobi: JacobiSection,
    pub stream: StreamSection,
    pub data: DataSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    /// Frames to generate; 0 means the model's full horizon.
    pub frames: usize,
    pub temperature: f64,
    pub guidance: f64,
    pub sigma_test: f64,
    pub correct: bool,
    /// Motion class to condition on; absent means unconditional.
    pub class: Option<usize>,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            frames: 0,
            temperature: 1.0,
            guidance: 1.0,
            sigma_test: 0.1,
            correct: false,
            class: None,
        }
    }
}

impl SampleSection {
    pub fn opts(&self) -> SampleOpts {
        SampleOpts {
            temperature: self.temperature,
            guidance: self.guidance,
            sigma_test: self.sigma_test,
            correct: self.correct,
        }
    }

    pub fn condition(&self) -> Condition {
        match self.class {
            Some(c) => Condition::Class(c),
            None => Condition::Null,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JacobiSection {
    pub first_block_size: usize,
    pub later_block_factor: usize,
    pub tau: f64,
    pub max_iters: Option<usize>,
    /// "prev_frame" or "zeros".
    pub warm_start: String,
    pub epsilon: f64,
}

impl Default for JacobiSection {
    fn default() -> Self {
        let p = JacobiPlan::default();
        JacobiSection {
            first_block_size: p.first_block_size,
            later_block_factor: p.later_block_factor,
            tau: p.tau,
            max_iters: p.max_iters,
            warm_start: "prev_frame".into(),
            epsilon: p.epsilon,
        }
    }
}

impl JacobiSection {
    pub fn plan(&self) -> Result<JacobiPlan> {
        let warm_start = match self.warm_start.as_str() {
            "prev_frame" => WarmStart::PrevFrame,
            "zeros" => WarmStart::Zeros,
            other => {
                return Err(Error::Config(format!(
                    "unknown warm_start '{other}' (expected 'prev_frame' or 'zeros')"
                )))
            }
        };
        if !(self.tau > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::Config("jacobi tau and epsilon must be positive".into()));
        }
        Ok(JacobiPlan {
            first_block_size: self.first_block_size,
            later_block_factor: self.later_block_factor,
            tau: self.tau,
            max_iters: self.max_iters,
            warm_start,
            epsilon: self.epsilon,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSection {
    /// Window size W in frames.
    pub window: usize,
    /// Total frames to stream; may exceed the model horizon.
    pub frames: usize,
}

impl Default for StreamSection {
    fn default() -> Self {
        StreamSection { window: 4, frames: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub count: usize,
    pub seed: u64,
    /// Held-out fraction for evaluation.
    pub holdout_frac: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { count: 1000, seed: 1234, holdout_frac: 0.05 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.model;
        let side = (g.frame_size as f64).sqrt().round() as usize;
        if side * side != g.frame_size {
            return Err(Error::Config(format!(
                "frame_size {} must be a perfect square",
                g.frame_size
            )));
        }
        if g.n_frames == 0 || g.channels == 0 {
            return Err(Error::Config("model geometry must be non-degenerate".into()));
        }
        if let Some(c) = self.sample.class {
            if c >= g.n_classes {
                return Err(Error::Config(format!(
                    "sample class {c} out of range (n_classes = {})",
                    g.n_classes
                )));
            }
        }
        if self.stream.window == 0 {
            return Err(Error::Config("stream window must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.data.holdout_frac) {
            return Err(Error::Config("holdout_frac must lie in [0, 1)".into()));
        }
        self.jacobi.plan()?;
        Ok(())
    }

    pub fn data_spec(&self) -> SyntheticVideoSpec {
        SyntheticVideoSpec {
            n_frames: self.model.n_frames,
            frame_size: self.model.frame_size,
            channels: self.model.channels,
            count: self.data.count,
            seed: self.data.seed,
        }
    }
}
