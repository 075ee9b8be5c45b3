//! Run configuration shared by every CLI command.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::cache::{Embedding, Placement};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::prior::{extraction_seed, TrendMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(default = "default_schedule_kind")]
    pub schedule: ScheduleKind,
}

fn default_schedule_kind() -> ScheduleKind {
    ScheduleKind::Linear
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    None,
    Fora,
    Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheConfig {
    pub mode: CacheMode,
    #[serde(rename = "N", default = "default_period")]
    pub period: usize,
    #[serde(default)]
    pub mask_path: Option<PathBuf>,
}

fn default_period() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EocConfig {
    pub enabled: bool,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub omega: Option<f64>,
    #[serde(default)]
    pub omega_fraction: Option<f64>,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default = "default_embedding")]
    pub embedding: Embedding,
    #[serde(default = "default_placement")]
    pub placement: Placement,
    #[serde(default = "default_trend_mode")]
    pub trend_mode: TrendMode,
}

fn default_gamma() -> f64 {
    0.5
}

fn default_theta() -> f64 {
    0.01
}

fn default_embedding() -> Embedding {
    Embedding::Multiplicative
}

fn default_placement() -> Placement {
    Placement::Both
}

fn default_trend_mode() -> TrendMode {
    TrendMode::Cumulative
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionConfig {
    #[serde(rename = "Q")]
    pub runs: usize,
    pub classes: Vec<usize>,
    pub seed: u64,
}

/// Evaluation pairs are `(seeds[i], classes[i % classes.len()])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub seeds: Vec<u64>,
    pub classes: Vec<usize>,
    /// Allow evaluation seeds and classes to coincide with extraction ones.
    #[serde(default)]
    pub overlap: bool,
}

impl EvaluationConfig {
    pub fn pairs(&self) -> Vec<(u64, usize)> {
        self.seeds
            .iter()
            .enumerate()
            .map(|(i, &s)| (s, self.classes[i % self.classes.len()]))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub cache: CacheConfig,
    pub eoc: EocConfig,
    pub extraction: ExtractionConfig,
    pub evaluation: EvaluationConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("eoc-out")
}

impl Default for RunConfig {
    /// The desk-scale lab setup: 4 blocks of width 32 over 8 tokens, 20 DDIM
    /// steps, FORA with `N = 2`, correction on the first ten steps.
    fn default() -> Self {
        RunConfig {
            model: ModelConfig {
                modulation_scale: 1.0,
                ..ModelConfig::default()
            },
            sampler: SamplerConfig {
                steps: 20,
                schedule: ScheduleKind::Linear,
            },
            cache: CacheConfig {
                mode: CacheMode::Fora,
                period: 2,
                mask_path: None,
            },
            eoc: EocConfig {
                enabled: true,
                gamma: 0.0,
                omega: None,
                omega_fraction: Some(0.5),
                theta: default_theta(),
                embedding: default_embedding(),
                placement: default_placement(),
                trend_mode: default_trend_mode(),
            },
            extraction: ExtractionConfig {
                runs: 16,
                classes: (0..8).collect(),
                seed: 1000,
            },
            evaluation: EvaluationConfig {
                seeds: (5000..5064).collect(),
                classes: (8..16).collect(),
                overlap: false,
            },
            output_dir: default_output_dir(),
        }
    }
}

fn unit_interval(field: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::config(field, format!("{v} outside [0, 1]")))
    }
}

fn non_negative(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::config(field, format!("{v} must be finite and >= 0")))
    }
}

impl RunConfig {
    /// Parses JSON without validating it.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::config("<config>", e.to_string()))
    }

    pub fn to_json(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string_pretty(&v).expect("value serializes") + "\n"
    }

    /// Checks every field; the first violation is reported with its path.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let steps = self.sampler.steps;
        if steps == 0 {
            return Err(Error::config("sampler.T", "must be at least 1"));
        }
        if steps > self.model.max_timesteps {
            return Err(Error::config(
                "sampler.T",
                format!(
                    "{steps} exceeds model.max_timesteps {}",
                    self.model.max_timesteps
                ),
            ));
        }

        match self.cache.mode {
            CacheMode::None if self.eoc.enabled => {
                return Err(Error::config(
                    "eoc.enabled",
                    "correction needs a cache mode other than `none`",
                ))
            }
            CacheMode::Fora if self.cache.period == 0 => {
                return Err(Error::config("cache.N", "must be at least 1"))
            }
            CacheMode::Mask if self.cache.mask_path.is_none() => {
                return Err(Error::config(
                    "cache.mask_path",
                    "required when cache.mode is `mask`",
                ))
            }
            _ => {}
        }

        let eoc = &self.eoc;
        unit_interval("eoc.gamma", eoc.gamma)?;
        non_negative("eoc.theta", eoc.theta)?;
        if let Some(o) = eoc.omega {
            non_negative("eoc.omega", o)?;
        }
        if let Some(f) = eoc.omega_fraction {
            unit_interval("eoc.omega_fraction", f)?;
        }
        if eoc.enabled && eoc.omega.is_some() == eoc.omega_fraction.is_some() {
            return Err(Error::config(
                "eoc.omega",
                "set exactly one of `omega` and `omega_fraction`",
            ));
        }
        if eoc.enabled && eoc.trend_mode == TrendMode::Adjacent && steps < 2 {
            return Err(Error::config(
                "eoc.trend_mode",
                "adjacent trends need sampler.T >= 2",
            ));
        }

        let classes = self.model.num_classes;
        let ex = &self.extraction;
        if ex.runs == 0 {
            return Err(Error::config("extraction.Q", "must be at least 1"));
        }
        if ex.classes.is_empty() {
            return Err(Error::config("extraction.classes", "must not be empty"));
        }
        if let Some(c) = ex.classes.iter().find(|&&c| c >= classes) {
            return Err(Error::config(
                "extraction.classes",
                format!("class {c} >= num_classes {classes}"),
            ));
        }

        let ev = &self.evaluation;
        if ev.seeds.is_empty() {
            return Err(Error::config("evaluation.seeds", "must not be empty"));
        }
        if ev.classes.is_empty() {
            return Err(Error::config("evaluation.classes", "must not be empty"));
        }
        if let Some(c) = ev.classes.iter().find(|&&c| c >= classes) {
            return Err(Error::config(
                "evaluation.classes",
                format!("class {c} >= num_classes {classes}"),
            ));
        }
        if !ev.overlap {
            let extraction_seeds: Vec<u64> =
                (0..ex.runs).map(|q| extraction_seed(ex.seed, q)).collect();
            if let Some(s) = ev.seeds.iter().find(|s| extraction_seeds.contains(s)) {
                return Err(Error::config(
                    "evaluation.seeds",
                    format!(
                        "seed {s} is also an extraction seed; set evaluation.overlap to allow it"
                    ),
                ));
            }
            if let Some(c) = ev.classes.iter().find(|c| ex.classes.contains(c)) {
                return Err(Error::config(
                    "evaluation.classes",
                    format!(
                        "class {c} is also an extraction class; set evaluation.overlap to allow it"
                    ),
                ));
            }
        }
        Ok(())
    }
}
