use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cache::CacheSchedule;
use crate::error::{Error, Result};

pub const PLAN_VERSION: u32 = 1;

/// How the trend is folded into a cached feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Embedding {
    /// `C * (1 + theta * E)`
    #[serde(rename = "mul")]
    Multiplicative,
    /// `C + theta * E`
    #[serde(rename = "add")]
    Additive,
}

/// Which sub-layers of a selected block get corrected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Both,
    Attn,
    Mlp,
}

impl Placement {
    pub fn attn(self) -> bool {
        matches!(self, Placement::Both | Placement::Attn)
    }

    pub fn mlp(self) -> bool {
        matches!(self, Placement::Both | Placement::Mlp)
    }

    pub fn tensors(self) -> usize {
        usize::from(self.attn()) + usize::from(self.mlp())
    }
}

/// The reuse cells selected for correction, with the hyperparameters that
/// selected them.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationPlan {
    steps: usize,
    layers: usize,
    optimize: Vec<bool>,
    pub gamma: f64,
    pub omega: f64,
    pub theta: f64,
    pub embedding: Embedding,
    pub placement: Placement,
    pub fingerprint: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    version: u32,
    #[serde(rename = "T")]
    steps: usize,
    #[serde(rename = "L")]
    layers: usize,
    gamma: f64,
    omega: f64,
    theta: f64,
    embedding: Embedding,
    placement: Placement,
    fingerprint: Option<String>,
    optimize: Vec<Vec<u8>>,
}

pub(crate) fn check_hyper(gamma: f64, omega: f64, theta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::config(
            "eoc.gamma",
            format!("{gamma} outside [0, 1]"),
        ));
    }
    if !(omega.is_finite() && omega >= 0.0) {
        return Err(Error::config(
            "eoc.omega",
            format!("{omega} must be finite and >= 0"),
        ));
    }
    if !(theta.is_finite() && theta >= 0.0) {
        return Err(Error::config(
            "eoc.theta",
            format!("{theta} must be finite and >= 0"),
        ));
    }
    Ok(())
}

impl OptimizationPlan {
    /// Builds a plan from an explicit grid, rejecting any selected cell that
    /// is not a reuse cell of `schedule`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        schedule: &CacheSchedule,
        optimize: Vec<bool>,
        gamma: f64,
        omega: f64,
        theta: f64,
        embedding: Embedding,
        placement: Placement,
    ) -> Result<Self> {
        check_hyper(gamma, omega, theta)?;
        let (steps, layers) = (schedule.steps(), schedule.layers());
        if optimize.len() != steps * layers {
            return Err(Error::Plan(format!(
                "grid has {} cells, schedule has {}",
                optimize.len(),
                steps * layers
            )));
        }
        let plan = OptimizationPlan {
            steps,
            layers,
            optimize,
            gamma,
            omega,
            theta,
            embedding,
            placement,
            fingerprint: None,
        };
        plan.check_against(schedule)?;
        Ok(plan)
    }

    /// A plan that optimizes nothing.
    pub fn empty(schedule: &CacheSchedule, theta: f64, embedding: Embedding) -> Result<Self> {
        let n = schedule.steps() * schedule.layers();
        Self::new(
            schedule,
            vec![false; n],
            0.0,
            0.0,
            theta,
            embedding,
            Placement::Both,
        )
    }

    pub fn check_against(&self, schedule: &CacheSchedule) -> Result<()> {
        if (self.steps, self.layers) != (schedule.steps(), schedule.layers()) {
            return Err(Error::Plan(format!(
                "plan is {}x{}, schedule is {}x{}",
                self.steps,
                self.layers,
                schedule.steps(),
                schedule.layers()
            )));
        }
        for t in 0..self.steps {
            for l in 0..self.layers {
                if self.optimizes(t, l) && !schedule.is_reuse(t, l) {
                    return Err(Error::Plan(format!(
                        "cell (t={t}, l={l}) is optimized but not reused"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn optimizes(&self, t: usize, l: usize) -> bool {
        t < self.steps && l < self.layers && self.optimize[t * self.layers + l]
    }

    pub fn optimized_cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.steps)
            .flat_map(move |t| (0..self.layers).map(move |l| (t, l)))
            .filter(move |&(t, l)| self.optimizes(t, l))
    }

    pub fn optimized_count(&self) -> usize {
        self.optimize.iter().filter(|b| **b).count()
    }

    /// Same selection with a different correction strength.
    pub fn with_theta(&self, theta: f64) -> Result<Self> {
        check_hyper(self.gamma, self.omega, theta)?;
        Ok(OptimizationPlan {
            theta,
            ..self.clone()
        })
    }

    pub fn to_json(&self) -> String {
        let file = PlanFile {
            version: PLAN_VERSION,
            steps: self.steps,
            layers: self.layers,
            gamma: self.gamma,
            omega: self.omega,
            theta: self.theta,
            embedding: self.embedding,
            placement: self.placement,
            fingerprint: self.fingerprint.clone(),
            optimize: (0..self.steps)
                .map(|t| {
                    (0..self.layers)
                        .map(|l| u8::from(self.optimizes(t, l)))
                        .collect()
                })
                .collect(),
        };
        let value = serde_json::to_value(&file).expect("plan serializes");
        serde_json::to_string_pretty(&value).expect("value serializes") + "\n"
    }

    /// Parses a plan file. The result is not yet checked against a schedule.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let f: PlanFile = serde_json::from_slice(bytes)?;
        if f.version != PLAN_VERSION {
            return Err(Error::Plan(format!(
                "unsupported plan version {}",
                f.version
            )));
        }
        check_hyper(f.gamma, f.omega, f.theta)?;
        if f.optimize.len() != f.steps || f.optimize.iter().any(|r| r.len() != f.layers) {
            return Err(Error::Plan(format!(
                "optimize grid is not {}x{}",
                f.steps, f.layers
            )));
        }
        let mut optimize = Vec::with_capacity(f.steps * f.layers);
        for row in &f.optimize {
            for &v in row {
                optimize.push(match v {
                    0 => false,
                    1 => true,
                    v => return Err(Error::Plan(format!("optimize value {v} is not 0 or 1"))),
                });
            }
        }
        Ok(OptimizationPlan {
            steps: f.steps,
            layers: f.layers,
            optimize,
            gamma: f.gamma,
            omega: f.omega,
            theta: f.theta,
            embedding: f.embedding,
            placement: f.placement,
            fingerprint: f.fingerprint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Loads a plan and validates it against `schedule` before returning.
    pub fn load(path: &Path, schedule: &CacheSchedule) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let plan = Self::from_json(&bytes).map_err(|e| match e {
            Error::Json(j) => Error::integrity(path, j.to_string()),
            other => other,
        })?;
        plan.check_against(schedule)?;
        Ok(plan)
    }
}
