use serde::{Deserialize, Serialize};

use crate::cache::CacheSchedule;
use crate::error::{Error, Result};
use crate::numerics::{mean_abs_sum, Tensor};
use crate::prior::{PriorKnowledge, Provenance};

/// Which prior-knowledge step a trend is measured from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendMode {
    /// `E_t = K_t - K_{t-1}`, defined for every `t >= 1`.
    Adjacent,
    /// `E_t = K_t - K_a` where `a` is the compute step whose cache is reused
    /// at `t`; defined on reuse cells only.
    Cumulative,
}

impl TrendMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrendMode::Adjacent => "adjacent",
            TrendMode::Cumulative => "cumulative",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendCell {
    pub attn: Tensor,
    pub mlp: Tensor,
    /// Mean of `|E_attn| + |E_mlp|`.
    pub v: f64,
    /// Step the difference is taken from.
    pub anchor: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendTable {
    mode: TrendMode,
    steps: usize,
    layers: usize,
    cells: Vec<Option<TrendCell>>,
    provenance: Option<Provenance>,
}

impl TrendTable {
    pub fn from_cells(
        mode: TrendMode,
        steps: usize,
        layers: usize,
        cells: Vec<Option<TrendCell>>,
    ) -> Result<Self> {
        if cells.len() != steps * layers {
            return Err(Error::config(
                "trend",
                format!("expected {} cells", steps * layers),
            ));
        }
        for (i, c) in cells.iter().enumerate() {
            if let Some(c) = c {
                let t = i / layers;
                if !(c.v.is_finite() && c.v >= 0.0) {
                    return Err(Error::config(
                        "trend",
                        format!("v at cell {i} is not a finite non-negative value"),
                    ));
                }
                if c.anchor >= t {
                    return Err(Error::config(
                        "trend",
                        format!("anchor {} not before step {t}", c.anchor),
                    ));
                }
            }
        }
        Ok(TrendTable {
            mode,
            steps,
            layers,
            cells,
            provenance: None,
        })
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = Some(provenance);
        self
    }

    pub fn mode(&self) -> TrendMode {
        self.mode
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    pub fn get(&self, t: usize, l: usize) -> Option<&TrendCell> {
        if t >= self.steps || l >= self.layers {
            return None;
        }
        self.cells[t * self.layers + l].as_ref()
    }

    pub fn cells(&self) -> impl Iterator<Item = ((usize, usize), &TrendCell)> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter_map(move |(i, c)| c.as_ref().map(|c| ((i / self.layers, i % self.layers), c)))
    }

    pub fn v(&self, t: usize, l: usize) -> Option<f64> {
        self.get(t, l).map(|c| c.v)
    }
}

fn cell(pk: &PriorKnowledge, t: usize, l: usize, anchor: usize) -> Result<TrendCell> {
    let attn = pk.attn(t, l).sub(pk.attn(anchor, l))?;
    let mlp = pk.mlp(t, l).sub(pk.mlp(anchor, l))?;
    let v = mean_abs_sum(&attn, &mlp)?;
    Ok(TrendCell {
        attn,
        mlp,
        v,
        anchor,
    })
}

/// Trend tensors and error magnitudes from prior knowledge.
///
/// Cumulative mode needs the schedule to locate each reuse cell's anchor.
pub fn trend(
    pk: &PriorKnowledge,
    mode: TrendMode,
    schedule: Option<&CacheSchedule>,
) -> Result<TrendTable> {
    let (steps, layers) = (pk.steps(), pk.layers());
    let mut cells = vec![None; steps * layers];
    match mode {
        TrendMode::Adjacent => {
            if steps < 2 {
                return Err(Error::config(
                    "sampler.T",
                    "adjacent trends need at least two steps",
                ));
            }
            for t in 1..steps {
                for l in 0..layers {
                    cells[t * layers + l] = Some(cell(pk, t, l, t - 1)?);
                }
            }
        }
        TrendMode::Cumulative => {
            let s = schedule.ok_or_else(|| {
                Error::config(
                    "eoc.trend_mode",
                    "cumulative trends require a cache schedule",
                )
            })?;
            if (s.steps(), s.layers()) != (steps, layers) {
                return Err(Error::config(
                    "cache",
                    format!(
                        "schedule is {}x{}, prior knowledge is {steps}x{layers}",
                        s.steps(),
                        s.layers()
                    ),
                ));
            }
            for (t, l) in s.reuse_cells() {
                let anchor = s.anchor(t, l).ok_or(Error::ScheduleCell {
                    t,
                    l,
                    msg: "reuse cell without an earlier compute".into(),
                })?;
                cells[t * layers + l] = Some(cell(pk, t, l, anchor)?);
            }
        }
    }
    Ok(
        TrendTable::from_cells(mode, steps, layers, cells)?
            .with_provenance(pk.provenance().clone()),
    )
}
