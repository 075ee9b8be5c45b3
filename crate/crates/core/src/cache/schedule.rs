use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Compute,
    Reuse,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScheduleOrigin {
    Fora { period: usize },
    Mask,
}

/// Per-(step, layer) compute/reuse grid.
///
/// Invariants, checked at construction: step 0 computes every layer, and every
/// reuse cell has an earlier compute cell at the same layer (the first implies
/// the second).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheSchedule {
    steps: usize,
    layers: usize,
    decisions: Vec<Decision>,
    origin: ScheduleOrigin,
}

/// On-disk mask layout: `mask[t][l] == 1` means reuse.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskFile {
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    pub mask: Vec<Vec<u8>>,
}

impl CacheSchedule {
    /// Compute at every `N`-th step (`t mod N == 0`), reuse in between.
    pub fn fora(steps: usize, layers: usize, period: usize) -> Result<Self> {
        if period == 0 {
            return Err(Error::config(
                "cache.N",
                "caching period must be at least 1",
            ));
        }
        if steps == 0 || layers == 0 {
            return Err(Error::Schedule(
                "schedule needs at least one step and layer".into(),
            ));
        }
        let decisions = (0..steps)
            .flat_map(|t| {
                let d = if t % period == 0 {
                    Decision::Compute
                } else {
                    Decision::Reuse
                };
                std::iter::repeat_n(d, layers)
            })
            .collect();
        Ok(CacheSchedule {
            steps,
            layers,
            decisions,
            origin: ScheduleOrigin::Fora { period },
        })
    }

    /// Every cell computes.
    pub fn no_cache(steps: usize, layers: usize) -> Result<Self> {
        Self::fora(steps, layers, 1)
    }

    pub fn from_mask(mask: &MaskFile) -> Result<Self> {
        if mask.steps == 0 || mask.layers == 0 {
            return Err(Error::Schedule(
                "mask needs at least one step and layer".into(),
            ));
        }
        if mask.mask.len() != mask.steps {
            return Err(Error::Schedule(format!(
                "mask has {} rows, T = {}",
                mask.mask.len(),
                mask.steps
            )));
        }
        let mut decisions = Vec::with_capacity(mask.steps * mask.layers);
        for (t, row) in mask.mask.iter().enumerate() {
            if row.len() != mask.layers {
                return Err(Error::Schedule(format!(
                    "mask row {t} has {} entries, L = {}",
                    row.len(),
                    mask.layers
                )));
            }
            for (l, &cell) in row.iter().enumerate() {
                decisions.push(match cell {
                    0 => Decision::Compute,
                    1 => Decision::Reuse,
                    v => {
                        return Err(Error::ScheduleCell {
                            t,
                            l,
                            msg: format!("mask value {v} is not 0 or 1"),
                        })
                    }
                });
            }
        }
        let s = CacheSchedule {
            steps: mask.steps,
            layers: mask.layers,
            decisions,
            origin: ScheduleOrigin::Mask,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn from_mask_json(bytes: &[u8]) -> Result<Self> {
        let mask: MaskFile = serde_json::from_slice(bytes)?;
        Self::from_mask(&mask)
    }

    pub fn load_mask(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_mask_json(&bytes)
    }

    pub fn to_mask(&self) -> MaskFile {
        MaskFile {
            steps: self.steps,
            layers: self.layers,
            mask: (0..self.steps)
                .map(|t| {
                    (0..self.layers)
                        .map(|l| u8::from(self.decision(t, l) == Decision::Reuse))
                        .collect()
                })
                .collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        for l in 0..self.layers {
            if self.decision(0, l) == Decision::Reuse {
                return Err(Error::ScheduleCell {
                    t: 0,
                    l,
                    msg: "reuse at the first step has nothing cached".into(),
                });
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

    pub fn origin(&self) -> &ScheduleOrigin {
        &self.origin
    }

    pub fn period(&self) -> Option<usize> {
        match self.origin {
            ScheduleOrigin::Fora { period } => Some(period),
            ScheduleOrigin::Mask => None,
        }
    }

    /// Panics if the cell is outside the grid.
    pub fn decision(&self, t: usize, l: usize) -> Decision {
        assert!(
            t < self.steps && l < self.layers,
            "cell ({t}, {l}) outside schedule"
        );
        self.decisions[t * self.layers + l]
    }

    pub fn get(&self, t: usize, l: usize) -> Option<Decision> {
        (t < self.steps && l < self.layers).then(|| self.decisions[t * self.layers + l])
    }

    pub fn is_reuse(&self, t: usize, l: usize) -> bool {
        self.get(t, l) == Some(Decision::Reuse)
    }

    /// Latest compute step at or before `t` for layer `l`.
    pub fn anchor(&self, t: usize, l: usize) -> Option<usize> {
        (0..=t.min(self.steps.checked_sub(1)?))
            .rev()
            .find(|&s| self.decision(s, l) == Decision::Compute)
    }

    pub fn reuse_cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.steps)
            .flat_map(move |t| (0..self.layers).map(move |l| (t, l)))
            .filter(move |&(t, l)| self.decision(t, l) == Decision::Reuse)
    }

    pub fn reuse_count(&self) -> usize {
        self.decisions
            .iter()
            .filter(|d| **d == Decision::Reuse)
            .count()
    }

    pub fn compute_count(&self) -> usize {
        self.decisions.len() - self.reuse_count()
    }

    /// Fraction of block executions replaced by reuse.
    pub fn caching_level(&self) -> f64 {
        self.reuse_count() as f64 / self.decisions.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fora_n2_reuses_odd_steps() {
        let s = CacheSchedule::fora(20, 3, 2).unwrap();
        for t in 0..20 {
            for l in 0..3 {
                assert_eq!(s.is_reuse(t, l), t % 2 == 1);
            }
        }
        assert_eq!(s.caching_level(), 0.5);
    }

    #[test]
    fn fora_degenerate_and_n4() {
        let s = CacheSchedule::fora(20, 2, 1).unwrap();
        assert_eq!(s.caching_level(), 0.0);
        let s = CacheSchedule::fora(20, 2, 4).unwrap();
        let computes: Vec<usize> = (0..20).filter(|&t| !s.is_reuse(t, 0)).collect();
        assert_eq!(computes, vec![0, 4, 8, 12, 16]);
        assert_eq!(s.caching_level(), 0.75);
        assert_eq!(s.anchor(7, 1), Some(4));
        assert!(CacheSchedule::fora(20, 2, 0).is_err());
    }

    #[test]
    fn mask_round_trip_and_equivalence() {
        let fora = CacheSchedule::fora(6, 2, 3).unwrap();
        let json = serde_json::to_vec(&fora.to_mask()).unwrap();
        let back = CacheSchedule::from_mask_json(&json).unwrap();
        assert_eq!(back.origin(), &ScheduleOrigin::Mask);
        for t in 0..6 {
            for l in 0..2 {
                assert_eq!(back.decision(t, l), fora.decision(t, l));
            }
        }
        let zeros = br#"{"T":3,"L":2,"mask":[[0,0],[0,0],[0,0]]}"#;
        assert_eq!(
            CacheSchedule::from_mask_json(zeros)
                .unwrap()
                .caching_level(),
            0.0
        );
    }

    #[test]
    fn mask_rejects_first_step_reuse() {
        let bad = br#"{"T":2,"L":3,"mask":[[0,0,1],[1,1,1]]}"#;
        match CacheSchedule::from_mask_json(bad) {
            Err(Error::ScheduleCell { t: 0, l: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mask_rejects_malformed() {
        for bad in [
            &br#"{"T":2,"L":1,"mask":[[0]]}"#[..],
            br#"{"T":2,"L":1,"mask":[[0],[2]]}"#,
            br#"{"T":1,"L":2,"mask":[[0]]}"#,
            br#"{"T":0,"L":0,"mask":[]}"#,
            br#"not json"#,
        ] {
            assert!(CacheSchedule::from_mask_json(bad).is_err());
        }
    }
}
