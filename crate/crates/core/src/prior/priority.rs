use std::cmp::Ordering;

use crate::cache::{plan::check_hyper, CacheSchedule, Embedding, OptimizationPlan, Placement};
use crate::error::{Error, Result};
use crate::prior::TrendTable;

/// Priority of a reused cell: `gamma * v + (1 - gamma) * (1 - t / T)`.
pub fn priority(v: f64, t: usize, steps: usize, gamma: f64) -> f64 {
    gamma * v + (1.0 - gamma) * (1.0 - t as f64 / steps as f64)
}

/// Priorities over the whole grid; exactly zero on compute cells.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorityGrid {
    schedule: CacheSchedule,
    p: Vec<f64>,
    pub gamma: f64,
}

impl PriorityGrid {
    pub fn get(&self, t: usize, l: usize) -> f64 {
        self.p[t * self.schedule.layers() + l]
    }

    pub fn schedule(&self) -> &CacheSchedule {
        &self.schedule
    }

    pub fn max(&self) -> f64 {
        self.p.iter().copied().fold(0.0, f64::max)
    }

    /// Reuse cells by descending priority; ties go to lower `t`, then lower `l`.
    pub fn ranked(&self) -> Vec<((usize, usize), f64)> {
        let mut cells: Vec<_> = self
            .schedule
            .reuse_cells()
            .map(|(t, l)| ((t, l), self.get(t, l)))
            .collect();
        cells.sort_by(|(ca, pa), (cb, pb)| {
            pb.partial_cmp(pa)
                .unwrap_or(Ordering::Equal)
                .then(ca.cmp(cb))
        });
        cells
    }
}

pub fn priorities(tt: &TrendTable, schedule: &CacheSchedule, gamma: f64) -> Result<PriorityGrid> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::config(
            "eoc.gamma",
            format!("{gamma} outside [0, 1]"),
        ));
    }
    if (tt.steps(), tt.layers()) != (schedule.steps(), schedule.layers()) {
        return Err(Error::config(
            "cache",
            format!(
                "trend table is {}x{}, schedule is {}x{}",
                tt.steps(),
                tt.layers(),
                schedule.steps(),
                schedule.layers()
            ),
        ));
    }
    let steps = schedule.steps();
    let mut p = vec![0.0; steps * schedule.layers()];
    for (t, l) in schedule.reuse_cells() {
        let v = tt
            .v(t, l)
            .ok_or_else(|| Error::Plan(format!("no trend at reused cell (t={t}, l={l})")))?;
        p[t * schedule.layers() + l] = priority(v, t, steps, gamma);
    }
    Ok(PriorityGrid {
        schedule: schedule.clone(),
        p,
        gamma,
    })
}

/// Optimizes exactly the cells with `p > omega`.
pub fn select_plan(
    pg: &PriorityGrid,
    omega: f64,
    theta: f64,
    embedding: Embedding,
    placement: Placement,
) -> Result<OptimizationPlan> {
    check_hyper(pg.gamma, omega, theta)?;
    let grid = pg.p.iter().map(|&p| p > omega).collect();
    OptimizationPlan::new(
        &pg.schedule,
        grid,
        pg.gamma,
        omega,
        theta,
        embedding,
        placement,
    )
}

/// Optimizes the top `round(fraction * reuse cells)` cells of
/// [`PriorityGrid::ranked`], recording a threshold that separates them from
/// the rest when the priorities allow it.
pub fn select_plan_fraction(
    pg: &PriorityGrid,
    fraction: f64,
    theta: f64,
    embedding: Embedding,
    placement: Placement,
) -> Result<OptimizationPlan> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config(
            "eoc.omega_fraction",
            format!("{fraction} outside [0, 1]"),
        ));
    }
    let ranked = pg.ranked();
    let k = (fraction * ranked.len() as f64).round() as usize;
    let omega = match k {
        0 => pg.max(),
        k if k == ranked.len() => ranked.last().map_or(0.0, |(_, p)| p / 2.0),
        k => {
            let (hi, lo) = (ranked[k - 1].1, ranked[k].1);
            if hi > lo {
                (hi + lo) / 2.0
            } else {
                lo
            }
        }
    };
    let layers = pg.schedule.layers();
    let mut grid = vec![false; pg.p.len()];
    for ((t, l), _) in &ranked[..k] {
        grid[t * layers + l] = true;
    }
    OptimizationPlan::new(
        &pg.schedule,
        grid,
        pg.gamma,
        omega,
        theta,
        embedding,
        placement,
    )
}

/// Threshold that, with `gamma = 0`, selects reuse cells with `t <= cap`.
pub fn omega_for_index_cap(cap: usize, steps: usize) -> f64 {
    (1.0 - (cap as f64 + 0.5) / steps as f64).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use crate::prior::{TrendCell, TrendMode};

    fn table(s: &CacheSchedule, v: f64) -> TrendTable {
        let cells = (0..s.steps())
            .flat_map(|t| (0..s.layers()).map(move |l| (t, l)))
            .map(|(t, l)| {
                (t >= 1).then(|| TrendCell {
                    attn: Tensor::zeros(&[1, 2]),
                    mlp: Tensor::zeros(&[1, 2]),
                    v: v + l as f64 * 0.01,
                    anchor: t - 1,
                })
            })
            .collect();
        TrendTable::from_cells(TrendMode::Adjacent, s.steps(), s.layers(), cells).unwrap()
    }

    #[test]
    fn priority_examples() {
        assert!((priority(0.2, 5, 20, 0.5) - 0.475).abs() < 1e-15);
        assert_eq!(priority(0.3, 7, 20, 1.0), 0.3);
        assert_eq!(priority(0.3, 5, 20, 0.0), 0.75);
    }

    #[test]
    fn compute_cells_are_zero() {
        let s = CacheSchedule::fora(20, 2, 2).unwrap();
        let pg = priorities(&table(&s, 0.4), &s, 0.5).unwrap();
        for t in (0..20).step_by(2) {
            assert_eq!(pg.get(t, 0), 0.0);
        }
        assert!(pg.get(1, 0) > 0.0);
        assert!(priorities(&table(&s, 0.4), &s, 1.5).is_err());
    }

    #[test]
    fn thresholds_select_expected_cells() {
        let s = CacheSchedule::fora(20, 2, 2).unwrap();
        let pg = priorities(&table(&s, 0.4), &s, 0.5).unwrap();
        let none = select_plan(
            &pg,
            pg.max() + 1.0,
            0.01,
            Embedding::Multiplicative,
            Placement::Both,
        )
        .unwrap();
        assert_eq!(none.optimized_count(), 0);
        let all = select_plan(&pg, 0.0, 0.01, Embedding::Multiplicative, Placement::Both).unwrap();
        assert_eq!(all.optimized_count(), s.reuse_count());
    }

    #[test]
    fn index_cap_with_position_only_priorities() {
        let s = CacheSchedule::fora(20, 3, 2).unwrap();
        let pg = priorities(&table(&s, 0.4), &s, 0.0).unwrap();
        let plan = select_plan(
            &pg,
            omega_for_index_cap(9, 20),
            0.01,
            Embedding::Multiplicative,
            Placement::Both,
        )
        .unwrap();
        let steps: Vec<usize> = plan.optimized_cells().map(|(t, _)| t).collect();
        assert_eq!(steps.len(), 15);
        assert!(steps.iter().all(|&t| t <= 9 && t % 2 == 1));

        let frac = select_plan_fraction(&pg, 0.5, 0.01, Embedding::Multiplicative, Placement::Both)
            .unwrap();
        assert_eq!(
            frac.optimized_cells().collect::<Vec<_>>(),
            plan.optimized_cells().collect::<Vec<_>>()
        );
        assert!((frac.omega - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fraction_tie_break_prefers_early_then_low_layer() {
        let s = CacheSchedule::fora(4, 2, 2).unwrap();
        let cells = (0..8)
            .map(|i| {
                let t = i / 2;
                (t >= 1).then(|| TrendCell {
                    attn: Tensor::zeros(&[1, 2]),
                    mlp: Tensor::zeros(&[1, 2]),
                    v: 1.0,
                    anchor: t - 1,
                })
            })
            .collect();
        let tt = TrendTable::from_cells(TrendMode::Adjacent, 4, 2, cells).unwrap();
        let pg = priorities(&tt, &s, 1.0).unwrap();
        let plan = select_plan_fraction(&pg, 0.25, 0.0, Embedding::Multiplicative, Placement::Both)
            .unwrap();
        assert_eq!(plan.optimized_cells().collect::<Vec<_>>(), vec![(1, 0)]);
    }
}
