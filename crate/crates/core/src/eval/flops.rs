//! Block-level FLOPs accounting. A multiply-add counts as two operations.
//!
//! Per computed block with `n` tokens and width `d`:
//!
//! * attention: `8 n d^2` for the Q, K, V and output projections, plus
//!   `2 n^2 d` for the scores and `2 n^2 d` for the weighted sum;
//! * MLP: `16 n d^2` for the two `d x 4d` projections.
//!
//! Reused blocks cost nothing. A trend correction costs `2 n d` per corrected
//! tensor. Normalization, embeddings and the sampler update are ignored.

use serde::{Deserialize, Serialize};

use crate::cache::{CacheSchedule, Decision, OptimizationPlan};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsEstimate {
    pub flops_total: f64,
    pub flops_baseline: f64,
    pub speedup: f64,
}

pub fn attention_flops(tokens: usize, width: usize) -> f64 {
    let (n, d) = (tokens as f64, width as f64);
    8.0 * n * d * d + 2.0 * n * n * d + 2.0 * n * n * d
}

pub fn mlp_flops(tokens: usize, width: usize) -> f64 {
    let (n, d) = (tokens as f64, width as f64);
    16.0 * n * d * d
}

pub fn block_flops(tokens: usize, width: usize) -> f64 {
    attention_flops(tokens, width) + mlp_flops(tokens, width)
}

/// Cost of correcting one cached tensor.
pub fn correction_flops(tokens: usize, width: usize) -> f64 {
    2.0 * tokens as f64 * width as f64
}

/// Cost of one (step, layer) cell.
pub fn cell_flops(
    tokens: usize,
    width: usize,
    schedule: &CacheSchedule,
    plan: Option<&OptimizationPlan>,
    t: usize,
    l: usize,
) -> f64 {
    match schedule.decision(t, l) {
        Decision::Compute => block_flops(tokens, width),
        Decision::Reuse => match plan {
            Some(p) if p.optimizes(t, l) => {
                p.placement.tensors() as f64 * correction_flops(tokens, width)
            }
            _ => 0.0,
        },
    }
}

pub fn flops_estimate(
    tokens: usize,
    width: usize,
    schedule: &CacheSchedule,
    plan: Option<&OptimizationPlan>,
) -> Result<FlopsEstimate> {
    if let Some(p) = plan {
        p.check_against(schedule)?;
    }
    if tokens == 0 || width == 0 {
        return Err(Error::config("model", "tokens and width must be positive"));
    }
    let block = block_flops(tokens, width);
    let flops_baseline = block * (schedule.steps() * schedule.layers()) as f64;
    let optimized_tensors = plan.map_or(0, |p| p.optimized_count() * p.placement.tensors());
    let flops_total = block * schedule.compute_count() as f64
        + optimized_tensors as f64 * correction_flops(tokens, width);
    Ok(FlopsEstimate {
        flops_total,
        flops_baseline,
        speedup: flops_baseline / flops_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::{Embedding, Placement};

    #[test]
    fn all_compute_is_unit_speedup() {
        let s = CacheSchedule::no_cache(20, 4).unwrap();
        let f = flops_estimate(8, 32, &s, None).unwrap();
        assert_eq!(f.speedup, 1.0);
        assert_eq!(f.flops_total, f.flops_baseline);
    }

    #[test]
    fn fora_two_halves_the_cost() {
        let s = CacheSchedule::fora(20, 28, 2).unwrap();
        let f = flops_estimate(256, 1152, &s, None).unwrap();
        assert!((f.speedup - 2.0).abs() < 1e-12);
    }

    #[test]
    fn correction_cost_is_closed_form() {
        let s = CacheSchedule::fora(20, 4, 2).unwrap();
        let grid: Vec<bool> = (0..80).map(|i| (i / 4) % 2 == 1 && i / 4 <= 9).collect();
        let plan = OptimizationPlan::new(
            &s,
            grid,
            0.0,
            0.5,
            0.01,
            Embedding::Multiplicative,
            Placement::Both,
        )
        .unwrap();
        let plain = flops_estimate(8, 32, &s, None).unwrap();
        let eoc = flops_estimate(8, 32, &s, Some(&plan)).unwrap();
        let cells = plan.optimized_count() as f64;
        assert_eq!(cells, 20.0);
        assert_eq!(
            eoc.flops_total - plain.flops_total,
            2.0 * cells * 2.0 * 8.0 * 32.0
        );

        let mut attn_only = plan.clone();
        attn_only.placement = Placement::Attn;
        let f = flops_estimate(8, 32, &s, Some(&attn_only)).unwrap();
        assert_eq!(f.flops_total - plain.flops_total, cells * 2.0 * 8.0 * 32.0);
    }

    #[test]
    fn total_is_sum_of_cells() {
        let s = CacheSchedule::fora(13, 3, 3).unwrap();
        let grid: Vec<bool> = (0..39)
            .map(|i| s.is_reuse(i / 3, i % 3) && i % 2 == 0)
            .collect();
        let plan = OptimizationPlan::new(
            &s,
            grid,
            0.5,
            0.1,
            0.01,
            Embedding::Additive,
            Placement::Both,
        )
        .unwrap();
        let f = flops_estimate(5, 6, &s, Some(&plan)).unwrap();
        let mut acc = 0.0;
        for t in 0..13 {
            for l in 0..3 {
                acc += cell_flops(5, 6, &s, Some(&plan), t, l);
            }
        }
        assert_eq!(acc, f.flops_total);
    }
}
