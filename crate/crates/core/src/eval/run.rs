use serde::{Deserialize, Serialize};

use crate::cache::{CacheSchedule, CachedExecutor, OptimizationPlan};
use crate::error::{Error, Result};
use crate::model::{BlockExecutor, BlockOutput, Conditioning, PlainExecutor, ToyDit};
use crate::numerics::Tensor;
use crate::prior::TrendTable;
use crate::sampler::{run_sampling, HookBus, NoiseSchedule, SampleOptions, SampleRun};

/// Wraps an executor and keeps a copy of every block result.
struct Recorder<'e> {
    inner: &'e mut dyn BlockExecutor,
    layers: usize,
    cells: Vec<Option<BlockOutput>>,
}

impl BlockExecutor for Recorder<'_> {
    fn execute(
        &mut self,
        model: &ToyDit,
        step: usize,
        layer: usize,
        x: &Tensor,
        cond: Conditioning,
    ) -> Result<BlockOutput> {
        let out = self.inner.execute(model, step, layer, x, cond)?;
        self.cells[step * self.layers + layer] = Some(out.clone());
        Ok(out)
    }
}

/// A sampling run with every block's output and used features.
#[derive(Debug, Clone, PartialEq)]
pub struct CapturedRun {
    pub run: SampleRun,
    pub steps: usize,
    pub layers: usize,
    pub cells: Vec<BlockOutput>,
}

impl CapturedRun {
    pub fn cell(&self, t: usize, l: usize) -> &BlockOutput {
        &self.cells[t * self.layers + l]
    }
}

fn captured(
    model: &ToyDit,
    sched: &NoiseSchedule,
    class_id: usize,
    seed: u64,
    executor: &mut dyn BlockExecutor,
) -> Result<CapturedRun> {
    let (steps, layers) = (sched.steps(), model.depth());
    let mut rec = Recorder {
        inner: executor,
        layers,
        cells: vec![None; steps * layers],
    };
    let run = run_sampling(
        model,
        sched,
        class_id,
        seed,
        &mut rec,
        &mut HookBus::new(),
        SampleOptions {
            keep_trajectory: true,
        },
    )?;
    let cells = rec
        .cells
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Comparison("a block was never executed".into()))?;
    Ok(CapturedRun {
        run,
        steps,
        layers,
        cells,
    })
}

/// Fully computed reference run.
pub fn oracle_run(
    model: &ToyDit,
    sched: &NoiseSchedule,
    class_id: usize,
    seed: u64,
) -> Result<CapturedRun> {
    captured(model, sched, class_id, seed, &mut PlainExecutor)
}

/// Run under a cache schedule, optionally with a correction plan.
pub fn cached_run(
    model: &ToyDit,
    sched: &NoiseSchedule,
    class_id: usize,
    seed: u64,
    schedule: &CacheSchedule,
    plan: Option<&OptimizationPlan>,
    trends: Option<&TrendTable>,
) -> Result<CapturedRun> {
    if (schedule.steps(), schedule.layers()) != (sched.steps(), model.depth()) {
        return Err(Error::config(
            "cache",
            format!(
                "schedule is {}x{}, run is {}x{}",
                schedule.steps(),
                schedule.layers(),
                sched.steps(),
                model.depth()
            ),
        ));
    }
    let mut exec = CachedExecutor::new(schedule, plan, trends)?;
    captured(model, sched, class_id, seed, &mut exec)
}

/// Deviation of one cell of a cached run from the oracle. Zero on compute
/// cells by definition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationRecord {
    pub t: usize,
    pub l: usize,
    pub reused: bool,
    pub optimized: bool,
    pub dev_attn: f64,
    pub dev_mlp: f64,
    pub dev_out: f64,
}

impl DeviationRecord {
    /// Mean of the attention and MLP feature deviations.
    pub fn dev_f(&self) -> f64 {
        0.5 * (self.dev_attn + self.dev_mlp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub records: Vec<DeviationRecord>,
    /// Mean absolute deviation of the final sample.
    pub final_dev: f64,
    pub final_rel_l2: f64,
}

pub fn compare(
    oracle: &CapturedRun,
    cached: &CapturedRun,
    schedule: &CacheSchedule,
    plan: Option<&OptimizationPlan>,
) -> Result<Comparison> {
    if (oracle.run.seed, oracle.run.class_id) != (cached.run.seed, cached.run.class_id) {
        return Err(Error::Comparison(format!(
            "oracle is (seed {}, class {}), cached run is (seed {}, class {})",
            oracle.run.seed, oracle.run.class_id, cached.run.seed, cached.run.class_id
        )));
    }
    if (oracle.steps, oracle.layers) != (cached.steps, cached.layers)
        || (schedule.steps(), schedule.layers()) != (oracle.steps, oracle.layers)
    {
        return Err(Error::Comparison(
            "runs and schedule disagree on grid size".into(),
        ));
    }
    let mut records = Vec::with_capacity(oracle.cells.len());
    for t in 0..oracle.steps {
        for l in 0..oracle.layers {
            let reused = schedule.is_reuse(t, l);
            let optimized = plan.is_some_and(|p| p.optimizes(t, l));
            let (dev_attn, dev_mlp, dev_out) = if reused {
                let (o, c) = (oracle.cell(t, l), cached.cell(t, l));
                (
                    c.f_attn.mean_abs_diff(&o.f_attn)?,
                    c.f_mlp.mean_abs_diff(&o.f_mlp)?,
                    c.out.mean_abs_diff(&o.out)?,
                )
            } else {
                (0.0, 0.0, 0.0)
            };
            records.push(DeviationRecord {
                t,
                l,
                reused,
                optimized,
                dev_attn,
                dev_mlp,
                dev_out,
            });
        }
    }
    Ok(Comparison {
        records,
        final_dev: cached
            .run
            .final_sample
            .mean_abs_diff(&oracle.run.final_sample)?,
        final_rel_l2: cached
            .run
            .final_sample
            .relative_l2(&oracle.run.final_sample)?,
    })
}
