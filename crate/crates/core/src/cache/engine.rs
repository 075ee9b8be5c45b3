//! Block execution under a cache schedule.
//!
//! Three branches per block:
//!
//! * compute: full evaluation, raw sub-layer outputs stored in the cache;
//! * reuse: cached raw outputs re-enter the residual stream through ALN with
//!   the current step's modulation;
//! * reuse with correction: the cached outputs are first adjusted by the
//!   trend, `C * (1 + theta * E)` (or `C + theta * E` for the additive
//!   variant), on the sub-layers the plan's placement selects.

use crate::cache::{CacheSchedule, Decision, Embedding, OptimizationPlan};
use crate::error::{Error, Result};
use crate::model::{BlockExecutor, BlockOutput, Conditioning, ToyDit};
use crate::numerics::Tensor;
use crate::prior::{TrendMode, TrendTable};

/// Per-layer cached raw sub-layer outputs.
#[derive(Debug, Clone, Default)]
pub struct CacheStore {
    attn: Vec<Option<Tensor>>,
    mlp: Vec<Option<Tensor>>,
    filled_at: Vec<Option<usize>>,
}

impl CacheStore {
    pub fn new(layers: usize) -> Self {
        CacheStore {
            attn: vec![None; layers],
            mlp: vec![None; layers],
            filled_at: vec![None; layers],
        }
    }

    pub fn write(&mut self, l: usize, step: usize, f_attn: Tensor, f_mlp: Tensor) {
        self.attn[l] = Some(f_attn);
        self.mlp[l] = Some(f_mlp);
        self.filled_at[l] = Some(step);
    }

    /// Cached `(f_attn, f_mlp)` for layer `l`; errors if never written.
    pub fn read(&self, l: usize, step: usize) -> Result<(&Tensor, &Tensor)> {
        match (self.attn.get(l), self.mlp.get(l)) {
            (Some(Some(a)), Some(Some(m))) => Ok((a, m)),
            _ => Err(Error::CacheState {
                t: step,
                l,
                msg: "reuse before any compute filled the slot".into(),
            }),
        }
    }

    pub fn filled_at(&self, l: usize) -> Option<usize> {
        self.filled_at.get(l).copied().flatten()
    }
}

fn correct(cached: &Tensor, trend: &Tensor, theta: f64, embedding: Embedding) -> Result<Tensor> {
    match embedding {
        Embedding::Multiplicative => cached.mul(&trend.scalar_affine(theta, 1.0)?),
        Embedding::Additive => cached.add(&trend.scalar_affine(theta, 0.0)?),
    }
}

#[allow(clippy::too_many_arguments)]
fn execute_with(
    embedding: Embedding,
    model: &ToyDit,
    l: usize,
    x: &Tensor,
    cond: Conditioning,
    step: usize,
    schedule: &CacheSchedule,
    store: &mut CacheStore,
    plan: Option<&OptimizationPlan>,
    trends: Option<&TrendTable>,
) -> Result<BlockOutput> {
    let decision = schedule.get(step, l).ok_or(Error::ScheduleCell {
        t: step,
        l,
        msg: "cell outside schedule".into(),
    })?;
    if decision == Decision::Compute {
        let out = model.block_forward(l, x, cond)?;
        store.write(l, step, out.f_attn.clone(), out.f_mlp.clone());
        return Ok(out);
    }

    let (cached_attn, cached_mlp) = store.read(l, step)?;
    let (mut f_attn, mut f_mlp) = (cached_attn.clone(), cached_mlp.clone());
    if let Some(plan) = plan.filter(|p| p.optimizes(step, l)) {
        let cell = trends
            .and_then(|tt| tt.get(step, l))
            .ok_or_else(|| Error::Plan(format!("no trend available at (t={step}, l={l})")))?;
        if trends.map(|tt| tt.mode()) == Some(TrendMode::Cumulative)
            && store.filled_at(l) != Some(cell.anchor)
        {
            return Err(Error::Plan(format!(
                "trend at (t={step}, l={l}) is anchored at step {}, cache was filled at {:?}",
                cell.anchor,
                store.filled_at(l)
            )));
        }
        if plan.placement.attn() {
            f_attn = correct(&f_attn, &cell.attn, plan.theta, embedding)?;
        }
        if plan.placement.mlp() {
            f_mlp = correct(&f_mlp, &cell.mlp, plan.theta, embedding)?;
        }
    }
    let out = model.compose_block(l, x, cond, &f_attn, &f_mlp)?;
    Ok(BlockOutput {
        out,
        f_attn,
        f_mlp,
        computed: false,
    })
}

/// Runs one block, correcting reused features multiplicatively where the
/// plan selects the cell.
#[allow(clippy::too_many_arguments)]
pub fn execute_block(
    model: &ToyDit,
    l: usize,
    x: &Tensor,
    cond: Conditioning,
    step: usize,
    schedule: &CacheSchedule,
    store: &mut CacheStore,
    plan: Option<&OptimizationPlan>,
    trends: Option<&TrendTable>,
) -> Result<BlockOutput> {
    execute_with(
        Embedding::Multiplicative,
        model,
        l,
        x,
        cond,
        step,
        schedule,
        store,
        plan,
        trends,
    )
}

/// As [`execute_block`], but the trend is added: `C + theta * E`.
#[allow(clippy::too_many_arguments)]
pub fn execute_block_additive(
    model: &ToyDit,
    l: usize,
    x: &Tensor,
    cond: Conditioning,
    step: usize,
    schedule: &CacheSchedule,
    store: &mut CacheStore,
    plan: Option<&OptimizationPlan>,
    trends: Option<&TrendTable>,
) -> Result<BlockOutput> {
    execute_with(
        Embedding::Additive,
        model,
        l,
        x,
        cond,
        step,
        schedule,
        store,
        plan,
        trends,
    )
}

/// [`BlockExecutor`] owning the cache for one sampling run. Dispatches on
/// the plan's embedding mode.
#[derive(Debug)]
pub struct CachedExecutor<'a> {
    schedule: &'a CacheSchedule,
    plan: Option<&'a OptimizationPlan>,
    trends: Option<&'a TrendTable>,
    store: CacheStore,
}

impl<'a> CachedExecutor<'a> {
    pub fn new(
        schedule: &'a CacheSchedule,
        plan: Option<&'a OptimizationPlan>,
        trends: Option<&'a TrendTable>,
    ) -> Result<Self> {
        if let Some(p) = plan {
            p.check_against(schedule)?;
            if p.optimized_count() > 0 && trends.is_none() {
                return Err(Error::Plan(
                    "plan selects cells but no trend table was given".into(),
                ));
            }
        }
        Ok(CachedExecutor {
            schedule,
            plan,
            trends,
            store: CacheStore::new(schedule.layers()),
        })
    }

    pub fn store(&self) -> &CacheStore {
        &self.store
    }
}

impl BlockExecutor for CachedExecutor<'_> {
    fn execute(
        &mut self,
        model: &ToyDit,
        step: usize,
        layer: usize,
        x: &Tensor,
        cond: Conditioning,
    ) -> Result<BlockOutput> {
        let embedding = self.plan.map_or(Embedding::Multiplicative, |p| p.embedding);
        execute_with(
            embedding,
            model,
            layer,
            x,
            cond,
            step,
            self.schedule,
            &mut self.store,
            self.plan,
            self.trends,
        )
    }
}
