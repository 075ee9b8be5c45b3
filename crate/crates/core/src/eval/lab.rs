use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{CacheSchedule, Embedding, OptimizationPlan, Placement, ScheduleOrigin};
use crate::config::{CacheMode, RunConfig};
use crate::error::{Error, Result};
use crate::eval::flops::flops_estimate;
use crate::eval::run::{cached_run, compare, oracle_run, CapturedRun, DeviationRecord};
use crate::model::ToyDit;
use crate::numerics::Tensor;
use crate::prior::{
    extract, omega_for_index_cap, priorities, select_plan, select_plan_fraction, trend,
    PriorKnowledge, PriorityGrid, TrendMode, TrendTable,
};
use crate::sampler::NoiseSchedule;

pub const REPORT_VERSION: u32 = 1;

pub const SUMMARY_HEADER: &str =
    "caching_level,theta,gamma,omega,N,mean_f_deviation,final_deviation,flops_total,speedup";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSummary {
    /// `none`, `fora` or `mask`.
    pub origin: String,
    #[serde(rename = "N")]
    pub period: Option<usize>,
    pub caching_level: f64,
    pub reuse_cells: usize,
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(rename = "L")]
    pub layers: usize,
}

impl ScheduleSummary {
    pub fn of(schedule: &CacheSchedule) -> Self {
        let (origin, period) = match schedule.origin() {
            _ if schedule.reuse_count() == 0 => ("none", None),
            ScheduleOrigin::Mask => ("mask", None),
            ScheduleOrigin::Fora { period } => ("fora", Some(*period)),
        };
        ScheduleSummary {
            origin: origin.to_string(),
            period,
            caching_level: schedule.caching_level(),
            reuse_cells: schedule.reuse_count(),
            steps: schedule.steps(),
            layers: schedule.layers(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub gamma: f64,
    pub omega: f64,
    pub theta: f64,
    pub embedding: Embedding,
    pub placement: Placement,
    pub trend_mode: TrendMode,
    pub optimized_cells: usize,
}

/// Metrics of one configuration, averaged over its evaluation pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub label: String,
    pub config: RunConfig,
    pub schedule: ScheduleSummary,
    pub plan: Option<PlanSummary>,
    /// Per-cell deviations, each the mean over evaluation pairs.
    pub cells: Vec<DeviationRecord>,
    /// Mean of `dev_f` over reused cells.
    pub mean_f_deviation: f64,
    /// Mean of `dev_f` over optimized cells, if any.
    pub mean_f_deviation_optimized: Option<f64>,
    pub mean_out_deviation: f64,
    pub final_deviation: f64,
    pub final_rel_l2: f64,
    pub flops_total: f64,
    pub flops_baseline: f64,
    pub speedup: f64,
    pub seeds: Vec<u64>,
    pub classes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<f64>,
}

impl RunReport {
    pub fn cell(&self, t: usize, l: usize) -> &DeviationRecord {
        &self.cells[t * self.schedule.layers + l]
    }

    /// Mean `dev_f` over the given cells; `None` for an empty set.
    pub fn mean_f_deviation_at(&self, cells: &[(usize, usize)]) -> Option<f64> {
        if cells.is_empty() {
            return None;
        }
        Some(
            cells
                .iter()
                .map(|&(t, l)| self.cell(t, l).dev_f())
                .sum::<f64>()
                / cells.len() as f64,
        )
    }

    pub fn optimized_cells(&self) -> Vec<(usize, usize)> {
        self.cells
            .iter()
            .filter(|r| r.optimized)
            .map(|r| (r.t, r.l))
            .collect()
    }

    fn summary_row(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        let p = self.plan.as_ref();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.schedule.caching_level,
            opt(p.map(|p| p.theta)),
            opt(p.map(|p| p.gamma)),
            opt(p.map(|p| p.omega)),
            self.schedule
                .period
                .map(|n| n.to_string())
                .unwrap_or_default(),
            self.mean_f_deviation,
            self.final_deviation,
            self.flops_total,
            self.speedup
        )
    }
}

/// Writes `report.json` and `summary.csv` under `dir`.
pub fn report_emit(reports: &[RunReport], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let value = serde_json::to_value(reports)?;
    let json = serde_json::to_string_pretty(&value)? + "\n";
    let path = dir.join("report.json");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;

    let mut csv = String::from(SUMMARY_HEADER);
    csv.push('\n');
    for r in reports {
        writeln!(csv, "{}", r.summary_row()).expect("writing to a String");
    }
    let path = dir.join("summary.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))
}

/// A resolved correction: plan plus the trends it applies.
#[derive(Debug, Clone)]
pub struct Correction {
    pub plan: OptimizationPlan,
    pub trends: TrendTable,
}

/// Shared state for evaluating configurations that differ only in their
/// cache and correction settings: the model, the noise schedule, the
/// evaluation pairs with their oracle runs, and lazily the prior knowledge.
pub struct Lab {
    config: RunConfig,
    model: ToyDit,
    sched: NoiseSchedule,
    pairs: Vec<(u64, usize)>,
    oracles: Vec<CapturedRun>,
    prior: Option<PriorKnowledge>,
    timing: bool,
}

impl Lab {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = ToyDit::new(config.model.clone())?;
        let sched = NoiseSchedule::linear(config.sampler.steps)?;
        let pairs = config.evaluation.pairs();
        let oracles = pairs
            .par_iter()
            .map(|&(seed, class)| oracle_run(&model, &sched, class, seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(Lab {
            config,
            model,
            sched,
            pairs,
            oracles,
            prior: None,
            timing: false,
        })
    }

    /// Record wall time in reports. Off by default so that reports are
    /// byte-deterministic.
    pub fn with_timing(mut self, on: bool) -> Self {
        self.timing = on;
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &ToyDit {
        &self.model
    }

    pub fn noise_schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn oracles(&self) -> &[CapturedRun] {
        &self.oracles
    }

    /// Uses an already extracted prior after checking it fits the model.
    pub fn set_prior(&mut self, pk: PriorKnowledge) -> Result<()> {
        pk.check_model(&self.model, self.sched.steps())?;
        self.prior = Some(pk);
        Ok(())
    }

    pub fn prior(&mut self) -> Result<&PriorKnowledge> {
        if self.prior.is_none() {
            let ex = &self.config.extraction;
            self.prior = Some(extract(
                &self.model,
                &self.sched,
                &ex.classes,
                ex.runs,
                ex.seed,
            )?);
        }
        Ok(self.prior.as_ref().expect("prior just set"))
    }

    fn check_variant(&self, variant: &RunConfig) -> Result<()> {
        variant.validate()?;
        let base = &self.config;
        if variant.model != base.model || variant.sampler != base.sampler {
            return Err(Error::config(
                "model",
                "variant changes the model or sampler of the lab",
            ));
        }
        if variant.evaluation != base.evaluation {
            return Err(Error::config(
                "evaluation",
                "variant changes the evaluation pairs of the lab",
            ));
        }
        if variant.eoc.enabled && variant.extraction != base.extraction && self.prior.is_some() {
            return Err(Error::config(
                "extraction",
                "variant changes the extraction settings of the lab",
            ));
        }
        Ok(())
    }

    pub fn cache_schedule(&self, variant: &RunConfig) -> Result<CacheSchedule> {
        let (steps, layers) = (variant.sampler.steps, variant.model.depth);
        match variant.cache.mode {
            CacheMode::None => CacheSchedule::no_cache(steps, layers),
            CacheMode::Fora => CacheSchedule::fora(steps, layers, variant.cache.period),
            CacheMode::Mask => {
                let path = variant.cache.mask_path.as_deref().ok_or_else(|| {
                    Error::config("cache.mask_path", "required when cache.mode is `mask`")
                })?;
                let s = CacheSchedule::load_mask(path)?;
                if (s.steps(), s.layers()) != (steps, layers) {
                    return Err(Error::config(
                        "cache.mask_path",
                        format!(
                            "mask is {}x{}, run is {steps}x{layers}",
                            s.steps(),
                            s.layers()
                        ),
                    ));
                }
                Ok(s)
            }
        }
    }

    /// Trend table and priority grid for `variant` under `schedule`.
    pub fn priorities(
        &mut self,
        variant: &RunConfig,
        schedule: &CacheSchedule,
    ) -> Result<(TrendTable, PriorityGrid)> {
        let mode = variant.eoc.trend_mode;
        let gamma = variant.eoc.gamma;
        let pk = self.prior()?;
        let tt = trend(pk, mode, Some(schedule))?;
        let pg = priorities(&tt, schedule, gamma)?;
        Ok((tt, pg))
    }

    /// Resolves the plan `variant` asks for; `None` when correction is off.
    pub fn correction(
        &mut self,
        variant: &RunConfig,
        schedule: &CacheSchedule,
    ) -> Result<Option<Correction>> {
        if !variant.eoc.enabled {
            return Ok(None);
        }
        let (trends, pg) = self.priorities(variant, schedule)?;
        let eoc = &variant.eoc;
        let mut plan = match (eoc.omega, eoc.omega_fraction) {
            (Some(omega), _) => select_plan(&pg, omega, eoc.theta, eoc.embedding, eoc.placement)?,
            (None, Some(f)) => {
                select_plan_fraction(&pg, f, eoc.theta, eoc.embedding, eoc.placement)?
            }
            (None, None) => {
                return Err(Error::config(
                    "eoc.omega",
                    "set exactly one of `omega` and `omega_fraction`",
                ))
            }
        };
        plan.fingerprint = Some(self.model.fingerprint());
        Ok(Some(Correction { plan, trends }))
    }

    /// Evaluates `variant` over every evaluation pair, returning the report
    /// and the final samples in pair order.
    pub fn evaluate_with(
        &self,
        variant: &RunConfig,
        label: &str,
        schedule: &CacheSchedule,
        correction: Option<&Correction>,
    ) -> Result<(RunReport, Vec<Tensor>)> {
        self.check_variant(variant)?;
        let start = Instant::now();
        let plan = correction.map(|c| &c.plan);
        let trends = correction.map(|c| &c.trends);
        if let Some(p) = plan {
            p.check_against(schedule)?;
            if let Some(fp) = &p.fingerprint {
                let want = self.model.fingerprint();
                if *fp != want {
                    return Err(Error::Fingerprint {
                        expected: want,
                        found: fp.clone(),
                    });
                }
            }
        }
        let results = self
            .pairs
            .par_iter()
            .zip(self.oracles.par_iter())
            .map(|(&(seed, class), oracle)| {
                let run = cached_run(
                    &self.model,
                    &self.sched,
                    class,
                    seed,
                    schedule,
                    plan,
                    trends,
                )?;
                let cmp = compare(oracle, &run, schedule, plan)?;
                Ok((cmp, run.run.final_sample))
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e: Error| match e {
                Error::Comparison(m) => Error::Comparison(format!("{label}: {m}")),
                other => other,
            })?;

        let n = results.len() as f64;
        let mut cells = results[0].0.records.clone();
        for c in &mut cells {
            c.dev_attn = 0.0;
            c.dev_mlp = 0.0;
            c.dev_out = 0.0;
        }
        let (mut final_dev, mut final_rel) = (0.0, 0.0);
        for (cmp, _) in &results {
            for (acc, r) in cells.iter_mut().zip(&cmp.records) {
                acc.dev_attn += r.dev_attn;
                acc.dev_mlp += r.dev_mlp;
                acc.dev_out += r.dev_out;
            }
            final_dev += cmp.final_dev;
            final_rel += cmp.final_rel_l2;
        }
        for c in &mut cells {
            c.dev_attn /= n;
            c.dev_mlp /= n;
            c.dev_out /= n;
        }
        let mean_over = |pred: &dyn Fn(&DeviationRecord) -> bool,
                         f: &dyn Fn(&DeviationRecord) -> f64| {
            let sel: Vec<f64> = cells.iter().filter(|r| pred(r)).map(f).collect();
            (!sel.is_empty()).then(|| sel.iter().sum::<f64>() / sel.len() as f64)
        };
        let mean_f_deviation = mean_over(&|r| r.reused, &|r| r.dev_f()).unwrap_or(0.0);
        let mean_out_deviation = mean_over(&|r| r.reused, &|r| r.dev_out).unwrap_or(0.0);
        let mean_f_deviation_optimized = mean_over(&|r| r.optimized, &|r| r.dev_f());

        let cfg = &self.config.model;
        let flops = flops_estimate(cfg.tokens, cfg.width, schedule, plan)?;
        let report = RunReport {
            version: REPORT_VERSION,
            label: label.to_string(),
            config: variant.clone(),
            schedule: ScheduleSummary::of(schedule),
            plan: plan.map(|p| PlanSummary {
                gamma: p.gamma,
                omega: p.omega,
                theta: p.theta,
                embedding: p.embedding,
                placement: p.placement,
                trend_mode: trends.map_or(variant.eoc.trend_mode, |t| t.mode()),
                optimized_cells: p.optimized_count(),
            }),
            cells,
            mean_f_deviation,
            mean_f_deviation_optimized,
            mean_out_deviation,
            final_deviation: final_dev / n,
            final_rel_l2: final_rel / n,
            flops_total: flops.flops_total,
            flops_baseline: flops.flops_baseline,
            speedup: flops.speedup,
            seeds: self.pairs.iter().map(|p| p.0).collect(),
            classes: self.pairs.iter().map(|p| p.1).collect(),
            wall_time_ms: self.timing.then(|| start.elapsed().as_secs_f64() * 1e3),
        };
        Ok((report, results.into_iter().map(|(_, f)| f).collect()))
    }

    /// Resolves schedule and plan for `variant`, then evaluates it.
    pub fn evaluate(&mut self, variant: &RunConfig, label: &str) -> Result<RunReport> {
        self.check_variant(variant)?;
        let schedule = self.cache_schedule(variant)?;
        let correction = self.correction(variant, &schedule)?;
        Ok(self
            .evaluate_with(variant, label, &schedule, correction.as_ref())?
            .0)
    }

    /// An all-compute cached run must reproduce the oracle exactly.
    pub fn check_compute_anchor(&self) -> Result<()> {
        let schedule = CacheSchedule::no_cache(self.sched.steps(), self.model.depth())?;
        let (seed, class) = self.pairs[0];
        let run = cached_run(&self.model, &self.sched, class, seed, &schedule, None, None)?;
        if run.run.final_sample != self.oracles[0].run.final_sample
            || run.cells != self.oracles[0].cells
        {
            return Err(Error::Anchor(format!(
                "all-compute run (seed {seed}, class {class}) differs from the uncached oracle"
            )));
        }
        Ok(())
    }
}

/// The hyperparameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Theta,
    Gamma,
    OmegaFraction,
    Period,
    IndexCap,
    Embedding,
    Placement,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "theta" => SweepAxis::Theta,
            "gamma" => SweepAxis::Gamma,
            "omega_fraction" => SweepAxis::OmegaFraction,
            "N" | "n" | "period" => SweepAxis::Period,
            "index_cap" => SweepAxis::IndexCap,
            "embedding" => SweepAxis::Embedding,
            "placement" => SweepAxis::Placement,
            other => {
                return Err(Error::config(
                    "sweep.axis",
                    format!("unknown axis `{other}` (theta, gamma, omega_fraction, N, index_cap, embedding, placement)"),
                ))
            }
        })
    }
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Theta => "theta",
            SweepAxis::Gamma => "gamma",
            SweepAxis::OmegaFraction => "omega_fraction",
            SweepAxis::Period => "N",
            SweepAxis::IndexCap => "index_cap",
            SweepAxis::Embedding => "embedding",
            SweepAxis::Placement => "placement",
        }
    }
}

fn parse_num<T: FromStr>(axis: SweepAxis, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| {
        Error::config(
            "sweep.values",
            format!("`{value}` is not a valid {} value", axis.as_str()),
        )
    })
}

pub fn parse_embedding(s: &str) -> Result<Embedding> {
    match s.trim() {
        "mul" | "multiplicative" => Ok(Embedding::Multiplicative),
        "add" | "additive" => Ok(Embedding::Additive),
        other => Err(Error::config(
            "eoc.embedding",
            format!("unknown embedding `{other}` (mul, add)"),
        )),
    }
}

pub fn parse_placement(s: &str) -> Result<Placement> {
    match s.trim() {
        "both" => Ok(Placement::Both),
        "attn" | "attn_only" => Ok(Placement::Attn),
        "mlp" | "mlp_only" => Ok(Placement::Mlp),
        other => Err(Error::config(
            "eoc.placement",
            format!("unknown placement `{other}` (both, attn, mlp)"),
        )),
    }
}

/// `base` with one axis set to `value`. Correction axes switch correction on.
pub fn apply_axis(base: &RunConfig, axis: SweepAxis, value: &str) -> Result<RunConfig> {
    let mut c = base.clone();
    match axis {
        SweepAxis::Theta => {
            c.eoc.enabled = true;
            c.eoc.theta = parse_num(axis, value)?;
        }
        SweepAxis::Gamma => {
            c.eoc.enabled = true;
            c.eoc.gamma = parse_num(axis, value)?;
        }
        SweepAxis::OmegaFraction => {
            c.eoc.enabled = true;
            c.eoc.omega = None;
            c.eoc.omega_fraction = Some(parse_num(axis, value)?);
        }
        SweepAxis::Period => {
            c.cache.mode = CacheMode::Fora;
            c.cache.period = parse_num(axis, value)?;
        }
        SweepAxis::IndexCap => {
            let cap: usize = parse_num(axis, value)?;
            c.eoc.enabled = true;
            c.eoc.gamma = 0.0;
            c.eoc.omega = Some(omega_for_index_cap(cap, c.sampler.steps));
            c.eoc.omega_fraction = None;
        }
        SweepAxis::Embedding => {
            c.eoc.enabled = true;
            c.eoc.embedding = parse_embedding(value)?;
        }
        SweepAxis::Placement => {
            c.eoc.enabled = true;
            c.eoc.placement = parse_placement(value)?;
        }
    }
    c.validate()?;
    Ok(c)
}

/// One report per value of `axis`, in the order given.
///
/// Every sweep re-checks two anchors: an all-compute run must equal the
/// oracle, and every row whose correction is a no-op (`theta = 0` or an
/// empty plan) must equal plain caching under the same schedule bitwise.
pub fn sweep(lab: &mut Lab, axis: SweepAxis, values: &[String]) -> Result<Vec<RunReport>> {
    let base = lab.config().clone();
    let variants = values
        .iter()
        .map(|v| apply_axis(&base, axis, v).map(|c| (format!("{}={}", axis.as_str(), v.trim()), c)))
        .collect::<Result<Vec<_>>>()?;
    lab.check_compute_anchor()?;

    let mut jobs = Vec::with_capacity(variants.len());
    for (label, variant) in &variants {
        let schedule = lab.cache_schedule(variant)?;
        let correction = lab.correction(variant, &schedule)?;
        jobs.push((label, variant, schedule, correction));
    }
    let lab = &*lab;
    jobs.par_iter()
        .map(|(label, variant, schedule, correction)| {
            let (report, finals) = lab
                .evaluate_with(variant, label, schedule, correction.as_ref())
                .map_err(|e| with_context(label, e))?;
            if let Some(c) = correction
                .as_ref()
                .filter(|c| c.plan.theta == 0.0 || c.plan.optimized_count() == 0)
            {
                let mut plain = (*variant).clone();
                plain.eoc.enabled = false;
                let (anchor, anchor_finals) = lab.evaluate_with(&plain, label, schedule, None)?;
                let same = finals == anchor_finals
                    && report.cells.iter().zip(&anchor.cells).all(|(a, b)| {
                        (a.dev_attn, a.dev_mlp, a.dev_out) == (b.dev_attn, b.dev_mlp, b.dev_out)
                    });
                if !same {
                    return Err(Error::Anchor(format!(
                        "{label}: no-op correction (theta {}, {} cells) differs from plain caching",
                        c.plan.theta,
                        c.plan.optimized_count()
                    )));
                }
            }
            Ok(report)
        })
        .collect()
}

fn with_context(label: &str, e: Error) -> Error {
    match e {
        Error::Comparison(m) if !m.starts_with(label) => Error::Comparison(format!("{label}: {m}")),
        Error::Plan(m) => Error::Plan(format!("{label}: {m}")),
        Error::CacheState { t, l, msg } => Error::CacheState {
            t,
            l,
            msg: format!("{label}: {msg}"),
        },
        other => other,
    }
}
