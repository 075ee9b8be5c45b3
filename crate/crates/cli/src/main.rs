use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eoc_core::cache::OptimizationPlan;
use eoc_core::config::{CacheMode, RunConfig};
use eoc_core::eval::{
    parse_embedding, parse_placement, report_emit, sweep, Correction, Lab, SweepAxis,
};
use eoc_core::model::ToyDit;
use eoc_core::prior::store::{load_plan, load_prior, save_plan, save_prior, save_trend, PLAN_NAME};
use eoc_core::prior::{extract, trend, TrendMode};
use eoc_core::sampler::NoiseSchedule;
use eoc_core::{Error, ErrorKind, Result};

const OUT_ENV: &str = "EOC_LAB_OUT";

#[derive(Parser)]
#[command(
    name = "eoc-lab",
    version,
    about = "Feature caching with trend correction on a toy diffusion transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Average uncached runs into a prior-knowledge store.
    Extract(Common),
    /// Compute trends and priorities and write a correction plan.
    Plan {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        /// Rows of the printed priority table.
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Sample every evaluation pair and write final tensors plus a report.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        /// Plan file to apply instead of planning from the config.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Report on the configuration as given.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// One report row per value of a single hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        /// theta, gamma, omega_fraction, N, index_cap, embedding or placement.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

#[derive(Args)]
struct Inputs {
    /// Prior-knowledge store; defaults to `<output_dir>/prior`.
    #[arg(long)]
    store: Option<PathBuf>,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON). Built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config and EOC_LAB_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Record wall time in reports (makes them nondeterministic).
    #[arg(long)]
    timing: bool,
    #[arg(long)]
    model_seed: Option<u64>,
    #[arg(long = "T")]
    steps: Option<usize>,
    /// none, fora or mask.
    #[arg(long)]
    cache_mode: Option<String>,
    #[arg(long = "N")]
    period: Option<usize>,
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Turn trend correction on or off.
    #[arg(long)]
    eoc: Option<bool>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, conflicts_with = "omega_fraction")]
    omega: Option<f64>,
    #[arg(long)]
    omega_fraction: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
    /// mul or add.
    #[arg(long)]
    embedding: Option<String>,
    /// both, attn or mlp.
    #[arg(long)]
    placement: Option<String>,
    /// adjacent or cumulative.
    #[arg(long)]
    trend_mode: Option<String>,
    #[arg(long = "Q")]
    runs: Option<usize>,
}

impl Common {
    /// Config file, then EOC_LAB_OUT, then flags; validated before returning.
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => {
                let bytes = std::fs::read(path)
                    .map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
                RunConfig::from_json(&bytes)?
            }
            None => RunConfig::default(),
        };
        if let Some(out) = std::env::var_os(OUT_ENV) {
            c.output_dir = PathBuf::from(out);
        }
        if let Some(out) = &self.out {
            c.output_dir = out.clone();
        }
        if let Some(s) = self.model_seed {
            c.model.seed = s;
        }
        if let Some(t) = self.steps {
            c.sampler.steps = t;
        }
        if let Some(m) = &self.cache_mode {
            c.cache.mode = match m.as_str() {
                "none" => CacheMode::None,
                "fora" => CacheMode::Fora,
                "mask" => CacheMode::Mask,
                other => {
                    return Err(Error::config(
                        "cache.mode",
                        format!("unknown mode `{other}`"),
                    ))
                }
            };
        }
        if let Some(n) = self.period {
            c.cache.period = n;
        }
        if let Some(m) = &self.mask {
            c.cache.mask_path = Some(m.clone());
        }
        if let Some(on) = self.eoc {
            c.eoc.enabled = on;
        } else if self.cache_mode.as_deref() == Some("none") {
            c.eoc.enabled = false;
        }
        if let Some(g) = self.gamma {
            c.eoc.gamma = g;
        }
        if let Some(o) = self.omega {
            c.eoc.omega = Some(o);
            c.eoc.omega_fraction = None;
        }
        if let Some(f) = self.omega_fraction {
            c.eoc.omega_fraction = Some(f);
            c.eoc.omega = None;
        }
        if let Some(t) = self.theta {
            c.eoc.theta = t;
        }
        if let Some(e) = &self.embedding {
            c.eoc.embedding = parse_embedding(e)?;
        }
        if let Some(p) = &self.placement {
            c.eoc.placement = parse_placement(p)?;
        }
        if let Some(m) = &self.trend_mode {
            c.eoc.trend_mode = match m.as_str() {
                "adjacent" => TrendMode::Adjacent,
                "cumulative" => TrendMode::Cumulative,
                other => {
                    return Err(Error::config(
                        "eoc.trend_mode",
                        format!("unknown mode `{other}`"),
                    ))
                }
            };
        }
        if let Some(q) = self.runs {
            c.extraction.runs = q;
        }
        c.validate()?;
        Ok(c)
    }

    fn init(&self) -> Result<RunConfig> {
        let c = self.resolve()?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs.max(1))
            .build_global()
            .map_err(|e| Error::config("--jobs", e.to_string()))?;
        Ok(c)
    }
}

fn store_dir(inputs: &Inputs, c: &RunConfig) -> PathBuf {
    inputs
        .store
        .clone()
        .unwrap_or_else(|| c.output_dir.join("prior"))
}

/// A lab with prior knowledge from the store when one exists, extracted in
/// memory otherwise. `require` turns a missing store into an error.
fn lab_with_store(
    c: &RunConfig,
    inputs: &Inputs,
    timing: bool,
    require: Option<&str>,
) -> Result<Lab> {
    let mut lab = Lab::new(c.clone())?.with_timing(timing);
    let dir = store_dir(inputs, c);
    if dir.join("manifest.json").exists() {
        lab.set_prior(load_prior(&dir)?)?;
    } else if let Some(why) = require {
        return Err(Error::config(
            "--store",
            format!(
                "{why} needs a prior store, none at {}; run `eoc-lab extract` first",
                dir.display()
            ),
        ));
    }
    Ok(lab)
}

fn cmd_extract(common: &Common) -> Result<()> {
    let c = common.init()?;
    let model = ToyDit::new(c.model.clone())?;
    let sched = NoiseSchedule::linear(c.sampler.steps)?;
    let ex = &c.extraction;
    let pk = extract(&model, &sched, &ex.classes, ex.runs, ex.seed)?;
    let dir = c.output_dir.join("prior");
    save_prior(&pk, &dir)?;
    let mut mean_abs = 0.0;
    for t in 0..pk.steps() {
        for l in 0..pk.layers() {
            let (a, m) = (pk.attn(t, l).data(), pk.mlp(t, l).data());
            mean_abs +=
                a.iter().chain(m).map(|x| x.abs()).sum::<f64>() / (a.len() + m.len()) as f64;
        }
    }
    println!("prior store: {}", dir.display());
    println!(
        "grid: T={} L={} Q={} classes={:?} fingerprint={}",
        pk.steps(),
        pk.layers(),
        ex.runs,
        ex.classes,
        model.fingerprint()
    );
    println!(
        "mean |K| over the grid: {:.6}",
        mean_abs / (pk.steps() * pk.layers()) as f64
    );
    Ok(())
}

fn cmd_plan(common: &Common, inputs: &Inputs, top: usize) -> Result<()> {
    let c = common.init()?;
    if !c.eoc.enabled {
        return Err(Error::config(
            "eoc.enabled",
            "planning needs trend correction enabled",
        ));
    }
    let mut lab = lab_with_store(&c, inputs, false, Some("planning"))?;
    let schedule = lab.cache_schedule(&c)?;
    let (tt, pg) = lab.priorities(&c, &schedule)?;
    let correction = lab
        .correction(&c, &schedule)?
        .expect("correction is enabled");
    let plan = &correction.plan;

    save_trend(&tt, &c.output_dir.join("trend"))?;
    let plan_dir = c.output_dir.join("plan");
    save_plan(plan, &plan_dir)?;

    println!("plan: {}", plan_dir.join(PLAN_NAME).display());
    println!(
        "gamma={} omega={} theta={} embedding={:?} placement={:?}: {} of {} reused cells optimized",
        plan.gamma,
        plan.omega,
        plan.theta,
        plan.embedding,
        plan.placement,
        plan.optimized_count(),
        schedule.reuse_count()
    );
    if plan.optimized_count() == 0 {
        eprintln!(
            "warning: empty plan; omega {} is not below the highest priority {}",
            plan.omega,
            pg.max()
        );
    }
    println!("{:>4} {:>4} {:>12} {:>12}  optimized", "t", "l", "p", "v");
    for ((t, l), p) in pg.ranked().into_iter().take(top) {
        let v = tt.v(t, l).unwrap_or(f64::NAN);
        let mark = if plan.optimizes(t, l) { "yes" } else { "no" };
        println!("{t:>4} {l:>4} {p:>12.6} {v:>12.6}  {mark}");
    }
    Ok(())
}

fn cmd_sample(common: &Common, inputs: &Inputs, plan_path: Option<&Path>) -> Result<()> {
    let c = common.init()?;
    let require = match (plan_path, c.eoc.enabled) {
        (Some(_), _) => Some("a plan file"),
        (None, true) => Some("trend correction"),
        (None, false) => None,
    };
    let mut lab = lab_with_store(&c, inputs, common.timing, require)?;
    let schedule = lab.cache_schedule(&c)?;
    let correction = match plan_path {
        Some(path) => {
            let dir = path.parent().unwrap_or(Path::new("."));
            let plan: OptimizationPlan = if path.file_name().is_some_and(|n| n == PLAN_NAME) {
                load_plan(dir)?
            } else {
                let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
                OptimizationPlan::from_json(&bytes).map_err(|e| match e {
                    Error::Json(j) => Error::integrity(path, j.to_string()),
                    other => other,
                })?
            };
            plan.check_against(&schedule)?;
            let fp = lab.model().fingerprint();
            match &plan.fingerprint {
                Some(found) if *found != fp => {
                    return Err(Error::Fingerprint {
                        expected: fp,
                        found: found.clone(),
                    })
                }
                _ => {}
            }
            let trends = trend(lab.prior()?, c.eoc.trend_mode, Some(&schedule))?;
            Some(Correction { plan, trends })
        }
        None => lab.correction(&c, &schedule)?,
    };
    let (report, finals) = lab.evaluate_with(&c, "sample", &schedule, correction.as_ref())?;
    let dir = c.output_dir.join("samples");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for ((seed, class), x) in report.seeds.iter().zip(&report.classes).zip(&finals) {
        let path = dir.join(format!("sample_s{seed}_c{class}.f64"));
        std::fs::write(&path, x.to_le_bytes()).map_err(|e| Error::io(&path, e))?;
    }
    report_emit(std::slice::from_ref(&report), &c.output_dir)?;
    println!(
        "{} samples in {}; caching level {:.4}, {} optimized cells, speedup {:.4}, final deviation {:.6e}",
        finals.len(),
        dir.display(),
        report.schedule.caching_level,
        report.plan.as_ref().map_or(0, |p| p.optimized_cells),
        report.speedup,
        report.final_deviation
    );
    Ok(())
}

fn cmd_evaluate(common: &Common, inputs: &Inputs) -> Result<()> {
    let c = common.init()?;
    let mut lab = lab_with_store(&c, inputs, common.timing, None)?;
    lab.check_compute_anchor()?;
    let report = lab.evaluate(&c, "evaluate")?;
    report_emit(std::slice::from_ref(&report), &c.output_dir)?;
    println!(
        "caching level {:.4}, mean f deviation {:.6e}, final deviation {:.6e}, speedup {:.4}",
        report.schedule.caching_level,
        report.mean_f_deviation,
        report.final_deviation,
        report.speedup
    );
    println!("report: {}", c.output_dir.join("report.json").display());
    Ok(())
}

fn cmd_sweep(common: &Common, inputs: &Inputs, axis: &str, values: &[String]) -> Result<()> {
    let c = common.init()?;
    let axis: SweepAxis = axis.parse()?;
    let mut lab = lab_with_store(&c, inputs, common.timing, None)?;
    let rows = sweep(&mut lab, axis, values)?;
    report_emit(&rows, &c.output_dir)?;
    println!(
        "{:<24} {:>8} {:>14} {:>14} {:>8}",
        "row", "level", "mean f dev", "final dev", "speedup"
    );
    for r in &rows {
        println!(
            "{:<24} {:>8.4} {:>14.6e} {:>14.6e} {:>8.4}",
            r.label, r.schedule.caching_level, r.mean_f_deviation, r.final_deviation, r.speedup
        );
    }
    println!("summary: {}", c.output_dir.join("summary.csv").display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Extract(common) => cmd_extract(common),
        Command::Plan {
            common,
            inputs,
            top,
        } => cmd_plan(common, inputs, *top),
        Command::Sample {
            common,
            inputs,
            plan,
        } => cmd_sample(common, inputs, plan.as_deref()),
        Command::Evaluate { common, inputs } => cmd_evaluate(common, inputs),
        Command::Sweep {
            common,
            inputs,
            axis,
            values,
        } => cmd_sweep(common, inputs, axis, values),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Integrity => 3,
                ErrorKind::Runtime => 4,
            })
        }
    }
}
