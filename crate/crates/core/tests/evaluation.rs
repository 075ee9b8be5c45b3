use eoc_core::cache::{CacheSchedule, MaskFile};
use eoc_core::config::RunConfig;
use eoc_core::eval::{
    cached_run, compare, flops_estimate, oracle_run, report_emit, sweep, Lab, SweepAxis,
    SUMMARY_HEADER,
};
use eoc_core::model::{PlainExecutor, ToyDit};
use eoc_core::sampler::{run_sampling, HookBus, NoiseSchedule, SampleOptions};
use eoc_core::Error;

fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.evaluation.seeds = (5000..5008).collect();
    c.extraction.runs = 8;
    c
}

fn values(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn oracle_is_reproducible_and_hooks_are_neutral() {
    let model = ToyDit::new(small_config().model).unwrap();
    let sched = NoiseSchedule::linear(20).unwrap();
    let a = oracle_run(&model, &sched, 3, 42).unwrap();
    let b = oracle_run(&model, &sched, 3, 42).unwrap();
    assert_eq!(a, b);

    let mut seen = 0usize;
    let mut hooks = HookBus::new();
    hooks.subscribe(|_| seen += 1);
    let hooked = run_sampling(
        &model,
        &sched,
        3,
        42,
        &mut PlainExecutor,
        &mut hooks,
        SampleOptions::default(),
    )
    .unwrap();
    drop(hooks);
    assert_eq!(seen, 20 * model.depth());
    assert_eq!(hooked.final_sample, a.run.final_sample);
}

#[test]
fn all_compute_has_zero_deviation() {
    let model = ToyDit::new(small_config().model).unwrap();
    let sched = NoiseSchedule::linear(20).unwrap();
    let s = CacheSchedule::no_cache(20, model.depth()).unwrap();
    let oracle = oracle_run(&model, &sched, 1, 7).unwrap();
    let run = cached_run(&model, &sched, 1, 7, &s, None, None).unwrap();
    let cmp = compare(&oracle, &run, &s, None).unwrap();
    assert!(cmp
        .records
        .iter()
        .all(|r| r.dev_attn == 0.0 && r.dev_mlp == 0.0 && r.dev_out == 0.0));
    assert_eq!(cmp.final_dev, 0.0);
}

#[test]
fn single_reuse_cell_deviation_is_the_feature_drift() {
    let model = ToyDit::new(small_config().model).unwrap();
    let sched = NoiseSchedule::linear(20).unwrap();
    let mut mask = vec![vec![0u8; model.depth()]; 20];
    mask[1][0] = 1;
    let s = CacheSchedule::from_mask(&MaskFile {
        steps: 20,
        layers: model.depth(),
        mask,
    })
    .unwrap();
    let oracle = oracle_run(&model, &sched, 2, 9).unwrap();
    let run = cached_run(&model, &sched, 2, 9, &s, None, None).unwrap();
    let cmp = compare(&oracle, &run, &s, None).unwrap();
    let (c, o) = (oracle.cell(0, 0), oracle.cell(1, 0));
    let hand = |x: &[f64], y: &[f64]| {
        x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64
    };
    let r = cmp.records[model.depth()];
    assert!(r.reused && (r.t, r.l) == (1, 0));
    assert_eq!(r.dev_attn, hand(c.f_attn.data(), o.f_attn.data()));
    assert_eq!(r.dev_mlp, hand(c.f_mlp.data(), o.f_mlp.data()));
    assert!(cmp
        .records
        .iter()
        .filter(|r| !r.reused)
        .all(|r| r.dev_f() == 0.0));
}

#[test]
fn compare_rejects_mismatched_runs() {
    let model = ToyDit::new(small_config().model).unwrap();
    let sched = NoiseSchedule::linear(20).unwrap();
    let s = CacheSchedule::fora(20, model.depth(), 2).unwrap();
    let oracle = oracle_run(&model, &sched, 2, 9).unwrap();
    let other = cached_run(&model, &sched, 2, 10, &s, None, None).unwrap();
    assert!(matches!(
        compare(&oracle, &other, &s, None),
        Err(Error::Comparison(_))
    ));
}

#[test]
fn theta_sweep_has_a_plain_cache_anchor() {
    let mut lab = Lab::new(small_config()).unwrap();
    let rows = sweep(
        &mut lab,
        SweepAxis::Theta,
        &values(&["0", "0.005", "0.01", "0.02", "0.05"]),
    )
    .unwrap();
    assert_eq!(rows.len(), 5);
    let mut plain_cfg = small_config();
    plain_cfg.eoc.enabled = false;
    let plain = lab.evaluate(&plain_cfg, "plain").unwrap();
    assert_eq!(rows[0].final_deviation, plain.final_deviation);
    assert_eq!(rows[0].mean_f_deviation, plain.mean_f_deviation);
    for (a, b) in rows[0].cells.iter().zip(&plain.cells) {
        assert_eq!(
            (a.dev_attn, a.dev_mlp, a.dev_out),
            (b.dev_attn, b.dev_mlp, b.dev_out)
        );
    }
    assert!(rows[1..]
        .iter()
        .all(|r| r.plan.as_ref().unwrap().optimized_cells == 20));
}

#[test]
fn index_cap_sweep_selects_early_steps() {
    let mut lab = Lab::new(small_config()).unwrap();
    let caps: Vec<String> = (1..20).step_by(2).map(|c| c.to_string()).collect();
    let rows = sweep(&mut lab, SweepAxis::IndexCap, &caps).unwrap();
    assert_eq!(rows.len(), 10);
    for (i, r) in rows.iter().enumerate() {
        let cap = 2 * i + 1;
        let cells = r.optimized_cells();
        assert_eq!(cells.len(), 4 * (i + 1));
        assert!(cells.iter().all(|&(t, _)| t <= cap));
    }
}

#[test]
fn period_and_placement_axes() {
    let mut lab = Lab::new(small_config()).unwrap();
    let rows = sweep(&mut lab, SweepAxis::Period, &values(&["2", "3", "4"])).unwrap();
    let levels: Vec<f64> = rows.iter().map(|r| r.schedule.caching_level).collect();
    assert_eq!(levels, vec![0.5, 0.65, 0.75]);

    let rows = sweep(
        &mut lab,
        SweepAxis::Placement,
        &values(&["attn_only", "mlp_only", "both"]),
    )
    .unwrap();
    assert_eq!(rows.len(), 3);
    let rows = sweep(&mut lab, SweepAxis::Embedding, &values(&["mul", "add"])).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(sweep(&mut lab, SweepAxis::Embedding, &values(&["sub"])).is_err());
}

#[test]
fn report_speedup_matches_flops() {
    let mut lab = Lab::new(small_config()).unwrap();
    let r = lab.evaluate(&small_config(), "default").unwrap();
    assert_eq!(r.speedup, r.flops_baseline / r.flops_total);
    let s = CacheSchedule::fora(20, 4, 2).unwrap();
    let plain = flops_estimate(8, 32, &s, None).unwrap();
    assert_eq!(
        r.flops_total - plain.flops_total,
        2.0 * 20.0 * 2.0 * 8.0 * 32.0
    );
}

#[test]
fn emission_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    report_emit(&[], dir.path()).unwrap();
    assert_eq!(
        std::fs::read_to_string(dir.path().join("summary.csv")).unwrap(),
        format!("{SUMMARY_HEADER}\n")
    );
    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json, serde_json::json!([]));

    let mut lab = Lab::new(small_config()).unwrap();
    let r = lab.evaluate(&small_config(), "default").unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    report_emit(std::slice::from_ref(&r), &a).unwrap();
    report_emit(std::slice::from_ref(&r), &b).unwrap();
    let csv = std::fs::read_to_string(a.join("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert_eq!(csv, std::fs::read_to_string(b.join("summary.csv")).unwrap());
    assert_eq!(
        std::fs::read(a.join("report.json")).unwrap(),
        std::fs::read(b.join("report.json")).unwrap()
    );
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(parsed[0]["version"], 1);
    assert!(parsed[0].get("wall_time_ms").is_none());
}
