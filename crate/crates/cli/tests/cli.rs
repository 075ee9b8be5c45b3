use std::path::Path;
use std::process::{Command, Output};

fn lab(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eoc-lab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("EOC_LAB_OUT")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

const SMALL: &[&str] = &["--Q", "4"];

fn with(extra: &[&str]) -> Vec<String> {
    SMALL.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run(out: &Path, cmd: &str, extra: &[&str]) -> Output {
    let mut args = vec![cmd.to_string()];
    args.extend(with(extra));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    lab(out, &refs)
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "model": {"depth": 2, "width": 8, "heads": 2, "tokens": 4, "num_classes": 8, "seed": 3, "modulation_scale": 1.0},
        "sampler": {"T": 10},
        "cache": {"mode": "fora", "N": 2},
        "eoc": {"enabled": true, "gamma": 0.0, "omega_fraction": 0.5, "theta": 0.01},
        "extraction": {"Q": 3, "classes": [0, 1], "seed": 100},
        "evaluation": {"seeds": [1, 2, 3, 4], "classes": [4, 5]}
    });
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn extract_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let text = ok(&run(&a, "extract", &[]));
    assert!(text.contains("T=20 L=4 Q=4"));
    ok(&run(&b, "extract", &[]));
    let names: Vec<_> = std::fs::read_dir(a.join("prior"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(names.len(), 2 * 20 * 4 + 1);
    for n in names {
        assert_eq!(
            std::fs::read(a.join("prior").join(&n)).unwrap(),
            std::fs::read(b.join("prior").join(&n)).unwrap()
        );
    }
}

#[test]
fn plan_then_sample() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    ok(&run(&out, "extract", &[]));
    let text = ok(&run(&out, "plan", &["--top", "3"]));
    assert!(text.contains("20 of 40 reused cells optimized"));
    let plan: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("plan/plan.json")).unwrap()).unwrap();
    for (t, row) in plan["optimize"].as_array().unwrap().iter().enumerate() {
        for v in row.as_array().unwrap() {
            assert_eq!(v.as_u64().unwrap() == 1, t % 2 == 1 && t <= 9);
        }
    }
    let first = std::fs::read(out.join("plan/plan.json")).unwrap();
    ok(&run(&out, "plan", &[]));
    assert_eq!(first, std::fs::read(out.join("plan/plan.json")).unwrap());

    let plan_path = out.join("plan/plan.json");
    ok(&run(
        &out,
        "sample",
        &["--plan", plan_path.to_str().unwrap()],
    ));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report[0]["plan"]["optimized_cells"], 20);
    assert_eq!(std::fs::read_dir(out.join("samples")).unwrap().count(), 64);
}

#[test]
fn empty_plan_warns() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    ok(&run(&out, "extract", &[]));
    let o = run(&out, "plan", &["--omega", "5"]);
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning: empty plan"));
}

#[test]
fn uncached_sample_reports_unit_speedup() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    ok(&run(&out, "sample", &["--cache-mode", "none"]));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report[0]["schedule"]["caching_level"], 0.0);
    assert_eq!(report[0]["speedup"], 1.0);
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("o");
    let cfg = cfg.to_str().unwrap();
    ok(&lab(
        &out,
        &[
            "sweep",
            "-c",
            cfg,
            "--axis",
            "theta",
            "--values",
            "0,0.005,0.01,0.02,0.05",
        ],
    ));
    let csv = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines.len(), 6);
    assert_eq!(
        lines[0],
        "caching_level,theta,gamma,omega,N,mean_f_deviation,final_deviation,flops_total,speedup"
    );

    ok(&lab(
        &out,
        &["sweep", "-c", cfg, "--axis", "N", "--values", "2,3,4"],
    ));
    let csv = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let levels: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(levels, vec!["0.5", "0.6", "0.7"]);

    ok(&lab(
        &out,
        &[
            "sweep",
            "-c",
            cfg,
            "--axis",
            "embedding",
            "--values",
            "mul,add",
        ],
    ));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report[0]["plan"]["embedding"], "mul");
    assert_eq!(report[1]["plan"]["embedding"], "add");
}

#[test]
fn env_sets_output_dir_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let env_out = dir.path().join("env");
    let status = Command::new(env!("CARGO_BIN_EXE_eoc-lab"))
        .args(["evaluate", "-c", cfg.to_str().unwrap()])
        .env("EOC_LAB_OUT", &env_out)
        .output()
        .unwrap();
    ok(&status);
    assert!(env_out.join("report.json").exists());

    let flag_out = dir.path().join("flag");
    let status = Command::new(env!("CARGO_BIN_EXE_eoc-lab"))
        .args([
            "evaluate",
            "-c",
            cfg.to_str().unwrap(),
            "--out",
            flag_out.to_str().unwrap(),
        ])
        .env("EOC_LAB_OUT", &env_out)
        .output()
        .unwrap();
    ok(&status);
    assert!(flag_out.join("report.json").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");

    let o = lab(&out, &["extract", "--Q", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("extraction.Q"));
    assert!(!out.exists());

    let o = run(&out, "sample", &["--plan", "missing.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("prior store"));

    ok(&run(&out, "extract", &[]));
    let blob = out.join("prior/K_mlp_t2_l3.f64");
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&blob, bytes).unwrap();
    let o = run(&out, "plan", &[]);
    assert_eq!(o.status.code(), Some(3));

    let other = dir.path().join("p");
    ok(&run(&other, "extract", &["--model-seed", "9"]));
    let o = run(&other, "plan", &[]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "fingerprint mismatch: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}
