use std::path::Path;
use std::process::{Command, Output};

fn gtsne(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gtsne"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

const KERNELS: &str =
    r#"{"input": {"family": "power", "a": 1.0, "theta": 2.0}, "output": {"family": "cauchy", "b": 1.0}}"#;

fn two_clusters(dir: &Path) {
    let mut text = String::new();
    for i in 0..5 {
        text.push_str(&format!("{},{},{}\n", 0.1 * i as f64, 0.05 * i as f64, 0.0));
    }
    for i in 0..5 {
        text.push_str(&format!("{},{},{}\n", 5.0 + 0.1 * i as f64, 5.0 - 0.05 * i as f64, 1.0));
    }
    write(dir, "pts.csv", &text);
    write(dir, "k.json", KERNELS);
}

#[test]
fn no_arguments_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = gtsne(&[], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = gtsne(&["calibrate", "--frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn exp_output_kernel_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "k.json",
        r#"{"input": {"family": "power"}, "output": {"family": "exp"}}"#,
    );
    let out = gtsne(&["validate-kernel", "--config", "k.json"], dir.path());
    assert_ne!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["overall"], false);
    assert_eq!(report["failed"], serde_json::json!(["k-prime-at-zero"]));
}

#[test]
fn default_kernels_pass_validation() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "k.json", KERNELS);
    let out = gtsne(&["validate-kernel", "--config", "k.json", "--dim", "2"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["overall"], true);
}

#[test]
fn malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "k.json", r#"{"input": {"family": "nope"}}"#);
    let out = gtsne(&["validate-kernel", "--config", "k.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn embed_two_clusters() {
    let dir = tempfile::tempdir().unwrap();
    two_clusters(dir.path());
    let args = [
        "embed", "--input", "pts.csv", "--config", "k.json", "--rho", "0.3", "--dim", "2", "--iters", "300", "--seed",
        "7", "--out", "run",
    ];
    let out = gtsne(&args, dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let emb = std::fs::read_to_string(dir.path().join("run/embedding.csv")).unwrap();
    assert_eq!(emb.lines().count(), 10);
    assert!(emb.lines().all(|l| l.split(',').count() == 2));
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/meta.json")).unwrap()).unwrap();
    assert_eq!(meta["gradient_scale"], 2.0);
    assert_eq!(meta["perplexity"], 3.0);
    let trace = std::fs::read_to_string(dir.path().join("run/trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,loss,grad_norm\n"));

    // byte-identical on a rerun
    let args2: Vec<&str> = args.iter().map(|a| if *a == "run" { "run2" } else { a }).collect();
    assert_eq!(gtsne(&args2, dir.path()).status.code(), Some(0));
    for f in ["embedding.csv", "trace.csv", "sigmas.csv", "meta.json"] {
        assert_eq!(
            std::fs::read(dir.path().join("run").join(f)).unwrap(),
            std::fs::read(dir.path().join("run2").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn infeasible_perplexity_leaves_no_output() {
    let dir = tempfile::tempdir().unwrap();
    two_clusters(dir.path());
    let out = gtsne(
        &[
            "embed", "--input", "pts.csv", "--config", "k.json", "--rho", "0.05", "--out", "run",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("perplexity"));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn missing_input_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "k.json", KERNELS);
    let out = gtsne(
        &[
            "calibrate",
            "--input",
            "absent.csv",
            "--config",
            "k.json",
            "--rho",
            "0.3",
            "--out",
            "s.csv",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn calibrate_writes_one_row_per_point() {
    let dir = tempfile::tempdir().unwrap();
    two_clusters(dir.path());
    let out = gtsne(
        &[
            "calibrate",
            "--input",
            "pts.csv",
            "--config",
            "k.json",
            "--rho",
            "0.3",
            "--out",
            "s.csv",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
    assert_eq!(text.lines().count(), 11);
    for line in text.lines().skip(1) {
        let residual: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!(residual.abs() <= 1e-8);
    }
}

#[test]
fn continuum_grid() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "k.json", KERNELS);
    write(
        dir.path(),
        "m.json",
        r#"{"family": "uniform-box", "lower": [0], "upper": [1]}"#,
    );
    let out = gtsne(
        &[
            "continuum",
            "--measure",
            "m.json",
            "--config",
            "k.json",
            "--rho",
            "0.3",
            "--grid",
            "11",
            "--out",
            "c",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("c/sigma_star.csv")).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 11);
    // symmetric measure, symmetric field
    for k in 0..11 {
        assert!((rows[k][1] - rows[10 - k][1]).abs() <= 1e-6 * rows[k][1]);
        assert!(rows[k][2].abs() <= 1e-10);
    }
}

#[test]
fn study_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "study.json",
        r#"{"measure": {"family": "uniform-box", "lower": [0], "upper": [1]},
            "n-grid": [20, 40], "seeds": [1, 2], "rho": 0.3,
            "optimizer": {"iterations": 300, "init": "principal"},
            "reference-refinement": 2, "output-dir": "out"}"#,
    );
    let out = Command::new(env!("CARGO_BIN_EXE_gtsne"))
        .args(["study", "--config", "study.json"])
        .current_dir(dir.path())
        .env("GTSNE_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = std::fs::read_to_string(dir.path().join("out/rows.csv")).unwrap();
    assert_eq!(rows.lines().count(), 5);
    assert!(dir.path().join("out/summary.svg").exists());
    assert!(dir.path().join("out/40/2/embedding.csv").exists());
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "k.json", KERNELS);
    let out = Command::new(env!("CARGO_BIN_EXE_gtsne"))
        .args(["validate-kernel", "--config", "k.json"])
        .current_dir(dir.path())
        .env("GTSNE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn shipped_configs_work() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let dir = tempfile::tempdir().unwrap();
    let path = |f: &str| configs.join(f).to_string_lossy().into_owned();
    assert_eq!(
        gtsne(&["validate-kernel", "--config", &path("kernels.json")], dir.path())
            .status
            .code(),
        Some(0)
    );
    assert_eq!(
        gtsne(&["validate-kernel", "--config", &path("kernels_exp.json")], dir.path())
            .status
            .code(),
        Some(1)
    );
    let out = gtsne(
        &[
            "embed",
            "--input",
            &path("two_clusters.csv"),
            "--config",
            &path("kernels.json"),
            "--rho",
            "0.3",
            "--out",
            "e",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let study =
        gtsne::study::StudyConfig::from_json(&std::fs::read_to_string(configs.join("study.json")).unwrap()).unwrap();
    study.validate().unwrap();
    gtsne::measure::MeasureSpec::from_json(&std::fs::read_to_string(configs.join("uniform.json")).unwrap())
        .unwrap()
        .build()
        .unwrap();
}
