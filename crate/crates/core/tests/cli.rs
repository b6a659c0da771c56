use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use primi::cli::{parse_metrics_csv, RunManifest, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_OK};

fn primi(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_primi"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn bsc(p: f64) -> String {
    format!("[[{}, {}], [{}, {}]]", 1.0 - p, p, p, 1.0 - p)
}

fn capacity_line(o: &Output) -> f64 {
    let s = stdout(o);
    let line = s.lines().find(|l| l.starts_with("capacity ")).unwrap();
    line.split_whitespace().nth(1).unwrap().parse().unwrap()
}

#[test]
fn capacity_of_binary_symmetric_channels() {
    let dir = tempfile::tempdir().unwrap();
    for p in [0.0, 0.1, 0.5] {
        let spec = dir.path().join("ch.json");
        fs::write(&spec, bsc(p)).unwrap();
        let o = primi(&["capacity", spec.to_str().unwrap()], dir.path());
        assert_eq!(o.status.code(), Some(EXIT_OK));
        let hb = if p == 0.0 || p == 1.0 {
            0.0
        } else {
            -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
        };
        let want = (1.0 - hb) * std::f64::consts::LN_2;
        assert!((capacity_line(&o) - want).abs() < 1e-6, "p = {p}");
    }
}

#[test]
fn capacity_accepts_object_spec_and_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("ch.json");
    fs::write(&spec, format!("{{\"rows\": {}}}", bsc(0.25))).unwrap();
    let out = dir.path().join("cap");
    let o = primi(&["capacity", spec.to_str().unwrap(), "--out", out.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(EXIT_OK));
    let m: RunManifest = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m.command, "capacity");
    assert_eq!(m.exit_status, 0);
    assert!(m.outputs.contains(&"capacity.json".to_string()));
}

#[test]
fn malformed_channel_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.json");
    for body in ["[[0.5, 0.6], [0.5, 0.5]]", "[[1.0], [0.5, 0.5]]", "not json"] {
        fs::write(&spec, body).unwrap();
        let o = primi(&["capacity", spec.to_str().unwrap()], dir.path());
        assert_eq!(o.status.code(), Some(EXIT_CONFIG), "{body}");
    }
}

#[test]
fn unknown_flags_and_overrides_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(primi(&["train", "--bogus"], dir.path()).status.code(), Some(EXIT_CONFIG));
    assert_eq!(
        primi(&["train", "--override", "model.nope=3"], dir.path()).status.code(),
        Some(EXIT_CONFIG)
    );
    assert_eq!(
        primi(&["train", "--override", "gamma=1.5"], dir.path()).status.code(),
        Some(EXIT_CONFIG)
    );
    assert_eq!(
        primi(&["train", "--ablate", "nothing-like-this"], dir.path()).status.code(),
        Some(EXIT_CONFIG)
    );
}

#[test]
fn theory_t3_passes_and_fault_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = primi(&["theory", "t3"], dir.path());
    assert_eq!(o.status.code(), Some(EXIT_OK));
    assert_eq!(stdout(&o).matches(" holds").count(), 15);
    let o = primi(&["theory", "t3", "--inject-fault"], dir.path());
    assert_eq!(o.status.code(), Some(EXIT_CHECK_FAILED));
}

#[test]
fn zero_step_training_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = primi(
            &["train", "--steps", "0", "--seed", "1", "--out", out.to_str().unwrap()],
            dir.path(),
        );
        assert_eq!(o.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let a = run("a");
    let b = run("b");
    let ma = fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(ma, fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("checkpoint.json")).unwrap(), fs::read(b.join("checkpoint.json")).unwrap());

    let rows = parse_metrics_csv(std::str::from_utf8(&ma).unwrap()).unwrap();
    // five seeding episodes and the final evaluation row
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.mi_bound.is_none() && r.wallclock_s.is_none()));
    assert!(rows.last().unwrap().probe_r2_splus.is_some());

    let m: RunManifest = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m.seed, Some(1));
    assert_eq!(m.config["total_env_steps"], 0);
    let ck: serde_json::Value = serde_json::from_slice(&fs::read(a.join("checkpoint.json")).unwrap()).unwrap();
    assert_eq!(ck["extra"]["config_hash"], serde_json::Value::String(m.config_hash.clone()));
}

#[test]
fn short_training_writes_update_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"seed_episodes": 2, "updates_per_episode": 3, "imagination_starts": 8,
            "behavior_hidden": [16], "model": {"hidden": [16], "window_len": 8, "batch_windows": 4},
            "env": {"horizon": 20}, "eval": {"episodes": 2, "sim_samples": 16}}"#,
    )
    .unwrap();
    let out = dir.path().join("run");
    let o = primi(
        &["train", "--config", cfg.to_str().unwrap(), "--steps", "20", "--out", out.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = parse_metrics_csv(&fs::read_to_string(out.join("metrics.csv")).unwrap()).unwrap();
    // 2 seeding episodes, 3 updates, 1 policy episode, 1 eval row
    assert_eq!(rows.len(), 7);
    assert_eq!(rows.iter().filter(|r| r.mi_bound.is_some()).count(), 3);
    assert!(out.join("replay.ndjson").exists());
}

fn write_points(path: &Path, pts: &[Vec<f64>]) {
    let body: String = pts
        .iter()
        .map(|p| p.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",") + "\n")
        .collect();
    fs::write(path, body).unwrap();
}

fn sim_line(o: &Output) -> f64 {
    let s = stdout(o);
    s.lines()
        .find(|l| l.starts_with("sim_kernel"))
        .and_then(|l| l.split_whitespace().nth(1))
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn metric_identical_files_give_one() {
    let dir = tempfile::tempdir().unwrap();
    let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, (i * i) as f64 * 0.1]).collect();
    let f = dir.path().join("p.csv");
    write_points(&f, &pts);
    let o = primi(&["metric", "--latents", f.to_str().unwrap(), "--gt", f.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(EXIT_OK));
    assert_eq!(sim_line(&o), 1.0);
}

#[test]
fn metric_three_point_example() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    write_points(&a, &[vec![0.0, 0.0], vec![1.0, 0.0], vec![3.0, 0.0]]);
    write_points(&b, &[vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 2.0]]);
    let o = primi(
        &["metric", "--latents", a.to_str().unwrap(), "--gt", b.to_str().unwrap(), "--override", "kernel.c=2"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(EXIT_OK));
    // edges (1,2), (2,3), (1,3): weights {1, 2, 3} against {1, 2, √5}
    let want = (1.0 + 1.0 + (2.0 - (5f64.sqrt() - 3.0).abs()) / 2.0) / 3.0;
    assert!((sim_line(&o) - want).abs() < 1e-6);
}

#[test]
fn metric_label_carried_permutation_is_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let lat: Vec<Vec<f64>> = (0..8).map(|i| vec![(i + 1) as f64, (i as f64).sin(), (i as f64 * 0.7).cos()]).collect();
    let gt: Vec<Vec<f64>> = (0..8).map(|i| vec![(i + 1) as f64, i as f64, (i % 3) as f64]).collect();
    let (fa, fb, fc) = (dir.path().join("a.csv"), dir.path().join("b.csv"), dir.path().join("c.csv"));
    write_points(&fa, &lat);
    write_points(&fb, &gt);
    let mut permuted = lat.clone();
    permuted.reverse();
    permuted.swap(0, 3);
    write_points(&fc, &permuted);
    let args = |l: &Path| {
        vec![
            "metric".to_string(),
            "--labeled".into(),
            "--latents".into(),
            l.to_str().unwrap().into(),
            "--gt".into(),
            fb.to_str().unwrap().into(),
        ]
    };
    let run = |l: &Path| {
        let a = args(l);
        let refs: Vec<&str> = a.iter().map(String::as_str).collect();
        primi(&refs, dir.path())
    };
    let (o1, o2) = (run(&fa), run(&fc));
    assert_eq!(o1.status.code(), Some(EXIT_OK));
    assert_eq!(sim_line(&o1), sim_line(&o2));
}

#[test]
fn metric_count_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    write_points(&a, &[vec![0.0], vec![1.0], vec![3.0]]);
    write_points(&b, &[vec![0.0], vec![1.0]]);
    let o = primi(&["metric", "--latents", a.to_str().unwrap(), "--gt", b.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
}

#[test]
fn mi_bench_discrete_identity_is_bounded_by_log_n() {
    let dir = tempfile::tempdir().unwrap();
    let o = primi(
        &[
            "mi-bench",
            "--family",
            "discrete",
            "--n",
            "4",
            "--override",
            "steps=300",
            "--override",
            "eval_repeats=4",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(EXIT_OK));
    let s = stdout(&o);
    let oracle: f64 = s
        .lines()
        .find(|l| l.starts_with("oracle"))
        .and_then(|l| l.split_whitespace().nth(1))
        .unwrap()
        .parse()
        .unwrap();
    assert!((oracle - 4f64.ln()).abs() < 1e-5);
    for name in ["nce-inclusive", "nwj"] {
        let cells: Vec<f64> = s
            .lines()
            .find(|l| l.starts_with(name))
            .unwrap()
            .split_whitespace()
            .skip(1)
            .map(|c| c.parse().unwrap())
            .collect();
        assert!(cells[0] <= oracle + 2.0 * cells[1] + 1e-9, "{name}: {cells:?}");
    }
}

#[test]
fn mi_bench_bad_params_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = primi(&["mi-bench", "--family", "gaussian", "--rho", "1.5"], dir.path());
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
}
