//! End-to-end tests of the `row` binary: output contracts, exit codes, and
//! determinism across runs and thread counts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_row"))
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(output: &Output) -> String {
    String::from_utf8(output.stdout.clone()).unwrap()
}

/// Ten rows with a treatment unrelated to the single covariate.
fn independent_fixture(dir: &Path) -> PathBuf {
    let path = dir.join("independent.csv");
    let mut text = String::from("time,event,treatment,x1\n");
    let xs = [0.3, -1.2, 0.8, 0.1, -0.5, 1.9, -0.7, 0.4, -1.1, 0.6];
    for (i, x) in xs.iter().enumerate() {
        let a = i % 2;
        text.push_str(&format!("{}.5,1,{a},{x}\n", i + 1));
    }
    write(&path, &text);
    path
}

#[test]
fn weights_near_uniform_when_treatment_is_independent() {
    let dir = tempfile::tempdir().unwrap();
    let input = independent_fixture(dir.path());
    let out = dir.path().join("w.csv");
    let result = run(&[
        "weights",
        "--input",
        input.to_str().unwrap(),
        "--delta",
        "0.1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(result.status.success(), "{}", stdout(&result));
    let text = std::fs::read_to_string(&out).unwrap();
    let weights: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.parse().unwrap())
        .collect();
    assert_eq!(weights.len(), 10);
    for w in &weights {
        assert!((w - 0.1).abs() < 0.05, "weight {w} far from 0.1");
    }
    assert!(dir.path().join("w.csv.manifest.json").exists());
}

#[test]
fn constant_covariate_is_exit_4_with_column_name() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("constant.csv");
    write(
        &input,
        "time,event,treatment,flat\n1,1,0,3\n2,1,1,3\n3,1,0,3\n4,1,1,3\n",
    );
    let out = dir.path().join("w.csv");
    let result = run(&[
        "weights",
        "--input",
        input.to_str().unwrap(),
        "--delta",
        "0.1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(result.status.code(), Some(4));
    let err = String::from_utf8(result.stderr.clone()).unwrap();
    assert!(err.contains('0'), "message should name the column: {err}");
}

#[test]
fn infeasible_bound_is_exit_2_and_suggests_raising_delta() {
    // The covariate equals the treatment on two mirrored clusters, so every
    // simplex weighting has |correlation| = 1.
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("hard.csv");
    let mut text = String::from("time,event,treatment,x1\n");
    for i in 0..8 {
        let a = (i % 2) as f64;
        text.push_str(&format!("{}.25,1,{a},{a}\n", i + 1));
    }
    write(&input, &text);
    let out = dir.path().join("w.csv");
    let result = run(&[
        "weights",
        "--input",
        input.to_str().unwrap(),
        "--delta",
        "0.001",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(result.status.code(), Some(2));
    let err = String::from_utf8(result.stderr.clone()).unwrap();
    assert!(err.contains("delta"), "{err}");
}

/// Six-row fixture used by the fit oracle comparison.
fn fit_fixture(dir: &Path) -> PathBuf {
    let path = dir.join("fit.csv");
    write(
        &path,
        "time,event,treatment,x1\n\
         2.0,1,0,0.4\n5.0,1,1,-1.1\n1.0,1,0,0.9\n7.0,0,1,0.3\n3.0,1,1,-0.2\n4.0,1,0,1.5\n",
    );
    path
}

/// Breslow partial log likelihood of the treatment-only model.
fn breslow_loglik(time: &[f64], event: &[bool], a: &[f64], theta: f64) -> f64 {
    let n = time.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| time[j].partial_cmp(&time[i]).unwrap());
    let mut s0 = 0.0;
    let mut ll = 0.0;
    let mut idx = 0;
    while idx < n {
        let t = time[order[idx]];
        let mut end = idx;
        while end < n && time[order[end]] == t {
            end += 1;
        }
        for &i in &order[idx..end] {
            s0 += (theta * a[i]).exp();
        }
        for &i in &order[idx..end] {
            if event[i] {
                ll += theta * a[i] - s0.ln();
            }
        }
        idx = end;
    }
    ll
}

#[test]
fn fit_matches_grid_search_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let input = fit_fixture(dir.path());
    let result = run(&["fit", "--input", input.to_str().unwrap(), "--se", "naive"]);
    assert!(result.status.success());
    let report: serde_json::Value = serde_json::from_str(&stdout(&result)).unwrap();
    let theta = report["theta"].as_f64().unwrap();

    let time = [2.0, 5.0, 1.0, 7.0, 3.0, 4.0];
    let event = [true, true, true, false, true, true];
    let a = [0.0, 1.0, 0.0, 1.0, 1.0, 0.0];
    let mut best = (f64::NEG_INFINITY, 0.0);
    let mut grid = -5.0;
    while grid <= 5.0 {
        let ll = breslow_loglik(&time, &event, &a, grid);
        if ll > best.0 {
            best = (ll, grid);
        }
        grid += 1e-5;
    }
    assert!(
        (theta - best.1).abs() < 1e-4,
        "cli {theta} vs oracle {}",
        best.1
    );
}

#[test]
fn bootstrap_fit_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let input = independent_fixture(dir.path());
    let args = [
        "fit",
        "--input",
        input.to_str().unwrap(),
        "--se",
        "boot",
        "--boot-reps",
        "2",
        "--seed",
        "7",
        "--delta",
        "0.5",
    ];
    let first = run(&args);
    let second = run(&args);
    assert!(first.status.success(), "{:?}", first);
    assert_eq!(first.stdout, second.stdout);
}

#[test]
fn constant_treatment_is_exit_5() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("const-treat.csv");
    write(
        &input,
        "time,event,treatment,x1\n1,1,1,0.3\n2,1,1,-0.2\n3,1,1,0.8\n4,1,1,0.1\n",
    );
    let result = run(&["fit", "--input", input.to_str().unwrap()]);
    assert_eq!(result.status.code(), Some(5));
}

#[test]
fn balance_uniform_weights_have_equal_pre_and_post() {
    let dir = tempfile::tempdir().unwrap();
    let input = independent_fixture(dir.path());
    let result = run(&[
        "balance",
        "--input",
        input.to_str().unwrap(),
        "--metric",
        "asmd",
    ]);
    assert!(result.status.success());
    for line in stdout(&result).lines().skip(1).take_while(|l| !l.starts_with('{')) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[1], fields[2], "pre != post in {line}");
    }
}

#[test]
fn balance_improves_after_weighting() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("confounded.csv");
    let mut text = String::from("time,event,treatment,x1\n");
    // Covariate shifted up in the treated arm, with overlap.
    let data = [
        (1.0f64, 1, 1.2), (2.0, 1, 0.8), (3.0, 1, 1.9), (4.0, 1, 0.4),
        (5.0, 1, 1.1), (6.0, 0, -0.9), (7.0, 1, -1.3), (8.0, 1, 0.2),
        (9.0, 1, -0.6), (10.0, 1, -1.8), (11.0, 1, 0.9), (12.0, 1, -0.4),
    ];
    for (i, (t, ev, x)) in data.iter().enumerate() {
        let a = if i < 6 { 1 } else { 0 };
        text.push_str(&format!("{t},{ev},{a},{x}\n"));
    }
    write(&input, &text);
    let wout = dir.path().join("w.csv");
    let weights_run = run(&[
        "weights",
        "--input",
        input.to_str().unwrap(),
        "--delta",
        "0.05",
        "--out",
        wout.to_str().unwrap(),
    ]);
    assert!(weights_run.status.success());
    let result = run(&[
        "balance",
        "--input",
        input.to_str().unwrap(),
        "--weights",
        wout.to_str().unwrap(),
        "--metric",
        "asmd",
    ]);
    assert!(result.status.success());
    let text = stdout(&result);
    let json_start = text.find('{').unwrap();
    let summary: serde_json::Value = serde_json::from_str(&text[json_start..]).unwrap();
    let pre_max = summary["pre"]["max"].as_f64().unwrap();
    let post_max = summary["post"]["max"].as_f64().unwrap();
    assert!(post_max < pre_max, "post {post_max} vs pre {pre_max}");
}

#[test]
fn asmd_with_continuous_treatment_is_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("cont.csv");
    write(
        &input,
        "time,event,treatment,x1\n1,1,0.7,0.1\n2,1,-0.3,0.5\n3,1,1.4,-0.2\n4,1,0.2,0.9\n",
    );
    let result = run(&[
        "balance",
        "--input",
        input.to_str().unwrap(),
        "--metric",
        "asmd",
    ]);
    assert_eq!(result.status.code(), Some(4));
}

#[test]
fn km_uniform_matches_quarter_steps() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("km4.csv");
    write(
        &input,
        "time,event,treatment,x1\n1,1,0,0.1\n2,1,0,0.2\n3,1,1,0.3\n4,1,1,0.4\n",
    );
    let out = dir.path().join("km.csv");
    let result = run(&[
        "km",
        "--input",
        input.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(result.status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    let survival: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(survival.len(), 5);
    for (got, want) in survival.iter().zip([1.0, 0.75, 0.5, 0.25, 0.0]) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn km_all_censored_group_stays_flat() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("km-cens.csv");
    write(
        &input,
        "time,event,treatment,x1\n1,0,1,0.1\n2,0,1,0.2\n3,1,0,0.3\n4,1,0,0.4\n",
    );
    let out = dir.path().join("km.csv");
    let result = run(&[
        "km",
        "--input",
        input.to_str().unwrap(),
        "--group-col",
        "treatment",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(result.status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    let group1: Vec<&str> = text.lines().filter(|l| l.starts_with("1,")).collect();
    assert_eq!(group1.len(), 1, "censored group should only have the start point");
    assert!(group1[0].ends_with("1.0000000000000000e0"));
}

#[test]
fn km_weighted_five_point_fixture_matches_hand_computation() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("km5.csv");
    write(
        &input,
        "time,event,treatment,x1\n1,1,0,0.1\n2,1,0,0.2\n3,0,1,0.3\n4,1,1,0.4\n5,1,1,0.5\n",
    );
    let wfile = dir.path().join("w.csv");
    write(
        &wfile,
        "row_weight\n0.1\n0.3\n0.2\n0.25\n0.15\n",
    );
    let out = dir.path().join("km.csv");
    let result = run(&[
        "km",
        "--input",
        input.to_str().unwrap(),
        "--weights",
        wfile.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(result.status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    let survival: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    // Product-limit by hand: S(1)=0.9, S(2)=0.9*(1-0.3/0.9),
    // S(4)=...*(1-0.25/0.4), S(5)=0.
    let s1 = 1.0 - 0.1;
    let s2 = s1 * (1.0 - 0.3 / 0.9);
    let s4 = s2 * (1.0 - 0.25 / 0.4);
    let s5: f64 = 0.0;
    for (got, want) in survival.iter().zip([1.0, s1, s2, s4, s5]) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

fn sim_config(dir: &Path) -> PathBuf {
    let path = dir.join("sim.toml");
    write(
        &path,
        "n = 150\nestimators = [\"row:0.01\", \"naive\"]\n\n[axis]\ngrid = [0.0, 1.0]\n",
    );
    path
}

#[test]
fn simulate_is_thread_count_independent() {
    let dir = tempfile::tempdir().unwrap();
    let config = sim_config(dir.path());
    let out1 = dir.path().join("m1.csv");
    let out8 = dir.path().join("m8.csv");
    for (out, threads) in [(&out1, "1"), (&out8, "8")] {
        let result = run(&[
            "simulate",
            "--config",
            config.to_str().unwrap(),
            "--axis",
            "misspecification",
            "--replicates",
            "4",
            "--seed",
            "11",
            "--out",
            out.to_str().unwrap(),
            "--threads",
            threads,
        ]);
        assert!(result.status.success(), "{:?}", result);
    }
    assert_eq!(
        std::fs::read(&out1).unwrap(),
        std::fs::read(&out8).unwrap(),
        "metrics CSV differs across thread counts"
    );
}

#[test]
fn simulate_single_scenario_without_axis() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("single.toml");
    write(&config, "n = 120\nestimators = [\"naive\"]\n");
    let out = dir.path().join("m.csv");
    let result = run(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--replicates",
        "3",
        "--seed",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(result.status.success(), "{:?}", result);
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.starts_with("scenario,estimator,"));
}

#[test]
fn weights_csv_feeds_fit_without_transformation() {
    let dir = tempfile::tempdir().unwrap();
    let input = independent_fixture(dir.path());
    let wout = dir.path().join("w.csv");
    assert!(run(&[
        "weights",
        "--input",
        input.to_str().unwrap(),
        "--delta",
        "0.2",
        "--out",
        wout.to_str().unwrap(),
    ])
    .status
    .success());
    let result = run(&[
        "fit",
        "--input",
        input.to_str().unwrap(),
        "--weights",
        wout.to_str().unwrap(),
    ]);
    assert!(result.status.success(), "{:?}", result);
}
