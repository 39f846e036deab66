use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn ptreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ptreg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(out.stderr.trim_ascii())
        .unwrap_or_else(|_| panic!("stderr: {}", String::from_utf8_lossy(&out.stderr)))
}

fn block_spec() -> Value {
    json!({
        "scenario": "block_missing",
        "dims": [8, 7, 6, 4],
        "q": 3,
        "n": 12,
        "rank": 2,
        "weight": 10.0,
        "sparsity_fraction": 0.7,
        "fusion_fraction": 0.5,
        "missing_subjects": 0.5,
        "missing_times": 0.5,
        "seed": 3
    })
}

fn toy_spec() -> Value {
    json!({
        "scenario": "random_missing",
        "dims": [8, 7, 6],
        "q": 2,
        "n": 30,
        "rank": 1,
        "weight": 5.0,
        "sparsity_fraction": 1.0,
        "fusion_fraction": 1.0,
        "observe_prob": 1.0,
        "sigma": 0.0,
        "seed": 1
    })
}

fn simulate(dir: &Path, spec: Value, name: &str) -> PathBuf {
    let cfg = write(
        dir,
        &format!("{name}.json"),
        &json!({"schema": "ptreg-simulate/1", "spec": spec}),
    );
    let out = dir.join(name);
    let o = ptreg(&[
        "simulate",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("manifest.json")
}

#[test]
fn simulate_writes_dataset_and_truth() {
    let tmp = TempDir::new().unwrap();
    let manifest = simulate(tmp.path(), block_spec(), "sim");
    let dir = manifest.parent().unwrap();
    let files: Vec<String> = tree(dir).into_iter().map(|(n, _)| n).collect();
    assert_eq!(
        files.iter().filter(|f| f.starts_with("responses/")).count(),
        12
    );
    assert!(files.contains(&"truth_model.json".to_string()));
    assert!(files.contains(&"covariates.dtf".to_string()));
    let m: Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(m["n"], 12);
    assert_eq!(m["response_dims"], json!([8, 7, 6, 4]));
    assert_eq!(m["seed"], 3);
}

#[test]
fn simulate_is_byte_reproducible() {
    let tmp = TempDir::new().unwrap();
    let a = simulate(tmp.path(), block_spec(), "a");
    let b = simulate(tmp.path(), block_spec(), "b");
    assert_eq!(tree(a.parent().unwrap()), tree(b.parent().unwrap()));
}

#[test]
fn seed_flag_overrides_the_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "sim.json",
        &json!({"schema": "ptreg-simulate/1", "spec": block_spec()}),
    );
    let run = |seed: &str, out: &str| {
        let out = tmp.path().join(out);
        assert!(ptreg(&[
            "simulate",
            "--config",
            path_str(&cfg),
            "--out",
            path_str(&out),
            "--seed",
            seed
        ])
        .status
        .success());
        tree(&out)
    };
    assert_ne!(run("5", "x"), run("6", "y"));
    assert_eq!(run("5", "z"), run("5", "x2"));
}

#[test]
fn malformed_configs_exit_2_without_output() {
    let tmp = TempDir::new().unwrap();
    let cases = [
        (
            "broken.json",
            "{\"schema\": \"ptreg-simulate/1\", \"spec\": ".to_string(),
        ),
        (
            "unknown.json",
            json!({"schema": "ptreg-simulate/1", "spec": block_spec(), "extra": 1}).to_string(),
        ),
        (
            "schema.json",
            json!({"schema": "ptreg-simulate/9", "spec": block_spec()}).to_string(),
        ),
        ("invalid.json", {
            let mut s = block_spec();
            s["missing_times"] = json!(1.5);
            json!({"schema": "ptreg-simulate/1", "spec": s}).to_string()
        }),
    ];
    for (name, text) in cases {
        let cfg = tmp.path().join(name);
        fs::write(&cfg, text).unwrap();
        let out = tmp.path().join(format!("out-{name}"));
        let o = ptreg(&[
            "simulate",
            "--config",
            path_str(&cfg),
            "--out",
            path_str(&out),
        ]);
        assert_eq!(o.status.code(), Some(2), "{name}");
        assert_eq!(stderr_json(&o)["exit_code"], 2);
        assert!(!out.exists(), "{name} left output behind");
    }
}

fn fit_config(dir: &Path, rank: usize, levels: &[usize]) -> PathBuf {
    write(
        dir,
        "fit.json",
        &json!({
            "schema": "ptreg-fit/1",
            "solver": {"rank": rank, "sparsity": levels, "fusion": levels, "convergence_tol": 1e-10},
        }),
    )
}

#[test]
fn fit_recovers_a_noiseless_toy_problem() {
    let tmp = TempDir::new().unwrap();
    let manifest = simulate(tmp.path(), toy_spec(), "toy");
    let cfg = fit_config(tmp.path(), 1, &[8, 7, 6]);
    let out = tmp.path().join("fit");
    let o = ptreg(&[
        "fit",
        "--data",
        path_str(&manifest),
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["converged"], true);
    assert!(report["comp_err"].as_f64().unwrap() < 1e-6, "{report}");
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.starts_with("sweep,loss\n"));
    assert!(fs::read_to_string(out.join("model.json"))
        .unwrap()
        .contains("CPM-1"));
}

#[test]
fn random_init_fit_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let manifest = simulate(tmp.path(), block_spec(), "sim");
    let cfg = fit_config(tmp.path(), 2, &[6, 5, 5, 3]);
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let o = ptreg(&[
            "fit",
            "--data",
            path_str(&manifest),
            "--config",
            path_str(&cfg),
            "--out",
            path_str(&out),
            "--init",
            "random",
            "--seed",
            "7",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        tree(&out)
    };
    let a = run("a");
    assert_eq!(a.len(), 3);
    assert_eq!(a, run("b"));
}

#[test]
fn missing_response_file_exits_2() {
    let tmp = TempDir::new().unwrap();
    let manifest = simulate(tmp.path(), toy_spec(), "toy");
    fs::remove_file(manifest.parent().unwrap().join("responses/y_0000.dtf")).unwrap();
    let cfg = fit_config(tmp.path(), 1, &[8, 7, 6]);
    let out = tmp.path().join("fit");
    let o = ptreg(&[
        "fit",
        "--data",
        path_str(&manifest),
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "io");
    assert!(!out.exists());
}

#[test]
fn solver_failure_exits_3_with_structured_error() {
    let tmp = TempDir::new().unwrap();
    let manifest = simulate(tmp.path(), toy_spec(), "toy");
    let dir = manifest.parent().unwrap();
    // Every response entry unobserved: the dataset is readable but carries no information.
    for entry in fs::read_dir(dir.join("responses")).unwrap() {
        let p = entry.unwrap().path();
        let (y, mask) = ptreg::io::read_dtf(&p).unwrap();
        let mut mask = mask.unwrap();
        mask.observed_mut().iter_mut().for_each(|o| *o = false);
        ptreg::io::write_dtf(&p, &y, Some(&mask)).unwrap();
    }
    let cfg = fit_config(tmp.path(), 1, &[8, 7, 6]);
    let out = tmp.path().join("fit");
    let o = ptreg(&[
        "fit",
        "--data",
        path_str(&manifest),
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out),
        "--init",
        "random",
    ]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let err = stderr_json(&o);
    assert_eq!(err["exit_code"], 3);
    assert!(err["message"].as_str().unwrap().len() > 3);
}

#[test]
fn unknown_init_strategy_is_a_usage_error() {
    let o = ptreg(&[
        "fit", "--data", "x", "--config", "y", "--out", "z", "--init", "magic",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

fn tune_config(dir: &Path, grid: Value) -> PathBuf {
    write(
        dir,
        "tune.json",
        &json!({"schema": "ptreg-tune/1", "grid": grid}),
    )
}

#[test]
fn tune_writes_table_and_model() {
    let tmp = TempDir::new().unwrap();
    let mut spec = toy_spec();
    spec["sigma"] = json!(0.5);
    spec["rank"] = json!(2);
    let manifest = simulate(tmp.path(), spec, "sim");
    let cfg = tune_config(
        tmp.path(),
        json!({"ranks": [1, 2], "sparsity_fractions": [0.5, 1.0], "fusion_fractions": [1.0]}),
    );
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let o = ptreg(&[
            "tune",
            "--data",
            path_str(&manifest),
            "--config",
            path_str(&cfg),
            "--out",
            path_str(&out),
            "--seed",
            "4",
            "--no-timing",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        tree(&out)
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    let csv = String::from_utf8(a.iter().find(|(n, _)| n == "bic.csv").unwrap().1.clone()).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "stage,r,s_frac,f_frac,loss,df,bic,converged,seconds"
    );
    assert_eq!(lines.len(), 1 + 3);
    let report: Value =
        serde_json::from_slice(&a.iter().find(|(n, _)| n == "report.json").unwrap().1).unwrap();
    assert_eq!(report["selected"]["rank"], 2);
}

#[test]
fn single_cell_grid_gives_one_row() {
    let tmp = TempDir::new().unwrap();
    let manifest = simulate(tmp.path(), toy_spec(), "toy");
    let cfg = tune_config(
        tmp.path(),
        json!({"ranks": [1], "sparsity_fractions": [1.0], "fusion_fractions": [1.0]}),
    );
    let out = tmp.path().join("tune");
    let o = ptreg(&[
        "tune",
        "--data",
        path_str(&manifest),
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read_to_string(out.join("bic.csv"))
            .unwrap()
            .lines()
            .count(),
        2
    );
}

#[test]
fn non_numeric_grid_entry_exits_2() {
    let tmp = TempDir::new().unwrap();
    let manifest = simulate(tmp.path(), toy_spec(), "toy");
    let cfg = tune_config(
        tmp.path(),
        json!({"ranks": [1, "two"], "sparsity_fractions": [1.0], "fusion_fractions": [1.0]}),
    );
    let out = tmp.path().join("tune");
    let o = ptreg(&[
        "tune",
        "--data",
        path_str(&manifest),
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "format");
    assert!(!out.exists());
}

#[test]
fn benchmark_is_deterministic_and_ordered() {
    let tmp = TempDir::new().unwrap();
    let run = |name: &str, jobs: &str| {
        let out = tmp.path().join(name);
        let o = ptreg(&[
            "benchmark",
            "--scenario",
            "table2-p0.5-w30-f0.3-d8-n20",
            "--reps",
            "3",
            "--out",
            path_str(&out),
            "--jobs",
            jobs,
            "--no-timing",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        tree(&out)
    };
    let a = run("a", "1");
    assert_eq!(a, run("b", "3"));
    let csv = String::from_utf8(
        a.iter()
            .find(|(n, _)| n == "metrics.csv")
            .unwrap()
            .1
            .clone(),
    )
    .unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "replication,method,coef_err_abs,coef_err_rel,comp_err,tpr,fpr,seconds"
    );
    let reps: Vec<&str> = lines[1..]
        .iter()
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(reps, ["0", "0", "1", "1", "2", "2"]);
    assert!(!csv.contains('\r'));
}

#[test]
fn single_replication_marks_se_unavailable() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("bench");
    let o = ptreg(&[
        "benchmark",
        "--scenario",
        "table2-p0.5-w30-f0.3-d8-n20",
        "--reps",
        "1",
        "--out",
        path_str(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["complete"], true);
    assert_eq!(summary["methods"][0]["coef_err_rel"]["se"], "NA");
}

#[test]
fn unknown_scenario_exits_2() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("bench");
    let o = ptreg(&[
        "benchmark",
        "--scenario",
        "table9-x",
        "--reps",
        "1",
        "--out",
        path_str(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn benchmark_config_enables_tuning() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "bench.json",
        &json!({
            "schema": "ptreg-benchmark/1",
            "max_iterations": 50,
            "tuning": {"ranks": [2], "sparsity_fractions": [0.7, 1.0], "fusion_fractions": [0.3, 1.0]}
        }),
    );
    let out = tmp.path().join("bench");
    let o = ptreg(&[
        "benchmark",
        "--scenario",
        "table2-p0.5-w30-f0.3-d8-n20",
        "--reps",
        "1",
        "--out",
        path_str(&out),
        "--config",
        path_str(&cfg),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read_to_string(out.join("metrics.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );
}
