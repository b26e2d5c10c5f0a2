use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_space-fda"));
    c.env_remove("SPACE_FDA_THREADS");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

fn json(dir: &Path, name: &str) -> Value {
    serde_json::from_str(&read(dir, name)).unwrap()
}

fn simulate(dir: &Path, scenario: &str, seed: &str) {
    ok(dir, &["simulate", "--scenario", scenario, "--seed", seed, "--out", "obs.csv", "--truth", "truth.csv"]);
}

fn fit(dir: &Path, extra: &[&str]) -> Value {
    let mut args = vec!["fit", "--data", "obs.csv", "--out", "model.json", "--t_min", "0", "--t_max", "1"];
    args.extend_from_slice(extra);
    ok(dir, &args);
    json(dir, "model.json")
}

#[test]
fn simulate_writes_expected_shapes_deterministically() {
    let d = TempDir::new().unwrap();
    simulate(d.path(), "separable 1", "11");
    let obs = read(d.path(), "obs.csv");
    let lines: Vec<&str> = obs.lines().collect();
    assert_eq!(lines[0], "loc_id,x,y,t,value");
    assert_eq!(lines.len(), 1 + 100 * 10);
    let truth = read(d.path(), "truth.csv");
    let header: Vec<&str> = truth.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 3 + 101);
    assert_eq!(&header[..4], &["loc_id", "x", "y", "v0"]);
    assert_eq!(header[103], "v100");
    let grid = json(d.path(), "truth.csv.grid.json");
    assert_eq!(grid["grid"]["M"], 101);
    assert_eq!(grid["times"].as_array().unwrap().len(), 101);

    ok(d.path(), &["simulate", "--scenario", "separable-1", "--seed", "11", "--out", "again.csv"]);
    assert_eq!(obs, read(d.path(), "again.csv"));
    ok(d.path(), &["simulate", "--scenario", "separable 1", "--seed", "12", "--out", "other.csv"]);
    assert_ne!(obs, read(d.path(), "other.csv"));
}

#[test]
fn simulate_grid_and_evi_designs() {
    let d = TempDir::new().unwrap();
    ok(d.path(), &["simulate", "--design", "grid", "--edge", "4", "--scenario", "non-separable 1", "--seed", "1", "--out", "g.csv"]);
    assert_eq!(read(d.path(), "g.csv").lines().count(), 1 + 16 * 10);
    ok(d.path(), &["simulate", "--design", "evi", "--edge", "3", "--seed", "1", "--out", "e.csv"]);
    assert_eq!(read(d.path(), "e.csv").lines().count(), 1 + 9 * 46);
    let bad = run(d.path(), &["simulate", "--scenario", "separable 9", "--seed", "1", "--out", "x.csv"]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn fit_is_deterministic_and_honours_flags() {
    let d = TempDir::new().unwrap();
    simulate(d.path(), "separable 1", "3");
    let m = fit(d.path(), &["--separable", "--seed", "3"]);
    assert_eq!(m["separable"], true);
    let matern = m["matern"].as_array().unwrap();
    assert_eq!(matern.len(), 2);
    assert_eq!(matern[0], matern[1]);
    assert_eq!(m["grid"]["M"], 101);
    assert_eq!(m["provenance"]["seed"], 3);
    let first = read(d.path(), "model.json");
    fit(d.path(), &["--separable", "--seed", "3"]);
    assert_eq!(first, read(d.path(), "model.json"));

    let m = fit(d.path(), &["--k", "3", "--h_mu", "0.1", "--h_g", "0.1"]);
    assert_eq!(m["separable"], false);
    assert_eq!(m["eigenvalues"].as_array().unwrap().len(), 3);
}

#[test]
fn config_sections_and_flag_overrides() {
    let d = TempDir::new().unwrap();
    simulate(d.path(), "separable 1", "4");
    std::fs::write(
        d.path().join("run.ini"),
        "seed = 4\n[fit]\nk = 3\nh_mu = 0.1\nh_g = 0.1\nt_min = 0\nt_max = 1\n",
    )
    .unwrap();
    ok(d.path(), &["fit", "--config", "run.ini", "--data", "obs.csv", "--out", "a.json"]);
    let a = json(d.path(), "a.json");
    assert_eq!(a["eigenvalues"].as_array().unwrap().len(), 3);
    assert_eq!(a["provenance"]["seed"], 4);
    ok(d.path(), &["fit", "--config", "run.ini", "--k", "2", "--data", "obs.csv", "--out", "b.json"]);
    let b = json(d.path(), "b.json");
    assert_eq!(b["eigenvalues"].as_array().unwrap().len(), 2);
    assert_ne!(a["provenance"]["config_hash"], b["provenance"]["config_hash"]);

    std::fs::write(d.path().join("typo.ini"), "[fit]\nkk = 3\n").unwrap();
    let out = run(d.path(), &["fit", "--config", "typo.ini", "--data", "obs.csv", "--out", "c.json"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("kk"));
}

#[test]
fn fitted_eigenvalues_are_near_the_generator_on_average() {
    // Mean over replicates: a single spatially correlated dataset has only a
    // handful of effectively independent curves.
    let d = TempDir::new().unwrap();
    let reps = 8;
    let mut sums = [0.0; 2];
    for r in 0..reps {
        simulate(d.path(), "separable 1", &(100 + r).to_string());
        let m = fit(d.path(), &["--k", "2"]);
        for (k, s) in sums.iter_mut().enumerate() {
            *s += m["eigenvalues"][k].as_f64().unwrap() / reps as f64;
        }
    }
    let truth = [10.0 * (-1.0f64).exp(), 10.0 * (-2.0f64).exp()];
    for k in 0..2 {
        assert!((sums[k] / truth[k] - 1.0).abs() < 0.25, "fPC {}: mean {} vs {}", k + 1, sums[k], truth[k]);
    }
}

#[test]
fn reconstruct_with_intervals_and_baseline() {
    let d = TempDir::new().unwrap();
    simulate(d.path(), "separable 2", "5");
    fit(d.path(), &[]);
    ok(d.path(), &[
        "reconstruct", "--model", "model.json", "--data", "obs.csv", "--out", "rec.csv", "--level", "0.95",
        "--baseline", "pace", "--truth", "truth.csv",
    ]);
    let rec = read(d.path(), "rec.csv");
    let header: Vec<&str> = rec.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 3 + 5 * 101 + 1);
    assert_eq!(*header.last().unwrap(), "ip");
    let row: Vec<f64> = rec.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    for j in 0..101 {
        let (v, pl, ph, bl, bh) = (row[3 + j], row[104 + j], row[205 + j], row[306 + j], row[407 + j]);
        assert!(bl <= pl && pl <= v && v <= ph && ph <= bh);
    }
    assert_eq!(read(d.path(), "rec.csv.pace.csv").lines().count(), 101);
}

#[test]
fn zero_score_model_reconstructs_the_mean() {
    let d = TempDir::new().unwrap();
    simulate(d.path(), "separable 1", "6");
    let mut m = fit(d.path(), &[]);
    m["eigenvalues"] = serde_json::json!([0.0, 0.0]);
    std::fs::write(d.path().join("zero.json"), serde_json::to_string(&m).unwrap()).unwrap();
    ok(d.path(), &["reconstruct", "--model", "zero.json", "--data", "obs.csv", "--out", "rec.csv"]);
    let mean: Vec<f64> = m["mean"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    for line in read(d.path(), "rec.csv").lines().skip(1) {
        let v: Vec<f64> = line.split(',').skip(3).map(|v| v.parse().unwrap()).collect();
        assert_eq!(v, mean);
    }
}

#[test]
fn schema_errors_exit_with_code_3() {
    let d = TempDir::new().unwrap();
    simulate(d.path(), "separable 1", "8");
    fit(d.path(), &[]);

    std::fs::write(d.path().join("ragged.csv"), "loc_id,x,y,t,value\n1,0,1,0.5,1\n2,0,2,0.5\n").unwrap();
    let out = run(d.path(), &["fit", "--data", "ragged.csv", "--out", "x.json"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line: 3"));

    std::fs::write(d.path().join("header.csv"), "id,x,y,t,value\n1,0,1,0.5,1\n").unwrap();
    assert_eq!(code(&run(d.path(), &["fit", "--data", "header.csv", "--out", "x.json"])), 3);

    std::fs::write(d.path().join("late.csv"), "loc_id,x,y,t,value\n1,0,1,0.5,1\n1,0,1,1.5,1\n").unwrap();
    let out = run(d.path(), &["reconstruct", "--model", "model.json", "--data", "late.csv", "--out", "r.csv"]);
    assert_eq!(code(&out), 3);

    simulate_other_grid(d.path());
    let out = run(d.path(), &[
        "reconstruct", "--model", "model.json", "--data", "obs.csv", "--out", "r.csv", "--baseline", "pace",
        "--truth", "coarse.csv",
    ]);
    assert_eq!(code(&out), 3);
    assert_eq!(code(&run(d.path(), &["reconstruct", "--model", "missing.json", "--data", "obs.csv", "--out", "r.csv"])), 3);
}

fn simulate_other_grid(dir: &Path) {
    ok(dir, &["simulate", "--scenario", "separable 1", "--seed", "8", "--grid_size", "51", "--out", "o.csv", "--truth", "coarse.csv"]);
}

#[test]
fn usage_and_numerical_exit_codes() {
    let d = TempDir::new().unwrap();
    assert_eq!(code(&run(d.path(), &[])), 2);
    assert_eq!(code(&run(d.path(), &["fit", "--nonsense", "1"])), 2);
    assert_eq!(code(&run(d.path(), &["simulate", "--out", "x.csv"])), 2);
    assert_eq!(code(&run(d.path(), &["simulate", "--seed", "x", "--out", "x.csv"])), 2);
    simulate(d.path(), "separable 1", "9");
    assert_eq!(code(&run(d.path(), &["fit", "--data", "obs.csv", "--out", "m.json", "--h_mu", "0.1"])), 2);
    let tiny = run(d.path(), &["fit", "--data", "obs.csv", "--out", "m.json", "--h_mu", "0.001", "--h_g", "0.001"]);
    assert_eq!(code(&tiny), 4, "{}", String::from_utf8_lossy(&tiny.stderr));
    let out = bin()
        .current_dir(d.path())
        .env("SPACE_FDA_THREADS", "zero")
        .args(["simulate", "--seed", "1", "--out", "x.csv"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    ok(d.path(), &["simulate", "--seed", "1", "--out", "x.csv", "--threads", "1"]);
}

#[test]
fn test_report_has_b_null_stats_and_is_reproducible() {
    let d = TempDir::new().unwrap();
    simulate(d.path(), "separable 1", "10");
    let args = [
        "test", "--data", "obs.csv", "--out", "t1.json", "--replicates", "99", "--seed", "2", "--t_min", "0",
        "--t_max", "1", "--h_mu", "0.1", "--h_g", "0.06", "--calibration_draws", "0",
    ];
    ok(d.path(), &args);
    let r = json(d.path(), "t1.json");
    assert_eq!(r["null_stats"].as_array().unwrap().len() + r["dropped"].as_u64().unwrap() as usize, 99);
    let p = r["p_value"].as_f64().unwrap();
    assert!(p > 0.0 && p <= 1.0);
    assert_eq!(r["decisions"].as_array().unwrap().len(), 3);
    let mut again = args.to_vec();
    again[4] = "t2.json";
    ok(d.path(), &again);
    assert_eq!(read(d.path(), "t1.json"), read(d.path(), "t2.json"));
}

#[test]
fn cv_reports_a_profile() {
    let d = TempDir::new().unwrap();
    simulate(d.path(), "separable 1", "12");
    ok(d.path(), &[
        "cv", "--data", "obs.csv", "--out", "cv.json", "--t_min", "0", "--t_max", "1", "--k_max", "3",
        "--truth", "truth.csv", "--h_mu", "0.1", "--h_g", "0.06",
    ]);
    let r = json(d.path(), "cv.json");
    assert_eq!(r["profile"].as_array().unwrap().len(), 3);
    assert_eq!(r["target"], "Truth");
    assert_eq!(r["selected_k"], 2);
}

#[test]
fn table_runs_a_small_study() {
    let d = TempDir::new().unwrap();
    ok(d.path(), &[
        "table", "--which", "1", "--n", "30", "--replicates", "3", "--seed", "1", "--scenarios", "separable 1",
        "--h_mu", "0.1", "--h_g", "0.08", "--out", "t.csv",
    ]);
    let t = read(d.path(), "t.csv");
    assert_eq!(t.lines().count(), 1 + 2);
    assert!(t.lines().nth(1).unwrap().starts_with("separable 1,1,"));
}
