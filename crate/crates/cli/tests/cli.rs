use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pls(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pls"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .canonicalize()
        .unwrap()
}

const SMALL_SYNTHETIC: &str = r#"
schema_version = 1
kind = "synthetic"
name = "small"
seeds = 2
master_seed = 3

[optimizer]
threshold = 3.5
initial_safe = [0.0, 0.0]
prior_mean = { kind = "fixed", reward = 0.0, cost = 3.0 }
max_exploration_iters = 10
max_maximization_iters = 10

[grid]
r_min = 0.0
r_max = 4.0
r_points = 5
g_min = 0.0
g_max = 4.0
g_points = 5

[kernel_r]
lengthscale_r = 1.5
lengthscale_g = 1.5
signal_variance = 1.0

[kernel_g]
lengthscale_r = 1.5
lengthscale_g = 1.5
signal_variance = 1.0

[synthetic]
cost_offset = 3.0
noise_std = 0.05
seed_margin = 0.5
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn files_with_prefix(dir: &Path, prefix: &str) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with(prefix))
        .collect();
    v.sort();
    v
}

fn csv_rows(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).unwrap();
    let headers = rdr.headers().unwrap().clone();
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            headers
                .iter()
                .map(String::from)
                .zip(r.iter().map(String::from))
                .collect()
        })
        .collect()
}

#[test]
fn synthetic_run_writes_one_trace_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL_SYNTHETIC);
    let out = tmp.path().join("out");
    let res = pls(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(
        files_with_prefix(&out, "trace_"),
        ["trace_seed000.csv", "trace_seed001.csv"]
    );
    assert_eq!(files_with_prefix(&out, "ground_truth_").len(), 2);
    for f in ["summary.csv", "summary.txt", "regret.csv"] {
        let text = fs::read_to_string(out.join(f)).unwrap();
        assert!(text.starts_with("# experiment=small\n"), "{f}");
        assert!(text.contains("# master_seed=3\n"), "{f}");
    }
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.contains("invariant failures: 0"), "{stdout}");
}

#[test]
fn reruns_are_byte_identical_and_seed_override_changes_them() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL_SYNTHETIC);
    let cfg = cfg.to_str().unwrap();
    let dirs: Vec<PathBuf> = ["a", "b", "c"].iter().map(|d| tmp.path().join(d)).collect();
    assert!(pls(&["run", "-c", cfg, "-o", dirs[0].to_str().unwrap(), "--jobs", "1"])
        .status
        .success());
    assert!(pls(&["run", "-c", cfg, "-o", dirs[1].to_str().unwrap(), "--jobs", "3"])
        .status
        .success());
    assert!(pls(&["run", "-c", cfg, "-o", dirs[2].to_str().unwrap(), "--seed", "4"])
        .status
        .success());
    let names = files_with_prefix(&dirs[0], "");
    assert_eq!(names, files_with_prefix(&dirs[1], ""));
    for n in &names {
        assert_eq!(
            fs::read(dirs[0].join(n)).unwrap(),
            fs::read(dirs[1].join(n)).unwrap(),
            "{n}"
        );
    }
    let t0 = fs::read_to_string(dirs[0].join("trace_seed000.csv")).unwrap();
    let t2 = fs::read_to_string(dirs[2].join("trace_seed000.csv")).unwrap();
    assert!(t2.contains("# master_seed=4\n"));
    assert_ne!(t0, t2);
}

#[test]
fn corridor_is_safe_and_summary_matches_raw_traces() {
    let tmp = tempfile::tempdir().unwrap();
    let corridor = data_dir().join("cmdp/corridor.cmdp");
    let text = fs::read_to_string(data_dir().join("configs/corridor_b04.toml"))
        .unwrap()
        .replace("seeds = 100", "seeds = 8")
        .replace(
            "\"../cmdp/corridor.cmdp\"",
            &format!("{:?}", corridor.to_str().unwrap()),
        );
    let cfg = write_config(tmp.path(), "corridor.toml", &text);
    let out = tmp.path().join("out");
    let res = pls(&["run", "-c", cfg.to_str().unwrap(), "-o", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let summary = csv_rows(&out.join("summary.csv"));
    assert_eq!(summary.len(), 8);
    let mean_cost = summary
        .iter()
        .map(|r| r["norm_cost"].parse::<f64>().unwrap())
        .sum::<f64>()
        / 8.0;
    assert!(mean_cost <= 1.0, "mean normalized cost {mean_cost}");

    // recompute per-seed statistics from the raw trace and ground-truth files
    let b = 2.0;
    for row in &summary {
        let seed: usize = row["seed"].parse().unwrap();
        let trace = csv_rows(&out.join(format!("trace_seed{seed:03}.csv")));
        let truth = csv_rows(&out.join(format!("ground_truth_seed{seed:03}.csv")));
        let evals: Vec<_> = trace.iter().filter(|t| t["phase"] != "done").collect();
        let count = |phase: &str| {
            evals
                .iter()
                .filter(|t| t["phase"] == phase && t["violation"] == "1")
                .count()
        };
        assert_eq!(row["evaluations"], evals.len().to_string());
        assert_eq!(row["violations_seed"], count("seed").to_string());
        assert_eq!(row["violations_exploration"], count("exploration").to_string());
        assert_eq!(row["violations_maximization"], count("maximization").to_string());
        let done = trace.iter().find(|t| t["phase"] == "done").unwrap();
        assert_eq!((&row["R"], &row["G"]), (&done["R"], &done["G"]));
        let point = truth
            .iter()
            .find(|p| p["R"] == done["R"] && p["G"] == done["G"])
            .unwrap();
        assert_eq!(row["jg"], point["Jg"]);
        let jg: f64 = point["Jg"].parse().unwrap();
        assert_eq!(row["norm_cost"].parse::<f64>().unwrap(), jg / b);
        for t in &evals {
            let violated = t["true_Jg"].parse::<f64>().unwrap() > b;
            assert_eq!(t["violation"] == "1", violated);
        }
    }
}

#[test]
fn report_reads_trace_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL_SYNTHETIC);
    let out = tmp.path().join("out");
    assert!(pls(&["run", "-c", cfg.to_str().unwrap(), "-o", out.to_str().unwrap()])
        .status
        .success());
    let res = pls(&["report", "--traces", out.to_str().unwrap(), "--delta", "0.1"]);
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(res.status.success(), "{stdout}");
    assert!(stdout.contains("trace_seed000.csv"));
    assert!(stdout.contains("PASS"));

    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let res = pls(&["report", "--traces", empty.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("invalid argument"));
}

#[test]
fn validate_reports_file_and_field() {
    let tmp = tempfile::tempdir().unwrap();
    let good = write_config(tmp.path(), "good.toml", SMALL_SYNTHETIC);
    assert!(pls(&["validate", "-c", good.to_str().unwrap()]).status.success());

    let bad = write_config(
        tmp.path(),
        "bad.toml",
        &SMALL_SYNTHETIC.replace("seeds = 2", "seeds = 0"),
    );
    let res = pls(&["validate", "-c", bad.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("bad.toml") && err.contains("`seeds`"), "{err}");

    for cfg in fs::read_dir(data_dir().join("configs")).unwrap() {
        let p = cfg.unwrap().path();
        let res = pls(&["validate", "-c", p.to_str().unwrap()]);
        assert!(
            res.status.success(),
            "{}: {}",
            p.display(),
            String::from_utf8_lossy(&res.stderr)
        );
    }
    let broken = tmp.path().join("broken.cmdp");
    let text = fs::read_to_string(data_dir().join("cmdp/corridor.cmdp")).unwrap();
    fs::write(&broken, text.replacen(": 0.25 0.75 0.0 0.0", ": 0.35 0.75 0.0 0.0", 1)).unwrap();
    let res = pls(&["validate", "--cmdp", broken.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2), "{}", String::from_utf8_lossy(&res.stdout));
    assert!(String::from_utf8_lossy(&res.stderr).contains("broken.cmdp"));
}
