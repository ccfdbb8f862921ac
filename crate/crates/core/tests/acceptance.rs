//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Pass substrings as arguments to run a subset, e.g.
//! `cargo test -p pls-core --test acceptance -- synthetic`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pls_core::cmdp::{generate_dataset, TabularBehavior, TabularCmdp};
use pls_core::gp::{fit_posterior_with_mean, predict, GridPosterior};
use pls_core::harness::report::best_so_far_regret;
use pls_core::harness::synthetic::SyntheticSuite;
use pls_core::harness::{run_experiment, safety_report, ExperimentConfig, RunOptions};
use pls_core::oracle::{brute_force_optimum, exact_rcb_policy, load_ground_truth, GroundTruthPoint};
use pls_core::rcsl::{estimate_rcb_policy, ReturnBinning};
use pls_core::safe_opt::{
    beta_schedule, compute_safe_set, expander_scores, run_pls, update_confidence, ConfidenceState, Distance, Grid,
    PlsConfig, PriorMean, SafeSet,
};
use pls_core::trace::{load_trace, Phase, TraceRecord};
use pls_core::{KernelSpec, TargetReturn};

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/configs")
}

fn load_config(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&configs_dir().join(name)).expect("bundled config")
}

fn run_into(cfg: &ExperimentConfig, dir: &Path, jobs: Option<usize>) -> pls_core::harness::ExperimentOutcome {
    let opts = RunOptions {
        out_dir: Some(dir.to_path_buf()),
        master_seed: None,
        jobs,
    };
    run_experiment(cfg, &opts).expect("experiment runs")
}

fn seed_files(dir: &Path, seeds: usize) -> Vec<(Vec<TraceRecord>, Vec<GroundTruthPoint>)> {
    (0..seeds)
        .map(|k| {
            let trace = load_trace(&dir.join(format!("trace_seed{k:03}.csv"))).unwrap().records;
            let truth = load_ground_truth(&dir.join(format!("ground_truth_seed{k:03}.csv"))).unwrap();
            (trace, truth)
        })
        .collect()
}

// ---------------------------------------------------------------- 1

fn rbf(a: (f64, f64), b: (f64, f64), ls: (f64, f64), sv: f64) -> f64 {
    let dr = (a.0 - b.0) / ls.0;
    let dg = (a.1 - b.1) / ls.1;
    sv * (-0.5 * (dr * dr + dg * dg)).exp()
}

/// Posterior mean and variance by a dense LU solve.
fn direct_posterior(
    x: &[(f64, f64)],
    y: &[f64],
    noise: f64,
    mean: f64,
    ls: (f64, f64),
    sv: f64,
    at: (f64, f64),
) -> (f64, f64) {
    let n = x.len();
    let k = DMatrix::from_fn(n, n, |i, j| rbf(x[i], x[j], ls, sv) + if i == j { noise } else { 0.0 });
    let lu = k.lu();
    let ks = DVector::from_fn(n, |i, _| rbf(x[i], at, ls, sv));
    let resid = DVector::from_fn(n, |i, _| y[i] - mean);
    let alpha = lu.solve(&resid).expect("nonsingular");
    let v = lu.solve(&ks).expect("nonsingular");
    (mean + ks.dot(&alpha), rbf(at, at, ls, sv) - ks.dot(&v))
}

fn gp_correctness() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_mean, mut worst_var, mut worst_rise) = (0.0f64, 0.0f64, f64::NEG_INFINITY);
    for _ in 0..500 {
        let n = rng.random_range(1..=50);
        let ls = (rng.random_range(0.3..3.0), rng.random_range(0.3..3.0));
        let sv = rng.random_range(0.2..3.0);
        let noise = 10f64.powf(rng.random_range(-4.0..0.0));
        let mean = rng.random_range(-2.0..2.0);
        let x: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)))
            .collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let tests: Vec<(f64, f64)> = (0..8)
            .map(|_| (rng.random_range(-1.0..11.0), rng.random_range(-1.0..11.0)))
            .chain(x.iter().take(2).copied())
            .collect();
        let spec = KernelSpec::new(ls.0, ls.1, sv).unwrap();
        let inputs: Vec<TargetReturn> = x.iter().map(|&(r, g)| TargetReturn::new(r, g)).collect();
        let model = fit_posterior_with_mean(&inputs, &y, noise, mean, &spec).unwrap();
        for &t in &tests {
            let p = predict(&model, &TargetReturn::new(t.0, t.1));
            let (m, v) = direct_posterior(&x, &y, noise, mean, ls, sv, t);
            worst_mean = worst_mean.max((p.mean - m).abs());
            worst_var = worst_var.max((p.variance - v.max(0.0)).abs());
        }
        // appending data, both from scratch and incrementally on a grid
        let grid: Vec<TargetReturn> = inputs
            .iter()
            .copied()
            .chain(tests.iter().map(|&(r, g)| TargetReturn::new(r, g)))
            .collect();
        let mut gp = GridPosterior::new(&grid, spec, noise, mean).unwrap();
        let mut prev_grid: Vec<f64> = (0..grid.len()).map(|i| gp.variance(i)).collect();
        let mut prev_fit: Option<Vec<f64>> = None;
        for k in 0..n {
            gp.observe(k, y[k]).unwrap();
            let now: Vec<f64> = (0..grid.len()).map(|i| gp.variance(i)).collect();
            for (a, b) in prev_grid.iter().zip(&now) {
                worst_rise = worst_rise.max(b - a);
            }
            prev_grid = now;
            let fit = fit_posterior_with_mean(&inputs[..=k], &y[..=k], noise, mean, &spec).unwrap();
            let vars: Vec<f64> = tests
                .iter()
                .map(|&(r, g)| predict(&fit, &TargetReturn::new(r, g)).variance)
                .collect();
            if let Some(p) = &prev_fit {
                for (a, b) in p.iter().zip(&vars) {
                    worst_rise = worst_rise.max(b - a);
                }
            }
            prev_fit = Some(vars);
        }
    }
    let elapsed = start.elapsed();
    let pass = worst_mean <= 1e-8 && worst_var <= 1e-8 && worst_rise <= 1e-9 && elapsed < Duration::from_secs(10);
    Verdict::new(
        pass,
        format!(
            "500 instances; max |Δmean| {worst_mean:.2e}, max |Δvar| {worst_var:.2e} (tol 1e-8); \
             max variance increase {worst_rise:.2e} (tol 1e-9); {:.2}s (limit 10s)",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 2

fn beta_reference() -> Verdict {
    let text = include_str!("data/beta_reference.csv");
    let mut worst = 0.0f64;
    let mut rows = 0;
    for line in text.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let j: u64 = f[0].parse().unwrap();
        let z: u64 = f[1].parse().unwrap();
        let delta: f64 = f[2].parse().unwrap();
        let want: f64 = f[3].parse().unwrap();
        let got = beta_schedule(j, z, delta).unwrap();
        worst = worst.max((got - want).abs());
        rows += 1;
    }
    Verdict::new(
        rows == 100 && worst <= 1e-12,
        format!("{rows} frozen 50-digit reference values; max abs error {worst:.2e} (tol 1e-12)"),
    )
}

// ---------------------------------------------------------------- 3, 4

struct SyntheticRun {
    name: String,
    dir: tempfile::TempDir,
    cfg: ExperimentConfig,
    elapsed: Duration,
}

fn synthetic_runs() -> Vec<SyntheticRun> {
    ["synthetic_a.toml", "synthetic_b.toml"]
        .iter()
        .map(|f| {
            let cfg = load_config(f);
            let dir = tempfile::tempdir().unwrap();
            let start = Instant::now();
            run_into(&cfg, dir.path(), None);
            SyntheticRun {
                name: cfg.name.clone(),
                dir,
                cfg,
                elapsed: start.elapsed(),
            }
        })
        .collect()
}

fn statistical_safety(runs: &[SyntheticRun]) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for r in runs {
        let delta = r.cfg.optimizer.as_ref().unwrap().failure_probability;
        let rep = safety_report(r.dir.path(), delta).unwrap();
        // recount from the raw traces
        let seeds = seed_files(r.dir.path(), r.cfg.seeds);
        let b = r.cfg.optimizer.as_ref().unwrap().threshold;
        let violated = seeds
            .iter()
            .filter(|(trace, _)| {
                trace
                    .iter()
                    .any(|rec| rec.phase != Phase::Done && rec.true_jg.is_some_and(|g| g > b))
            })
            .count();
        pass &= rep.pass && rep.runs.len() == 200 && violated == rep.violated_runs && delta == 0.1;
        parts.push(format!(
            "{}: {}/{} violated, 95% CI [{:.4}, {:.4}], {:.1}s",
            r.name,
            rep.violated_runs,
            rep.runs.len(),
            rep.interval.lower,
            rep.interval.upper,
            r.elapsed.as_secs_f64()
        ));
    }
    Verdict::new(pass, format!("{} (FAIL iff lower > Δ = 0.1)", parts.join("; ")))
}

fn near_optimality(runs: &[SyntheticRun]) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for r in runs {
        let opt = r.cfg.optimizer.as_ref().unwrap();
        let b = opt.threshold;
        let grid = r.cfg.grid.unwrap();
        let mut good = 0;
        let mut monotone = true;
        let mut full_budget = true;
        let seeds = seed_files(r.dir.path(), r.cfg.seeds);
        for (trace, truth) in &seeds {
            let best = brute_force_optimum(truth.clone(), b)
                .unwrap()
                .optimum
                .expect("seed point is feasible");
            let (lo, hi) = truth.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p.jr), hi.max(p.jr))
            });
            let curve = best_so_far_regret(trace, best.jr, b);
            monotone &= curve.windows(2).all(|w| match (w[0], w[1]) {
                (Some(a), Some(c)) => c <= a,
                (None, _) => true,
                (Some(_), None) => false,
            });
            full_budget &=
                trace.iter().filter(|t| t.phase == Phase::Maximization).count() == opt.max_maximization_iters;
            let best_query = trace
                .iter()
                .filter(|t| t.phase != Phase::Done && t.true_jg.unwrap() <= b)
                .map(|t| t.true_jr.unwrap())
                .fold(f64::NEG_INFINITY, f64::max);
            if best.jr - best_query <= 0.1 * (hi - lo) {
                good += 1;
            }
        }
        let frac = good as f64 / seeds.len() as f64;
        pass &= frac >= 0.9 && monotone && full_budget && grid.r_points * grid.g_points == 441;
        parts.push(format!(
            "{}: {good}/{} within 0.1·range ({:.1}%), regret monotone: {monotone}, 150 maximization steps: {full_budget}",
            r.name,
            seeds.len(),
            100.0 * frac
        ));
    }
    Verdict::new(pass, parts.join("; "))
}

// ---------------------------------------------------------------- 5

fn deterministic_fidelity() -> Verdict {
    let cfg = load_config("theory_check.toml");
    let dir = tempfile::tempdir().unwrap();
    let out = run_into(&cfg, dir.path(), None);
    let t = cfg.theory.unwrap();
    let targets: usize = out.fidelity.iter().map(|f| f.targets).sum();
    let worst = out.fidelity.iter().map(|f| f.max_deviation).fold(0.0, f64::max);
    let sizes_ok = out
        .fidelity
        .iter()
        .all(|f| f.states <= 6 && f.horizon <= 8 && f.targets >= 1);
    let pass = out.fidelity.len() == 20
        && t.max_states <= 6
        && t.max_horizon <= 8
        && sizes_ok
        && worst <= 1e-12
        && out.success();
    Verdict::new(
        pass,
        format!(
            "{} instances, {targets} supported targets, max |R̂−R|,|Ĝ−G| = {worst:e} (tol 1e-12)",
            out.fidelity.len()
        ),
    )
}

// ---------------------------------------------------------------- 6

/// Fixed 3-state stochastic instance.
fn three_state_cmdp() -> TabularCmdp {
    #[rustfmt::skip]
    let transitions = vec![
        // s0: a0, a1
        0.6, 0.3, 0.1,   0.1, 0.5, 0.4,
        // s1
        0.3, 0.6, 0.1,   0.2, 0.2, 0.6,
        // s2
        0.5, 0.0, 0.5,   0.1, 0.7, 0.2,
    ];
    let rewards = vec![0.25, 0.75, 0.5, 1.0, 0.0, 0.5];
    let costs = vec![0.0, 0.5, 0.0, 0.5, 0.5, 0.0];
    TabularCmdp::new("three-state", 3, 2, 3, 0, transitions, rewards, costs, 0.0).unwrap()
}

fn rcb_convergence() -> Verdict {
    let start = Instant::now();
    let cmdp = three_state_cmdp();
    let behavior = TabularBehavior::uniform(cmdp.horizon, cmdp.num_states, cmdp.num_actions);
    let binning = ReturnBinning::new(0.5, 0.5, cmdp.horizon as f64).unwrap();
    let exact = exact_rcb_policy(&cmdp, &behavior, binning).unwrap();
    let data = generate_dataset(&cmdp, &behavior, "uniform", 100_000, 6).unwrap();
    let empirical = estimate_rcb_policy(&data, binning).unwrap();
    let (mut checked, mut missing, mut worst) = (0, 0, 0.0f64);
    for (key, e) in &empirical.entries {
        if e.count < 100 {
            continue;
        }
        checked += 1;
        match exact.entries.get(key) {
            Some(x) => {
                let tv = 0.5 * e.probs.iter().zip(&x.probs).map(|(a, b)| (a - b).abs()).sum::<f64>();
                worst = worst.max(tv);
            }
            None => missing += 1,
        }
    }
    let elapsed = start.elapsed();
    let pass = checked > 0 && missing == 0 && worst <= 0.05 && elapsed < Duration::from_secs(60);
    Verdict::new(
        pass,
        format!(
            "n = 1e5, {checked} keys with count >= 100 ({missing} absent from the exact table); \
             max TV {worst:.4} (tol 0.05); {:.2}s (limit 60s)",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 7

fn end_to_end_cmdp() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for name in ["corridor", "patrol", "shortcut"] {
        for level in ["b02", "b04"] {
            let cfg = load_config(&format!("{name}_{level}.toml"));
            let b = cfg.optimizer.as_ref().unwrap().threshold;
            let dir = tempfile::tempdir().unwrap();
            let out = run_into(&cfg, dir.path(), None);
            let mut safe = 0;
            let mut checks_ok = true;
            for ((trace, truth), summary) in seed_files(dir.path(), cfg.seeds).iter().zip(&out.summaries) {
                let done = trace.iter().find(|t| t.phase == Phase::Done).expect("run finished");
                let point = truth
                    .iter()
                    .find(|p| p.r == done.r && p.g == done.g)
                    .expect("operating z on grid");
                if point.jg / b <= 1.0 {
                    safe += 1;
                }
                let iterations = trace
                    .iter()
                    .filter(|t| matches!(t.phase, Phase::Exploration | Phase::Maximization))
                    .count();
                checks_ok &= summary.status == "ok" && summary.invariant_checks == iterations;
            }
            pass &= cfg.seeds == 100 && safe >= 90 && checks_ok && out.success();
            parts.push(format!("{}: {safe}/{} safe", cfg.name, cfg.seeds));
        }
    }
    Verdict::new(
        pass,
        format!(
            "{}; every iteration passed its nesting checks: {pass}",
            parts.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 8

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

fn determinism() -> (bool, String) {
    let mut all = true;
    let mut files = 0;
    for (name, seeds) in [
        ("synthetic_a.toml", 6),
        ("shortcut_b02.toml", 6),
        ("theory_check.toml", 1),
    ] {
        let mut cfg = load_config(name);
        cfg.seeds = seeds;
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run_into(&cfg, a.path(), Some(1));
        run_into(&cfg, b.path(), Some(4));
        let (x, y) = (dir_bytes(a.path()), dir_bytes(b.path()));
        all &= !x.is_empty() && x == y;
        files += x.len();
    }
    (
        all,
        format!("{files} files byte-identical across reruns and thread counts: {all}"),
    )
}

fn exact_scan_optimum(points: &[GroundTruthPoint], b: f64) -> Option<usize> {
    let mut best: Option<&GroundTruthPoint> = None;
    for p in points.iter().filter(|p| p.jg <= b) {
        let better = match best {
            None => true,
            Some(q) => (p.jr, -p.r, -p.g) > (q.jr, -q.r, -q.g),
        };
        if better {
            best = Some(p);
        }
    }
    best.map(|p| p.index)
}

/// Replays a run from its trace with an exhaustive rule scan at every step.
/// Returns (gate violations, selection mismatches, steps).
fn replay(cfg: &PlsConfig, trace: &[TraceRecord], noise: (f64, f64), mean: (f64, f64)) -> (usize, usize, usize) {
    let grid = cfg.grid.points();
    let n = grid.len();
    let index_of = |r: &TraceRecord| {
        let i = cfg.grid.nearest(&TargetReturn::new(r.r, r.g), Distance::Chebyshev);
        assert_eq!((grid[i].r, grid[i].g), (r.r, r.g));
        i
    };
    let mut gp_r = GridPosterior::new(grid, cfg.kernel_r, noise.0, mean.0).unwrap();
    let mut gp_g = GridPosterior::new(grid, cfg.kernel_g, noise.1, mean.1).unwrap();
    let mut state = ConfidenceState::initial(n, cfg.threshold);
    let mut safe = SafeSet::from_indices(n, &cfg.initial_safe_set);
    let (mut gate, mut mismatch, mut steps, mut explored) = (0, 0, 0, 0);
    let mut in_exploration = true;
    let mut j = 0;
    for rec in trace {
        if rec.phase == Phase::Seed {
            let i = index_of(rec);
            gp_r.observe(i, rec.y_r).unwrap();
            gp_g.observe(i, rec.y_g).unwrap();
            continue;
        }
        if rec.phase == Phase::Done {
            break;
        }
        j += 1;
        steps += 1;
        let alpha = beta_schedule(j, n as u64, cfg.failure_probability).unwrap();
        let pr: Vec<_> = (0..n).map(|i| gp_r.predict(i)).collect();
        let pg: Vec<_> = (0..n).map(|i| gp_g.predict(i)).collect();
        state = update_confidence(&state, &pr, &pg, alpha, cfg.threshold);
        safe = compute_safe_set(&safe, &state, cfg);
        let z = index_of(rec);
        if !safe.contains(z) || rec.safe_set_size != safe.len() || rec.alpha_r != Some(alpha) {
            gate += 1;
        }
        // exhaustive exploration rule
        let explore_choice = if in_exploration && explored < cfg.max_exploration_iters {
            let scores = expander_scores(&safe, &state, &gp_g, cfg);
            let mut best: Option<(usize, f64)> = None;
            for (&i, &e) in &scores {
                if e > 0 && best.is_none_or(|(_, w)| state.width(i) > w) {
                    best = Some((i, state.width(i)));
                }
            }
            match best {
                Some((i, w)) if w > cfg.tolerance => Some(i),
                _ => {
                    in_exploration = false;
                    None
                }
            }
        } else {
            in_exploration = false;
            None
        };
        let expected = match explore_choice {
            Some(i) => i,
            None => {
                let mut best = None::<usize>;
                for i in 0..n {
                    if safe.contains(i) && best.is_none_or(|k| state.reward_ucb(i) > state.reward_ucb(k)) {
                        best = Some(i);
                    }
                }
                best.unwrap()
            }
        };
        let phase_ok = (rec.phase == Phase::Exploration) == explore_choice.is_some();
        if expected != z || !phase_ok {
            mismatch += 1;
        }
        if rec.phase == Phase::Exploration {
            explored += 1;
        }
        gp_r.observe(z, rec.y_r).unwrap();
        gp_g.observe(z, rec.y_g).unwrap();
    }
    (gate, mismatch, steps)
}

fn structural_invariants() -> Verdict {
    let (det_ok, det_msg) = determinism();

    // query gate and argmax rules on 5x5 grids
    let grid = Grid::lattice((0.0, 4.0), 5, (0.0, 4.0), 5).unwrap();
    let kernel = KernelSpec::new(1.5, 1.5, 1.0).unwrap();
    let b = 3.5;
    let mut suite = SyntheticSuite::new(
        grid.clone(),
        TargetReturn::new(0.0, 0.0),
        b,
        &kernel,
        &kernel,
        0.0,
        3.0,
        0.05,
    )
    .unwrap();
    suite.seed_margin = 0.5;
    let (mut gate, mut mismatch, mut steps, mut grew) = (0, 0, 0, 0);
    for (seed, lipschitz) in (0..40u64).map(|s| (s, if s % 4 == 3 { 1.0 } else { 0.0 })) {
        let problem = suite.generate(seed).unwrap();
        let mut cfg = PlsConfig::new(grid.clone(), b, vec![problem.seed_index], kernel, kernel);
        cfg.prior_mean = PriorMean::Fixed { reward: 0.0, cost: 3.0 };
        cfg.lipschitz = lipschitz;
        cfg.max_exploration_iters = 15;
        cfg.max_maximization_iters = 15;
        let run = run_pls(&cfg, &mut problem.evaluator(seed + 100)).unwrap();
        if run.safe_set.len() > 1 {
            grew += 1;
        }
        let (g, m, s) = replay(&cfg, &run.trace, run.noise_variance, run.prior_mean);
        gate += g;
        mismatch += m;
        steps += s;
    }

    // brute-force optimum against a direct scan, with many ties
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut opt_mismatch = 0;
    for _ in 0..2000 {
        // distinct lattice points in random order
        let mut cells: Vec<usize> = (0..25).collect();
        for i in (1..25).rev() {
            cells.swap(i, rng.random_range(0..=i));
        }
        cells.truncate(rng.random_range(1..=25));
        let pts: Vec<GroundTruthPoint> = cells
            .iter()
            .enumerate()
            .map(|(i, &c)| GroundTruthPoint {
                index: i,
                r: (c / 5) as f64,
                g: (c % 5) as f64,
                jr: f64::from(rng.random_range(0..5u8)) * 0.5,
                jg: f64::from(rng.random_range(0..5u8)) * 0.5,
            })
            .collect();
        let got = brute_force_optimum(pts.clone(), 1.0).unwrap().optimum.map(|p| p.index);
        if got != exact_scan_optimum(&pts, 1.0) {
            opt_mismatch += 1;
        }
    }

    let pass = det_ok && gate == 0 && mismatch == 0 && opt_mismatch == 0 && grew > 0;
    Verdict::new(
        pass,
        format!(
            "{det_msg}; replayed {steps} steps of 40 runs ({grew} expanded Y): {gate} gate failures, \
             {mismatch} selection mismatches; optimum scan mismatches {opt_mismatch}/2000"
        ),
    )
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let mut failed = 0;
    let mut report = |label: &str, f: &mut dyn FnMut() -> Verdict| {
        if !wanted(label) {
            return;
        }
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(&mut *f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict::new(false, format!("panicked: {msg}"))
        });
        if !v.pass {
            failed += 1;
        }
        println!(
            "{} {label}: {} [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
    };

    report("1 gp-correctness", &mut gp_correctness);
    report("2 beta-schedule", &mut beta_reference);
    let synthetic = if wanted("3 synthetic-safety") || wanted("4 synthetic-optimality") {
        synthetic_runs()
    } else {
        Vec::new()
    };
    report("3 synthetic-safety", &mut || statistical_safety(&synthetic));
    report("4 synthetic-optimality", &mut || near_optimality(&synthetic));
    report("5 deterministic-fidelity", &mut deterministic_fidelity);
    report("6 rcb-convergence", &mut rcb_convergence);
    report("7 cmdp-end-to-end", &mut end_to_end_cmdp);
    report("8 structural-invariants", &mut structural_invariants);

    if failed > 0 {
        println!("{failed} acceptance criterion/criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
