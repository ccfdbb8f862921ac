//! Multi-seed experiment driver and its output files.
//!
//! Output layout (all files start with `# master_seed=...` style headers):
//!
//! - `trace_seedNNN.csv`: one per seed, see [`crate::trace`]
//! - `ground_truth_seedNNN.csv`: exact `J_r`, `J_g` over the grid
//! - `summary.csv`: one row per seed
//! - `regret.csv`: mean best-so-far regret per evaluation
//! - `summary.txt`: aggregate statistics
//! - `theory_check.csv`: per-instance results (theory-check experiments)

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::cmdp::TabularCmdp;
use crate::error::{Error, Result};
use crate::oracle::{save_ground_truth, GroundTruth};
use crate::rcsl::ReturnBinning;
use crate::safe_opt::{run_pls, Evaluator, PlsConfig, PlsRun};
use crate::seed::derive_seed;
use crate::trace::{save_trace, Phase, TraceRecord};

use super::config::{ExperimentConfig, ExperimentKind};
use super::report::{best_so_far_regret, mean_std, normalized_metrics, RunSafety};
use super::synthetic::SyntheticSuite;
use super::tabular::TabularProblem;
use super::theory::{fidelity_check, random_deterministic_cmdp, FidelityResult};

/// Tolerance for the fidelity check in theory-check experiments.
pub const FIDELITY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides the config's output directory.
    pub out_dir: Option<PathBuf>,
    /// Overrides the config's master seed.
    pub master_seed: Option<u64>,
    /// Worker threads; `None` uses the global rayon pool.
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedSummary {
    pub seed: usize,
    pub run_seed: u64,
    /// `ok`, or `invariant` when a run aborted on a failed invariant check.
    pub status: String,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "G")]
    pub g: f64,
    /// Exact values at the operating target return (observed means without an oracle).
    pub jr: f64,
    pub jg: f64,
    pub norm_reward: f64,
    pub norm_cost: f64,
    /// `norm_cost <= 1`.
    pub safe: bool,
    pub violations_seed: usize,
    pub violations_exploration: usize,
    pub violations_maximization: usize,
    pub evaluations: usize,
    pub invariant_checks: usize,
    pub misfits: usize,
    /// Best feasible `J_r` on the grid, when the grid has a feasible point.
    pub optimum_jr: Option<f64>,
    pub final_regret: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub out_dir: PathBuf,
    pub summaries: Vec<SeedSummary>,
    pub fidelity: Vec<FidelityResult>,
    /// Failed invariant checks; any nonzero count is a failing experiment.
    pub invariant_failures: usize,
    pub summary_text: String,
}

impl ExperimentOutcome {
    pub fn success(&self) -> bool {
        self.invariant_failures == 0
    }
}

/// Result of one optimizer run, with the ground truth used to score it.
pub struct SeedRun {
    pub trace: Vec<TraceRecord>,
    pub run: Option<PlsRun>,
    pub invariant_failure: Option<String>,
}

/// Runs the optimizer, turning invariant failures into a recorded outcome.
pub fn run_guarded<E: Evaluator + ?Sized>(cfg: &PlsConfig, evaluator: &mut E) -> Result<SeedRun> {
    match run_pls(cfg, evaluator) {
        Ok(run) => Ok(SeedRun {
            trace: run.trace.clone(),
            run: Some(run),
            invariant_failure: None,
        }),
        Err(abort) => match abort.cause {
            Error::InvariantViolation(msg) => Ok(SeedRun {
                trace: abort.partial,
                run: None,
                invariant_failure: Some(msg),
            }),
            other => Err(other),
        },
    }
}

fn header(cfg: &ExperimentConfig, master: u64, extra: &[(&str, String)]) -> Vec<(String, String)> {
    let mut h = vec![
        ("experiment".to_string(), cfg.name.clone()),
        ("kind".to_string(), cfg.kind.as_str().to_string()),
        ("master_seed".to_string(), master.to_string()),
    ];
    h.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
    h
}

struct Scored<'a> {
    seed: usize,
    run_seed: u64,
    outcome: &'a SeedRun,
    truth: &'a GroundTruth,
    anchors: (f64, f64),
    threshold: f64,
}

fn summarize(s: Scored<'_>) -> Result<SeedSummary> {
    let safety = RunSafety::from_records("", &s.outcome.trace);
    let done = s.outcome.trace.iter().rev().find(|r| r.phase == Phase::Done);
    let (r, g, jr, jg) = match done {
        Some(d) => (d.r, d.g, d.true_jr.unwrap_or(d.y_r), d.true_jg.unwrap_or(d.y_g)),
        None => (f64::NAN, f64::NAN, f64::NAN, f64::NAN),
    };
    let (norm_reward, norm_cost) = normalized_metrics(jr, jg, s.anchors.0, s.anchors.1, s.threshold)?;
    let final_regret = s.truth.optimum.and_then(|opt| {
        best_so_far_regret(&s.outcome.trace, opt.jr, s.threshold)
            .last()
            .copied()
            .flatten()
    });
    Ok(SeedSummary {
        seed: s.seed,
        run_seed: s.run_seed,
        status: if s.outcome.invariant_failure.is_some() {
            "invariant"
        } else {
            "ok"
        }
        .to_string(),
        r,
        g,
        jr,
        jg,
        norm_reward,
        norm_cost,
        safe: norm_cost <= 1.0,
        violations_seed: safety.seed,
        violations_exploration: safety.exploration,
        violations_maximization: safety.maximization,
        evaluations: safety.evaluations,
        invariant_checks: s.outcome.run.as_ref().map_or(0, |r| r.invariant_checks),
        misfits: s.outcome.trace.last().map_or(0, |r| r.misfits),
        optimum_jr: s.truth.optimum.map(|o| o.jr),
        final_regret,
    })
}

fn trace_name(seed: usize) -> String {
    format!("trace_seed{seed:03}.csv")
}

fn ground_truth_name(seed: usize) -> String {
    format!("ground_truth_seed{seed:03}.csv")
}

/// Summary row and trace of one seed.
type SeedRows = (SeedSummary, Vec<TraceRecord>);

fn run_synthetic(cfg: &ExperimentConfig, master: u64, out: &Path) -> Result<Vec<SeedRows>> {
    let syn = cfg.synthetic.expect("validated");
    let base = cfg.pls_config(vec![0])?;
    let seed_point = cfg.initial_safe_point().expect("validated");
    let mut suite = SyntheticSuite::new(
        base.grid.clone(),
        seed_point,
        base.threshold,
        &base.kernel_r,
        &base.kernel_g,
        syn.reward_offset,
        syn.cost_offset,
        syn.noise_std,
    )?;
    suite.max_attempts = syn.max_attempts;
    suite.seed_margin = syn.seed_margin;
    (0..cfg.seeds)
        .into_par_iter()
        .map(|k| {
            let run_seed = derive_seed(master, k as u64);
            let problem = suite.generate(derive_seed(run_seed, 0))?;
            let truth = problem.ground_truth(&base.grid, base.threshold)?;
            let mut pls = base.clone();
            pls.initial_safe_set = vec![problem.seed_index];
            pls.seed = run_seed;
            let outcome = run_guarded(&pls, &mut problem.evaluator(derive_seed(run_seed, 1)))?;
            let extra = [("seed", k.to_string()), ("run_seed", run_seed.to_string())];
            let h = header(cfg, master, &extra);
            save_trace(&out.join(trace_name(k)), &h, &outcome.trace)?;
            save_ground_truth(&out.join(ground_truth_name(k)), &h, &truth.points)?;
            let range = truth
                .points
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                    (lo.min(p.jr), hi.max(p.jr))
                });
            let anchors = cfg.normalization.map_or(range, |n| (n.r_min, n.r_max));
            let summary = summarize(Scored {
                seed: k,
                run_seed,
                outcome: &outcome,
                truth: &truth,
                anchors,
                threshold: base.threshold,
            })?;
            Ok((summary, outcome.trace))
        })
        .collect()
}

fn run_tabular(cfg: &ExperimentConfig, master: u64, out: &Path) -> Result<Vec<SeedRows>> {
    let section = cfg.cmdp.as_ref().expect("validated");
    let cmdp = TabularCmdp::load(&cfg.cmdp_path().expect("validated"))?;
    let h = cmdp.horizon as f64;
    let binning = ReturnBinning::new(section.bin_width_r, section.bin_width_g, h)?;
    let base = cfg.pls_config(vec![0])?;
    (0..cfg.seeds)
        .into_par_iter()
        .map(|k| {
            let run_seed = derive_seed(master, k as u64);
            let problem = TabularProblem::prepare(
                &cmdp,
                section.dataset_size,
                binning,
                &base.grid,
                base.threshold,
                run_seed,
            )?;
            let mut pls = base.clone();
            pls.initial_safe_set = vec![problem.seed_index];
            pls.seed = run_seed;
            let mut evaluator = problem.evaluator(&cmdp, pls.episodes_per_eval, derive_seed(run_seed, 1));
            let outcome = run_guarded(&pls, &mut evaluator)?;
            let extra = [
                ("seed", k.to_string()),
                ("run_seed", run_seed.to_string()),
                ("cmdp", cmdp.name.clone()),
            ];
            let hdr = header(cfg, master, &extra);
            save_trace(&out.join(trace_name(k)), &hdr, &outcome.trace)?;
            save_ground_truth(&out.join(ground_truth_name(k)), &hdr, &problem.ground_truth.points)?;
            let anchors = cfg.normalization.map_or(problem.anchors, |n| (n.r_min, n.r_max));
            let summary = summarize(Scored {
                seed: k,
                run_seed,
                outcome: &outcome,
                truth: &problem.ground_truth,
                anchors,
                threshold: base.threshold,
            })?;
            Ok((summary, outcome.trace))
        })
        .collect()
}

fn run_theory(cfg: &ExperimentConfig, master: u64, out: &Path) -> Result<Vec<FidelityResult>> {
    let t = cfg.theory.expect("validated");
    let results = (0..t.instances)
        .into_par_iter()
        .map(|k| {
            let cmdp = random_deterministic_cmdp(
                derive_seed(master, k as u64),
                t.max_states,
                t.max_actions,
                t.max_horizon,
            )?;
            fidelity_check(&cmdp, FIDELITY_TOL)
        })
        .collect::<Result<Vec<_>>>()?;
    let path = out.join("theory_check.csv");
    let mut buf = Vec::new();
    for (k, v) in header(cfg, master, &[]) {
        writeln!(buf, "# {k}={v}").map_err(|e| Error::io(&path, e))?;
    }
    let mut w = csv::Writer::from_writer(&mut buf);
    for r in &results {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    drop(w);
    fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
    Ok(results)
}

fn write_summary_csv(path: &Path, hdr: &[(String, String)], rows: &[SeedSummary]) -> Result<()> {
    let mut buf = Vec::new();
    for (k, v) in hdr {
        writeln!(buf, "# {k}={v}").map_err(|e| Error::io(path, e))?;
    }
    let mut w = csv::Writer::from_writer(&mut buf);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    drop(w);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn write_regret_csv(path: &Path, hdr: &[(String, String)], curves: &[Vec<Option<f64>>]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in hdr {
        let _ = writeln!(text, "# {k}={v}");
    }
    text.push_str("evaluation,runs,mean_regret\n");
    let len = curves.iter().map(Vec::len).max().unwrap_or(0);
    for i in 0..len {
        let vals: Vec<f64> = curves.iter().filter_map(|c| c.get(i).copied().flatten()).collect();
        let mean = if vals.is_empty() {
            String::new()
        } else {
            format!("{:?}", vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let _ = writeln!(text, "{},{},{}", i + 1, vals.len(), mean);
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn summary_text(
    cfg: &ExperimentConfig,
    master: u64,
    rows: &[SeedSummary],
    fidelity: &[FidelityResult],
    failures: usize,
) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "experiment: {}", cfg.name);
    let _ = writeln!(s, "kind: {}", cfg.kind.as_str());
    let _ = writeln!(s, "master_seed: {master}");
    if cfg.kind == ExperimentKind::TheoryCheck {
        let targets: usize = fidelity.iter().map(|f| f.targets).sum();
        let worst = fidelity.iter().map(|f| f.max_deviation).fold(0.0, f64::max);
        let _ = writeln!(s, "instances: {}", fidelity.len());
        let _ = writeln!(s, "targets checked: {targets}");
        let _ = writeln!(s, "max deviation: {worst:e}");
    } else {
        let col = |f: fn(&SeedSummary) -> f64| mean_std(&rows.iter().map(f).collect::<Vec<_>>());
        let (nr, nr_sd) = col(|r| r.norm_reward);
        let (nc, nc_sd) = col(|r| r.norm_cost);
        let _ = writeln!(s, "seeds: {}", rows.len());
        let _ = writeln!(s, "normalized reward: {nr:.4} ± {nr_sd:.4}");
        let _ = writeln!(s, "normalized cost: {nc:.4} ± {nc_sd:.4}");
        let _ = writeln!(
            s,
            "safe operating points: {}/{}",
            rows.iter().filter(|r| r.safe).count(),
            rows.len()
        );
        let _ = writeln!(
            s,
            "violations (seed/exploration/maximization): {}/{}/{}",
            rows.iter().map(|r| r.violations_seed).sum::<usize>(),
            rows.iter().map(|r| r.violations_exploration).sum::<usize>(),
            rows.iter().map(|r| r.violations_maximization).sum::<usize>()
        );
        let violated = rows
            .iter()
            .filter(|r| r.violations_seed + r.violations_exploration + r.violations_maximization > 0)
            .count();
        let _ = writeln!(s, "runs with any violation: {violated}/{}", rows.len());
        let regrets: Vec<f64> = rows.iter().filter_map(|r| r.final_regret).collect();
        if !regrets.is_empty() {
            let (m, sd) = mean_std(&regrets);
            let _ = writeln!(s, "final simple regret: {m:.4} ± {sd:.4}");
        }
    }
    let _ = writeln!(s, "invariant failures: {failures}");
    s
}

/// Runs every seed of the experiment and writes traces and reports.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentOutcome> {
    let out_dir = opts
        .out_dir
        .clone()
        .or_else(|| cfg.output_dir.as_ref().map(|d| cfg.base_dir.join(d)))
        .ok_or_else(|| Error::Config {
            path: cfg.source.clone(),
            field: "output_dir".into(),
            message: "no output directory configured or given".into(),
        })?;
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let master = opts.master_seed.unwrap_or(cfg.master_seed);

    let body = || -> Result<(Vec<SeedRows>, Vec<FidelityResult>)> {
        Ok(match cfg.kind {
            ExperimentKind::Synthetic => (run_synthetic(cfg, master, &out_dir)?, Vec::new()),
            ExperimentKind::Cmdp => (run_tabular(cfg, master, &out_dir)?, Vec::new()),
            ExperimentKind::TheoryCheck => (Vec::new(), run_theory(cfg, master, &out_dir)?),
        })
    };
    let (runs, fidelity) = match opts.jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?
            .install(body)?,
        None => body()?,
    };

    let mut invariant_failures = fidelity.iter().map(|f| f.failures).sum::<usize>();
    invariant_failures += runs.iter().filter(|(s, _)| s.status != "ok").count();
    let hdr = header(cfg, master, &[]);
    let summaries: Vec<SeedSummary> = runs.iter().map(|(s, _)| s.clone()).collect();
    if cfg.kind != ExperimentKind::TheoryCheck {
        write_summary_csv(&out_dir.join("summary.csv"), &hdr, &summaries)?;
        let threshold = cfg.optimizer.as_ref().map_or(f64::INFINITY, |o| o.threshold);
        let curves: Vec<Vec<Option<f64>>> = runs
            .iter()
            .map(|(s, trace)| {
                s.optimum_jr
                    .map_or_else(Vec::new, |opt| best_so_far_regret(trace, opt, threshold))
            })
            .collect();
        write_regret_csv(&out_dir.join("regret.csv"), &hdr, &curves)?;
    }
    let text = summary_text(cfg, master, &summaries, &fidelity, invariant_failures);
    let mut file_text = String::new();
    for (k, v) in &hdr {
        let _ = writeln!(file_text, "# {k}={v}");
    }
    file_text.push_str(&text);
    let path = out_dir.join("summary.txt");
    fs::write(&path, file_text).map_err(|e| Error::io(&path, e))?;
    Ok(ExperimentOutcome {
        out_dir,
        summaries,
        fidelity,
        invariant_failures,
        summary_text: text,
    })
}
