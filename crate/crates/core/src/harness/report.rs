//! Normalized metrics, binomial safety reports and regret curves.

use std::fmt;
use std::path::Path;

use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::trace::{load_trace, Phase, TraceRecord};

/// `((R̂ − R_min) / (R_max − R_min), Ĝ / b)`.
pub fn normalized_metrics(r: f64, g: f64, r_min: f64, r_max: f64, threshold: f64) -> Result<(f64, f64)> {
    if !(r_max > r_min) || !r_min.is_finite() || !r_max.is_finite() {
        return Err(Error::invalid(format!("degenerate reward anchors [{r_min}, {r_max}]")));
    }
    if !(threshold > 0.0) {
        return Err(Error::invalid(format!("threshold must be > 0, got {threshold}")));
    }
    Ok(((r - r_min) / (r_max - r_min), g / threshold))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinomialInterval {
    pub lower: f64,
    pub upper: f64,
    pub confidence: f64,
}

/// Smallest `x` with `I_x(a, b) ≥ p`, by bisection.
fn inverse_beta_reg(a: f64, b: f64, p: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if beta_reg(a, b, mid) >= p {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Exact (Clopper-Pearson) two-sided interval for `k` successes in `n` trials.
pub fn clopper_pearson(k: usize, n: usize, confidence: f64) -> Result<BinomialInterval> {
    if n == 0 || k > n {
        return Err(Error::invalid(format!("need 0 <= k <= n and n >= 1, got k={k}, n={n}")));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::invalid(format!(
            "confidence must lie in (0, 1), got {confidence}"
        )));
    }
    let tail = 0.5 * (1.0 - confidence);
    let (kf, nf) = (k as f64, n as f64);
    let lower = if k == 0 {
        0.0
    } else {
        inverse_beta_reg(kf, nf - kf + 1.0, tail)
    };
    let upper = if k == n {
        1.0
    } else {
        inverse_beta_reg(kf + 1.0, nf - kf, 1.0 - tail)
    };
    Ok(BinomialInterval {
        lower,
        upper,
        confidence,
    })
}

/// Violation counts of one run, by phase.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSafety {
    pub name: String,
    pub seed: usize,
    pub exploration: usize,
    pub maximization: usize,
    pub evaluations: usize,
}

impl RunSafety {
    pub fn from_records(name: impl Into<String>, records: &[TraceRecord]) -> Self {
        let mut r = RunSafety {
            name: name.into(),
            seed: 0,
            exploration: 0,
            maximization: 0,
            evaluations: 0,
        };
        for rec in records {
            if rec.phase == Phase::Done {
                continue;
            }
            r.evaluations += 1;
            if rec.violation {
                match rec.phase {
                    Phase::Seed => r.seed += 1,
                    Phase::Exploration => r.exploration += 1,
                    _ => r.maximization += 1,
                }
            }
        }
        r
    }

    pub fn violated(&self) -> bool {
        self.seed + self.exploration + self.maximization > 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SafetyReport {
    pub runs: Vec<RunSafety>,
    pub violated_runs: usize,
    pub frequency: f64,
    pub interval: BinomialInterval,
    pub delta: f64,
    /// `true` unless the lower confidence bound exceeds `Δ`.
    pub pass: bool,
}

pub const DEFAULT_CONFIDENCE: f64 = 0.95;

pub fn safety_from_runs(runs: Vec<RunSafety>, delta: f64, confidence: f64) -> Result<SafetyReport> {
    if runs.is_empty() {
        return Err(Error::invalid("no runs to report on"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("Δ must lie in (0, 1), got {delta}")));
    }
    let violated_runs = runs.iter().filter(|r| r.violated()).count();
    let n = runs.len();
    let interval = clopper_pearson(violated_runs, n, confidence)?;
    Ok(SafetyReport {
        violated_runs,
        frequency: violated_runs as f64 / n as f64,
        pass: interval.lower <= delta,
        interval,
        delta,
        runs,
    })
}

/// Reads every `trace_*.csv` in `dir` (sorted by name).
pub fn safety_report(dir: &Path, delta: f64) -> Result<SafetyReport> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("trace_") && n.ends_with(".csv"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::invalid(format!("no trace_*.csv files in {}", dir.display())));
    }
    let mut runs = Vec::with_capacity(files.len());
    for f in &files {
        let trace = load_trace(f)?;
        let name = f.file_name().unwrap().to_string_lossy().into_owned();
        runs.push(RunSafety::from_records(name, &trace.records));
    }
    safety_from_runs(runs, delta, DEFAULT_CONFIDENCE)
}

impl fmt::Display for SafetyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "run\tseed\texploration\tmaximization\tevaluations")?;
        for r in &self.runs {
            writeln!(
                f,
                "{}\t{}\t{}\t{}\t{}",
                r.name, r.seed, r.exploration, r.maximization, r.evaluations
            )?;
        }
        writeln!(
            f,
            "runs with a violation: {}/{} (frequency {:.4})",
            self.violated_runs,
            self.runs.len(),
            self.frequency
        )?;
        writeln!(
            f,
            "{:.0}% exact binomial interval: [{:.6}, {:.6}]",
            100.0 * self.interval.confidence,
            self.interval.lower,
            self.interval.upper
        )?;
        write!(
            f,
            "{} (lower bound {} Δ = {})",
            if self.pass { "PASS" } else { "FAIL" },
            if self.pass { "<=" } else { ">" },
            self.delta
        )
    }
}

/// Best-so-far simple regret after each evaluation: `J_r(z*)` minus the best
/// true reward among queries with true cost `≤ b`; `None` until one exists.
pub fn best_so_far_regret(records: &[TraceRecord], optimum: f64, threshold: f64) -> Vec<Option<f64>> {
    let mut best: Option<f64> = None;
    records
        .iter()
        .filter(|r| r.phase != Phase::Done)
        .map(|rec| {
            if let (Some(jr), Some(jg)) = (rec.true_jr, rec.true_jg) {
                if jg <= threshold && best.is_none_or(|b| jr > b) {
                    best = Some(jr);
                }
            }
            best.map(|b| optimum - b)
        })
        .collect()
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
