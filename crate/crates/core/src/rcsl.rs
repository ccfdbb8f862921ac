//! Tabular return-conditioned behavior policies.
//!
//! A table maps `(t, s, reward-to-go bin, cost-to-go bin)` to an action
//! distribution. Rollouts decrement the targets by the realized reward and
//! cost after every step and look the next action up under the clamped,
//! binned remaining targets.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::cmdp::{perturb, sample_categorical, Dataset, Episode, Step, TabularCmdp, PROB_TOL};
use crate::error::{Error, Result};
use crate::gp::TargetReturn;
use crate::seed::{derive_seed, rng_from_seed};

const TABLE_MAGIC: &str = "rcb-table v1";

/// Shared discretization of reward-to-go and cost-to-go.
///
/// Values are clamped to `[0, H]`, then assigned to half-open bins
/// `[k·w, (k+1)·w)`; the last bin is closed at `H`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReturnBinning {
    pub width_r: f64,
    pub width_g: f64,
    pub horizon: f64,
}

impl ReturnBinning {
    pub fn new(width_r: f64, width_g: f64, horizon: f64) -> Result<Self> {
        let b = Self {
            width_r,
            width_g,
            horizon,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::invalid(format!(
                "binning horizon must be positive, got {}",
                self.horizon
            )));
        }
        for (name, w) in [("width_r", self.width_r), ("width_g", self.width_g)] {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {w}")));
            }
        }
        Ok(())
    }

    pub fn num_bins_r(&self) -> usize {
        num_bins(self.horizon, self.width_r)
    }

    pub fn num_bins_g(&self) -> usize {
        num_bins(self.horizon, self.width_g)
    }

    pub fn bin_r(&self, x: f64) -> usize {
        bin_index(x, self.width_r, self.horizon)
    }

    pub fn bin_g(&self, x: f64) -> usize {
        bin_index(x, self.width_g, self.horizon)
    }

    pub fn bins(&self, r: f64, g: f64) -> (usize, usize) {
        (self.bin_r(r), self.bin_g(g))
    }
}

fn num_bins(h: f64, w: f64) -> usize {
    ((h / w - 1e-9).ceil() as usize).max(1)
}

fn bin_index(x: f64, w: f64, h: f64) -> usize {
    let x = if x.is_nan() { 0.0 } else { x.clamp(0.0, h) };
    let k = (x / w).floor() as usize;
    k.min(num_bins(h, w) - 1)
}

/// `(t, s, reward bin, cost bin)`.
pub type TableKey = (usize, usize, usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct TableEntry {
    pub probs: Vec<f64>,
    /// Dataset visits; `0` for tables computed analytically.
    pub count: usize,
    /// Probability of reaching this key (empirical frequency or exact mass).
    pub mass: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fallback {
    /// `(t, s)` marginal action frequencies, then uniform.
    Marginal,
    Uniform,
}

impl Fallback {
    fn as_str(&self) -> &'static str {
        match self {
            Fallback::Marginal => "marginal",
            Fallback::Uniform => "uniform",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RcbPolicyTable {
    pub num_actions: usize,
    pub binning: ReturnBinning,
    pub entries: BTreeMap<TableKey, TableEntry>,
    /// Behavior action distribution per `(t, s)`.
    pub marginals: BTreeMap<(usize, usize), Vec<f64>>,
    pub fallback: Fallback,
    uniform: Vec<f64>,
}

impl RcbPolicyTable {
    pub fn new(num_actions: usize, binning: ReturnBinning, fallback: Fallback) -> Self {
        Self {
            num_actions,
            binning,
            entries: BTreeMap::new(),
            marginals: BTreeMap::new(),
            fallback,
            uniform: vec![1.0 / num_actions as f64; num_actions],
        }
    }

    pub fn get(&self, key: &TableKey) -> Option<&TableEntry> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn key(&self, t: usize, s: usize, target_r: f64, target_g: f64) -> TableKey {
        let (rb, gb) = self.binning.bins(target_r, target_g);
        (t, s, rb, gb)
    }

    /// Stored distribution, or the fallback for unseen keys.
    pub fn lookup(&self, key: &TableKey) -> &[f64] {
        if let Some(e) = self.entries.get(key) {
            return &e.probs;
        }
        if self.fallback == Fallback::Marginal {
            if let Some(m) = self.marginals.get(&(key.0, key.1)) {
                return m;
            }
        }
        &self.uniform
    }

    /// Checks normalization of every stored distribution.
    pub fn validate(&self) -> Result<()> {
        for (key, e) in &self.entries {
            check_normalized(&e.probs, self.num_actions).map_err(|m| Error::invalid(format!("entry {key:?}: {m}")))?;
        }
        for (key, m) in &self.marginals {
            check_normalized(m, self.num_actions).map_err(|msg| Error::invalid(format!("marginal {key:?}: {msg}")))?;
        }
        Ok(())
    }

    /// One line per key: `key t s rb gb count mass : p_0 ... p_{A-1}`.
    pub fn write_text<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# {TABLE_MAGIC}")?;
        writeln!(out, "actions {}", self.num_actions)?;
        writeln!(
            out,
            "binning {:?} {:?} {:?}",
            self.binning.width_r, self.binning.width_g, self.binning.horizon
        )?;
        writeln!(out, "fallback {}", self.fallback.as_str())?;
        for ((t, s), m) in &self.marginals {
            writeln!(out, "marginal {t} {s} : {}", join_probs(m))?;
        }
        for ((t, s, rb, gb), e) in &self.entries {
            writeln!(
                out,
                "key {t} {s} {rb} {gb} {} {:?} : {}",
                e.count,
                e.mass,
                join_probs(&e.probs)
            )?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_text(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let perr = |line: usize, message: String| Error::Parse {
            path: origin.to_string(),
            line,
            message,
        };
        let mut actions = None;
        let mut binning = None;
        let mut fallback = Fallback::Marginal;
        let mut marginals = BTreeMap::new();
        let mut entries = BTreeMap::new();
        for (k, raw) in text.lines().enumerate() {
            let lineno = k + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (lhs, rhs) = match line.split_once(':') {
                Some((l, r)) => (l, Some(r)),
                None => (line, None),
            };
            let f: Vec<&str> = lhs.split_whitespace().collect();
            let idx = |s: &str| {
                s.parse::<usize>()
                    .map_err(|e| perr(lineno, format!("bad integer `{s}`: {e}")))
            };
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| perr(lineno, format!("bad number `{s}`: {e}")))
            };
            let probs = || -> Result<Vec<f64>> {
                rhs.ok_or_else(|| perr(lineno, "missing `:` before probabilities".into()))?
                    .split_whitespace()
                    .map(num)
                    .collect()
            };
            let arity = |n: usize| {
                if f.len() == n {
                    Ok(())
                } else {
                    Err(perr(lineno, format!("`{}` expects {} fields", f[0], n - 1)))
                }
            };
            match f.first().copied() {
                Some("actions") => {
                    arity(2)?;
                    actions = Some(idx(f[1])?);
                }
                Some("binning") => {
                    arity(4)?;
                    binning = Some(
                        ReturnBinning::new(num(f[1])?, num(f[2])?, num(f[3])?)
                            .map_err(|e| perr(lineno, e.to_string()))?,
                    );
                }
                Some("fallback") => {
                    arity(2)?;
                    fallback = match f[1] {
                        "marginal" => Fallback::Marginal,
                        "uniform" => Fallback::Uniform,
                        other => return Err(perr(lineno, format!("unknown fallback `{other}`"))),
                    };
                }
                Some("marginal") => {
                    arity(3)?;
                    marginals.insert((idx(f[1])?, idx(f[2])?), probs()?);
                }
                Some("key") => {
                    arity(7)?;
                    let key = (idx(f[1])?, idx(f[2])?, idx(f[3])?, idx(f[4])?);
                    let entry = TableEntry {
                        count: idx(f[5])?,
                        mass: num(f[6])?,
                        probs: probs()?,
                    };
                    entries.insert(key, entry);
                }
                Some(other) => return Err(perr(lineno, format!("unknown record `{other}`"))),
                None => {}
            }
        }
        let num_actions = actions.ok_or_else(|| perr(0, "missing `actions`".into()))?;
        let binning = binning.ok_or_else(|| perr(0, "missing `binning`".into()))?;
        let mut table = RcbPolicyTable::new(num_actions, binning, fallback);
        table.entries = entries;
        table.marginals = marginals;
        table.validate().map_err(|e| perr(0, e.to_string()))?;
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }
}

fn join_probs(p: &[f64]) -> String {
    p.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

fn check_normalized(p: &[f64], n: usize) -> std::result::Result<(), String> {
    if p.len() != n {
        return Err(format!("expected {n} probabilities, got {}", p.len()));
    }
    if p.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err("probability outside [0, 1]".into());
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(format!("sums to {sum}"));
    }
    Ok(())
}

/// Normalizes nonnegative weights; the largest entry absorbs the rounding
/// residual so the sum is as close to one as floating point allows.
pub(crate) fn normalize(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    let mut p: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let residual = 1.0 - p.iter().sum::<f64>();
    if residual != 0.0 {
        if let Some(imax) = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])) {
            p[imax] = (p[imax] + residual).clamp(0.0, 1.0);
        }
    }
    p
}

/// Empirical RCB table: conditional action frequencies per binned key.
pub fn estimate_rcb_policy(dataset: &Dataset, binning: ReturnBinning) -> Result<RcbPolicyTable> {
    binning.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    let a_n = dataset.num_actions;
    let mut counts: BTreeMap<TableKey, Vec<usize>> = BTreeMap::new();
    let mut marg: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for ep in &dataset.episodes {
        for (t, (step, (rtg_r, rtg_g))) in ep.steps.iter().zip(ep.returns_to_go()).enumerate() {
            if step.action >= a_n {
                return Err(Error::invalid(format!("action {} out of range at t={t}", step.action)));
            }
            let (rb, gb) = binning.bins(rtg_r, rtg_g);
            counts.entry((t, step.state, rb, gb)).or_insert_with(|| vec![0; a_n])[step.action] += 1;
            marg.entry((t, step.state)).or_insert_with(|| vec![0; a_n])[step.action] += 1;
        }
    }
    let n = dataset.len() as f64;
    let to_probs = |c: &[usize]| normalize(&c.iter().map(|&x| x as f64).collect::<Vec<_>>());
    let mut table = RcbPolicyTable::new(a_n, binning, Fallback::Marginal);
    for (key, c) in counts {
        let total: usize = c.iter().sum();
        table.entries.insert(
            key,
            TableEntry {
                probs: to_probs(&c),
                count: total,
                mass: total as f64 / n,
            },
        );
    }
    for (key, c) in marg {
        table.marginals.insert(key, to_probs(&c));
    }
    Ok(table)
}

/// A policy conditioned on the current remaining targets.
pub trait ConditionedPolicy: Sync {
    fn action_distribution(&self, t: usize, state: usize, target_r: f64, target_g: f64) -> Cow<'_, [f64]>;
}

impl ConditionedPolicy for RcbPolicyTable {
    fn action_distribution(&self, t: usize, state: usize, target_r: f64, target_g: f64) -> Cow<'_, [f64]> {
        Cow::Borrowed(self.lookup(&self.key(t, state, target_r, target_g)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedRollout {
    pub episode: Episode,
    /// Unclamped targets `(R_t, G_t)` seen at each step.
    pub targets: Vec<(f64, f64)>,
}

/// Rolls out `policy` from `z`; `R_t = R₁ − Σ_{h<t} r_h` with the sum
/// accumulated forward, so the identity holds exactly.
pub fn rollout_conditioned<P: ConditionedPolicy + ?Sized>(
    cmdp: &TabularCmdp,
    policy: &P,
    z: TargetReturn,
    seed: u64,
) -> Result<ConditionedRollout> {
    let mut rng = rng_from_seed(seed);
    let mut s = cmdp.initial_state;
    let mut steps = Vec::with_capacity(cmdp.horizon);
    let mut targets = Vec::with_capacity(cmdp.horizon);
    let (mut cum_r, mut cum_g) = (0.0, 0.0);
    for t in 0..cmdp.horizon {
        let (tr, tg) = (z.r - cum_r, z.g - cum_g);
        targets.push((tr, tg));
        let probs = policy.action_distribution(t, s, tr, tg);
        crate::cmdp::check_distribution(&probs, cmdp.num_actions)
            .map_err(|m| Error::invalid(format!("policy at step t={t} (state {s}): {m}")))?;
        let a = sample_categorical(&probs, &mut rng);
        let reward = perturb(cmdp.reward(s, a), cmdp.jitter, &mut rng);
        let cost = perturb(cmdp.cost(s, a), cmdp.jitter, &mut rng);
        cum_r += reward;
        cum_g += cost;
        steps.push(Step {
            state: s,
            action: a,
            reward,
            cost,
        });
        if t + 1 < cmdp.horizon {
            s = sample_categorical(cmdp.transition_row(s, a), &mut rng);
        }
    }
    Ok(ConditionedRollout {
        episode: Episode::from_steps(steps),
        targets,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyValueEstimate {
    pub j_r: f64,
    pub j_g: f64,
    pub se_r: f64,
    pub se_g: f64,
    pub episodes: usize,
    pub seed: u64,
}

/// Monte Carlo value of the conditioned policy from `episodes` rollouts,
/// rollout `i` seeded with `derive_seed(seed, i)`.
pub fn evaluate_policy_mc<P: ConditionedPolicy + ?Sized>(
    cmdp: &TabularCmdp,
    policy: &P,
    z: TargetReturn,
    episodes: usize,
    seed: u64,
) -> Result<PolicyValueEstimate> {
    if episodes == 0 {
        return Err(Error::invalid("episode count must be >= 1"));
    }
    let totals = (0..episodes as u64)
        .into_par_iter()
        .map(|i| {
            rollout_conditioned(cmdp, policy, z, derive_seed(seed, i))
                .map(|r| (r.episode.total_reward, r.episode.total_cost))
        })
        .collect::<Result<Vec<_>>>()?;
    let (j_r, se_r) = mean_and_se(totals.iter().map(|x| x.0));
    let (j_g, se_g) = mean_and_se(totals.iter().map(|x| x.1));
    Ok(PolicyValueEstimate {
        j_r,
        j_g,
        se_r,
        se_g,
        episodes,
        seed,
    })
}

/// Sample mean and standard error (zero for a single sample).
pub(crate) fn mean_and_se(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    if n < 2.0 {
        return (mean, 0.0);
    }
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
