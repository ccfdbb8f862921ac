//! Finite-horizon tabular CMDPs, trajectory sampling and offline datasets.

use std::borrow::Cow;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from_seed};

/// Tolerance for probability vectors summing to one.
pub const PROB_TOL: f64 = 1e-12;
/// Looser tolerance for distributions handed in by policies at sampling time.
pub const POLICY_PROB_TOL: f64 = 1e-9;

const CMDP_MAGIC: &str = "tabular-cmdp v1";
const DATASET_MAGIC: &str = "cmdp-dataset v1";

/// `⟨S, A, P, H, s₁, r, g⟩` with time-homogeneous tables and optional
/// uniform reward/cost jitter of half-width `jitter`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularCmdp {
    pub name: String,
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub initial_state: usize,
    /// `P[s][a][s']`, flattened.
    pub transitions: Vec<f64>,
    /// `r[s][a]`, flattened.
    pub rewards: Vec<f64>,
    /// `g[s][a]`, flattened.
    pub costs: Vec<f64>,
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    ZeroDimension(&'static str),
    InitialState(usize),
    TableShape {
        table: &'static str,
        expected: usize,
        found: usize,
    },
    NegativeProbability {
        state: usize,
        action: usize,
        next: usize,
        value: f64,
    },
    RowSum {
        state: usize,
        action: usize,
        sum: f64,
    },
    RewardBounds {
        state: usize,
        action: usize,
        value: f64,
    },
    CostBounds {
        state: usize,
        action: usize,
        value: f64,
    },
    Jitter(f64),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ZeroDimension(what) => write!(f, "{what} must be positive"),
            Violation::InitialState(s) => write!(f, "initial state {s} out of range"),
            Violation::TableShape { table, expected, found } => {
                write!(f, "{table} table has {found} entries, expected {expected}")
            }
            Violation::NegativeProbability {
                state,
                action,
                next,
                value,
            } => {
                write!(f, "P[{state}][{action}][{next}] = {value} is negative or non-finite")
            }
            Violation::RowSum { state, action, sum } => {
                write!(f, "P[{state}][{action}] sums to {sum}")
            }
            Violation::RewardBounds { state, action, value } => {
                write!(f, "r[{state}][{action}] = {value} outside [0, 1]")
            }
            Violation::CostBounds { state, action, value } => {
                write!(f, "g[{state}][{action}] = {value} outside [0, 1]")
            }
            Violation::Jitter(d) => write!(f, "jitter half-width {d} must lie in [0, 0.5]"),
        }
    }
}

/// Returns every violated invariant, with indices.
pub fn validate_cmdp(spec: &TabularCmdp) -> std::result::Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let (s_n, a_n) = (spec.num_states, spec.num_actions);
    if s_n == 0 {
        out.push(Violation::ZeroDimension("num_states"));
    }
    if a_n == 0 {
        out.push(Violation::ZeroDimension("num_actions"));
    }
    if spec.horizon == 0 {
        out.push(Violation::ZeroDimension("horizon"));
    }
    if spec.initial_state >= s_n {
        out.push(Violation::InitialState(spec.initial_state));
    }
    if !(spec.jitter >= 0.0 && spec.jitter <= 0.5) {
        out.push(Violation::Jitter(spec.jitter));
    }
    let shapes = [
        ("transition", spec.transitions.len(), s_n * a_n * s_n),
        ("reward", spec.rewards.len(), s_n * a_n),
        ("cost", spec.costs.len(), s_n * a_n),
    ];
    let mut shapes_ok = true;
    for (table, found, expected) in shapes {
        if found != expected {
            out.push(Violation::TableShape { table, expected, found });
            shapes_ok = false;
        }
    }
    if !shapes_ok {
        return Err(out);
    }
    for s in 0..s_n {
        for a in 0..a_n {
            let row = spec.transition_row(s, a);
            for (next, &p) in row.iter().enumerate() {
                if !(p >= 0.0 && p.is_finite()) {
                    out.push(Violation::NegativeProbability {
                        state: s,
                        action: a,
                        next,
                        value: p,
                    });
                }
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > PROB_TOL {
                out.push(Violation::RowSum {
                    state: s,
                    action: a,
                    sum,
                });
            }
            let r = spec.reward(s, a);
            if !(0.0..=1.0).contains(&r) {
                out.push(Violation::RewardBounds {
                    state: s,
                    action: a,
                    value: r,
                });
            }
            let g = spec.cost(s, a);
            if !(0.0..=1.0).contains(&g) {
                out.push(Violation::CostBounds {
                    state: s,
                    action: a,
                    value: g,
                });
            }
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

fn violations_error(v: Vec<Violation>) -> Error {
    let msgs: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    Error::invalid(format!("invalid CMDP: {}", msgs.join("; ")))
}

impl TabularCmdp {
    /// Builds and validates.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        initial_state: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        costs: Vec<f64>,
        jitter: f64,
    ) -> Result<Self> {
        let cmdp = Self {
            name: name.into(),
            num_states,
            num_actions,
            horizon,
            initial_state,
            transitions,
            rewards,
            costs,
            jitter,
        };
        validate_cmdp(&cmdp).map_err(violations_error)?;
        Ok(cmdp)
    }

    #[inline]
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.num_actions + a) * self.num_states;
        &self.transitions[start..start + self.num_states]
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.num_actions + a]
    }

    #[inline]
    pub fn cost(&self, s: usize, a: usize) -> f64 {
        self.costs[s * self.num_actions + a]
    }

    /// True when every `P[s][a]` is a point mass.
    pub fn is_deterministic(&self) -> bool {
        (0..self.num_states)
            .all(|s| (0..self.num_actions).all(|a| self.transition_row(s, a).iter().filter(|&&p| p > 0.0).count() == 1))
    }

    /// Human-readable text form; [`TabularCmdp::from_text`] reads it back bit-exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("# {CMDP_MAGIC}\n"));
        s.push_str(&format!("name {}\n", self.name));
        s.push_str(&format!("states {}\n", self.num_states));
        s.push_str(&format!("actions {}\n", self.num_actions));
        s.push_str(&format!("horizon {}\n", self.horizon));
        s.push_str(&format!("initial {}\n", self.initial_state));
        s.push_str(&format!("jitter {:?}\n", self.jitter));
        s.push_str("# row <state> <action> <reward> <cost> : <P(s'=0)> ... <P(s'=S-1)>\n");
        for st in 0..self.num_states {
            for a in 0..self.num_actions {
                let probs: Vec<String> = self.transition_row(st, a).iter().map(|p| format!("{p:?}")).collect();
                s.push_str(&format!(
                    "row {st} {a} {:?} {:?} : {}\n",
                    self.reward(st, a),
                    self.cost(st, a),
                    probs.join(" ")
                ));
            }
        }
        s
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let perr = |line: usize, message: String| Error::Parse {
            path: origin.to_string(),
            line,
            message,
        };
        let mut header = std::collections::HashMap::new();
        let mut rows: Vec<(usize, usize, usize, f64, f64, Vec<f64>)> = Vec::new();
        let mut saw_magic = false;
        for (k, raw) in text.lines().enumerate() {
            let lineno = k + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                if c.trim() == CMDP_MAGIC {
                    saw_magic = true;
                }
                continue;
            }
            let (key, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            let rest = rest.trim();
            if key == "row" {
                let (lhs, rhs) = rest
                    .split_once(':')
                    .ok_or_else(|| perr(lineno, "row needs `:` before transition probabilities".into()))?;
                let f: Vec<&str> = lhs.split_whitespace().collect();
                if f.len() != 4 {
                    return Err(perr(lineno, "row needs <state> <action> <reward> <cost>".into()));
                }
                let num = |s: &str| {
                    s.parse::<f64>()
                        .map_err(|e| perr(lineno, format!("bad number `{s}`: {e}")))
                };
                let idx = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|e| perr(lineno, format!("bad index `{s}`: {e}")))
                };
                let probs = rhs.split_whitespace().map(num).collect::<Result<Vec<_>>>()?;
                rows.push((lineno, idx(f[0])?, idx(f[1])?, num(f[2])?, num(f[3])?, probs));
            } else {
                if header.insert(key.to_string(), (lineno, rest.to_string())).is_some() {
                    return Err(perr(lineno, format!("duplicate key `{key}`")));
                }
            }
        }
        if !saw_magic {
            return Err(perr(1, format!("missing `# {CMDP_MAGIC}` header")));
        }
        let get = |key: &str| -> Result<&(usize, String)> {
            header.get(key).ok_or_else(|| perr(0, format!("missing `{key}`")))
        };
        let uint = |key: &str| -> Result<usize> {
            let (l, v) = get(key)?;
            v.parse().map_err(|e| perr(*l, format!("`{key}`: {e}")))
        };
        let name = header.get("name").map(|(_, v)| v.clone()).unwrap_or_default();
        let (s_n, a_n) = (uint("states")?, uint("actions")?);
        let horizon = uint("horizon")?;
        let initial = uint("initial")?;
        let jitter = {
            let (l, v) = get("jitter")?;
            v.parse::<f64>().map_err(|e| perr(*l, format!("`jitter`: {e}")))?
        };
        let mut transitions = vec![f64::NAN; s_n * a_n * s_n];
        let mut rewards = vec![f64::NAN; s_n * a_n];
        let mut costs = vec![f64::NAN; s_n * a_n];
        let mut seen = vec![false; s_n * a_n];
        for (l, s, a, r, g, probs) in rows {
            if s >= s_n || a >= a_n {
                return Err(perr(l, format!("row ({s}, {a}) outside {s_n} x {a_n}")));
            }
            if probs.len() != s_n {
                return Err(perr(l, format!("expected {s_n} probabilities, got {}", probs.len())));
            }
            let k = s * a_n + a;
            if std::mem::replace(&mut seen[k], true) {
                return Err(perr(l, format!("duplicate row ({s}, {a})")));
            }
            rewards[k] = r;
            costs[k] = g;
            transitions[k * s_n..(k + 1) * s_n].copy_from_slice(&probs);
        }
        if let Some(k) = seen.iter().position(|&x| !x) {
            return Err(perr(0, format!("missing row ({}, {})", k / a_n, k % a_n)));
        }
        Self::new(name, s_n, a_n, horizon, initial, transitions, rewards, costs, jitter)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// A policy that sees only the time step and current state.
///
/// The interface deliberately offers no access to past rewards or costs.
pub trait BehaviorPolicy: Sync {
    fn action_probs(&self, t: usize, state: usize) -> Cow<'_, [f64]>;
}

/// Behavior policy given as a table over `(t, s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularBehavior {
    pub horizon: usize,
    pub num_states: usize,
    pub num_actions: usize,
    /// `β[t][s][a]`, flattened.
    pub probs: Vec<f64>,
}

impl TabularBehavior {
    pub fn uniform(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self {
            horizon,
            num_states,
            num_actions,
            probs: vec![1.0 / num_actions as f64; horizon * num_states * num_actions],
        }
    }

    pub fn from_fn(
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        mut f: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Result<Self> {
        let mut probs = Vec::with_capacity(horizon * num_states * num_actions);
        for t in 0..horizon {
            for s in 0..num_states {
                let row = f(t, s);
                check_distribution(&row, num_actions)
                    .map_err(|m| Error::invalid(format!("behavior at (t={t}, s={s}): {m}")))?;
                probs.extend(row);
            }
        }
        Ok(Self {
            horizon,
            num_states,
            num_actions,
            probs,
        })
    }
}

impl BehaviorPolicy for TabularBehavior {
    fn action_probs(&self, t: usize, state: usize) -> Cow<'_, [f64]> {
        let start = (t * self.num_states + state) * self.num_actions;
        Cow::Borrowed(&self.probs[start..start + self.num_actions])
    }
}

impl<F> BehaviorPolicy for F
where
    F: Fn(usize, usize) -> Vec<f64> + Sync,
{
    fn action_probs(&self, t: usize, state: usize) -> Cow<'_, [f64]> {
        Cow::Owned(self(t, state))
    }
}

pub(crate) fn check_distribution(p: &[f64], n: usize) -> std::result::Result<(), String> {
    if p.len() != n {
        return Err(format!("expected {n} probabilities, got {}", p.len()));
    }
    if p.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
        return Err("negative or non-finite probability".into());
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > POLICY_PROB_TOL {
        return Err(format!("probabilities sum to {sum}"));
    }
    Ok(())
}

/// Inverse-CDF draw; never returns a zero-probability index.
pub(crate) fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &x) in p.iter().enumerate() {
        if x <= 0.0 {
            continue;
        }
        acc += x;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Table value plus optional uniform jitter, clamped to `[0, 1]`.
pub(crate) fn perturb<R: Rng + ?Sized>(base: f64, jitter: f64, rng: &mut R) -> f64 {
    if jitter > 0.0 {
        (base + rng.random_range(-jitter..=jitter)).clamp(0.0, 1.0)
    } else {
        base
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub steps: Vec<Step>,
    /// `R̂ = Σ r_t`, summed forward.
    pub total_reward: f64,
    /// `Ĝ = Σ g_t`, summed forward.
    pub total_cost: f64,
}

impl Episode {
    pub fn from_steps(steps: Vec<Step>) -> Self {
        let total_reward = steps.iter().fold(0.0, |acc, s| acc + s.reward);
        let total_cost = steps.iter().fold(0.0, |acc, s| acc + s.cost);
        Self {
            steps,
            total_reward,
            total_cost,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Reward-to-go and cost-to-go at every step, accumulated backwards
    /// (`x_t = v_t + x_{t+1}`, starting from `0.0`).
    pub fn returns_to_go(&self) -> Vec<(f64, f64)> {
        let mut out = vec![(0.0, 0.0); self.steps.len()];
        let (mut r, mut g) = (0.0, 0.0);
        for (k, st) in self.steps.iter().enumerate().rev() {
            r += st.reward;
            g += st.cost;
            out[k] = (r, g);
        }
        out
    }
}

/// Samples one episode of length `H`, deterministic given `seed`.
pub fn sample_episode<P: BehaviorPolicy + ?Sized>(cmdp: &TabularCmdp, policy: &P, seed: u64) -> Result<Episode> {
    let mut rng = rng_from_seed(seed);
    let mut s = cmdp.initial_state;
    let mut steps = Vec::with_capacity(cmdp.horizon);
    for t in 0..cmdp.horizon {
        let probs = policy.action_probs(t, s);
        check_distribution(&probs, cmdp.num_actions)
            .map_err(|m| Error::invalid(format!("policy at step t={t} (state {s}): {m}")))?;
        let a = sample_categorical(&probs, &mut rng);
        let reward = perturb(cmdp.reward(s, a), cmdp.jitter, &mut rng);
        let cost = perturb(cmdp.cost(s, a), cmdp.jitter, &mut rng);
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
    Ok(Episode::from_steps(steps))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub episodes: Vec<Episode>,
    pub seed: u64,
    pub behavior: String,
    pub horizon: usize,
    pub num_states: usize,
    pub num_actions: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Smallest and largest episode reward, the normalization anchors.
    pub fn reward_range(&self) -> (f64, f64) {
        self.episodes
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| {
                (lo.min(e.total_reward), hi.max(e.total_reward))
            })
    }

    /// Line-oriented text: header comments, then `episode t s a r g` per step.
    pub fn write_text<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# {DATASET_MAGIC}")?;
        writeln!(out, "# seed={}", self.seed)?;
        writeln!(out, "# behavior={}", self.behavior)?;
        writeln!(out, "# horizon={}", self.horizon)?;
        writeln!(out, "# states={}", self.num_states)?;
        writeln!(out, "# actions={}", self.num_actions)?;
        writeln!(out, "# episode t s a r g")?;
        for (i, ep) in self.episodes.iter().enumerate() {
            for (t, st) in ep.steps.iter().enumerate() {
                writeln!(out, "{i} {t} {} {} {:?} {:?}", st.state, st.action, st.reward, st.cost)?;
            }
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
        let mut meta = std::collections::HashMap::new();
        let mut episodes: Vec<Vec<Step>> = Vec::new();
        for (k, raw) in text.lines().enumerate() {
            let lineno = k + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                if let Some((key, v)) = c.trim().split_once('=') {
                    meta.insert(key.trim().to_string(), v.trim().to_string());
                }
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(perr(lineno, format!("expected 6 fields, got {}", f.len())));
            }
            let idx = |s: &str| {
                s.parse::<usize>()
                    .map_err(|e| perr(lineno, format!("bad index `{s}`: {e}")))
            };
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| perr(lineno, format!("bad number `{s}`: {e}")))
            };
            let (ep, t) = (idx(f[0])?, idx(f[1])?);
            if ep == episodes.len() {
                episodes.push(Vec::new());
            }
            if ep + 1 != episodes.len() || t != episodes[ep].len() {
                return Err(perr(lineno, format!("out-of-order step (episode {ep}, t {t})")));
            }
            episodes[ep].push(Step {
                state: idx(f[2])?,
                action: idx(f[3])?,
                reward: num(f[4])?,
                cost: num(f[5])?,
            });
        }
        let field = |k: &str| -> Result<&String> { meta.get(k).ok_or_else(|| perr(0, format!("missing `# {k}=`"))) };
        let uint = |k: &str| -> Result<usize> { field(k)?.parse().map_err(|e| perr(0, format!("`{k}`: {e}"))) };
        let horizon = uint("horizon")?;
        let ds = Dataset {
            seed: field("seed")?.parse().map_err(|e| perr(0, format!("`seed`: {e}")))?,
            behavior: field("behavior")?.clone(),
            horizon,
            num_states: uint("states")?,
            num_actions: uint("actions")?,
            episodes: episodes.into_iter().map(Episode::from_steps).collect(),
        };
        if let Some(i) = ds.episodes.iter().position(|e| e.len() != horizon) {
            return Err(perr(0, format!("episode {i} does not have length {horizon}")));
        }
        Ok(ds)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }
}

/// `n` i.i.d. episodes; episode `i` uses seed `derive_seed(seed, i)`.
pub fn generate_dataset<P: BehaviorPolicy + ?Sized>(
    cmdp: &TabularCmdp,
    behavior: &P,
    behavior_id: &str,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be >= 1"));
    }
    let episodes = (0..n as u64)
        .into_par_iter()
        .map(|i| sample_episode(cmdp, behavior, derive_seed(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        episodes,
        seed,
        behavior: behavior_id.to_string(),
        horizon: cmdp.horizon,
        num_states: cmdp.num_states,
        num_actions: cmdp.num_actions,
    })
}
