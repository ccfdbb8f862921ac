//! Safe optimization of the target-return vector.
//!
//! The loop alternates two phases over a finite grid `Z` of target returns:
//!
//! 1. **Safe exploration**: among certified-safe points that could enlarge
//!    the safe set (expanders), query the one whose contained cost interval
//!    is widest. Stops once that width drops to the tolerance `ζ` or no
//!    expander is left.
//! 2. **Reward maximization**: query the safe point with the largest reward
//!    upper confidence bound.
//!
//! Cost intervals are intersected over iterations (`Λ_N = Λ_{N−1} ∩ Ω_{g,N}`,
//! `Λ_0 = [0, b]`), which makes the bounds `u = max Λ`, `ℓ = min Λ`
//! monotone. With `L > 0` the safe set grows by Lipschitz propagation from
//! already-safe points. With `L = 0` a point is admitted once its own cost
//! upper confidence bound has been at or below `b`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{predict, GpModel, GridPosterior, KernelSpec, Prediction, TargetReturn};
use crate::trace::{Phase, TraceRecord};

/// Noise variances are floored at this fraction of the kernel signal variance.
pub const NOISE_FLOOR_REL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    /// `max(|ΔR|, |ΔG|)`
    #[default]
    Chebyshev,
    Euclidean,
}

impl Distance {
    pub fn eval(&self, a: &TargetReturn, b: &TargetReturn) -> f64 {
        let dr = (a.r - b.r).abs();
        let dg = (a.g - b.g).abs();
        match self {
            Distance::Chebyshev => dr.max(dg),
            Distance::Euclidean => dr.hypot(dg),
        }
    }
}

/// Finite ordered candidate set of target returns.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    points: Vec<TargetReturn>,
}

impl Grid {
    pub fn from_points(points: Vec<TargetReturn>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("grid must be nonempty"));
        }
        Ok(Self { points })
    }

    /// Uniform lattice, `R` major: index `i_r * g_points + i_g`.
    pub fn lattice(r_range: (f64, f64), r_points: usize, g_range: (f64, f64), g_points: usize) -> Result<Self> {
        if r_points == 0 || g_points == 0 {
            return Err(Error::invalid("lattice needs at least one point per axis"));
        }
        let axis = |(lo, hi): (f64, f64), n: usize| -> Result<Vec<f64>> {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::invalid(format!("bad lattice range [{lo}, {hi}]")));
            }
            if n == 1 {
                return Ok(vec![lo]);
            }
            let step = (hi - lo) / (n - 1) as f64;
            Ok((0..n)
                .map(|k| if k + 1 == n { hi } else { lo + step * k as f64 })
                .collect())
        };
        let rs = axis(r_range, r_points)?;
        let gs = axis(g_range, g_points)?;
        let points = rs
            .iter()
            .flat_map(|&r| gs.iter().map(move |&g| TargetReturn::new(r, g)))
            .collect();
        Ok(Self { points })
    }

    pub fn points(&self) -> &[TargetReturn] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn get(&self, i: usize) -> TargetReturn {
        self.points[i]
    }

    /// Index of the grid point nearest to `z` (ties: lowest index).
    pub fn nearest(&self, z: &TargetReturn, distance: Distance) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d = distance.eval(p, z);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }
}

/// Prior mean used for each objective's GP.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum PriorMean {
    /// Mean of the seed-set observations.
    #[default]
    Seed,
    Fixed {
        reward: f64,
        cost: f64,
    },
}

#[derive(Debug, Clone)]
pub struct PlsConfig {
    /// Safety threshold `b`.
    pub threshold: f64,
    /// Allowed failure probability `Δ`.
    pub failure_probability: f64,
    /// Exploration stops when the widest expander interval is at most this.
    pub tolerance: f64,
    pub lipschitz: f64,
    pub grid: Grid,
    pub distance: Distance,
    /// Rollouts per evaluation (passed through to evaluators).
    pub episodes_per_eval: usize,
    pub max_exploration_iters: usize,
    pub max_maximization_iters: usize,
    /// Observation noise variances; estimated from seed evaluations when `None`.
    pub noise_r: Option<f64>,
    pub noise_g: Option<f64>,
    pub kernel_r: KernelSpec,
    pub kernel_g: KernelSpec,
    pub prior_mean: PriorMean,
    pub seed: u64,
    /// Grid indices of `Z₀`.
    pub initial_safe_set: Vec<usize>,
}

impl PlsConfig {
    pub fn new(
        grid: Grid,
        threshold: f64,
        initial_safe_set: Vec<usize>,
        kernel_r: KernelSpec,
        kernel_g: KernelSpec,
    ) -> Self {
        Self {
            threshold,
            failure_probability: 0.1,
            tolerance: 0.05 * threshold,
            lipschitz: 0.0,
            grid,
            distance: Distance::Chebyshev,
            episodes_per_eval: 20,
            max_exploration_iters: 50,
            max_maximization_iters: 50,
            noise_r: None,
            noise_g: None,
            kernel_r,
            kernel_g,
            prior_mean: PriorMean::Seed,
            seed: 0,
            initial_safe_set,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(Error::invalid(format!("threshold must be > 0, got {}", self.threshold)));
        }
        if !(self.failure_probability > 0.0 && self.failure_probability < 1.0) {
            return Err(Error::invalid(format!(
                "failure probability must lie in (0, 1), got {}",
                self.failure_probability
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::invalid("tolerance must be positive"));
        }
        if !(self.lipschitz >= 0.0) {
            return Err(Error::invalid("Lipschitz constant must be >= 0"));
        }
        if self.grid.is_empty() {
            return Err(Error::invalid("grid must be nonempty"));
        }
        if self.initial_safe_set.is_empty() {
            return Err(Error::invalid("initial safe set must be nonempty"));
        }
        if let Some(&bad) = self.initial_safe_set.iter().find(|&&i| i >= self.grid.len()) {
            return Err(Error::invalid(format!("initial safe index {bad} outside grid")));
        }
        if self.episodes_per_eval == 0 {
            return Err(Error::invalid("episodes_per_eval must be >= 1"));
        }
        for v in [self.noise_r, self.noise_g].into_iter().flatten() {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("noise variance must be >= 0, got {v}")));
            }
        }
        self.kernel_r.validate()?;
        self.kernel_g.validate()
    }
}

/// `√(2 ln(|Z| j² π² / (6Δ)))` without range checks on `Δ`.
///
/// Returns NaN when the log argument is below one.
pub fn beta_formula(j: u64, grid_size: u64, delta: f64) -> f64 {
    let j = j as f64;
    let arg = grid_size as f64 * j * j * PI * PI / (6.0 * delta);
    if arg < 1.0 {
        return f64::NAN;
    }
    (2.0 * arg.ln()).sqrt()
}

/// Confidence multiplier `α_j` for iteration `j`.
pub fn beta_schedule(j: u64, grid_size: u64, delta: f64) -> Result<f64> {
    if j == 0 || grid_size == 0 {
        return Err(Error::invalid("beta_schedule needs j >= 1 and grid_size >= 1"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!(
            "failure probability must lie in (0, 1), got {delta}"
        )));
    }
    Ok(beta_formula(j, grid_size, delta))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }

    /// Intersection; when disjoint, the point of `self` closest to `other`.
    /// The flag reports whether the intersection was empty.
    pub fn intersect_or_nearest(&self, other: &Interval) -> (Interval, bool) {
        let lo = self.lo.max(other.lo);
        let hi = self.hi.min(other.hi);
        if lo <= hi {
            (Interval::new(lo, hi), false)
        } else if other.hi < self.lo {
            (Interval::new(self.lo, self.lo), true)
        } else {
            (Interval::new(self.hi, self.hi), true)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointBounds {
    /// `Ω_r`
    pub reward: Interval,
    /// `Ω_g`
    pub cost: Interval,
    /// `Λ`
    pub contained: Interval,
    /// Some cost upper confidence bound at this point has been `<= b`.
    pub certified: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceState {
    pub points: Vec<PointBounds>,
    /// Index `j` of the last update (0 before any).
    pub iteration: u64,
    pub alpha: f64,
    /// Number of empty `Λ ∩ Ω_g` intersections so far.
    pub misfits: usize,
}

impl ConfidenceState {
    pub fn initial(grid_size: usize, threshold: f64) -> Self {
        let unbounded = Interval::new(f64::NEG_INFINITY, f64::INFINITY);
        Self {
            points: vec![
                PointBounds {
                    reward: unbounded,
                    cost: unbounded,
                    contained: Interval::new(0.0, threshold),
                    certified: false,
                };
                grid_size
            ],
            iteration: 0,
            alpha: f64::NAN,
            misfits: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `u_N(z)`
    pub fn upper(&self, i: usize) -> f64 {
        self.points[i].contained.hi
    }

    /// `ℓ_N(z)`
    pub fn lower(&self, i: usize) -> f64 {
        self.points[i].contained.lo
    }

    pub fn width(&self, i: usize) -> f64 {
        self.points[i].contained.width()
    }

    pub fn reward_ucb(&self, i: usize) -> f64 {
        self.points[i].reward.hi
    }
}

/// One confidence update from grid predictions with multiplier `alpha`.
pub fn update_confidence(
    state: &ConfidenceState,
    reward: &[Prediction],
    cost: &[Prediction],
    alpha: f64,
    threshold: f64,
) -> ConfidenceState {
    assert_eq!(reward.len(), state.len());
    assert_eq!(cost.len(), state.len());
    let mut misfits = state.misfits;
    let points = state
        .points
        .iter()
        .zip(reward.iter().zip(cost))
        .map(|(old, (pr, pg))| {
            let omega_r = Interval::new(pr.mean - alpha * pr.std_dev(), pr.mean + alpha * pr.std_dev());
            let omega_g = Interval::new(pg.mean - alpha * pg.std_dev(), pg.mean + alpha * pg.std_dev());
            let (contained, empty) = old.contained.intersect_or_nearest(&omega_g);
            if empty {
                misfits += 1;
            }
            PointBounds {
                reward: omega_r,
                cost: omega_g,
                contained,
                certified: old.certified || omega_g.hi <= threshold,
            }
        })
        .collect();
    ConfidenceState {
        points,
        iteration: state.iteration + 1,
        alpha,
        misfits,
    }
}

/// [`update_confidence`] driven by fitted models, with `α_j` from [`beta_schedule`].
pub fn update_confidence_from_models(
    state: &ConfidenceState,
    gp_r: &GpModel,
    gp_g: &GpModel,
    j: u64,
    cfg: &PlsConfig,
) -> Result<ConfidenceState> {
    let alpha = beta_schedule(j, cfg.grid.len() as u64, cfg.failure_probability)?;
    let reward: Vec<Prediction> = cfg.grid.points().iter().map(|z| predict(gp_r, z)).collect();
    let cost: Vec<Prediction> = cfg.grid.points().iter().map(|z| predict(gp_g, z)).collect();
    Ok(update_confidence(state, &reward, &cost, alpha, cfg.threshold))
}

/// Membership vector for `Y_N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SafeSet {
    members: Vec<bool>,
}

impl SafeSet {
    pub fn from_indices(grid_size: usize, indices: &[usize]) -> Self {
        let mut members = vec![false; grid_size];
        for &i in indices {
            members[i] = true;
        }
        Self { members }
    }

    pub fn contains(&self, i: usize) -> bool {
        self.members[i]
    }

    pub fn len(&self) -> usize {
        self.members.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.members.iter().any(|&m| m)
    }

    pub fn grid_size(&self) -> usize {
        self.members.len()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.members.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i)
    }

    pub fn is_superset_of(&self, other: &SafeSet) -> bool {
        self.members.iter().zip(&other.members).all(|(&a, &b)| a || !b)
    }
}

fn lipschitz_term(lipschitz: f64, d: f64) -> f64 {
    // keeps L = ∞ well-defined on the diagonal
    if d == 0.0 {
        0.0
    } else {
        lipschitz * d
    }
}

/// Computes `Y_N` from `Y_{N−1}` and the current bounds.
pub fn compute_safe_set(prev: &SafeSet, state: &ConfidenceState, cfg: &PlsConfig) -> SafeSet {
    let n = prev.grid_size();
    let b = cfg.threshold;
    let mut members = vec![false; n];
    if cfg.lipschitz > 0.0 {
        let grid = cfg.grid.points();
        for z in prev.indices() {
            let u = state.upper(z);
            for (zp, member) in members.iter_mut().enumerate() {
                if !*member && u + lipschitz_term(cfg.lipschitz, cfg.distance.eval(&grid[z], &grid[zp])) <= b {
                    *member = true;
                }
            }
        }
    } else {
        for (i, member) in members.iter_mut().enumerate() {
            let p = &state.points[i];
            *member = prev.contains(i) || (p.certified && p.contained.hi <= b);
        }
    }
    SafeSet { members }
}

/// Scores how many currently unsafe points a sample at a safe point could certify.
pub struct ExpanderRule<'a> {
    pub safe: &'a SafeSet,
    pub state: &'a ConfidenceState,
    /// Cost posterior; used for the lookahead when `L = 0`.
    pub cost: &'a GridPosterior,
    pub cfg: &'a PlsConfig,
}

impl ExpanderRule<'_> {
    fn unsafe_points(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.safe.grid_size()).filter(|&i| !self.safe.contains(i))
    }

    fn would_certify(&self, z: usize, zp: usize) -> bool {
        let b = self.cfg.threshold;
        let lower = self.state.lower(z);
        if self.cfg.lipschitz > 0.0 {
            let grid = self.cfg.grid.points();
            return lower + lipschitz_term(self.cfg.lipschitz, self.cfg.distance.eval(&grid[z], &grid[zp])) <= b;
        }
        // hallucinate observing ℓ(z) at z and recheck z' against b
        let alpha = self.state.alpha;
        let s2 = self.cost.variance(z) + self.cost.noise_variance();
        let c = self.cost.covariance(z, zp);
        let mean = self.cost.mean(zp) + c / s2 * (lower - self.cost.mean(z));
        let var = (self.cost.variance(zp) - c * c / s2).max(0.0);
        mean + alpha * var.sqrt() <= b
    }

    /// `e_N(z)`
    pub fn score(&self, z: usize) -> usize {
        self.unsafe_points().filter(|&zp| self.would_certify(z, zp)).count()
    }

    /// `e_N(z) > 0`, stopping at the first witness.
    pub fn is_expander(&self, z: usize) -> bool {
        self.unsafe_points().any(|zp| self.would_certify(z, zp))
    }
}

/// `e_N(z)` for every `z ∈ Y_N`.
pub fn expander_scores(
    safe: &SafeSet,
    state: &ConfidenceState,
    cost: &GridPosterior,
    cfg: &PlsConfig,
) -> BTreeMap<usize, usize> {
    let rule = ExpanderRule { safe, state, cost, cfg };
    safe.indices().map(|z| (z, rule.score(z))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExplorationChoice {
    Target(usize),
    Stop,
}

/// Exhaustive form of the exploration rule over precomputed scores.
pub fn select_exploration_target(
    state: &ConfidenceState,
    scores: &BTreeMap<usize, usize>,
    tolerance: f64,
) -> ExplorationChoice {
    let mut best: Option<(usize, f64)> = None;
    for (&z, &e) in scores {
        if e == 0 {
            continue;
        }
        let w = state.width(z);
        if best.is_none_or(|(_, bw)| w > bw) {
            best = Some((z, w));
        }
    }
    match best {
        Some((z, w)) if w > tolerance => ExplorationChoice::Target(z),
        _ => ExplorationChoice::Stop,
    }
}

/// Same rule as [`select_exploration_target`], visiting safe points widest
/// first and evaluating the expander predicate only until one passes.
pub fn select_exploration_target_lazy(
    state: &ConfidenceState,
    safe: &SafeSet,
    tolerance: f64,
    mut is_expander: impl FnMut(usize) -> bool,
) -> ExplorationChoice {
    let mut order: Vec<usize> = safe.indices().collect();
    order.sort_by(|&a, &b| state.width(b).total_cmp(&state.width(a)).then(a.cmp(&b)));
    for z in order {
        if is_expander(z) {
            return if state.width(z) > tolerance {
                ExplorationChoice::Target(z)
            } else {
                ExplorationChoice::Stop
            };
        }
    }
    ExplorationChoice::Stop
}

/// Safe point with the largest reward UCB (ties: lowest index).
pub fn select_maximization_target(safe: &SafeSet, ucb: impl Fn(usize) -> f64) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for z in safe.indices() {
        let v = ucb(z);
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((z, v));
        }
    }
    best.map(|(z, _)| z)
        .ok_or_else(|| Error::InvariantViolation("maximization over an empty safe set".into()))
}

/// One evaluation of the return-conditioned policy at a target return.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Observation {
    pub y_r: f64,
    pub y_g: f64,
    /// Standard errors of the observations, when the evaluator can estimate them.
    pub se_r: Option<f64>,
    pub se_g: Option<f64>,
    /// Exact `(J_r, J_g)` when an oracle is available.
    pub truth: Option<(f64, f64)>,
}

pub trait Evaluator {
    fn evaluate(&mut self, index: usize, z: TargetReturn) -> Result<Observation>;
}

impl<F> Evaluator for F
where
    F: FnMut(usize, TargetReturn) -> Result<Observation>,
{
    fn evaluate(&mut self, index: usize, z: TargetReturn) -> Result<Observation> {
        self(index, z)
    }
}

#[derive(Debug, Clone)]
pub struct PlsRun {
    pub trace: Vec<TraceRecord>,
    /// Grid index of the operating target return.
    pub operating: usize,
    pub safe_set: SafeSet,
    pub confidence: ConfidenceState,
    pub noise_variance: (f64, f64),
    pub prior_mean: (f64, f64),
    /// Number of per-iteration invariant checks that ran (all passed).
    pub invariant_checks: usize,
}

/// Failed run together with the trace collected up to the failure.
#[derive(Debug, thiserror::Error)]
#[error("{cause} (after {} trace records)", partial.len())]
pub struct RunAbort {
    #[source]
    pub cause: Error,
    pub partial: Vec<TraceRecord>,
}

impl From<RunAbort> for Error {
    fn from(a: RunAbort) -> Self {
        a.cause
    }
}

struct Driver<'c> {
    cfg: &'c PlsConfig,
    trace: Vec<TraceRecord>,
    truth: BTreeMap<usize, (f64, f64)>,
    sums: BTreeMap<usize, (f64, f64, usize)>,
}

impl Driver<'_> {
    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        phase: Phase,
        index: usize,
        obs: &Observation,
        safe_set_size: usize,
        alpha: Option<f64>,
        misfits: usize,
    ) {
        let z = self.cfg.grid.get(index);
        let violation = match obs.truth {
            Some((_, jg)) => jg > self.cfg.threshold,
            None => obs.y_g > self.cfg.threshold,
        };
        if let Some(t) = obs.truth {
            self.truth.insert(index, t);
        }
        let e = self.sums.entry(index).or_insert((0.0, 0.0, 0));
        e.0 += obs.y_r;
        e.1 += obs.y_g;
        e.2 += 1;
        self.trace.push(TraceRecord {
            iter: self.trace.len() + 1,
            phase,
            r: z.r,
            g: z.g,
            y_r: obs.y_r,
            y_g: obs.y_g,
            true_jr: obs.truth.map(|t| t.0),
            true_jg: obs.truth.map(|t| t.1),
            safe_set_size,
            alpha_r: alpha,
            alpha_g: alpha,
            violation,
            misfits,
        });
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvariantViolation(msg()))
    }
}

fn check_nesting(prev: &ConfidenceState, next: &ConfidenceState, threshold: f64) -> Result<()> {
    for (i, (a, b)) in prev.points.iter().zip(&next.points).enumerate() {
        check(a.contained.contains_interval(&b.contained), || {
            format!(
                "Λ not nested at grid point {i}: [{}, {}] ⊄ [{}, {}]",
                b.contained.lo, b.contained.hi, a.contained.lo, a.contained.hi
            )
        })?;
        check(
            b.contained.lo >= 0.0 && b.contained.hi <= threshold && b.contained.lo <= b.contained.hi,
            || format!("Λ left [0, b] at grid point {i}"),
        )?;
    }
    Ok(())
}

fn estimate_noise(explicit: Option<f64>, ses: &[Option<f64>], kernel: &KernelSpec, what: &str) -> Result<f64> {
    let raw = match explicit {
        Some(v) => v,
        None => {
            let known: Vec<f64> = ses.iter().flatten().map(|s| s * s).collect();
            if known.len() != ses.len() || known.is_empty() {
                return Err(Error::invalid(format!(
                    "{what} noise variance not configured and evaluator reports no standard errors"
                )));
            }
            known.iter().sum::<f64>() / known.len() as f64
        }
    };
    Ok(raw.max(NOISE_FLOOR_REL * kernel.signal_variance))
}

/// Runs seed evaluation, safe exploration and reward maximization.
///
/// Every query is checked to lie in the current safe set, and the interval
/// and safe-set nesting invariants are checked after every update; a failed
/// check aborts the run with [`Error::InvariantViolation`].
pub fn run_pls<E: Evaluator + ?Sized>(cfg: &PlsConfig, evaluator: &mut E) -> Result<PlsRun, RunAbort> {
    let mut driver = Driver {
        cfg,
        trace: Vec::new(),
        truth: BTreeMap::new(),
        sums: BTreeMap::new(),
    };
    match drive(cfg, evaluator, &mut driver) {
        Ok(run) => Ok(run),
        Err(cause) => Err(RunAbort {
            cause,
            partial: driver.trace,
        }),
    }
}

fn drive<E: Evaluator + ?Sized>(cfg: &PlsConfig, evaluator: &mut E, d: &mut Driver<'_>) -> Result<PlsRun> {
    cfg.validate()?;
    let n = cfg.grid.len();
    let b = cfg.threshold;
    let mut safe = SafeSet::from_indices(n, &cfg.initial_safe_set);
    let mut state = ConfidenceState::initial(n, b);
    let mut checks = 0usize;

    let mut seed_obs = Vec::with_capacity(cfg.initial_safe_set.len());
    for &i in &cfg.initial_safe_set {
        let obs = evaluator.evaluate(i, cfg.grid.get(i))?;
        d.record(Phase::Seed, i, &obs, safe.len(), None, 0);
        seed_obs.push((i, obs));
    }
    let se_r: Vec<Option<f64>> = seed_obs.iter().map(|(_, o)| o.se_r).collect();
    let se_g: Vec<Option<f64>> = seed_obs.iter().map(|(_, o)| o.se_g).collect();
    let noise_r = estimate_noise(cfg.noise_r, &se_r, &cfg.kernel_r, "reward")?;
    let noise_g = estimate_noise(cfg.noise_g, &se_g, &cfg.kernel_g, "cost")?;
    let (mean_r, mean_g) = match cfg.prior_mean {
        PriorMean::Fixed { reward, cost } => (reward, cost),
        PriorMean::Seed => {
            let k = seed_obs.len() as f64;
            (
                seed_obs.iter().map(|(_, o)| o.y_r).sum::<f64>() / k,
                seed_obs.iter().map(|(_, o)| o.y_g).sum::<f64>() / k,
            )
        }
    };
    let mut gp_r = GridPosterior::new(cfg.grid.points(), cfg.kernel_r, noise_r, mean_r)?;
    let mut gp_g = GridPosterior::new(cfg.grid.points(), cfg.kernel_g, noise_g, mean_g)?;
    for (i, obs) in &seed_obs {
        gp_r.observe(*i, obs.y_r)?;
        gp_g.observe(*i, obs.y_g)?;
    }

    let mut phase = Phase::Exploration;
    let (mut explored, mut maximized) = (0usize, 0usize);
    let mut j: u64 = 0;
    loop {
        if phase == Phase::Exploration && explored >= cfg.max_exploration_iters {
            phase = Phase::Maximization;
        }
        if phase == Phase::Maximization && maximized >= cfg.max_maximization_iters {
            break;
        }
        j += 1;
        let alpha = beta_schedule(j, n as u64, cfg.failure_probability)?;
        let reward: Vec<Prediction> = (0..n).map(|i| gp_r.predict(i)).collect();
        let cost: Vec<Prediction> = (0..n).map(|i| gp_g.predict(i)).collect();
        let next_state = update_confidence(&state, &reward, &cost, alpha, b);
        check_nesting(&state, &next_state, b)?;
        state = next_state;
        let next_safe = compute_safe_set(&safe, &state, cfg);
        check(next_safe.is_superset_of(&safe), || {
            format!("safe set shrank at iteration {j}")
        })?;
        safe = next_safe;
        checks += 1;

        let mut target = None;
        if phase == Phase::Exploration {
            let rule = ExpanderRule {
                safe: &safe,
                state: &state,
                cost: &gp_g,
                cfg,
            };
            match select_exploration_target_lazy(&state, &safe, cfg.tolerance, |z| rule.is_expander(z)) {
                ExplorationChoice::Target(z) => target = Some(z),
                ExplorationChoice::Stop => {
                    log::debug!("exploration stopped at iteration {j}");
                    phase = Phase::Maximization;
                    if cfg.max_maximization_iters == 0 {
                        break;
                    }
                }
            }
        }
        let z = match target {
            Some(z) => z,
            None => select_maximization_target(&safe, |i| state.reward_ucb(i))?,
        };
        check(safe.contains(z), || {
            format!("query {z} outside the safe set at iteration {j}")
        })?;
        let obs = evaluator.evaluate(z, cfg.grid.get(z))?;
        gp_r.observe(z, obs.y_r)?;
        gp_g.observe(z, obs.y_g)?;
        d.record(phase, z, &obs, safe.len(), Some(alpha), state.misfits);
        match phase {
            Phase::Exploration => explored += 1,
            _ => maximized += 1,
        }
    }

    let operating = d
        .sums
        .iter()
        .map(|(&i, &(sr, sg, c))| (i, sr / c as f64, sg / c as f64))
        .filter(|&(_, _, g)| g <= b)
        .fold(None, |best: Option<(usize, f64, f64)>, cand| match best {
            Some(bst) if bst.1 >= cand.1 => Some(bst),
            _ => Some(cand),
        })
        .map(|(i, _, _)| i)
        .unwrap_or(cfg.initial_safe_set[0]);
    let (sr, sg, c) = d.sums[&operating];
    let summary = Observation {
        y_r: sr / c as f64,
        y_g: sg / c as f64,
        truth: d.truth.get(&operating).copied(),
        ..Default::default()
    };
    let size = safe.len();
    d.record(Phase::Done, operating, &summary, size, None, state.misfits);
    // the summary row is not an evaluation
    let e = d.sums.get_mut(&operating).unwrap();
    e.0 -= summary.y_r;
    e.1 -= summary.y_g;
    e.2 -= 1;

    Ok(PlsRun {
        trace: std::mem::take(&mut d.trace),
        operating,
        safe_set: safe,
        confidence: state,
        noise_variance: (noise_r, noise_g),
        prior_mean: (mean_r, mean_g),
        invariant_checks: checks,
    })
}
