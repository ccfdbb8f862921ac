//! Exact Gaussian-process regression over target-return pairs `z = (R, G)`.
//!
//! Reward and cost are modeled by independent GPs with an anisotropic RBF
//! kernel. Hyperparameters are fixed per experiment; nothing here fits them.
//!
//! Two entry points exist for the posterior:
//!
//! - [`fit_posterior`] / [`predict`]: a from-scratch Cholesky fit on arbitrary
//!   inputs. This is the reference path.
//! - [`GridPosterior`]: the posterior restricted to a fixed candidate grid,
//!   extended one observation at a time. The optimizer uses this; it is
//!   checked against the reference path in tests.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

/// Noise variances below this get a diagonal jitter of `JITTER_SCALE * signal_variance`.
pub const JITTER_THRESHOLD: f64 = 1e-10;
pub const JITTER_SCALE: f64 = 1e-10;
/// Negative posterior variances beyond this magnitude are counted before clamping.
pub const NEGATIVE_VARIANCE_TOL: f64 = 1e-9;

/// A pair of target returns: desired cumulative reward `r` and cost `g`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetReturn {
    pub r: f64,
    pub g: f64,
}

impl TargetReturn {
    pub fn new(r: f64, g: f64) -> Self {
        Self { r, g }
    }

    /// Checks `0 <= R <= H` and `0 <= G <= H`.
    pub fn validate(&self, horizon: f64) -> Result<()> {
        let ok = |x: f64| x.is_finite() && (0.0..=horizon).contains(&x);
        if ok(self.r) && ok(self.g) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "target return ({}, {}) outside [0, {horizon}]^2",
                self.r, self.g
            )))
        }
    }

    fn is_finite(&self) -> bool {
        self.r.is_finite() && self.g.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub lengthscale_r: f64,
    pub lengthscale_g: f64,
    pub signal_variance: f64,
}

impl KernelSpec {
    pub fn new(lengthscale_r: f64, lengthscale_g: f64, signal_variance: f64) -> Result<Self> {
        let spec = Self {
            lengthscale_r,
            lengthscale_g,
            signal_variance,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lengthscale_r", self.lengthscale_r),
            ("lengthscale_g", self.lengthscale_g),
            ("signal_variance", self.signal_variance),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!(
                    "kernel {name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Unchecked kernel evaluation.
    #[inline]
    pub fn eval(&self, a: &TargetReturn, b: &TargetReturn) -> f64 {
        let dr = (a.r - b.r) / self.lengthscale_r;
        let dg = (a.g - b.g) / self.lengthscale_g;
        self.signal_variance * (-0.5 * (dr * dr + dg * dg)).exp()
    }

    fn jitter(&self, noise_variance: f64) -> f64 {
        if noise_variance < JITTER_THRESHOLD {
            JITTER_SCALE * self.signal_variance
        } else {
            0.0
        }
    }
}

/// `σ² · exp(−½[(R−R')²/ℓ_R² + (G−G')²/ℓ_G²])`.
pub fn rbf_kernel(z: &TargetReturn, z2: &TargetReturn, spec: &KernelSpec) -> Result<f64> {
    spec.validate()?;
    if !z.is_finite() || !z2.is_finite() {
        return Err(Error::invalid("rbf_kernel: non-finite input"));
    }
    Ok(spec.eval(z, z2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
}

impl Prediction {
    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Dense lower-triangular Cholesky factor, stored row by row.
///
/// Rows can be appended, which is how the optimizer grows its posterior.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CholeskyFactor {
    rows: Vec<Vec<f64>>,
}

impl CholeskyFactor {
    /// Factors a symmetric matrix given in row-major order.
    pub fn factor(matrix: &[f64], n: usize) -> Result<Self> {
        assert_eq!(matrix.len(), n * n, "matrix must be n x n");
        let mut out = Self {
            rows: Vec::with_capacity(n),
        };
        for i in 0..n {
            let off = &matrix[i * n..i * n + i];
            out.push_row(off, matrix[i * n + i]).map_err(|e| match e {
                Error::Numerical { min_pivot, .. } => {
                    let diag: Vec<f64> = (0..n).map(|k| matrix[k * n + k]).collect();
                    let max = diag.iter().cloned().fold(f64::MIN, f64::max);
                    let min = diag.iter().cloned().fold(f64::MAX, f64::min);
                    Error::Numerical {
                        message: format!("matrix not positive definite at row {i}"),
                        size: n,
                        min_pivot,
                        diag_ratio: max / min,
                    }
                }
                other => other,
            })?;
        }
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j > i {
            0.0
        } else {
            self.rows[i][j]
        }
    }

    /// Appends a row for a new variable with covariances `cross` against the
    /// existing ones and self-covariance `diag`. Returns the solved row `L⁻¹ cross`.
    pub fn push_row(&mut self, cross: &[f64], diag: f64) -> Result<Vec<f64>> {
        assert_eq!(cross.len(), self.dim());
        let l = self.solve_lower(cross);
        let pivot2 = diag - l.iter().map(|x| x * x).sum::<f64>();
        self.push_solved(l.clone(), pivot2)?;
        Ok(l)
    }

    /// Appends a row whose off-diagonal part `L⁻¹ cross` is already known.
    pub(crate) fn push_solved(&mut self, mut l: Vec<f64>, pivot2: f64) -> Result<()> {
        if !(pivot2 > 0.0) || !pivot2.is_finite() {
            return Err(Error::Numerical {
                message: format!("non-positive pivot at row {}", self.dim()),
                size: self.dim() + 1,
                min_pivot: pivot2,
                diag_ratio: f64::NAN,
            });
        }
        l.push(pivot2.sqrt());
        self.rows.push(l);
        Ok(())
    }

    /// Solves `L x = b`.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        debug_assert_eq!(b.len(), n);
        let mut x = Vec::with_capacity(n);
        for i in 0..n {
            let row = &self.rows[i];
            let s: f64 = row[..i].iter().zip(&x).map(|(l, x)| l * x).sum();
            x.push((b[i] - s) / row[i]);
        }
        x
    }

    /// Solves `Lᵀ x = b`.
    pub fn solve_upper(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut x = b.to_vec();
        for i in (0..n).rev() {
            x[i] /= self.rows[i][i];
            let xi = x[i];
            for (k, l) in self.rows[i][..i].iter().enumerate() {
                x[k] -= l * xi;
            }
        }
        x
    }

    /// `L Lᵀ` in row-major order.
    pub fn reconstruct(&self) -> Vec<f64> {
        let n = self.dim();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let m = i.min(j);
                out[i * n + j] = (0..=m).map(|k| self.get(i, k) * self.get(j, k)).sum();
            }
        }
        out
    }
}

/// A fitted GP for one objective. Immutable after fitting.
#[derive(Debug)]
pub struct GpModel {
    inputs: Vec<TargetReturn>,
    observations: Vec<f64>,
    noise_variance: f64,
    prior_mean: f64,
    kernel: KernelSpec,
    factor: CholeskyFactor,
    /// `(K + ν²I)⁻¹ (y − m)`
    weights: Vec<f64>,
    clamped: AtomicUsize,
}

impl Clone for GpModel {
    fn clone(&self) -> Self {
        Self {
            inputs: self.inputs.clone(),
            observations: self.observations.clone(),
            noise_variance: self.noise_variance,
            prior_mean: self.prior_mean,
            kernel: self.kernel,
            factor: self.factor.clone(),
            weights: self.weights.clone(),
            clamped: AtomicUsize::new(self.clamped.load(Ordering::Relaxed)),
        }
    }
}

impl GpModel {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn inputs(&self) -> &[TargetReturn] {
        &self.inputs
    }

    pub fn observations(&self) -> &[f64] {
        &self.observations
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn prior_mean(&self) -> f64 {
        self.prior_mean
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn factor(&self) -> &CholeskyFactor {
        &self.factor
    }

    /// Number of predictions whose variance came out below `-1e-9` and was clamped.
    pub fn negative_variance_clamps(&self) -> usize {
        self.clamped.load(Ordering::Relaxed)
    }

    /// The regularized kernel matrix `K + ν²I` (plus jitter) the factor was built from.
    pub fn regularized_kernel_matrix(&self) -> Vec<f64> {
        kernel_matrix(&self.inputs, &self.kernel, self.noise_variance)
    }
}

fn kernel_matrix(inputs: &[TargetReturn], kernel: &KernelSpec, noise_variance: f64) -> Vec<f64> {
    let n = inputs.len();
    let diag_add = noise_variance + kernel.jitter(noise_variance);
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = kernel.eval(&inputs[i], &inputs[j]);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
        k[i * n + i] += diag_add;
    }
    k
}

/// Fits a zero-mean GP. See [`fit_posterior_with_mean`].
pub fn fit_posterior(
    inputs: &[TargetReturn],
    observations: &[f64],
    noise_variance: f64,
    spec: &KernelSpec,
) -> Result<GpModel> {
    fit_posterior_with_mean(inputs, observations, noise_variance, 0.0, spec)
}

/// Fits a GP with constant prior mean `prior_mean`, factoring `K + ν²I` from scratch.
pub fn fit_posterior_with_mean(
    inputs: &[TargetReturn],
    observations: &[f64],
    noise_variance: f64,
    prior_mean: f64,
    spec: &KernelSpec,
) -> Result<GpModel> {
    spec.validate()?;
    if inputs.len() != observations.len() {
        return Err(Error::invalid(format!(
            "{} inputs but {} observations",
            inputs.len(),
            observations.len()
        )));
    }
    if !(noise_variance >= 0.0) || !noise_variance.is_finite() {
        return Err(Error::invalid(format!(
            "noise variance must be >= 0, got {noise_variance}"
        )));
    }
    if inputs.iter().any(|z| !z.is_finite()) || observations.iter().any(|y| !y.is_finite()) {
        return Err(Error::invalid("non-finite GP training data"));
    }
    if noise_variance == 0.0 {
        for i in 0..inputs.len() {
            for j in 0..i {
                if inputs[i] == inputs[j] {
                    return Err(Error::invalid(format!(
                        "noiseless GP with repeated input at positions {j} and {i}"
                    )));
                }
            }
        }
    }
    let n = inputs.len();
    let k = kernel_matrix(inputs, spec, noise_variance);
    let factor = CholeskyFactor::factor(&k, n)?;
    let centered: Vec<f64> = observations.iter().map(|y| y - prior_mean).collect();
    let weights = factor.solve_upper(&factor.solve_lower(&centered));
    Ok(GpModel {
        inputs: inputs.to_vec(),
        observations: observations.to_vec(),
        noise_variance,
        prior_mean,
        kernel: *spec,
        factor,
        weights,
        clamped: AtomicUsize::new(0),
    })
}

/// Posterior mean and variance at `z`.
pub fn predict(model: &GpModel, z: &TargetReturn) -> Prediction {
    let kz: Vec<f64> = model.inputs.iter().map(|x| model.kernel.eval(x, z)).collect();
    let mean = model.prior_mean + kz.iter().zip(&model.weights).map(|(a, b)| a * b).sum::<f64>();
    let v = model.factor.solve_lower(&kz);
    let raw = model.kernel.eval(z, z) - v.iter().map(|x| x * x).sum::<f64>();
    let variance = clamp_variance(raw, &model.clamped);
    Prediction { mean, variance }
}

fn clamp_variance(raw: f64, counter: &AtomicUsize) -> f64 {
    if raw < -NEGATIVE_VARIANCE_TOL {
        counter.fetch_add(1, Ordering::Relaxed);
        log::warn!("posterior variance {raw:e} clamped to 0");
    }
    raw.max(0.0)
}

/// GP posterior over a fixed candidate grid, extended one observation at a time.
///
/// Keeps `V = L⁻¹ K(X, grid)` so that adding an observation costs
/// `O(N · |grid|)` and posterior covariances between grid points are
/// available for lookahead (expander) computations.
#[derive(Debug, Clone)]
pub struct GridPosterior {
    grid: Vec<TargetReturn>,
    kernel: KernelSpec,
    noise_variance: f64,
    prior_mean: f64,
    factor: CholeskyFactor,
    observed: Vec<usize>,
    observations: Vec<f64>,
    /// `L⁻¹ (y − m)`
    whitened: Vec<f64>,
    /// rows of `L⁻¹ K(X, grid)`
    cross: Vec<Vec<f64>>,
    mean: Vec<f64>,
    variance: Vec<f64>,
    clamped: usize,
}

impl GridPosterior {
    pub fn new(grid: &[TargetReturn], kernel: KernelSpec, noise_variance: f64, prior_mean: f64) -> Result<Self> {
        kernel.validate()?;
        if !(noise_variance >= 0.0) || !noise_variance.is_finite() {
            return Err(Error::invalid(format!(
                "noise variance must be >= 0, got {noise_variance}"
            )));
        }
        let prior_var = kernel.signal_variance;
        Ok(Self {
            grid: grid.to_vec(),
            kernel,
            noise_variance,
            prior_mean,
            factor: CholeskyFactor::default(),
            observed: Vec::new(),
            observations: Vec::new(),
            whitened: Vec::new(),
            cross: Vec::new(),
            mean: vec![prior_mean; grid.len()],
            variance: vec![prior_var; grid.len()],
            clamped: 0,
        })
    }

    pub fn grid(&self) -> &[TargetReturn] {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.observed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed.is_empty()
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn observed_indices(&self) -> &[usize] {
        &self.observed
    }

    pub fn observations(&self) -> &[f64] {
        &self.observations
    }

    pub fn mean(&self, i: usize) -> f64 {
        self.mean[i]
    }

    pub fn variance(&self, i: usize) -> f64 {
        self.variance[i].max(0.0)
    }

    pub fn predict(&self, i: usize) -> Prediction {
        Prediction {
            mean: self.mean(i),
            variance: self.variance(i),
        }
    }

    pub fn negative_variance_clamps(&self) -> usize {
        self.clamped
    }

    /// Posterior covariance between grid points `i` and `j`.
    pub fn covariance(&self, i: usize, j: usize) -> f64 {
        let prior = self.kernel.eval(&self.grid[i], &self.grid[j]);
        prior - self.cross.iter().map(|row| row[i] * row[j]).sum::<f64>()
    }

    /// Conditions on observation `y` at grid point `i`.
    pub fn observe(&mut self, i: usize, y: f64) -> Result<()> {
        if !y.is_finite() {
            return Err(Error::invalid(format!("non-finite observation {y}")));
        }
        let zi = self.grid[i];
        let l: Vec<f64> = self.cross.iter().map(|row| row[i]).collect();
        let diag_add = self.noise_variance + self.kernel.jitter(self.noise_variance);
        let pivot2 = self.kernel.eval(&zi, &zi) + diag_add - l.iter().map(|x| x * x).sum::<f64>();
        let innov = y - self.prior_mean - l.iter().zip(&self.whitened).map(|(a, b)| a * b).sum::<f64>();
        self.factor.push_solved(l.clone(), pivot2)?;
        let d = pivot2.sqrt();
        let w = innov / d;

        let mut row = Vec::with_capacity(self.grid.len());
        for (j, zj) in self.grid.iter().enumerate() {
            let mut c = self.kernel.eval(&zi, zj);
            for (ln, prev) in l.iter().zip(&self.cross) {
                c -= ln * prev[j];
            }
            row.push(c / d);
        }
        for (j, v) in row.iter().enumerate() {
            self.mean[j] += v * w;
            self.variance[j] -= v * v;
            if self.variance[j] < -NEGATIVE_VARIANCE_TOL {
                self.clamped += 1;
                log::warn!("grid posterior variance {:e} at {j} clamped", self.variance[j]);
                self.variance[j] = 0.0;
            }
        }
        self.cross.push(row);
        self.whitened.push(w);
        self.observed.push(i);
        self.observations.push(y);
        Ok(())
    }

    /// Refits the same data from scratch with [`fit_posterior_with_mean`].
    pub fn refit(&self) -> Result<GpModel> {
        let inputs: Vec<TargetReturn> = self.observed.iter().map(|&i| self.grid[i]).collect();
        fit_posterior_with_mean(
            &inputs,
            &self.observations,
            self.noise_variance,
            self.prior_mean,
            &self.kernel,
        )
    }

    pub fn factor(&self) -> &CholeskyFactor {
        &self.factor
    }
}

/// Draws joint samples from `GP(0, k)` on a fixed grid.
///
/// Exactly coincident grid points share one latent value, so they come out
/// identical rather than merely highly correlated.
#[derive(Debug, Clone)]
pub struct PriorSampler {
    factor: CholeskyFactor,
    /// grid position → index among unique points
    slot: Vec<usize>,
}

impl PriorSampler {
    pub fn new(spec: &KernelSpec, grid: &[TargetReturn]) -> Result<Self> {
        spec.validate()?;
        if grid.is_empty() {
            return Err(Error::invalid("sample_prior_path: empty grid"));
        }
        if grid.iter().any(|z| !z.is_finite()) {
            return Err(Error::invalid("sample_prior_path: non-finite grid point"));
        }
        let mut unique: Vec<TargetReturn> = Vec::new();
        let mut seen: HashMap<(u64, u64), usize> = HashMap::new();
        let mut slot = Vec::with_capacity(grid.len());
        for z in grid {
            let key = (z.r.to_bits(), z.g.to_bits());
            let idx = *seen.entry(key).or_insert_with(|| {
                unique.push(*z);
                unique.len() - 1
            });
            slot.push(idx);
        }
        // always jitter: sample paths are noiseless by construction
        let k = kernel_matrix(&unique, spec, 0.0);
        let factor = CholeskyFactor::factor(&k, unique.len())?;
        Ok(Self { factor, slot })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.factor.dim();
        let xi: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let latent: Vec<f64> = (0..n)
            .map(|i| (0..=i).map(|k| self.factor.get(i, k) * xi[k]).sum())
            .collect();
        self.slot.iter().map(|&s| latent[s]).collect()
    }

    pub fn draw_seeded(&self, seed: u64) -> Vec<f64> {
        self.draw(&mut rng_from_seed(seed))
    }
}

/// One joint draw from `N(0, K_grid + jitter·I)`, deterministic in `seed`.
pub fn sample_prior_path(spec: &KernelSpec, grid: &[TargetReturn], seed: u64) -> Result<Vec<f64>> {
    Ok(PriorSampler::new(spec, grid)?.draw_seeded(seed))
}
