//! Synthetic benchmarks: reward and cost surfaces drawn from the GP priors
//! the optimizer itself assumes, observed with Gaussian noise.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::gp::{KernelSpec, PriorSampler, TargetReturn};
use crate::oracle::{brute_force_optimum, ground_truth_points, GroundTruth};
use crate::safe_opt::{Evaluator, Grid, Observation};
use crate::seed::{derive_seed, rng_from_seed};

/// Problem generator; the kernel factorizations are computed once.
#[derive(Debug, Clone)]
pub struct SyntheticSuite {
    pub grid: Grid,
    pub seed_index: usize,
    pub threshold: f64,
    pub reward_offset: f64,
    pub cost_offset: f64,
    pub noise_std: f64,
    /// Draws are kept only if the seed point has `J_g ≤ b − seed_margin`.
    pub seed_margin: f64,
    pub max_attempts: usize,
    sampler_r: PriorSampler,
    sampler_g: PriorSampler,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticProblem {
    pub jr: Vec<f64>,
    pub jg: Vec<f64>,
    pub seed_index: usize,
    pub noise_std: f64,
    /// Redraws needed before the seed point was safe.
    pub attempts: usize,
}

impl SyntheticSuite {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        grid: Grid,
        seed_point: TargetReturn,
        threshold: f64,
        kernel_r: &KernelSpec,
        kernel_g: &KernelSpec,
        reward_offset: f64,
        cost_offset: f64,
        noise_std: f64,
    ) -> Result<Self> {
        if !(noise_std >= 0.0) {
            return Err(Error::invalid("noise_std must be >= 0"));
        }
        let seed_index = grid.nearest(&seed_point, Default::default());
        Ok(Self {
            sampler_r: PriorSampler::new(kernel_r, grid.points())?,
            sampler_g: PriorSampler::new(kernel_g, grid.points())?,
            grid,
            seed_index,
            threshold,
            reward_offset,
            cost_offset,
            noise_std,
            seed_margin: 0.0,
            max_attempts: 1000,
        })
    }

    /// Draws until the seed point satisfies `J_g ≤ b − seed_margin`; attempt `k` uses
    /// sub-seeds derived from `derive_seed(seed, k)`.
    pub fn generate(&self, seed: u64) -> Result<SyntheticProblem> {
        for attempt in 0..self.max_attempts {
            let s = derive_seed(seed, attempt as u64);
            let jg: Vec<f64> = self
                .sampler_g
                .draw_seeded(derive_seed(s, 1))
                .into_iter()
                .map(|v| v + self.cost_offset)
                .collect();
            if jg[self.seed_index] > self.threshold - self.seed_margin {
                continue;
            }
            let jr = self
                .sampler_r
                .draw_seeded(derive_seed(s, 0))
                .into_iter()
                .map(|v| v + self.reward_offset)
                .collect();
            return Ok(SyntheticProblem {
                jr,
                jg,
                seed_index: self.seed_index,
                noise_std: self.noise_std,
                attempts: attempt + 1,
            });
        }
        Err(Error::invalid(format!(
            "no draw with a safe seed point in {} attempts",
            self.max_attempts
        )))
    }
}

impl SyntheticProblem {
    pub fn ground_truth(&self, grid: &Grid, threshold: f64) -> Result<GroundTruth> {
        let values: Vec<(f64, f64)> = self.jr.iter().copied().zip(self.jg.iter().copied()).collect();
        brute_force_optimum(ground_truth_points(grid.points(), &values), threshold)
    }

    /// Noisy evaluator; evaluation `k` draws its noise from `derive_seed(seed, k)`.
    pub fn evaluator(&self, seed: u64) -> SyntheticEvaluator<'_> {
        SyntheticEvaluator {
            problem: self,
            seed,
            calls: 0,
        }
    }
}

pub struct SyntheticEvaluator<'a> {
    problem: &'a SyntheticProblem,
    seed: u64,
    calls: u64,
}

impl Evaluator for SyntheticEvaluator<'_> {
    fn evaluate(&mut self, index: usize, _z: TargetReturn) -> Result<Observation> {
        let p = self.problem;
        if index >= p.jr.len() {
            return Err(Error::Evaluator(format!("grid index {index} out of range")));
        }
        let mut rng = rng_from_seed(derive_seed(self.seed, self.calls));
        self.calls += 1;
        let (nr, ng) = if p.noise_std > 0.0 {
            let normal = Normal::new(0.0, p.noise_std).map_err(|e| Error::Evaluator(e.to_string()))?;
            (normal.sample(&mut rng), normal.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };
        Ok(Observation {
            y_r: p.jr[index] + nr,
            y_g: p.jg[index] + ng,
            se_r: Some(p.noise_std),
            se_g: Some(p.noise_std),
            truth: Some((p.jr[index], p.jg[index])),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn suite() -> SyntheticSuite {
        let grid = Grid::lattice((0.0, 4.0), 5, (0.0, 4.0), 5).unwrap();
        let k = KernelSpec::new(2.0, 2.0, 1.0).unwrap();
        SyntheticSuite::new(grid, TargetReturn::new(0.0, 0.0), 3.5, &k, &k, 0.0, 3.0, 0.1).unwrap()
    }

    #[test]
    fn seed_point_is_always_safe() {
        let s = suite();
        for seed in 0..50 {
            let p = s.generate(seed).unwrap();
            assert!(p.jg[p.seed_index] <= 3.5);
        }
    }

    #[test]
    fn generation_and_noise_are_deterministic() {
        let s = suite();
        let p = s.generate(4).unwrap();
        assert_eq!(p, s.generate(4).unwrap());
        let z = TargetReturn::new(0.0, 0.0);
        let a = p.evaluator(9).evaluate(3, z).unwrap();
        let b = p.evaluator(9).evaluate(3, z).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.truth, Some((p.jr[3], p.jg[3])));
    }

    #[test]
    fn impossible_threshold_is_reported() {
        let mut s = suite();
        s.threshold = -100.0;
        s.max_attempts = 5;
        assert!(s.generate(0).is_err());
    }
}
