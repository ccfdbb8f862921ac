//! End-to-end runs on tabular CMDPs: dataset, empirical RCB table, exact
//! ground truth over the target grid, and a Monte Carlo evaluator.

use crate::cmdp::{generate_dataset, Dataset, TabularBehavior, TabularCmdp};
use crate::error::{Error, Result};
use crate::gp::TargetReturn;
use crate::oracle::{brute_force_optimum, exact_values_on_grid, ground_truth_points, GroundTruth};
use crate::rcsl::{estimate_rcb_policy, evaluate_policy_mc, RcbPolicyTable, ReturnBinning};
use crate::safe_opt::{Distance, Evaluator, Grid, Observation};
use crate::seed::derive_seed;

pub const BEHAVIOR_ID: &str = "uniform";

/// Everything one seed of a tabular experiment needs.
#[derive(Debug, Clone)]
pub struct TabularProblem {
    pub dataset: Dataset,
    pub table: RcbPolicyTable,
    pub ground_truth: GroundTruth,
    /// Grid index of the known-safe seed target.
    pub seed_index: usize,
    /// Best and worst dataset returns, the reward normalization anchors.
    pub anchors: (f64, f64),
}

impl TabularProblem {
    /// Sub-seeds: `derive_seed(run_seed, 0)` for the dataset.
    pub fn prepare(
        cmdp: &TabularCmdp,
        dataset_size: usize,
        binning: ReturnBinning,
        grid: &Grid,
        threshold: f64,
        run_seed: u64,
    ) -> Result<Self> {
        let behavior = TabularBehavior::uniform(cmdp.horizon, cmdp.num_states, cmdp.num_actions);
        let dataset = generate_dataset(cmdp, &behavior, BEHAVIOR_ID, dataset_size, derive_seed(run_seed, 0))?;
        let table = estimate_rcb_policy(&dataset, binning)?;
        let values = exact_values_on_grid(cmdp, &table, grid.points())?;
        let ground_truth = brute_force_optimum(ground_truth_points(grid.points(), &values), threshold)?;
        let seed_index = grid.nearest(&safest_dataset_return(&dataset)?, Distance::Chebyshev);
        let (lo, hi) = dataset.reward_range();
        Ok(Self {
            dataset,
            table,
            ground_truth,
            seed_index,
            anchors: (lo, hi),
        })
    }

    /// Monte Carlo evaluator; evaluation `k` uses `derive_seed(seed, k)`.
    pub fn evaluator<'a>(&'a self, cmdp: &'a TabularCmdp, episodes: usize, seed: u64) -> TableEvaluator<'a> {
        TableEvaluator {
            cmdp,
            problem: self,
            episodes,
            seed,
            calls: 0,
        }
    }
}

/// Return pair of the lowest-cost dataset trajectory (ties: higher reward).
pub fn safest_dataset_return(dataset: &Dataset) -> Result<TargetReturn> {
    dataset
        .episodes
        .iter()
        .min_by(|a, b| {
            a.total_cost
                .total_cmp(&b.total_cost)
                .then(b.total_reward.total_cmp(&a.total_reward))
        })
        .map(|e| TargetReturn::new(e.total_reward, e.total_cost))
        .ok_or_else(|| Error::invalid("dataset is empty"))
}

pub struct TableEvaluator<'a> {
    cmdp: &'a TabularCmdp,
    problem: &'a TabularProblem,
    episodes: usize,
    seed: u64,
    calls: u64,
}

impl Evaluator for TableEvaluator<'_> {
    fn evaluate(&mut self, index: usize, z: TargetReturn) -> Result<Observation> {
        let est = evaluate_policy_mc(
            self.cmdp,
            &self.problem.table,
            z,
            self.episodes,
            derive_seed(self.seed, self.calls),
        )?;
        self.calls += 1;
        let truth = self.problem.ground_truth.points.get(index).map(|p| (p.jr, p.jg));
        Ok(Observation {
            y_r: est.j_r,
            y_g: est.j_g,
            se_r: Some(est.se_r),
            se_g: Some(est.se_g),
            truth,
        })
    }
}
