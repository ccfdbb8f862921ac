//! Fidelity check on deterministic CMDPs: the exact RCB policy conditioned
//! on any return pair the behavior policy can produce realizes that pair.

use std::borrow::Cow;

use rand::Rng;
use serde::Serialize;

use crate::cmdp::{BehaviorPolicy, TabularBehavior, TabularCmdp};
use crate::error::Result;
use crate::gp::TargetReturn;
use crate::oracle::{exact_rcb_policy, exact_return_distribution};
use crate::rcsl::{ConditionedPolicy, ReturnBinning};
use crate::seed::rng_from_seed;

/// Rewards and costs are multiples of this, so every sum is exact.
pub const VALUE_STEP: f64 = 0.125;
/// Bin width; finer than [`VALUE_STEP`] so distinct returns never share a bin.
pub const FINE_BIN: f64 = 0.0625;

/// Random deterministic CMDP with dyadic rewards and costs and no jitter.
pub fn random_deterministic_cmdp(
    seed: u64,
    max_states: usize,
    max_actions: usize,
    max_horizon: usize,
) -> Result<TabularCmdp> {
    let mut rng = rng_from_seed(seed);
    let s_n = rng.random_range(1..=max_states.max(1));
    let a_n = rng.random_range(1..=max_actions.max(1));
    let h = rng.random_range(1..=max_horizon.max(1));
    let mut transitions = vec![0.0; s_n * a_n * s_n];
    for k in 0..s_n * a_n {
        transitions[k * s_n + rng.random_range(0..s_n)] = 1.0;
    }
    let steps = (1.0 / VALUE_STEP) as u32;
    let value = |rng: &mut rand_chacha::ChaCha8Rng| f64::from(rng.random_range(0..=steps)) * VALUE_STEP;
    let rewards = (0..s_n * a_n).map(|_| value(&mut rng)).collect();
    let costs = (0..s_n * a_n).map(|_| value(&mut rng)).collect();
    TabularCmdp::new(format!("det-{seed}"), s_n, a_n, h, 0, transitions, rewards, costs, 0.0)
}

struct Unconditioned<'a, B: ?Sized>(&'a B);

impl<B: BehaviorPolicy + ?Sized> ConditionedPolicy for Unconditioned<'_, B> {
    fn action_distribution(&self, t: usize, state: usize, _: f64, _: f64) -> Cow<'_, [f64]> {
        self.0.action_probs(t, state)
    }
}

/// Return pairs reachable with positive probability under `behavior`.
pub fn behavior_return_support<B: BehaviorPolicy + ?Sized>(
    cmdp: &TabularCmdp,
    behavior: &B,
) -> Result<Vec<TargetReturn>> {
    Ok(
        exact_return_distribution(cmdp, &Unconditioned(behavior), TargetReturn::new(0.0, 0.0))?
            .into_iter()
            .filter(|&(_, p)| p > 0.0)
            .map(|((r, g), _)| TargetReturn::new(r, g))
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FidelityResult {
    pub instance: String,
    pub states: usize,
    pub actions: usize,
    pub horizon: usize,
    pub targets: usize,
    /// Largest `|R̂ − R|` or `|Ĝ − G|` over all outcomes with positive probability.
    pub max_deviation: f64,
    /// Targets with any outcome off by more than the tolerance.
    pub failures: usize,
}

/// Conditions the exact RCB table of the uniform behavior on every
/// behavior-supported return and enumerates the resulting outcomes.
pub fn fidelity_check(cmdp: &TabularCmdp, tol: f64) -> Result<FidelityResult> {
    let behavior = TabularBehavior::uniform(cmdp.horizon, cmdp.num_states, cmdp.num_actions);
    let h = cmdp.horizon as f64;
    let table = exact_rcb_policy(cmdp, &behavior, ReturnBinning::new(FINE_BIN, FINE_BIN, h)?)?;
    let support = behavior_return_support(cmdp, &behavior)?;
    let mut max_deviation: f64 = 0.0;
    let mut failures = 0;
    for z in &support {
        let dist = exact_return_distribution(cmdp, &table, *z)?;
        let dev = dist
            .iter()
            .filter(|&&(_, p)| p > 0.0)
            .map(|&((r, g), _)| (r - z.r).abs().max((g - z.g).abs()))
            .fold(0.0, f64::max);
        max_deviation = max_deviation.max(dev);
        if dev > tol {
            failures += 1;
        }
    }
    Ok(FidelityResult {
        instance: cmdp.name.clone(),
        states: cmdp.num_states,
        actions: cmdp.num_actions,
        horizon: cmdp.horizon,
        targets: support.len(),
        max_deviation,
        failures,
    })
}
