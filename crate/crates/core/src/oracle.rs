//! Exact ground truth on small instances.
//!
//! Conditioned policies are evaluated by forward dynamic programming over the
//! augmented state `(s, cumulative reward, cumulative cost)`; the remaining
//! targets follow from `z` and the cumulative sums exactly as in
//! [`crate::rcsl::rollout_conditioned`], so the DP reproduces rollout
//! semantics bit for bit. Exact RCB tables come from backward return-to-go
//! distributions and the Bayes rule on binned masses.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cmdp::{check_distribution, BehaviorPolicy, TabularCmdp};
use crate::error::{Error, Result};
use crate::gp::TargetReturn;
use crate::rcsl::{normalize, ConditionedPolicy, Fallback, RcbPolicyTable, ReturnBinning, TableEntry};

/// Upper bound on enumerated augmented states.
pub const SIZE_LIMIT: usize = 10_000_000;

type ValueKey = (u64, u64);

fn require_exact(cmdp: &TabularCmdp) -> Result<()> {
    if cmdp.jitter != 0.0 {
        return Err(Error::invalid(format!(
            "exact evaluation needs jitter = 0, `{}` has {}",
            cmdp.name, cmdp.jitter
        )));
    }
    Ok(())
}

/// Exact distribution of the episode totals `(R̂, Ĝ)` under a conditioned
/// policy started at `z`. Entries are sorted by `(R̂, Ĝ)`.
pub fn exact_return_distribution<P: ConditionedPolicy + ?Sized>(
    cmdp: &TabularCmdp,
    policy: &P,
    z: TargetReturn,
) -> Result<Vec<((f64, f64), f64)>> {
    exact_return_distribution_limited(cmdp, policy, z, SIZE_LIMIT)
}

/// As [`exact_return_distribution`] with an explicit state budget.
pub fn exact_return_distribution_limited<P: ConditionedPolicy + ?Sized>(
    cmdp: &TabularCmdp,
    policy: &P,
    z: TargetReturn,
    limit: usize,
) -> Result<Vec<((f64, f64), f64)>> {
    require_exact(cmdp)?;
    let mut layer: BTreeMap<(usize, u64, u64), f64> = BTreeMap::new();
    layer.insert((cmdp.initial_state, 0f64.to_bits(), 0f64.to_bits()), 1.0);
    let mut measured = 1usize;
    for t in 0..cmdp.horizon {
        let mut next: BTreeMap<(usize, u64, u64), f64> = BTreeMap::new();
        for (&(s, rb, gb), &p) in &layer {
            let (cum_r, cum_g) = (f64::from_bits(rb), f64::from_bits(gb));
            let probs = policy.action_distribution(t, s, z.r - cum_r, z.g - cum_g);
            check_distribution(&probs, cmdp.num_actions)
                .map_err(|m| Error::invalid(format!("policy at step t={t} (state {s}): {m}")))?;
            for (a, &pa) in probs.iter().enumerate() {
                if pa <= 0.0 {
                    continue;
                }
                let nr = (cum_r + cmdp.reward(s, a)).to_bits();
                let ng = (cum_g + cmdp.cost(s, a)).to_bits();
                if t + 1 == cmdp.horizon {
                    *next.entry((0, nr, ng)).or_insert(0.0) += p * pa;
                    continue;
                }
                for (sp, &ps) in cmdp.transition_row(s, a).iter().enumerate() {
                    if ps > 0.0 {
                        *next.entry((sp, nr, ng)).or_insert(0.0) += p * pa * ps;
                    }
                }
            }
            if measured + next.len() > limit {
                return Err(Error::SizeGuard {
                    measured: measured + next.len(),
                    limit,
                });
            }
        }
        measured += next.len();
        layer = next;
    }
    Ok(layer
        .into_iter()
        .map(|((_, rb, gb), p)| ((f64::from_bits(rb), f64::from_bits(gb)), p))
        .collect())
}

/// `(J_r, J_g)` of the conditioned policy started at `z`.
pub fn exact_policy_value<P: ConditionedPolicy + ?Sized>(
    cmdp: &TabularCmdp,
    policy: &P,
    z: TargetReturn,
) -> Result<(f64, f64)> {
    let dist = exact_return_distribution(cmdp, policy, z)?;
    Ok(dist
        .iter()
        .fold((0.0, 0.0), |(jr, jg), &((r, g), p)| (jr + p * r, jg + p * g)))
}

/// Exact values for every grid point, computed in parallel.
pub fn exact_values_on_grid<P: ConditionedPolicy + ?Sized>(
    cmdp: &TabularCmdp,
    policy: &P,
    grid: &[TargetReturn],
) -> Result<Vec<(f64, f64)>> {
    grid.par_iter().map(|&z| exact_policy_value(cmdp, policy, z)).collect()
}

/// State occupancy `Pr(s_t = s)` under a Markov behavior policy.
pub fn behavior_occupancy<B: BehaviorPolicy + ?Sized>(cmdp: &TabularCmdp, behavior: &B) -> Result<Vec<Vec<f64>>> {
    let mut occ = vec![vec![0.0; cmdp.num_states]; cmdp.horizon];
    occ[0][cmdp.initial_state] = 1.0;
    for t in 0..cmdp.horizon {
        for s in 0..cmdp.num_states {
            let probs = behavior.action_probs(t, s);
            check_distribution(&probs, cmdp.num_actions)
                .map_err(|m| Error::invalid(format!("behavior at (t={t}, s={s}): {m}")))?;
            if t + 1 == cmdp.horizon || occ[t][s] == 0.0 {
                continue;
            }
            for (a, &pa) in probs.iter().enumerate() {
                for (sp, &ps) in cmdp.transition_row(s, a).iter().enumerate() {
                    occ[t + 1][sp] += occ[t][s] * pa * ps;
                }
            }
        }
    }
    Ok(occ)
}

/// Exact RCB table for a Markov behavior policy under `binning`.
///
/// Keys with zero probability of being reached are omitted; stored entries
/// carry `count = 0` and their exact mass `Pr(s_t = s, bins)`.
pub fn exact_rcb_policy<B: BehaviorPolicy + ?Sized>(
    cmdp: &TabularCmdp,
    behavior: &B,
    binning: ReturnBinning,
) -> Result<RcbPolicyTable> {
    require_exact(cmdp)?;
    binning.validate()?;
    let (h, s_n, a_n) = (cmdp.horizon, cmdp.num_states, cmdp.num_actions);
    let occ = behavior_occupancy(cmdp, behavior)?;

    // rtg[s]: distribution of (reward-to-go, cost-to-go) from (t, s), built
    // backwards with the same accumulation order as the empirical estimator.
    let mut rtg_next: Vec<BTreeMap<ValueKey, f64>> = vec![BTreeMap::new(); s_n];
    let mut table = RcbPolicyTable::new(a_n, binning, Fallback::Marginal);
    let mut measured = 0usize;
    for t in (0..h).rev() {
        let mut rtg_here: Vec<BTreeMap<ValueKey, f64>> = vec![BTreeMap::new(); s_n];
        for s in 0..s_n {
            let beta = behavior.action_probs(t, s);
            let mut per_action: Vec<BTreeMap<ValueKey, f64>> = vec![BTreeMap::new(); a_n];
            for (a, dist) in per_action.iter_mut().enumerate() {
                let (r, g) = (cmdp.reward(s, a), cmdp.cost(s, a));
                if t + 1 == h {
                    dist.insert(((r + 0.0).to_bits(), (g + 0.0).to_bits()), 1.0);
                    continue;
                }
                for (sp, &ps) in cmdp.transition_row(s, a).iter().enumerate() {
                    if ps <= 0.0 {
                        continue;
                    }
                    for (&(xr, xg), &q) in &rtg_next[sp] {
                        let key = ((r + f64::from_bits(xr)).to_bits(), (g + f64::from_bits(xg)).to_bits());
                        *dist.entry(key).or_insert(0.0) += ps * q;
                    }
                }
                measured += dist.len();
            }
            if measured > SIZE_LIMIT {
                return Err(Error::SizeGuard {
                    measured,
                    limit: SIZE_LIMIT,
                });
            }
            for (a, dist) in per_action.iter().enumerate() {
                if beta[a] <= 0.0 {
                    continue;
                }
                for (&k, &q) in dist {
                    *rtg_here[s].entry(k).or_insert(0.0) += beta[a] * q;
                }
            }
            if occ[t][s] <= 0.0 {
                continue;
            }
            // joint binned mass β(a)·Pr(bins | t, s, a)
            let mut joint: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
            for (a, dist) in per_action.iter().enumerate() {
                if beta[a] <= 0.0 {
                    continue;
                }
                for (&(xr, xg), &q) in dist {
                    let bins = binning.bins(f64::from_bits(xr), f64::from_bits(xg));
                    joint.entry(bins).or_insert_with(|| vec![0.0; a_n])[a] += beta[a] * q;
                }
            }
            for ((rb, gb), w) in joint {
                let total: f64 = w.iter().sum();
                if total <= 0.0 {
                    continue;
                }
                table.entries.insert(
                    (t, s, rb, gb),
                    TableEntry {
                        probs: normalize(&w),
                        count: 0,
                        mass: occ[t][s] * total,
                    },
                );
            }
            table.marginals.insert((t, s), beta.to_vec());
        }
        rtg_next = rtg_here;
    }
    Ok(table)
}

/// Exact `(J_r, J_g)` at one target return.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthPoint {
    pub index: usize,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "G")]
    pub g: f64,
    #[serde(rename = "Jr")]
    pub jr: f64,
    #[serde(rename = "Jg")]
    pub jg: f64,
}

impl GroundTruthPoint {
    pub fn z(&self) -> TargetReturn {
        TargetReturn::new(self.r, self.g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub points: Vec<GroundTruthPoint>,
    pub threshold: f64,
    /// Best feasible point; `None` reports an infeasible grid.
    pub optimum: Option<GroundTruthPoint>,
}

impl GroundTruth {
    pub fn is_feasible(&self) -> bool {
        self.optimum.is_some()
    }

    /// Spread of `J_r` over the grid.
    pub fn reward_range(&self) -> f64 {
        let (lo, hi) = self
            .points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p.jr), hi.max(p.jr))
            });
        hi - lo
    }
}

/// Order used to pick the optimum: larger `J_r` first, then smaller `(R, G)`.
fn better(a: &GroundTruthPoint, b: &GroundTruthPoint) -> Ordering {
    a.jr.total_cmp(&b.jr)
        .then_with(|| b.r.total_cmp(&a.r))
        .then_with(|| b.g.total_cmp(&a.g))
}

/// Exhaustive scan for the best point with `J_g ≤ b`.
pub fn brute_force_optimum(points: Vec<GroundTruthPoint>, threshold: f64) -> Result<GroundTruth> {
    if points.is_empty() {
        return Err(Error::invalid("ground-truth map is empty"));
    }
    let optimum = points.iter().filter(|p| p.jg <= threshold).copied().max_by(better);
    Ok(GroundTruth {
        points,
        threshold,
        optimum,
    })
}

/// Pairs grid coordinates with exact values.
pub fn ground_truth_points(grid: &[TargetReturn], values: &[(f64, f64)]) -> Vec<GroundTruthPoint> {
    grid.iter()
        .zip(values)
        .enumerate()
        .map(|(index, (z, &(jr, jg)))| GroundTruthPoint {
            index,
            r: z.r,
            g: z.g,
            jr,
            jg,
        })
        .collect()
}

/// `# key=value` header lines, then `index,R,G,Jr,Jg`.
pub fn write_ground_truth_csv<W: Write>(
    mut out: W,
    header: &[(String, String)],
    points: &[GroundTruthPoint],
) -> Result<()> {
    for (k, v) in header {
        writeln!(out, "# {k}={v}").map_err(|e| Error::io("<ground truth>", e))?;
    }
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io("<ground truth>", e))?;
    Ok(())
}

pub fn save_ground_truth(path: &Path, header: &[(String, String)], points: &[GroundTruthPoint]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_ground_truth_csv(std::io::BufWriter::new(file), header, points)
}

pub fn load_ground_truth(path: &Path) -> Result<Vec<GroundTruthPoint>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    Ok(rdr.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}
