//! Exhaustive divisor enumeration, used to validate the closed form.

use rayon::prelude::*;

use crate::model::{partition_cost, tile_memory, ConvProblem, CostBreakdown, MachineSpec, PartitionPlan, TilePlan};

use super::{divisors, IntegerPlan, OptimizerError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OracleLimits {
    pub max_points: u64,
}

impl Default for OracleLimits {
    fn default() -> Self {
        OracleLimits { max_points: 10_000_000 }
    }
}

/// Work partitions `(w_b, w_k, w_c, w_h, w_w)` of divisors whose product
/// times `p` is the iteration volume, in lexicographic order.
pub(crate) fn work_partitions(prob: &ConvProblem, p: u64) -> Vec<PartitionPlan> {
    let total = prob.iteration_volume();
    if !total.is_multiple_of(p) {
        return Vec::new();
    }
    let target = total / p;
    let mut out = Vec::new();
    for &b in &divisors(prob.n_b) {
        for &k in &divisors(prob.n_k) {
            for &c in &divisors(prob.n_c) {
                for &h in &divisors(prob.n_h) {
                    let partial = b * k * c * h;
                    if !target.is_multiple_of(partial) {
                        continue;
                    }
                    let w = target / partial;
                    if w <= prob.n_w && prob.n_w.is_multiple_of(w) {
                        out.push(PartitionPlan::new(b, k, c, h, w, TilePlan::ones()));
                    }
                }
            }
        }
    }
    out
}

fn tilings(w: &PartitionPlan) -> u64 {
    [w.w_b, w.w_k, w.w_h, w.w_w].iter().map(|&n| divisors(n).len() as u64).product()
}

/// Number of `(w, t)` points [`brute_force_oracle`] would evaluate.
pub fn search_space_size(prob: &ConvProblem, p: u64) -> u64 {
    work_partitions(prob, p).iter().map(tilings).sum()
}

pub(crate) type Key = (u64, PartitionPlanKey);
pub(crate) type PartitionPlanKey = [u64; 9];

fn key(plan: &PartitionPlan, cost: &CostBreakdown) -> Key {
    let t = &plan.tile;
    (cost.total, [plan.w_b, plan.w_k, plan.w_c, plan.w_h, plan.w_w, t.t_b, t.t_k, t.t_h, t.t_w])
}

pub(crate) fn best_for_partition(
    w: &PartitionPlan,
    prob: &ConvProblem,
    m: u64,
) -> Option<(Key, PartitionPlan, CostBreakdown)> {
    let mut best: Option<(Key, PartitionPlan, CostBreakdown)> = None;
    for &t_b in &divisors(w.w_b) {
        for &t_k in &divisors(w.w_k) {
            for &t_h in &divisors(w.w_h) {
                for &t_w in &divisors(w.w_w) {
                    let tile = TilePlan::new(t_b, t_k, 1, t_h, t_w);
                    if tile_memory(&tile, prob) > m {
                        continue;
                    }
                    let plan = PartitionPlan { tile, ..*w };
                    let cost = partition_cost(&plan, prob, plan.w_c);
                    let k = key(&plan, &cost);
                    if best.as_ref().is_none_or(|(b, _, _)| k < *b) {
                        best = Some((k, plan, cost));
                    }
                }
            }
        }
    }
    best
}

/// Cheapest plan over every divisor work partition satisfying the processor
/// product and every divisor tiling with `t_c = 1` that fits in `m`.
///
/// Ties go to the lexicographically smallest
/// `(w_b, w_k, w_c, w_h, w_w, t_b, t_k, t_h, t_w)`. Partitions are evaluated
/// in parallel; the result does not depend on scheduling.
pub fn brute_force_oracle(
    prob: &ConvProblem,
    machine: &MachineSpec,
    limits: OracleLimits,
) -> Result<IntegerPlan, OptimizerError> {
    let partitions = work_partitions(prob, machine.p);
    let points: u64 = partitions.iter().map(tilings).sum();
    if points > limits.max_points {
        return Err(OptimizerError::SearchSpaceTooLarge { points, limit: limits.max_points });
    }
    let best = partitions
        .par_iter()
        .filter_map(|w| best_for_partition(w, prob, machine.m))
        .min_by_key(|(k, _, _)| *k);
    let (_, plan, cost) = best.ok_or(OptimizerError::NoFeasibleInteger)?;
    Ok(IntegerPlan::new(plan, cost, cost.total as f64))
}
