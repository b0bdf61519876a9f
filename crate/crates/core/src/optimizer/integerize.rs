//! Rounding of the real-valued optimum to a legal integer plan.

use crate::model::{partition_cost, tile_memory, ConvProblem, CostBreakdown, Dim, MachineSpec, PartitionPlan, TilePlan};

use super::{divisors, ClosedFormSolution, OptimizerError};

/// Divisor-index radius of the local search around the rounded seed.
const SEARCH_RADIUS: usize = 2;

/// Integer plan with its exact per-processor cost.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntegerPlan {
    pub plan: PartitionPlan,
    pub achieved_cost: CostBreakdown,
    /// `achieved / predicted - 1`, floored at zero.
    pub gap_vs_closed_form: f64,
}

impl IntegerPlan {
    pub(crate) fn new(plan: PartitionPlan, achieved_cost: CostBreakdown, predicted: f64) -> Self {
        let gap = if predicted > 0.0 {
            (achieved_cost.total as f64 / predicted - 1.0).max(0.0)
        } else {
            0.0
        };
        IntegerPlan { plan, achieved_cost, gap_vs_closed_form: gap }
    }
}

/// Index of the entry of `divs` closest to `target` on a log scale.
fn nearest_index(divs: &[u64], target: f64) -> usize {
    let target = target.max(1.0).ln();
    let mut best = 0;
    for (i, &d) in divs.iter().enumerate() {
        if ((d as f64).ln() - target).abs() < ((divs[best] as f64).ln() - target).abs() {
            best = i;
        }
    }
    best
}

/// Greedy factorization of `target` over `(w, h, b)` in that order: each
/// dimension takes the largest of its candidates not exceeding what is left.
fn greedy_split(target: f64, candidates: [&[u64]; 3]) -> [usize; 3] {
    let mut left = target.max(1.0);
    let mut out = [0; 3];
    for (slot, divs) in candidates.iter().enumerate() {
        let idx = divs
            .iter()
            .rposition(|&d| d as f64 <= left * (1.0 + 1e-9))
            .unwrap_or(0);
        out[slot] = idx;
        left /= divs[idx] as f64;
    }
    out
}

fn window(len: usize, center: usize) -> std::ops::RangeInclusive<usize> {
    center.saturating_sub(SEARCH_RADIUS)..=(center + SEARCH_RADIUS).min(len - 1)
}

struct Candidate {
    cost: CostBreakdown,
    is_seed: bool,
    plan: PartitionPlan,
}

impl Candidate {
    fn better_than(&self, other: &Candidate) -> bool {
        (self.cost.total, !self.is_seed, self.plan) < (other.cost.total, !other.is_seed, other.plan)
    }
}

/// Best tiling of work partition `w` near the real-valued tile sizes.
fn best_tiling(
    w: &PartitionPlan,
    sol: &ClosedFormSolution,
    prob: &ConvProblem,
    m: u64,
    seed_w: bool,
) -> Option<Candidate> {
    let dk = divisors(w.w_k);
    let dw = divisors(w.w_w);
    let dh = divisors(w.w_h);
    let db = divisors(w.w_b);
    let k0 = nearest_index(&dk, sol.t_k.min(w.w_k as f64));
    let [w0, h0, b0] = greedy_split(sol.t_bhw.min(w.w_bhw() as f64), [&dw, &dh, &db]);

    let mut best: Option<Candidate> = None;
    for ik in window(dk.len(), k0) {
        for iw in window(dw.len(), w0) {
            for ih in window(dh.len(), h0) {
                for ib in window(db.len(), b0) {
                    let tile = TilePlan::new(db[ib], dk[ik], 1, dh[ih], dw[iw]);
                    if tile_memory(&tile, prob) > m {
                        continue;
                    }
                    let plan = PartitionPlan { tile, ..*w };
                    let cand = Candidate {
                        cost: partition_cost(&plan, prob, plan.w_c),
                        is_seed: seed_w && (ik, iw, ih, ib) == (k0, w0, h0, b0),
                        plan,
                    };
                    if best.as_ref().is_none_or(|b| cand.better_than(b)) {
                        best = Some(cand);
                    }
                }
            }
        }
    }
    best
}

/// Rounds `sol` to an integer plan.
///
/// The composite `bhw` sizes are split greedily over `w`, then `h`, then `b`;
/// every size is snapped to a divisor of its extent. A local search moves
/// each work-partition size up to two divisors away (solving `w_c` from the
/// processor-count product) and each tile size up to two divisors of its
/// partition away, keeping the cheapest plan whose tile fits in `m`. Case 1
/// solutions keep `w_c = n_c`. The rounded seed wins ties.
pub fn integerize(
    sol: &ClosedFormSolution,
    prob: &ConvProblem,
    machine: &MachineSpec,
) -> Result<IntegerPlan, OptimizerError> {
    let sol = sol.clamped(prob, machine.p);
    let p = machine.p;
    let total = prob.iteration_volume();

    let dk = divisors(prob.n_k);
    let dw = divisors(prob.n_w);
    let dh = divisors(prob.n_h);
    let db = divisors(prob.n_b);
    let k0 = nearest_index(&dk, sol.w_k);
    let [w0, h0, b0] = greedy_split(sol.w_bhw, [&dw, &dh, &db]);

    let mut best: Option<Candidate> = None;
    for ik in window(dk.len(), k0) {
        for iw in window(dw.len(), w0) {
            for ih in window(dh.len(), h0) {
                for ib in window(db.len(), b0) {
                    let rest = p * dk[ik] * dw[iw] * dh[ih] * db[ib];
                    if !total.is_multiple_of(rest) {
                        continue;
                    }
                    let w_c = total / rest;
                    if !prob.n_c.is_multiple_of(w_c) || (sol.case_label.is_case1() && w_c != prob.n_c) {
                        continue;
                    }
                    let w = PartitionPlan::new(db[ib], dk[ik], w_c, dh[ih], dw[iw], TilePlan::ones());
                    let seed_w = (ik, iw, ih, ib) == (k0, w0, h0, b0);
                    if let Some(cand) = best_tiling(&w, &sol, prob, machine.m, seed_w) {
                        if best.as_ref().is_none_or(|b| cand.better_than(b)) {
                            best = Some(cand);
                        }
                    }
                }
            }
        }
    }
    let best = best.ok_or(OptimizerError::NoFeasibleInteger)?;
    debug_assert!(best.plan.validate(prob, p).is_ok());
    debug_assert!(Dim::ALL.iter().all(|&d| prob.extent(d).is_multiple_of(best.plan.get(d))));
    Ok(IntegerPlan::new(best.plan, best.cost, sol.predicted_cost))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{cost_global, ConvProblem};
    use crate::optimizer::{effective_capacity, solve_closed_form, CapacityMode, PermutationScope};

    #[test]
    fn integral_solution_is_kept() {
        // Matmul-like cube: the closed form is integral (t = w = 8, w_c = 8).
        let prob = ConvProblem::unit_stride(1, 16, 16, 4, 4, 1, 1).unwrap();
        let machine = MachineSpec::new(8, 96, 4096).unwrap();
        let sol = solve_closed_form(&prob, 8, 64.0, PermutationScope::CInnermost).unwrap();
        let ip = integerize(&sol, &prob, &machine).unwrap();
        assert_eq!((ip.plan.w_k, ip.plan.w_c, ip.plan.w_bhw()), (8, 8, 8));
        assert_eq!((ip.plan.tile.t_k, ip.plan.tile.t_bhw()), (8, 8));
        assert_eq!(ip.achieved_cost.total, 192);
        assert_eq!(ip.gap_vs_closed_form, 0.0);
    }

    #[test]
    fn clamp_keeps_processor_product() {
        let prob = ConvProblem::unit_stride(1, 64, 4, 8, 8, 3, 3).unwrap();
        let machine = MachineSpec::new(4, 400, 100_000).unwrap();
        let mut sol = solve_closed_form(&prob, 4, 144.0, PermutationScope::CInnermost).unwrap();
        // Undo the clamp to feed integerize an out-of-range point.
        sol.w_bhw = 96.0;
        sol.w_k = 1024.0 / 96.0;
        let clamped = sol.clamped(&prob, 4);
        assert_eq!(clamped.w_bhw, 64.0);
        assert!((4.0 * clamped.w_k * clamped.w_bhw * clamped.w_c - 64.0 * 64.0 * 4.0).abs() < 1e-9);
        let ip = integerize(&sol, &prob, &machine).unwrap();
        assert!(ip.plan.validate(&prob, 4).is_ok());
        assert_eq!(ip.plan.w_c, 4);
    }

    #[test]
    fn plans_respect_memory() {
        let prob = ConvProblem::unit_stride(2, 8, 8, 8, 8, 3, 3).unwrap();
        let machine = MachineSpec::new(4, 256, 4096).unwrap();
        let m_l = effective_capacity(256, &prob, CapacityMode::Effective).unwrap();
        let sol = solve_closed_form(&prob, 4, m_l, PermutationScope::CInnermost).unwrap();
        let ip = integerize(&sol, &prob, &machine).unwrap();
        assert!(tile_memory(&ip.plan.tile, &prob) <= 256);
        assert_eq!(cost_global(&ip.plan, &prob, &machine).unwrap(), ip.achieved_cost);
    }

    #[test]
    fn no_feasible_integer_plan() {
        // The all-ones tile needs 19 elements with a 3x3 stencil.
        let prob = ConvProblem::unit_stride(1, 4, 4, 4, 4, 3, 3).unwrap();
        let machine = MachineSpec::new(1, 18, 18).unwrap();
        let sol = solve_closed_form(&prob, 1, 4.0, PermutationScope::CInnermost).unwrap();
        assert_eq!(integerize(&sol, &prob, &machine), Err(OptimizerError::NoFeasibleInteger));
    }

    #[test]
    fn greedy_split_prefers_w_then_h() {
        let divs = [1u64, 2, 4, 8];
        let one = [1u64];
        assert_eq!(greedy_split(16.0, [&divs, &divs, &one]), [3, 1, 0]);
        assert_eq!(greedy_split(3.0, [&divs, &divs, &divs]), [1, 0, 0]);
    }
}
