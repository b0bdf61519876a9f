//! Tile-size and work-partition optimization.
//!
//! [`solve_closed_form`] gives the real-valued optimum of the simplified
//! problem, [`integerize`] turns it into a legal integer plan and
//! [`brute_force_oracle`] enumerates every divisor plan of small problems.

mod closed_form;
mod integerize;
mod oracle;

use thiserror::Error;

use crate::model::{ConvProblem, ModelError};

pub use closed_form::{
    printed_case1_partition, solve_closed_form, CaseLabel, ClosedFormSolution, PermutationScope,
    TableRow, Thresholds, CONDITION_TOLERANCE,
};
pub use integerize::{integerize, IntegerPlan};
pub use oracle::{brute_force_oracle, search_space_size, OracleLimits};
pub(crate) use oracle::{best_for_partition, work_partitions};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum OptimizerError {
    #[error("effective capacity {value} is below one element (m = {m})")]
    CapacityTooSmall { m: u64, value: f64 },
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("no feasible integer plan near the closed-form solution")]
    NoFeasibleInteger,
    #[error("search space has {points} points, limit is {limit}")]
    SearchSpaceTooLarge { points: u64, limit: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// How the simplified problem's capacity is derived from `m`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum CapacityMode {
    /// Shrink `m` so the simplified optimum also fits the exact footprint.
    #[default]
    Effective,
    /// Use `m` itself; the resulting costs are lower bounds.
    LowerBound,
}

/// Capacity handed to the simplified problem.
///
/// In [`CapacityMode::Effective`] this is
/// `m - 3K (sqrt(9K^2 + 4m) - 3K) / 2` with
/// `K = sqrt(sigma_w sigma_h n_r n_s)`, the largest `m_l` such that
/// `m_l + 3K sqrt(m_l) <= m`.
pub fn effective_capacity(
    m: u64,
    prob: &ConvProblem,
    mode: CapacityMode,
) -> Result<f64, OptimizerError> {
    let m_f = m as f64;
    let value = match mode {
        CapacityMode::LowerBound => m_f,
        CapacityMode::Effective => {
            let k = ((prob.stride_area() * prob.stencil_area()) as f64).sqrt();
            m_f - 0.5 * (3.0 * k * ((9.0 * k * k + 4.0 * m_f).sqrt() - 3.0 * k))
        }
    };
    if value < 1.0 {
        return Err(OptimizerError::CapacityTooSmall { m, value });
    }
    Ok(value)
}

/// Sorted divisors of `n`.
pub fn divisors(n: u64) -> Vec<u64> {
    let mut small = Vec::new();
    let mut large = Vec::new();
    let mut d = 1;
    while d * d <= n {
        if n.is_multiple_of(d) {
            small.push(d);
            if d * d != n {
                large.push(n / d);
            }
        }
        d += 1;
    }
    small.extend(large.into_iter().rev());
    small
}
