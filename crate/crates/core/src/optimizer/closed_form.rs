//! Closed-form solution of the simplified tile / work-partition problem.
//!
//! The simplified problem works on the composite `bhw` index with real-valued
//! sizes. Its optimum falls into one of four regimes, picked by comparing the
//! capacity `m_l` against two thresholds:
//!
//! * `A  = n_k n_bhw / p`, the per-processor Out block when `w_c = n_c`;
//! * `M2 = (n_k n_c n_bhw / p)^(2/3) (n_r n_s sigma_w sigma_h)^(1/3)`.
//!
//! With `V = n_k n_c n_bhw / p` and `K^2 = n_r n_s sigma_w sigma_h` every
//! regime cost is `f(x) = x + 2 V K / sqrt(x)` evaluated at some `x`:
//! `x = A` with `m_l` in the tile term (1a), `x = A` (1b), `x = M2` (2a) or
//! `x = m_l` (2b).

use std::fmt;

use crate::model::{simplified_value, ConvProblem, RelaxedPoint};

use super::OptimizerError;

/// Relative tolerance applied when comparing `m_l` against a threshold.
pub const CONDITION_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CaseLabel {
    /// `w_c = n_c`, capacity-bound tiles.
    Case1a,
    /// `w_c = n_c`, tiles cover the whole work partition.
    Case1b,
    /// `t = w`, `w_c < n_c`, unconstrained optimum.
    Case2a,
    /// `t = w`, `w_c < n_c`, capacity-bound.
    Case2b,
}

impl CaseLabel {
    pub fn is_case1(self) -> bool {
        matches!(self, CaseLabel::Case1a | CaseLabel::Case1b)
    }

    pub fn name(self) -> &'static str {
        match self {
            CaseLabel::Case1a => "Case1a",
            CaseLabel::Case1b => "Case1b",
            CaseLabel::Case2a => "Case2a",
            CaseLabel::Case2b => "Case2b",
        }
    }
}

impl fmt::Display for CaseLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which loop orders the cost table covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum PermutationScope {
    /// Only schedules with `c` as the innermost tile loop.
    #[default]
    CInnermost,
    /// Every tile loop permutation.
    All,
}

impl PermutationScope {
    pub fn name(self) -> &'static str {
        match self {
            PermutationScope::CInnermost => "c-innermost",
            PermutationScope::All => "all",
        }
    }

    pub fn table(self) -> u8 {
        match self {
            PermutationScope::CInnermost => 1,
            PermutationScope::All => 2,
        }
    }
}

/// A condition row of a regime table, 1-based. Table number 1 is the c-innermost
/// table, table 2 the all-permutations table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TableRow {
    pub table: u8,
    pub row: u8,
}

impl fmt::Display for TableRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let table = if self.table == 1 { "c-innermost" } else { "all-permutations" };
        write!(f, "{table}.row{}", self.row)
    }
}

/// Regime thresholds of the simplified problem.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thresholds {
    /// `n_k n_bhw / p`.
    pub block: f64,
    /// `(n_k n_c n_bhw / p)^(2/3) (n_r n_s sigma_w sigma_h)^(1/3)`.
    pub cubic: f64,
    /// `n_k n_c n_bhw / p`.
    pub volume: f64,
    /// `n_r n_s sigma_w sigma_h`.
    pub k_squared: f64,
    /// `n_r n_s n_k n_c / p`, the Ker share (all-permutations table only).
    pub ker_share: f64,
    /// `sigma_w sigma_h n_c n_bhw / p`, the In share (all-permutations table only).
    pub in_share: f64,
}

impl Thresholds {
    pub fn new(prob: &ConvProblem, p: u64) -> Self {
        let p = p as f64;
        let nk = prob.n_k as f64;
        let nc = prob.n_c as f64;
        let nbhw = prob.n_bhw() as f64;
        let rs = prob.stencil_area() as f64;
        let ss = prob.stride_area() as f64;
        let volume = nk * nc * nbhw / p;
        let k_squared = rs * ss;
        Thresholds {
            block: nk * nbhw / p,
            cubic: (volume * volume * k_squared).cbrt(),
            volume,
            k_squared,
            ker_share: rs * nk * nc / p,
            in_share: ss * nc * nbhw / p,
        }
    }

    /// `x + 2 V K / sqrt(x)`.
    pub fn regime_cost(&self, x: f64) -> f64 {
        x + 2.0 * self.volume * (self.k_squared / x).sqrt()
    }
}

/// `a <= b` up to the condition tolerance.
fn le_tol(a: f64, b: f64) -> bool {
    a <= b * (1.0 + CONDITION_TOLERANCE)
}

/// Real-valued optimum of the simplified problem.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClosedFormSolution {
    /// Regime of the realized c-innermost schedule.
    pub case_label: CaseLabel,
    /// Condition row that fired in the table selected by `scope`.
    pub table_row: TableRow,
    pub scope: PermutationScope,
    pub t_k: f64,
    pub t_bhw: f64,
    pub w_k: f64,
    pub w_bhw: f64,
    pub w_c: f64,
    /// Optimal cost of the selected table; a lower bound when `m_l = m`.
    pub predicted_cost: f64,
    /// Simplified cost of the returned (possibly clamped) point.
    pub realized_cost: f64,
    pub m_l_used: f64,
    pub thresholds: Thresholds,
}

impl ClosedFormSolution {
    pub fn point(&self) -> RelaxedPoint {
        RelaxedPoint {
            t_k: self.t_k,
            t_bhw: self.t_bhw,
            w_k: self.w_k,
            w_bhw: self.w_bhw,
            w_c: self.w_c,
        }
    }

    /// The all-permutations table predicts a cheaper schedule than the
    /// c-innermost one that is realized.
    pub fn cheaper_permutation_exists(&self) -> bool {
        self.predicted_cost < self.realized_cost * (1.0 - 1e-9)
    }

    /// Clamps the point into `1 <= t <= w <= n`, preserving
    /// `p w_k w_bhw w_c = n_k n_bhw n_c` by moving the complementary variable.
    pub fn clamped(&self, prob: &ConvProblem, p: u64) -> ClosedFormSolution {
        let mut out = *self;
        let point = clamp_point(self.point(), prob, p, self.case_label);
        out.t_k = point.t_k;
        out.t_bhw = point.t_bhw;
        out.w_k = point.w_k;
        out.w_bhw = point.w_bhw;
        out.w_c = point.w_c;
        out.realized_cost = simplified_value(&point, prob, p);
        out
    }
}

fn clamp_point(mut pt: RelaxedPoint, prob: &ConvProblem, p: u64, case: CaseLabel) -> RelaxedPoint {
    let nk = prob.n_k as f64;
    let nbhw = prob.n_bhw() as f64;
    let nc = prob.n_c as f64;
    let volume = nk * nc * nbhw / p as f64;
    let tied = !case.is_case1();

    // w against n, keeping w_k * w_bhw (and so w_c) fixed where possible.
    if pt.w_bhw > nbhw {
        pt.w_k *= pt.w_bhw / nbhw;
        pt.w_bhw = nbhw;
    }
    if pt.w_k > nk {
        pt.w_bhw = (pt.w_bhw * pt.w_k / nk).min(nbhw);
        pt.w_k = nk;
    }
    if pt.w_bhw < 1.0 {
        pt.w_k = (pt.w_k * pt.w_bhw).max(1.0);
        pt.w_bhw = 1.0;
    }
    if pt.w_k < 1.0 {
        pt.w_bhw = (pt.w_bhw * pt.w_k).clamp(1.0, nbhw);
        pt.w_k = 1.0;
    }
    pt.w_c = volume / (pt.w_k * pt.w_bhw);
    if pt.w_c > nc {
        // The block is too small for w_c <= n_c; grow it along bhw, then k.
        let block = volume / nc;
        pt.w_c = nc;
        let scale = block / (pt.w_k * pt.w_bhw);
        pt.w_bhw = (pt.w_bhw * scale).min(nbhw);
        pt.w_k = (block / pt.w_bhw).min(nk);
    } else if pt.w_c < 1.0 {
        let scale = (volume / (pt.w_k * pt.w_bhw)).sqrt();
        pt.w_c = 1.0;
        pt.w_k *= scale;
        pt.w_bhw *= scale;
    }

    if tied {
        pt.t_k = pt.w_k;
        pt.t_bhw = pt.w_bhw;
        return pt;
    }
    // t against w, keeping t_k * t_bhw where the other side has room.
    if pt.t_k > pt.w_k {
        pt.t_bhw = (pt.t_bhw * pt.t_k / pt.w_k).min(pt.w_bhw);
        pt.t_k = pt.w_k;
    }
    if pt.t_bhw > pt.w_bhw {
        pt.t_k = (pt.t_k * pt.t_bhw / pt.w_bhw).min(pt.w_k);
        pt.t_bhw = pt.w_bhw;
    }
    pt.t_k = pt.t_k.max(1.0);
    pt.t_bhw = pt.t_bhw.max(1.0);
    pt
}

/// Capacity-bound tile shape: `t_k t_bhw = cap` with
/// `t_k / t_bhw = sigma_w sigma_h / (n_r n_s)`.
fn balanced_tiles(cap: f64, rs: f64, ss: f64) -> (f64, f64) {
    ((cap * ss / rs).sqrt(), (cap * rs / ss).sqrt())
}

fn table1_row(m_l: f64, th: &Thresholds) -> u8 {
    if le_tol(m_l, th.block) {
        1
    } else if le_tol(th.cubic, m_l) {
        2
    } else {
        3
    }
}

fn table2_row(m_l: f64, th: &Thresholds) -> u8 {
    if le_tol(m_l, th.block) && le_tol(m_l, th.ker_share) && le_tol(m_l, th.in_share) {
        1
    } else if le_tol(th.cubic, m_l) {
        2
    } else {
        3
    }
}

fn table2_cost(row: u8, m_l: f64, th: &Thresholds) -> f64 {
    match row {
        1 => {
            th.block.min(th.ker_share).min(th.in_share)
                + 2.0 * th.volume * (th.k_squared / m_l).sqrt()
        }
        2 => 3.0 * th.cubic,
        _ => th.regime_cost(m_l),
    }
}

/// Solves the simplified problem for capacity `m_l` on `p` processors.
///
/// The c-innermost dispatch picks a condition row; within the second row the
/// Case 2 optimum needs `w_c = V / M2 <= n_c`, i.e. `M2 >= A`. When that
/// fails the best feasible point has `w_c = n_c` and tiles spanning the
/// block, which is Case 1b. Boundary ties go to Case 1.
pub fn solve_closed_form(
    prob: &ConvProblem,
    p: u64,
    m_l: f64,
    scope: PermutationScope,
) -> Result<ClosedFormSolution, OptimizerError> {
    if m_l.is_nan() || m_l < 1.0 {
        return Err(OptimizerError::Infeasible(format!(
            "capacity m_l = {m_l} cannot hold the all-ones tile"
        )));
    }
    let th = Thresholds::new(prob, p);
    let rs = prob.stencil_area() as f64;
    let ss = prob.stride_area() as f64;
    let nc = prob.n_c as f64;

    let row1 = table1_row(m_l, &th);
    let (case_label, t_k, t_bhw, w_k, w_bhw, w_c, cost) = match row1 {
        1 => {
            let (t_k, t_bhw) = balanced_tiles(m_l, rs, ss);
            let (w_k, w_bhw) = balanced_tiles(th.block, rs, ss);
            let cost = th.block + 2.0 * th.volume * (th.k_squared / m_l).sqrt();
            (CaseLabel::Case1a, t_k, t_bhw, w_k, w_bhw, nc, cost)
        }
        2 if le_tol(th.cubic, th.block) => {
            let (t_k, t_bhw) = balanced_tiles(th.block, rs, ss);
            (CaseLabel::Case1b, t_k, t_bhw, t_k, t_bhw, nc, th.regime_cost(th.block))
        }
        2 => {
            let t_k = (th.volume / rs).cbrt() * ss.powf(2.0 / 3.0);
            let t_bhw = (th.volume / ss).cbrt() * rs.powf(2.0 / 3.0);
            let w_c = th.volume / th.cubic;
            (CaseLabel::Case2a, t_k, t_bhw, t_k, t_bhw, w_c, 3.0 * th.cubic)
        }
        _ => {
            let (t_k, t_bhw) = balanced_tiles(m_l, rs, ss);
            let w_c = th.volume / m_l;
            (CaseLabel::Case2b, t_k, t_bhw, t_k, t_bhw, w_c, th.regime_cost(m_l))
        }
    };

    let (table_row, predicted_cost) = match scope {
        PermutationScope::CInnermost => (TableRow { table: 1, row: row1 }, cost),
        PermutationScope::All => {
            let row = table2_row(m_l, &th);
            (TableRow { table: 2, row }, table2_cost(row, m_l, &th))
        }
    };

    let raw = ClosedFormSolution {
        case_label,
        table_row,
        scope,
        t_k,
        t_bhw,
        w_k,
        w_bhw,
        w_c,
        predicted_cost,
        realized_cost: cost,
        m_l_used: m_l,
        thresholds: th,
    };
    Ok(raw.clamped(prob, p))
}

/// Case 1 work-partition sizes exactly as printed, without the `1/p`
/// factor: `W_k = sqrt(n_k n_bhw sigma / (n_r n_s))`,
/// `W_bhw = sqrt(n_k n_bhw n_r n_s / sigma)`. Strict mode only.
pub fn printed_case1_partition(prob: &ConvProblem) -> (f64, f64) {
    let block = (prob.n_k * prob.n_bhw()) as f64;
    balanced_tiles(block, prob.stencil_area() as f64, prob.stride_area() as f64)
}
