//! Problem, machine and plan types together with the data-movement cost
//! and footprint formulas of the tiled CNN loop nest.
//!
//! Every quantity is measured in tensor elements. All functions here are pure.

use std::fmt;

use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("field `{field}` must be >= 1 (got {value})")]
    InvalidExtent { field: &'static str, value: u64 },
    #[error("invalid machine: {0}")]
    InvalidMachine(String),
    #[error("tile needs {required} elements but capacity is {capacity}")]
    MemoryExceeded { required: u64, capacity: u64 },
    #[error("invalid partition: {0}")]
    PartitionInvalid(String),
    #[error("constraint violated: {0}")]
    ConstraintViolated(String),
}

/// One of the five tiled loop indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dim {
    B,
    K,
    C,
    H,
    W,
}

impl Dim {
    pub const ALL: [Dim; 5] = [Dim::B, Dim::K, Dim::C, Dim::H, Dim::W];

    pub fn name(self) -> &'static str {
        match self {
            Dim::B => "b",
            Dim::K => "k",
            Dim::C => "c",
            Dim::H => "h",
            Dim::W => "w",
        }
    }
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One CNN forward-convolution layer:
/// `Out[b, k, w, h] += In[b, c, sigma_w*w + r, sigma_h*h + s] * Ker[k, c, r, s]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvProblem {
    pub n_b: u64,
    pub n_k: u64,
    pub n_c: u64,
    pub n_h: u64,
    pub n_w: u64,
    pub n_r: u64,
    pub n_s: u64,
    pub sigma_w: u64,
    pub sigma_h: u64,
}

impl ConvProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_b: u64,
        n_k: u64,
        n_c: u64,
        n_h: u64,
        n_w: u64,
        n_r: u64,
        n_s: u64,
        sigma_w: u64,
        sigma_h: u64,
    ) -> Result<Self, ModelError> {
        let prob = ConvProblem { n_b, n_k, n_c, n_h, n_w, n_r, n_s, sigma_w, sigma_h };
        prob.validate()?;
        for warning in prob.warnings() {
            log::warn!("{warning}");
        }
        Ok(prob)
    }

    /// Unit-stride problem.
    pub fn unit_stride(
        n_b: u64,
        n_k: u64,
        n_c: u64,
        n_h: u64,
        n_w: u64,
        n_r: u64,
        n_s: u64,
    ) -> Result<Self, ModelError> {
        Self::new(n_b, n_k, n_c, n_h, n_w, n_r, n_s, 1, 1)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("n_b", self.n_b),
            ("n_k", self.n_k),
            ("n_c", self.n_c),
            ("n_h", self.n_h),
            ("n_w", self.n_w),
            ("n_r", self.n_r),
            ("n_s", self.n_s),
            ("sigma_w", self.sigma_w),
            ("sigma_h", self.sigma_h),
        ];
        for (field, value) in fields {
            if value == 0 {
                return Err(ModelError::InvalidExtent { field, value });
            }
        }
        Ok(())
    }

    /// Non-fatal oddities: stencils wider than the output plane.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.n_r > self.n_h {
            out.push(format!("stencil extent n_r={} exceeds n_h={}", self.n_r, self.n_h));
        }
        if self.n_s > self.n_w {
            out.push(format!("stencil extent n_s={} exceeds n_w={}", self.n_s, self.n_w));
        }
        out
    }

    pub fn extent(&self, dim: Dim) -> u64 {
        match dim {
            Dim::B => self.n_b,
            Dim::K => self.n_k,
            Dim::C => self.n_c,
            Dim::H => self.n_h,
            Dim::W => self.n_w,
        }
    }

    /// Horizontal In extent, `sigma_w*n_w + n_r - 1`.
    pub fn in_width(&self) -> u64 {
        self.sigma_w * self.n_w + self.n_r - 1
    }

    /// Vertical In extent, `sigma_h*n_h + n_s - 1`.
    pub fn in_height(&self) -> u64 {
        self.sigma_h * self.n_h + self.n_s - 1
    }

    pub fn n_bhw(&self) -> u64 {
        self.n_b * self.n_h * self.n_w
    }

    /// `n_r * n_s`.
    pub fn stencil_area(&self) -> u64 {
        self.n_r * self.n_s
    }

    /// `sigma_w * sigma_h`.
    pub fn stride_area(&self) -> u64 {
        self.sigma_w * self.sigma_h
    }

    /// Product of the five tiled extents.
    pub fn iteration_volume(&self) -> u64 {
        self.n_b * self.n_k * self.n_c * self.n_h * self.n_w
    }

    pub fn in_size(&self) -> u64 {
        self.n_b * self.n_c * self.in_width() * self.in_height()
    }

    pub fn ker_size(&self) -> u64 {
        self.n_k * self.n_c * self.n_r * self.n_s
    }

    pub fn out_size(&self) -> u64 {
        self.n_b * self.n_k * self.n_w * self.n_h
    }

    /// In tensor shape `[b, c, x, y]`.
    pub fn in_shape(&self) -> [u64; 4] {
        [self.n_b, self.n_c, self.in_width(), self.in_height()]
    }

    /// Ker tensor shape `[k, c, r, s]`.
    pub fn ker_shape(&self) -> [u64; 4] {
        [self.n_k, self.n_c, self.n_r, self.n_s]
    }

    /// Out tensor shape `[b, k, w, h]`.
    pub fn out_shape(&self) -> [u64; 4] {
        [self.n_b, self.n_k, self.n_w, self.n_h]
    }
}

impl fmt::Display for ConvProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Nb={} Nk={} Nc={} Nh={} Nw={} Nr={} Ns={} sigma_w={} sigma_h={}",
            self.n_b,
            self.n_k,
            self.n_c,
            self.n_h,
            self.n_w,
            self.n_r,
            self.n_s,
            self.sigma_w,
            self.sigma_h
        )
    }
}

/// Processor count and the two per-processor capacities.
///
/// `m` is the tile capacity of the global-virtual-memory model, `m_d` the
/// whole local memory of the partitioned model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MachineSpec {
    pub p: u64,
    pub m: u64,
    pub m_d: u64,
}

impl MachineSpec {
    pub fn new(p: u64, m: u64, m_d: u64) -> Result<Self, ModelError> {
        let machine = MachineSpec { p, m, m_d };
        machine.validate()?;
        Ok(machine)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.p == 0 {
            return Err(ModelError::InvalidMachine("p must be >= 1".into()));
        }
        if self.m == 0 {
            return Err(ModelError::InvalidMachine("m must be >= 1".into()));
        }
        if self.m_d < self.m {
            return Err(ModelError::InvalidMachine(format!(
                "m_d={} is smaller than m={}",
                self.m_d, self.m
            )));
        }
        Ok(())
    }

    /// Checks that the all-ones tile of `prob` fits in `m`.
    pub fn validate_for(&self, prob: &ConvProblem) -> Result<(), ModelError> {
        self.validate()?;
        let required = tile_memory(&TilePlan::ones(), prob);
        if required > self.m {
            return Err(ModelError::MemoryExceeded { required, capacity: self.m });
        }
        Ok(())
    }
}

/// Tile sizes, iterations per tile along each tiled loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TilePlan {
    pub t_b: u64,
    pub t_k: u64,
    pub t_c: u64,
    pub t_h: u64,
    pub t_w: u64,
}

impl TilePlan {
    pub fn new(t_b: u64, t_k: u64, t_c: u64, t_h: u64, t_w: u64) -> Self {
        TilePlan { t_b, t_k, t_c, t_h, t_w }
    }

    pub fn ones() -> Self {
        TilePlan::new(1, 1, 1, 1, 1)
    }

    /// The tile that covers the whole problem.
    pub fn whole(prob: &ConvProblem) -> Self {
        TilePlan::new(prob.n_b, prob.n_k, prob.n_c, prob.n_h, prob.n_w)
    }

    pub fn get(&self, dim: Dim) -> u64 {
        match dim {
            Dim::B => self.t_b,
            Dim::K => self.t_k,
            Dim::C => self.t_c,
            Dim::H => self.t_h,
            Dim::W => self.t_w,
        }
    }

    pub fn set(&mut self, dim: Dim, value: u64) {
        match dim {
            Dim::B => self.t_b = value,
            Dim::K => self.t_k = value,
            Dim::C => self.t_c = value,
            Dim::H => self.t_h = value,
            Dim::W => self.t_w = value,
        }
    }

    pub fn t_bhw(&self) -> u64 {
        self.t_b * self.t_h * self.t_w
    }
}

/// Per-processor work partition with its embedded tiling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PartitionPlan {
    pub w_b: u64,
    pub w_k: u64,
    pub w_c: u64,
    pub w_h: u64,
    pub w_w: u64,
    pub tile: TilePlan,
}

impl PartitionPlan {
    pub fn new(w_b: u64, w_k: u64, w_c: u64, w_h: u64, w_w: u64, tile: TilePlan) -> Self {
        PartitionPlan { w_b, w_k, w_c, w_h, w_w, tile }
    }

    /// Single processor, single tile.
    pub fn whole(prob: &ConvProblem) -> Self {
        PartitionPlan::new(prob.n_b, prob.n_k, prob.n_c, prob.n_h, prob.n_w, TilePlan::whole(prob))
    }

    pub fn get(&self, dim: Dim) -> u64 {
        match dim {
            Dim::B => self.w_b,
            Dim::K => self.w_k,
            Dim::C => self.w_c,
            Dim::H => self.w_h,
            Dim::W => self.w_w,
        }
    }

    pub fn set(&mut self, dim: Dim, value: u64) {
        match dim {
            Dim::B => self.w_b = value,
            Dim::K => self.w_k = value,
            Dim::C => self.w_c = value,
            Dim::H => self.w_h = value,
            Dim::W => self.w_w = value,
        }
    }

    pub fn w_bhw(&self) -> u64 {
        self.w_b * self.w_h * self.w_w
    }

    pub fn volume(&self) -> u64 {
        self.w_b * self.w_k * self.w_c * self.w_h * self.w_w
    }

    /// Out block held by each processor, `w_b*w_k*w_w*w_h`.
    pub fn out_block(&self) -> u64 {
        self.w_b * self.w_k * self.w_w * self.w_h
    }

    /// Checks `1 <= t_i <= w_i <= n_i` and `p * prod(w_i) = prod(n_i)`.
    pub fn validate(&self, prob: &ConvProblem, p: u64) -> Result<(), ModelError> {
        for dim in Dim::ALL {
            let (t, w, n) = (self.tile.get(dim), self.get(dim), prob.extent(dim));
            if t == 0 || t > w || w > n {
                return Err(ModelError::PartitionInvalid(format!(
                    "need 1 <= t_{dim} <= w_{dim} <= n_{dim}, got t={t} w={w} n={n}"
                )));
            }
        }
        let lhs = p as u128 * self.volume() as u128;
        let rhs = prob.iteration_volume() as u128;
        if lhs != rhs {
            return Err(ModelError::PartitionInvalid(format!(
                "p * prod(w) = {lhs} but prod(n) = {rhs}"
            )));
        }
        Ok(())
    }

    /// True when every `w_i` divides `n_i` and every `t_i` divides `w_i`.
    pub fn divides_exactly(&self, prob: &ConvProblem) -> bool {
        Dim::ALL
            .iter()
            .all(|&d| prob.extent(d).is_multiple_of(self.get(d)) && self.get(d).is_multiple_of(self.tile.get(d)))
    }
}

/// Volume split into the three tensors' contributions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct CostBreakdown {
    pub out_term: u64,
    pub ker_term: u64,
    pub in_term: u64,
    pub total: u64,
}

impl CostBreakdown {
    pub fn new(out_term: u64, ker_term: u64, in_term: u64) -> Self {
        CostBreakdown { out_term, ker_term, in_term, total: out_term + ker_term + in_term }
    }

    /// Ker plus In traffic; the broadcast part of the distributed cost.
    pub fn traffic(&self) -> u64 {
        self.ker_term + self.in_term
    }
}

/// In tile footprint including the stencil halo.
pub fn footprint_in(plan: &TilePlan, prob: &ConvProblem) -> u64 {
    plan.t_b
        * plan.t_c
        * (prob.sigma_w * plan.t_w + prob.n_r - 1)
        * (prob.sigma_h * plan.t_h + prob.n_s - 1)
}

pub fn footprint_ker(plan: &TilePlan, prob: &ConvProblem) -> u64 {
    prob.n_r * prob.n_s * plan.t_k * plan.t_c
}

pub fn footprint_out(plan: &TilePlan) -> u64 {
    plan.t_w * plan.t_h * plan.t_b * plan.t_k
}

/// Memory needed to hold one tile of each tensor.
pub fn tile_memory(plan: &TilePlan, prob: &ConvProblem) -> u64 {
    footprint_in(plan, prob) + footprint_out(plan) + footprint_ker(plan, prob)
}

/// Number of tiles of size `t` covering `w`.
#[inline]
fn tiles(w: u64, t: u64) -> u64 {
    w.div_ceil(t)
}

/// Loop-extent view shared by the sequential and per-processor cost forms.
struct Extents {
    b: u64,
    k: u64,
    c: u64,
    h: u64,
    w: u64,
}

fn tiled_cost(ext: &Extents, ker_c: u64, plan: &TilePlan, prob: &ConvProblem) -> CostBreakdown {
    let bhw_tiles = tiles(ext.w, plan.t_w) * tiles(ext.h, plan.t_h) * tiles(ext.b, plan.t_b);
    let out_term = ext.b * ext.k * ext.w * ext.h;
    let ker_term = ext.k * ker_c * prob.n_r * prob.n_s * bhw_tiles;
    let in_term = ext.b
        * ext.c
        * (prob.sigma_w * plan.t_w + prob.n_r - 1)
        * (prob.sigma_h * plan.t_h + prob.n_s - 1)
        * tiles(ext.w, plan.t_w)
        * tiles(ext.h, plan.t_h)
        * tiles(ext.k, plan.t_k);
    CostBreakdown::new(out_term, ker_term, in_term)
}

fn check_memory(plan: &TilePlan, prob: &ConvProblem, m: u64) -> Result<(), ModelError> {
    let required = tile_memory(plan, prob);
    if required > m {
        return Err(ModelError::MemoryExceeded { required, capacity: m });
    }
    Ok(())
}

fn check_tile(plan: &TilePlan, prob: &ConvProblem) -> Result<(), ModelError> {
    for dim in Dim::ALL {
        let (t, n) = (plan.get(dim), prob.extent(dim));
        if t == 0 || t > n {
            return Err(ModelError::PartitionInvalid(format!(
                "need 1 <= t_{dim} <= n_{dim}, got t={t} n={n}"
            )));
        }
    }
    Ok(())
}

/// Sequential data movement of the single-level tiled loop nest with fast
/// memory `m`. Tile counts round up, so non-dividing tiles are legal.
pub fn cost_sequential(
    plan: &TilePlan,
    prob: &ConvProblem,
    m: u64,
) -> Result<CostBreakdown, ModelError> {
    check_tile(plan, prob)?;
    check_memory(plan, prob, m)?;
    let ext = Extents { b: prob.n_b, k: prob.n_k, c: prob.n_c, h: prob.n_h, w: prob.n_w };
    Ok(tiled_cost(&ext, prob.n_c, plan, prob))
}

/// Per-processor data movement between the virtual global memory and a
/// processor's local memory for work partition `pp`.
///
/// The Ker term uses `w_c`; see [`cost_global_printed`] for the variant
/// with `n_c`.
pub fn cost_global(
    pp: &PartitionPlan,
    prob: &ConvProblem,
    machine: &MachineSpec,
) -> Result<CostBreakdown, ModelError> {
    pp.validate(prob, machine.p)?;
    check_memory(&pp.tile, prob, machine.m)?;
    Ok(partition_cost(pp, prob, pp.w_c))
}

/// [`cost_global`] with the Ker term multiplied by `n_c` instead of `w_c`,
/// for side-by-side comparison in strict mode.
pub fn cost_global_printed(
    pp: &PartitionPlan,
    prob: &ConvProblem,
    machine: &MachineSpec,
) -> Result<CostBreakdown, ModelError> {
    pp.validate(prob, machine.p)?;
    check_memory(&pp.tile, prob, machine.m)?;
    Ok(partition_cost(pp, prob, prob.n_c))
}

/// Unchecked per-processor cost; callers guarantee validity.
pub(crate) fn partition_cost(pp: &PartitionPlan, prob: &ConvProblem, ker_c: u64) -> CostBreakdown {
    let ext = Extents { b: pp.w_b, k: pp.w_k, c: pp.w_c, h: pp.w_h, w: pp.w_w };
    tiled_cost(&ext, ker_c, &pp.tile, prob)
}

/// Real-valued point of the simplified (composite-`bhw`) problem.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelaxedPoint {
    pub t_k: f64,
    pub t_bhw: f64,
    pub w_k: f64,
    pub w_bhw: f64,
    pub w_c: f64,
}

/// Relative tolerance for real-valued constraint checks.
pub const RELATIVE_TOLERANCE: f64 = 1e-9;

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Simplified cost with the `n_r - 1`, `n_s - 1` halo terms dropped:
/// `w_k*w_bhw + (n_k n_c n_bhw / p)(n_r n_s / t_bhw + sigma_w sigma_h / t_k)`.
pub fn cost_simplified(
    point: &RelaxedPoint,
    prob: &ConvProblem,
    p: u64,
    m_l: f64,
) -> Result<f64, ModelError> {
    let g = point.t_bhw * point.t_k;
    if g > m_l * (1.0 + RELATIVE_TOLERANCE) {
        return Err(ModelError::ConstraintViolated(format!(
            "t_bhw*t_k = {g} exceeds m_l = {m_l}"
        )));
    }
    let lhs = p as f64 * point.w_bhw * point.w_k * point.w_c;
    let rhs = (prob.n_bhw() * prob.n_k * prob.n_c) as f64;
    if !rel_close(lhs, rhs, RELATIVE_TOLERANCE) {
        return Err(ModelError::ConstraintViolated(format!(
            "p*w_bhw*w_k*w_c = {lhs} but n_bhw*n_k*n_c = {rhs}"
        )));
    }
    Ok(simplified_value(point, prob, p))
}

pub(crate) fn simplified_value(point: &RelaxedPoint, prob: &ConvProblem, p: u64) -> f64 {
    let volume = (prob.n_k * prob.n_c * prob.n_bhw()) as f64 / p as f64;
    point.w_k * point.w_bhw
        + volume
            * (prob.stencil_area() as f64 / point.t_bhw + prob.stride_area() as f64 / point.t_k)
}

/// Initialization, broadcast and total volume of the partitioned-memory
/// algorithm for one processor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DistributedCost {
    pub cost_i: u64,
    pub cost_c: u64,
    pub cost_d: u64,
    /// Ker and In parts of `cost_c`.
    pub broadcast: CostBreakdown,
}

/// Per-processor share of In plus Ker in the initial layout, rounded up.
pub fn initial_share(prob: &ConvProblem, p: u64) -> u64 {
    prob.in_size().div_ceil(p) + prob.ker_size().div_ceil(p)
}

fn check_grid_divisibility(pp: &PartitionPlan, prob: &ConvProblem) -> Result<(), ModelError> {
    for dim in Dim::ALL {
        if !prob.extent(dim).is_multiple_of(pp.get(dim)) {
            return Err(ModelError::PartitionInvalid(format!(
                "w_{dim}={} does not divide n_{dim}={}",
                pp.get(dim),
                prob.extent(dim)
            )));
        }
    }
    Ok(())
}

/// Volume of the partitioned-memory algorithm. `cost_c` is the Ker and In
/// broadcast traffic (the `W_x W_y` factor read as `w_w w_h`), `cost_i` the
/// Out block plus the processor's share of In and Ker.
///
/// Shares of In and Ker round up when `p` does not divide the tensor size.
pub fn cost_distributed(
    pp: &PartitionPlan,
    prob: &ConvProblem,
    machine: &MachineSpec,
) -> Result<DistributedCost, ModelError> {
    pp.validate(prob, machine.p)?;
    check_grid_divisibility(pp, prob)?;
    let global = partition_cost(pp, prob, pp.w_c);
    let broadcast = CostBreakdown::new(0, global.ker_term, global.in_term);
    let cost_i = pp.out_block() + initial_share(prob, machine.p);
    let cost_c = broadcast.total;
    Ok(DistributedCost { cost_i, cost_c, cost_d: cost_i + cost_c, broadcast })
}

/// Local memory needed by the partitioned-memory algorithm: both tile
/// buffers (one `c` index each), the Out block and the initial shares of In and Ker. The caller
/// compares the result against `m_d`.
pub fn memory_distributed(
    pp: &PartitionPlan,
    prob: &ConvProblem,
    machine: &MachineSpec,
) -> Result<u64, ModelError> {
    pp.validate(prob, machine.p)?;
    let buffers = TilePlan { t_c: 1, ..pp.tile };
    Ok(footprint_in(&buffers, prob)
        + footprint_ker(&buffers, prob)
        + pp.out_block()
        + initial_share(prob, machine.p))
}
