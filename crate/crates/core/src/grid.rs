//! Processor grids and the initial placement of In, Ker and Out.
//!
//! Processor `(b, k, c, h, w)` executes the work partition whose index ranges
//! start at `(b w_b, k w_k, c w_c, h w_h, w w_w)`. Ranks are row-major over
//! `(b, k, c, h, w)`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::model::{ConvProblem, Dim, MachineSpec, ModelError, PartitionPlan};
use crate::optimizer::{best_for_partition, work_partitions, CaseLabel, IntegerPlan};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum GridError {
    #[error("w_{dim} = {w} does not divide n_{dim} = {n}")]
    NonDividingPartition { dim: Dim, w: u64, n: u64 },
    #[error("grid product {product} differs from p = {p}")]
    GridProductMismatch { product: u64, p: u64 },
    #[error("sub-slice indivisible: {0}")]
    SubSliceIndivisible(String),
    #[error("{case} plan has w_c = {w_c} but n_c = {n_c}")]
    CaseMismatch { case: CaseLabel, w_c: u64, n_c: u64 },
    #[error("no work partition satisfies the distribution divisibility rules")]
    NoDivisibleLayout,
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct GridCoord {
    pub b: u64,
    pub k: u64,
    pub c: u64,
    pub h: u64,
    pub w: u64,
}

impl GridCoord {
    pub fn new(b: u64, k: u64, c: u64, h: u64, w: u64) -> Self {
        GridCoord { b, k, c, h, w }
    }

    pub fn get(&self, dim: Dim) -> u64 {
        match dim {
            Dim::B => self.b,
            Dim::K => self.k,
            Dim::C => self.c,
            Dim::H => self.h,
            Dim::W => self.w,
        }
    }
}

impl fmt::Display for GridCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{},{}", self.b, self.k, self.c, self.h, self.w)
    }
}

impl FromStr for GridCoord {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<u64> = s
            .split(',')
            .map(|p| p.trim().parse::<u64>().map_err(|e| format!("bad coordinate {s:?}: {e}")))
            .collect::<Result<_, _>>()?;
        match parts[..] {
            [b, k, c, h, w] => Ok(GridCoord { b, k, c, h, w }),
            _ => Err(format!("coordinate {s:?} needs five components")),
        }
    }
}

/// Logical `p_b x p_k x p_c x p_h x p_w` processor grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ProcGrid {
    pub p_b: u64,
    pub p_k: u64,
    pub p_c: u64,
    pub p_h: u64,
    pub p_w: u64,
}

impl ProcGrid {
    pub fn new(p_b: u64, p_k: u64, p_c: u64, p_h: u64, p_w: u64) -> Self {
        ProcGrid { p_b, p_k, p_c, p_h, p_w }
    }

    pub fn ones() -> Self {
        ProcGrid::new(1, 1, 1, 1, 1)
    }

    pub fn get(&self, dim: Dim) -> u64 {
        match dim {
            Dim::B => self.p_b,
            Dim::K => self.p_k,
            Dim::C => self.p_c,
            Dim::H => self.p_h,
            Dim::W => self.p_w,
        }
    }

    pub fn size(&self) -> u64 {
        self.p_b * self.p_k * self.p_c * self.p_h * self.p_w
    }

    /// Processors sharing one `(k, c)` coordinate.
    pub fn p_bhw(&self) -> u64 {
        self.p_b * self.p_h * self.p_w
    }

    pub fn rank(&self, at: GridCoord) -> usize {
        ((((at.b * self.p_k + at.k) * self.p_c + at.c) * self.p_h + at.h) * self.p_w + at.w) as usize
    }

    pub fn coord(&self, rank: usize) -> GridCoord {
        let mut r = rank as u64;
        let w = r % self.p_w;
        r /= self.p_w;
        let h = r % self.p_h;
        r /= self.p_h;
        let c = r % self.p_c;
        r /= self.p_c;
        let k = r % self.p_k;
        GridCoord { b: r / self.p_k, k, c, h, w }
    }

    /// All coordinates in rank order.
    pub fn coords(&self) -> impl Iterator<Item = GridCoord> + '_ {
        (0..self.size() as usize).map(|r| self.coord(r))
    }

    /// Position of `at` along its `(b, h, w)` line.
    pub fn bhw_index(&self, at: GridCoord) -> u64 {
        (at.b * self.p_h + at.h) * self.p_w + at.w
    }

    /// Inverse of [`ProcGrid::bhw_index`] for fixed `k` and `c`.
    pub fn bhw_coord(&self, index: u64, k: u64, c: u64) -> GridCoord {
        GridCoord { b: index / (self.p_h * self.p_w), k, c, h: (index / self.p_w) % self.p_h, w: index % self.p_w }
    }
}

impl fmt::Display for ProcGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p_b={} p_k={} p_c={} p_h={} p_w={}", self.p_b, self.p_k, self.p_c, self.p_h, self.p_w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tensor {
    In,
    Ker,
    Out,
}

impl Tensor {
    pub fn name(self) -> &'static str {
        match self {
            Tensor::In => "In",
            Tensor::Ker => "Ker",
            Tensor::Out => "Out",
        }
    }
}

impl fmt::Display for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tensor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "In" => Ok(Tensor::In),
            "Ker" => Ok(Tensor::Ker),
            "Out" => Ok(Tensor::Out),
            _ => Err(format!("unknown tensor {s:?}")),
        }
    }
}

/// Half-open box `lo..hi` in a tensor's own index order
/// (In `[b, c, x, y]`, Ker `[k, c, r, s]`, Out `[b, k, w, h]`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IndexBox {
    pub lo: [u64; 4],
    pub hi: [u64; 4],
}

impl IndexBox {
    pub fn new(lo: [u64; 4], hi: [u64; 4]) -> Self {
        IndexBox { lo, hi }
    }

    /// Box starting at `lo` with extents `len`.
    pub fn with_len(lo: [u64; 4], len: [u64; 4]) -> Self {
        IndexBox { lo, hi: std::array::from_fn(|i| lo[i] + len[i]) }
    }

    pub fn extents(&self) -> [u64; 4] {
        std::array::from_fn(|i| self.hi[i].saturating_sub(self.lo[i]))
    }

    pub fn len(&self) -> u64 {
        self.extents().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, idx: [u64; 4]) -> bool {
        (0..4).all(|i| self.lo[i] <= idx[i] && idx[i] < self.hi[i])
    }

    pub fn intersect(&self, other: &IndexBox) -> Option<IndexBox> {
        let lo = std::array::from_fn(|i| self.lo[i].max(other.lo[i]));
        let hi = std::array::from_fn(|i| self.hi[i].min(other.hi[i]));
        let out = IndexBox { lo, hi };
        (!out.is_empty()).then_some(out)
    }

    /// Every index in row-major order.
    pub fn indices(&self) -> impl Iterator<Item = [u64; 4]> + '_ {
        let [a, b, c, d] = self.extents();
        let lo = self.lo;
        (0..a * b * c * d).map(move |n| {
            [lo[0] + n / (b * c * d), lo[1] + (n / (c * d)) % b, lo[2] + (n / d) % c, lo[3] + n % d]
        })
    }
}

impl fmt::Display for IndexBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..4 {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{}..{}", self.lo[i], self.hi[i])?;
        }
        Ok(())
    }
}

fn parse_range(s: &str) -> Result<(u64, u64), String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("bad range {s:?}"))?;
    let lo = a.parse().map_err(|e| format!("bad range {s:?}: {e}"))?;
    let hi = b.parse().map_err(|e| format!("bad range {s:?}: {e}"))?;
    Ok((lo, hi))
}

impl IndexBox {
    /// Parses four whitespace-separated `lo..hi` ranges.
    pub fn parse_fields(fields: &[&str]) -> Result<IndexBox, String> {
        if fields.len() != 4 {
            return Err(format!("expected 4 ranges, got {}", fields.len()));
        }
        let mut lo = [0; 4];
        let mut hi = [0; 4];
        for (i, f) in fields.iter().enumerate() {
            (lo[i], hi[i]) = parse_range(f)?;
        }
        Ok(IndexBox { lo, hi })
    }
}

/// Boxes covering the row-major linear range `a..e` of a block with the
/// given extents. Each box fixes the leading coordinates and spans a run of
/// one axis with the trailing axes complete.
fn linear_range_boxes(shape: [u64; 4], mut a: u64, e: u64) -> Vec<IndexBox> {
    let mut strides = [1u64; 4];
    for i in (0..3).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let mut out = Vec::new();
    while a < e {
        for i in 0..4 {
            let unit = strides[i];
            if !a.is_multiple_of(unit) || a + unit > e {
                continue;
            }
            let pos = (a / unit) % shape[i];
            let n = ((e - a) / unit).min(shape[i] - pos);
            let mut lo = [0; 4];
            let mut hi = shape;
            for j in 0..i {
                lo[j] = (a / strides[j]) % shape[j];
                hi[j] = lo[j] + 1;
            }
            lo[i] = pos;
            hi[i] = pos + n;
            out.push(IndexBox { lo, hi });
            a += n * unit;
            break;
        }
    }
    out
}

/// One box of a tensor held by one processor at the start.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OwnershipRecord {
    pub tensor: Tensor,
    pub owner: GridCoord,
    pub region: IndexBox,
}

/// Initial layout of every tensor over the grid.
///
/// In and Ker are partitioned disjointly. Out blocks are allocated on every
/// processor of a `c`-line, so each Out element appears `p_c` times.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DistributionPlan {
    pub grid: ProcGrid,
    pub records: Vec<OwnershipRecord>,
}

impl DistributionPlan {
    pub fn records_of(&self, tensor: Tensor) -> impl Iterator<Item = &OwnershipRecord> + '_ {
        self.records.iter().filter(move |r| r.tensor == tensor)
    }

    /// Elements of `tensor` initially held by `owner`.
    pub fn owned(&self, owner: GridCoord, tensor: Tensor) -> u64 {
        self.records
            .iter()
            .filter(|r| r.owner == owner && r.tensor == tensor)
            .map(|r| r.region.len())
            .sum()
    }

    /// In, Ker and Out elements initially held by `owner`.
    pub fn footprint(&self, owner: GridCoord) -> u64 {
        self.records.iter().filter(|r| r.owner == owner).map(|r| r.region.len()).sum()
    }

    /// Line-oriented text form: a `grid` header, then one
    /// `tensor owner lo..hi lo..hi lo..hi lo..hi` line per record.
    pub fn to_text(&self) -> String {
        let g = &self.grid;
        let mut s = format!("grid {} {} {} {} {}\n", g.p_b, g.p_k, g.p_c, g.p_h, g.p_w);
        for r in &self.records {
            s.push_str(&format!("{} {} {}\n", r.tensor, r.owner, r.region));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<DistributionPlan, GridError> {
        let mut grid = None;
        let mut records = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |reason: String| GridError::Parse { line, reason };
            let fields: Vec<&str> = raw.split_whitespace().collect();
            match fields.first() {
                None => continue,
                Some(&"grid") => {
                    let p: Vec<u64> = fields[1..]
                        .iter()
                        .map(|f| f.parse().map_err(|e| err(format!("bad grid size {f:?}: {e}"))))
                        .collect::<Result<_, _>>()?;
                    match p[..] {
                        [b, k, c, h, w] => grid = Some(ProcGrid::new(b, k, c, h, w)),
                        _ => return Err(err("grid needs five sizes".into())),
                    }
                }
                Some(t) => {
                    if fields.len() != 6 {
                        return Err(err(format!("expected 6 fields, got {}", fields.len())));
                    }
                    records.push(OwnershipRecord {
                        tensor: t.parse().map_err(err)?,
                        owner: fields[1].parse().map_err(err)?,
                        region: IndexBox::parse_fields(&fields[2..]).map_err(err)?,
                    });
                }
            }
        }
        let grid = grid.ok_or(GridError::Parse { line: 1, reason: "missing grid header".into() })?;
        Ok(DistributionPlan { grid, records })
    }
}

/// Grid with `p_i = n_i / w_i`.
pub fn derive_grid(
    plan: &PartitionPlan,
    case: CaseLabel,
    prob: &ConvProblem,
    machine: &MachineSpec,
) -> Result<ProcGrid, GridError> {
    let mut p = [0u64; 5];
    for (slot, dim) in Dim::ALL.into_iter().enumerate() {
        let (w, n) = (plan.get(dim), prob.extent(dim));
        if w == 0 || n % w != 0 {
            return Err(GridError::NonDividingPartition { dim, w, n });
        }
        p[slot] = n / w;
    }
    let grid = ProcGrid::new(p[0], p[1], p[2], p[3], p[4]);
    if case.is_case1() && plan.w_c != prob.n_c {
        return Err(GridError::CaseMismatch { case, w_c: plan.w_c, n_c: prob.n_c });
    }
    if grid.size() != machine.p {
        return Err(GridError::GridProductMismatch { product: grid.size(), p: machine.p });
    }
    Ok(grid)
}

/// Divisibility the layout needs: `p_k | w_c` and `p_b p_h p_w | w_c`.
pub fn check_sub_slices(grid: &ProcGrid, plan: &PartitionPlan) -> Result<(), GridError> {
    if !plan.w_c.is_multiple_of(grid.p_k) {
        return Err(GridError::SubSliceIndivisible(format!(
            "p_k = {} does not divide w_c = {}",
            grid.p_k, plan.w_c
        )));
    }
    if !plan.w_c.is_multiple_of(grid.p_bhw()) {
        return Err(GridError::SubSliceIndivisible(format!(
            "p_b*p_h*p_w = {} does not divide w_c = {}",
            grid.p_bhw(),
            plan.w_c
        )));
    }
    Ok(())
}

/// Initial layout of In, Ker and Out.
///
/// * Ker: each `(k, c)` slice of `w_k x w_c x n_r x n_s` is cut along `c`
///   into `p_b p_h p_w` equal sub-slices; the processor at position `j` of
///   the slice's `(b, h, w)` line owns sub-slice `j`.
/// * In: the `(b, c)` block of a `(b, c)` grid group spans the full spatial
///   extent. It is cut along `c` into `p_k` sub-slices, one per `k` position.
///   Each sub-slice is flattened in `(x, y, b, c)` order and cut into
///   `p_h p_w` contiguous runs of near-equal length, so halo elements shared
///   by spatial neighbours have exactly one owner and the shares differ by
///   at most one element.
/// * Out: every processor holds its own `w_b x w_k x w_w x w_h` block.
pub fn plan_distribution(
    grid: &ProcGrid,
    plan: &PartitionPlan,
    prob: &ConvProblem,
) -> Result<DistributionPlan, GridError> {
    check_sub_slices(grid, plan)?;
    let mut records = Vec::new();

    let ker_sub = plan.w_c / grid.p_bhw();
    for pk in 0..grid.p_k {
        for pc in 0..grid.p_c {
            for j in 0..grid.p_bhw() {
                records.push(OwnershipRecord {
                    tensor: Tensor::Ker,
                    owner: grid.bhw_coord(j, pk, pc),
                    region: IndexBox::with_len(
                        [pk * plan.w_k, pc * plan.w_c + j * ker_sub, 0, 0],
                        [plan.w_k, ker_sub, prob.n_r, prob.n_s],
                    ),
                });
            }
        }
    }

    let in_sub = plan.w_c / grid.p_k;
    let (l_x, l_y) = (prob.in_width(), prob.in_height());
    // Flattening order (x, y, b, c) as a permuted shape.
    let shape = [l_x, l_y, plan.w_b, in_sub];
    let total: u64 = shape.iter().product();
    let parts = grid.p_h * grid.p_w;
    for pb in 0..grid.p_b {
        for pk in 0..grid.p_k {
            for pc in 0..grid.p_c {
                let b0 = pb * plan.w_b;
                let c0 = pc * plan.w_c + pk * in_sub;
                for pw in 0..grid.p_w {
                    for ph in 0..grid.p_h {
                        let q = pw * grid.p_h + ph;
                        let (a, e) = (q * total / parts, (q + 1) * total / parts);
                        let owner = GridCoord::new(pb, pk, pc, ph, pw);
                        for bx in linear_range_boxes(shape, a, e) {
                            records.push(OwnershipRecord {
                                tensor: Tensor::In,
                                owner,
                                region: IndexBox::new(
                                    [b0 + bx.lo[2], c0 + bx.lo[3], bx.lo[0], bx.lo[1]],
                                    [b0 + bx.hi[2], c0 + bx.hi[3], bx.hi[0], bx.hi[1]],
                                ),
                            });
                        }
                    }
                }
            }
        }
    }

    for at in grid.coords() {
        records.push(OwnershipRecord {
            tensor: Tensor::Out,
            owner: at,
            region: IndexBox::with_len(
                [at.b * plan.w_b, at.k * plan.w_k, at.w * plan.w_w, at.h * plan.w_h],
                [plan.w_b, plan.w_k, plan.w_w, plan.w_h],
            ),
        });
    }
    records.sort();
    Ok(DistributionPlan { grid: *grid, records })
}

/// A plan together with its grid and initial layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub plan: PartitionPlan,
    pub grid: ProcGrid,
    pub distribution: DistributionPlan,
    /// `cost_global` of `plan` minus that of the requested plan.
    pub cost_delta: i64,
    /// True when the requested plan was replaced.
    pub adjusted: bool,
}

/// Grid and layout for `requested`. When the layout's divisibility rules
/// fail, the work partition is replaced by the one whose `w_c` is nearest
/// to the requested value on a log scale (re-balancing `w_k` and the `bhw`
/// sizes under the processor product), cheapest first, with the best
/// divisor tiling that fits in `m`.
pub fn synthesize_layout(
    requested: &IntegerPlan,
    case: CaseLabel,
    prob: &ConvProblem,
    machine: &MachineSpec,
) -> Result<Layout, GridError> {
    let base = requested.achieved_cost.total as i64;
    let direct = derive_grid(&requested.plan, case, prob, machine)
        .and_then(|g| plan_distribution(&g, &requested.plan, prob).map(|d| (g, d)));
    match direct {
        Ok((grid, distribution)) => {
            return Ok(Layout { plan: requested.plan, grid, distribution, cost_delta: 0, adjusted: false })
        }
        Err(GridError::SubSliceIndivisible(reason)) => {
            log::info!("adjusting w_c: {reason}");
        }
        Err(e) => return Err(e),
    }

    let target = (requested.plan.w_c as f64).ln();
    let mut candidates: Vec<_> = work_partitions(prob, machine.p)
        .into_iter()
        .filter(|w| {
            let grid = ProcGrid::new(
                prob.n_b / w.w_b,
                prob.n_k / w.w_k,
                prob.n_c / w.w_c,
                prob.n_h / w.w_h,
                prob.n_w / w.w_w,
            );
            check_sub_slices(&grid, w).is_ok()
        })
        .filter_map(|w| best_for_partition(&w, prob, machine.m))
        .map(|(key, plan, _)| {
            let distance = ((plan.w_c as f64).ln() - target).abs();
            (distance, key, plan)
        })
        .collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (_, key, plan) = candidates.into_iter().next().ok_or(GridError::NoDivisibleLayout)?;
    let case = if plan.w_c == prob.n_c { case } else { CaseLabel::Case2b };
    let grid = derive_grid(&plan, case, prob, machine)?;
    let distribution = plan_distribution(&grid, &plan, prob)?;
    Ok(Layout { plan, grid, distribution, cost_delta: key.0 as i64 - base, adjusted: true })
}
