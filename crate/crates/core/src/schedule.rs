//! Broadcast schedule feeding the per-processor tile buffers.
//!
//! Execution runs `w_c` steps, one `c` index each. Within a step every
//! processor walks its tiles in `(k, b, w, h)` order; all processors hold the
//! same number of tiles, so `(step, tile)` is a global round. Before a tile
//! runs, its In footprint is broadcast along the `k` line of the consumers
//! and its Ker footprint along their `(b, h, w)` line.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::grid::{check_sub_slices, DistributionPlan, GridCoord, GridError, IndexBox, ProcGrid, Tensor};
use crate::model::{footprint_in, footprint_ker, ConvProblem, PartitionPlan, TilePlan};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("cannot group {w_c} steps: {reason}")]
    GroupIndivisible { w_c: u64, reason: String },
    #[error("grid {grid} does not match the work partition")]
    GridMismatch { grid: ProcGrid },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Tile buffer sizes for one `c` index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TileBuffers {
    pub in_capacity: u64,
    pub ker_capacity: u64,
}

impl TileBuffers {
    pub fn for_tile(tile: &TilePlan, prob: &ConvProblem) -> Self {
        let one_c = TilePlan { t_c: 1, ..*tile };
        TileBuffers { in_capacity: footprint_in(&one_c, prob), ker_capacity: footprint_ker(&one_c, prob) }
    }

    pub fn total(&self) -> u64 {
        self.in_capacity + self.ker_capacity
    }
}

/// Processors receiving a broadcast.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Line {
    /// All `k` positions at fixed `(b, c, h, w)`.
    K { b: u64, c: u64, h: u64, w: u64 },
    /// All `(b, h, w)` positions at fixed `(k, c)`.
    Bhw { k: u64, c: u64 },
}

impl Line {
    pub fn members(&self, grid: &ProcGrid) -> Vec<GridCoord> {
        match *self {
            Line::K { b, c, h, w } => (0..grid.p_k).map(|k| GridCoord { b, k, c, h, w }).collect(),
            Line::Bhw { k, c } => (0..grid.p_bhw()).map(|j| grid.bhw_coord(j, k, c)).collect(),
        }
    }

    pub fn contains(&self, at: GridCoord) -> bool {
        match *self {
            Line::K { b, c, h, w } => (at.b, at.c, at.h, at.w) == (b, c, h, w),
            Line::Bhw { k, c } => (at.k, at.c) == (k, c),
        }
    }

    pub fn len(&self, grid: &ProcGrid) -> u64 {
        match self {
            Line::K { .. } => grid.p_k,
            Line::Bhw { .. } => grid.p_bhw(),
        }
    }
}

/// Written as a grid coordinate with `*` in the varying positions.
impl fmt::Display for Line {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Line::K { b, c, h, w } => write!(f, "{b},*,{c},{h},{w}"),
            Line::Bhw { k, c } => write!(f, "*,{k},{c},*,*"),
        }
    }
}

impl FromStr for Line {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(',').collect();
        let num = |p: &str| p.parse::<u64>().map_err(|e| format!("bad line {s:?}: {e}"));
        match parts[..] {
            [b, "*", c, h, w] => Ok(Line::K { b: num(b)?, c: num(c)?, h: num(h)?, w: num(w)? }),
            ["*", k, c, "*", "*"] => Ok(Line::Bhw { k: num(k)?, c: num(c)? }),
            _ => Err(format!("bad line {s:?}")),
        }
    }
}

/// One broadcast: `root` sends `region` of `tensor` to every member of
/// `line`. A root inside its line makes a local copy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Transfer {
    pub step: u64,
    pub tile: u64,
    pub tensor: Tensor,
    pub line: Line,
    pub root: GridCoord,
    pub region: IndexBox,
}

impl Transfer {
    pub fn payload(&self) -> u64 {
        self.region.len()
    }

    /// True when some receiver is not the root.
    pub fn is_remote(&self, grid: &ProcGrid) -> bool {
        self.line.len(grid) > 1 || !self.line.contains(self.root)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommSchedule {
    pub grid: ProcGrid,
    pub steps: u64,
    pub tiles_per_step: u64,
    pub buffers: TileBuffers,
    /// Sorted by `(step, tile, tensor)`; In precedes Ker within a round.
    pub transfers: Vec<Transfer>,
}

/// Local tile `index` of a work partition: starts and lengths along
/// `(b, k, h, w)`, relative to the partition origin.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LocalTile {
    pub b: (u64, u64),
    pub k: (u64, u64),
    pub h: (u64, u64),
    pub w: (u64, u64),
}

fn tile_counts(plan: &PartitionPlan) -> [u64; 4] {
    let t = &plan.tile;
    [
        plan.w_k.div_ceil(t.t_k),
        plan.w_b.div_ceil(t.t_b),
        plan.w_w.div_ceil(t.t_w),
        plan.w_h.div_ceil(t.t_h),
    ]
}

pub fn tiles_per_step(plan: &PartitionPlan) -> u64 {
    tile_counts(plan).iter().product()
}

/// Tile `index` in `(k, b, w, h)` order; edge tiles may be short.
pub fn local_tile(plan: &PartitionPlan, index: u64) -> LocalTile {
    let [_, nb, nw, nh] = tile_counts(plan);
    let t = &plan.tile;
    let span = |i: u64, t: u64, w: u64| (i * t, t.min(w - i * t));
    LocalTile {
        k: span(index / (nb * nw * nh), t.t_k, plan.w_k),
        b: span((index / (nw * nh)) % nb, t.t_b, plan.w_b),
        w: span((index / nh) % nw, t.t_w, plan.w_w),
        h: span(index % nh, t.t_h, plan.w_h),
    }
}

/// In elements read by `at`'s tile at `step`, with the full
/// `sigma t + n - 1` halo in each spatial direction.
pub fn in_footprint(at: GridCoord, plan: &PartitionPlan, prob: &ConvProblem, step: u64, tile: &LocalTile) -> IndexBox {
    let (sw, sh) = (prob.sigma_w, prob.sigma_h);
    let x0 = at.w * plan.w_w + tile.w.0;
    let y0 = at.h * plan.w_h + tile.h.0;
    IndexBox::with_len(
        [at.b * plan.w_b + tile.b.0, at.c * plan.w_c + step, sw * x0, sh * y0],
        [tile.b.1, 1, sw * tile.w.1 + prob.n_r - 1, sh * tile.h.1 + prob.n_s - 1],
    )
}

pub fn ker_footprint(at: GridCoord, plan: &PartitionPlan, prob: &ConvProblem, step: u64, tile: &LocalTile) -> IndexBox {
    IndexBox::with_len(
        [at.k * plan.w_k + tile.k.0, at.c * plan.w_c + step, 0, 0],
        [tile.k.1, 1, prob.n_r, prob.n_s],
    )
}

fn pieces(
    dist: &DistributionPlan,
    tensor: Tensor,
    needed: &IndexBox,
    mut emit: impl FnMut(GridCoord, IndexBox),
) {
    for r in dist.records_of(tensor) {
        if let Some(region) = r.region.intersect(needed) {
            emit(r.owner, region);
        }
    }
}

/// Builds the step-by-step broadcast schedule.
///
/// Step `s` works on `c = c_0 + s`. Its In data is owned by the `k`
/// position `s / (w_c / p_k)` of each group and its Ker data by the
/// `(b, h, w)` position `s / (w_c / (p_b p_h p_w))`, so the roots rotate
/// through contiguous groups of steps. Each tile's buffers are refilled
/// before it runs, one transfer per owner of a piece of the footprint.
pub fn build_schedule(
    grid: &ProcGrid,
    plan: &PartitionPlan,
    dist: &DistributionPlan,
    prob: &ConvProblem,
) -> Result<CommSchedule, ScheduleError> {
    match check_sub_slices(grid, plan) {
        Ok(()) => {}
        Err(GridError::SubSliceIndivisible(reason)) => {
            return Err(ScheduleError::GroupIndivisible { w_c: plan.w_c, reason })
        }
        Err(_) => unreachable!("check_sub_slices only reports indivisibility"),
    }
    let consistent = crate::model::Dim::ALL
        .iter()
        .all(|&d| grid.get(d) * plan.get(d) == prob.extent(d));
    if !consistent || dist.grid != *grid {
        return Err(ScheduleError::GridMismatch { grid: *grid });
    }

    let tiles = tiles_per_step(plan);
    let mut transfers = Vec::new();
    for step in 0..plan.w_c {
        for tile in 0..tiles {
            let lt = local_tile(plan, tile);
            for b in 0..grid.p_b {
                for c in 0..grid.p_c {
                    for h in 0..grid.p_h {
                        for w in 0..grid.p_w {
                            let rep = GridCoord { b, k: 0, c, h, w };
                            let line = Line::K { b, c, h, w };
                            pieces(dist, Tensor::In, &in_footprint(rep, plan, prob, step, &lt), |root, region| {
                                transfers.push(Transfer { step, tile, tensor: Tensor::In, line, root, region })
                            });
                        }
                    }
                }
            }
            for k in 0..grid.p_k {
                for c in 0..grid.p_c {
                    let rep = GridCoord { b: 0, k, c, h: 0, w: 0 };
                    let line = Line::Bhw { k, c };
                    pieces(dist, Tensor::Ker, &ker_footprint(rep, plan, prob, step, &lt), |root, region| {
                        transfers.push(Transfer { step, tile, tensor: Tensor::Ker, line, root, region })
                    });
                }
            }
        }
    }
    transfers.sort();
    Ok(CommSchedule {
        grid: *grid,
        steps: plan.w_c,
        tiles_per_step: tiles,
        buffers: TileBuffers::for_tile(&plan.tile, prob),
        transfers,
    })
}

/// Elements one processor receives into its tile buffers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct ReceivedVolume {
    pub in_elems: u64,
    pub ker_elems: u64,
}

impl ReceivedVolume {
    pub fn total(&self) -> u64 {
        self.in_elems + self.ker_elems
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScheduleVolume {
    /// Indexed by rank.
    pub per_processor: Vec<ReceivedVolume>,
    pub max_total: u64,
}

/// Per-processor received volume, local copies included.
pub fn schedule_volume(sched: &CommSchedule, grid: &ProcGrid) -> ScheduleVolume {
    let mut per_processor = vec![ReceivedVolume::default(); grid.size() as usize];
    for t in &sched.transfers {
        for at in t.line.members(grid) {
            let v = &mut per_processor[grid.rank(at)];
            match t.tensor {
                Tensor::In => v.in_elems += t.payload(),
                Tensor::Ker => v.ker_elems += t.payload(),
                Tensor::Out => {}
            }
        }
    }
    let max_total = per_processor.iter().map(ReceivedVolume::total).max().unwrap_or(0);
    ScheduleVolume { per_processor, max_total }
}

impl CommSchedule {
    /// Transfers that reach a processor other than the root.
    pub fn remote_transfers(&self) -> usize {
        self.transfers.iter().filter(|t| t.is_remote(&self.grid)).count()
    }

    /// Line-oriented text form: a header with grid and step counts, then
    /// `step tile tensor root line payload lo..hi lo..hi lo..hi lo..hi`.
    pub fn to_text(&self) -> String {
        let g = &self.grid;
        let mut s = format!(
            "schedule grid {} {} {} {} {} steps {} tiles {} buffers {} {}\n",
            g.p_b, g.p_k, g.p_c, g.p_h, g.p_w, self.steps, self.tiles_per_step,
            self.buffers.in_capacity, self.buffers.ker_capacity
        );
        for t in &self.transfers {
            s.push_str(&format!(
                "{} {} {} {} {} {} {}\n",
                t.step,
                t.tile,
                t.tensor,
                t.root,
                t.line,
                t.payload(),
                t.region
            ));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<CommSchedule, ScheduleError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or(ScheduleError::Parse { line: 1, reason: "empty schedule".into() })?;
        let h: Vec<&str> = header.split_whitespace().collect();
        let nums = |idx: &[usize]| -> Result<Vec<u64>, ScheduleError> {
            idx.iter()
                .map(|&i| {
                    h.get(i).and_then(|f| f.parse().ok()).ok_or(ScheduleError::Parse {
                        line: 1,
                        reason: format!("bad header {header:?}"),
                    })
                })
                .collect()
        };
        if h.len() != 14 || h[0] != "schedule" {
            return Err(ScheduleError::Parse { line: 1, reason: format!("bad header {header:?}") });
        }
        let n = nums(&[2, 3, 4, 5, 6, 8, 10, 12, 13])?;
        let grid = ProcGrid::new(n[0], n[1], n[2], n[3], n[4]);
        let mut transfers = Vec::new();
        for (i, raw) in lines {
            let line = i + 1;
            let err = |reason: String| ScheduleError::Parse { line, reason };
            let f: Vec<&str> = raw.split_whitespace().collect();
            if f.len() != 10 {
                return Err(err(format!("expected 10 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<u64>().map_err(|e| err(format!("bad number {s:?}: {e}")));
            let t = Transfer {
                step: num(f[0])?,
                tile: num(f[1])?,
                tensor: f[2].parse().map_err(err)?,
                root: f[3].parse().map_err(err)?,
                line: f[4].parse().map_err(err)?,
                region: IndexBox::parse_fields(&f[6..]).map_err(err)?,
            };
            if num(f[5])? != t.payload() {
                return Err(err("payload does not match the range".into()));
            }
            transfers.push(t);
        }
        Ok(CommSchedule {
            grid,
            steps: n[5],
            tiles_per_step: n[6],
            buffers: TileBuffers { in_capacity: n[7], ker_capacity: n[8] },
            transfers,
        })
    }
}
