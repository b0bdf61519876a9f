//! Lockstep simulation of the partitioned-memory algorithm.
//!
//! Every `(step, tile)` round first delivers all of the round's transfers,
//! then lets every processor run its tile. Processors only read their tile
//! buffers; any element missing there is reported as [`SimError::DataMissing`].
//! After the last step the Out blocks of each `c` line are summed into the
//! `c = 0` processor, streamed through the freed tile buffers.

use std::collections::HashMap;

use ndarray::Array4;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::{DistributionPlan, GridCoord, IndexBox, ProcGrid, Tensor};
use crate::model::{cost_global, memory_distributed, ConvProblem, MachineSpec, ModelError, PartitionPlan};
use crate::schedule::{in_footprint, ker_footprint, local_tile, CommSchedule, Transfer};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum SimError {
    #[error("processor {processor} ({coord}) needs {live} elements at step {step}, capacity {capacity}")]
    MemoryOverflow { processor: usize, coord: GridCoord, step: u64, live: u64, capacity: u64 },
    #[error("processor {processor} ({coord}) lacks {tensor}{element:?} at step {step}")]
    DataMissing { processor: usize, coord: GridCoord, step: u64, tensor: Tensor, element: [u64; 4] },
    #[error("tensor shape {actual:?} differs from {expected:?}")]
    ShapeMismatch { expected: [usize; 4], actual: [usize; 4] },
    #[error("inconsistent configuration: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum SimMode {
    /// Track data presence and volumes only.
    #[default]
    CountOnly,
    /// Also carry values and compare Out against the reference.
    FullCompute,
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub problem: ConvProblem,
    pub machine: MachineSpec,
    pub plan: PartitionPlan,
    pub grid: ProcGrid,
    pub distribution: DistributionPlan,
    pub schedule: CommSchedule,
    pub seed: u64,
    pub mode: SimMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct ProcStats {
    pub coord: GridCoord,
    pub received_in: u64,
    pub received_ker: u64,
    /// Owned In and Ker elements plus the Out block.
    pub initial_footprint: u64,
    pub peak_memory: u64,
    /// Out elements summed into this processor at the end.
    pub reduction_volume: u64,
}

impl ProcStats {
    pub fn received(&self) -> u64 {
        self.received_in + self.received_ker
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimReport {
    /// Indexed by rank.
    pub processors: Vec<ProcStats>,
    pub cost_i: u64,
    pub cost_c: u64,
    pub cost_d: u64,
    pub peak_memory: u64,
    /// `Some(true)` when Out matched the reference, `None` when not checked.
    pub correct: Option<bool>,
    pub steps: u64,
}

/// In and Ker tensors filled from `seed`.
///
/// A `ChaCha8Rng` seeded with `seed_from_u64(seed)` yields one `next_u64`
/// per element, In first then Ker, each in row-major order; the element is
/// `(x % 9) - 4`.
pub fn generate_inputs(prob: &ConvProblem, seed: u64) -> (Array4<i64>, Array4<i64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |shape: [u64; 4]| {
        let dims = shape.map(|d| d as usize);
        Array4::from_shape_simple_fn(dims, || (rng.next_u64() % 9) as i64 - 4)
    };
    let input = draw(prob.in_shape());
    let ker = draw(prob.ker_shape());
    (input, ker)
}

/// Direct seven-deep loop nest.
pub fn reference_convolution(
    prob: &ConvProblem,
    input: &Array4<i64>,
    ker: &Array4<i64>,
) -> Result<Array4<i64>, SimError> {
    let check = |expected: [u64; 4], actual: &[usize]| {
        let expected = expected.map(|d| d as usize);
        if actual != expected {
            return Err(SimError::ShapeMismatch {
                expected,
                actual: [actual[0], actual[1], actual[2], actual[3]],
            });
        }
        Ok(())
    };
    check(prob.in_shape(), input.shape())?;
    check(prob.ker_shape(), ker.shape())?;
    let [nb, nk, nw, nh] = prob.out_shape().map(|d| d as usize);
    let (nc, nr, ns) = (prob.n_c as usize, prob.n_r as usize, prob.n_s as usize);
    let (sw, sh) = (prob.sigma_w as usize, prob.sigma_h as usize);
    let mut out = Array4::<i64>::zeros((nb, nk, nw, nh));
    for b in 0..nb {
        for k in 0..nk {
            for c in 0..nc {
                for w in 0..nw {
                    for h in 0..nh {
                        for r in 0..nr {
                            for s in 0..ns {
                                out[[b, k, w, h]] += input[[b, c, sw * w + r, sh * h + s]] * ker[[k, c, r, s]];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn ix(i: [u64; 4]) -> [usize; 4] {
    i.map(|v| v as usize)
}

struct Proc {
    coord: GridCoord,
    in_buf: HashMap<[u64; 4], i64>,
    ker_buf: HashMap<[u64; 4], i64>,
    out: Array4<i64>,
    owned: u64,
    stats: ProcStats,
}

impl Proc {
    fn live(&self, out_block: u64, extra: u64) -> u64 {
        self.owned + out_block + self.in_buf.len() as u64 + self.ker_buf.len() as u64 + extra
    }
}

struct Machine<'a> {
    cfg: &'a SimConfig,
    procs: Vec<Proc>,
    input: Option<Array4<i64>>,
    ker: Option<Array4<i64>>,
    out_block: u64,
}

impl Machine<'_> {
    fn sample(&mut self, rank: usize, step: u64, extra: u64) -> Result<(), SimError> {
        let p = &mut self.procs[rank];
        let live = p.live(self.out_block, extra);
        p.stats.peak_memory = p.stats.peak_memory.max(live);
        if live > self.cfg.machine.m_d {
            return Err(SimError::MemoryOverflow {
                processor: rank,
                coord: p.coord,
                step,
                live,
                capacity: self.cfg.machine.m_d,
            });
        }
        Ok(())
    }

    fn deliver(&mut self, t: &Transfer) -> Result<(), SimError> {
        let grid = &self.cfg.grid;
        let owned: u64 = self
            .cfg
            .distribution
            .records_of(t.tensor)
            .filter(|r| r.owner == t.root)
            .filter_map(|r| r.region.intersect(&t.region))
            .map(|b| b.len())
            .sum();
        if owned != t.payload() {
            let element = t
                .region
                .indices()
                .find(|&i| {
                    !self
                        .cfg
                        .distribution
                        .records_of(t.tensor)
                        .any(|r| r.owner == t.root && r.region.contains(i))
                })
                .unwrap_or(t.region.lo);
            return Err(SimError::DataMissing {
                processor: grid.rank(t.root),
                coord: t.root,
                step: t.step,
                tensor: t.tensor,
                element,
            });
        }
        let source = match t.tensor {
            Tensor::In => self.input.as_ref(),
            _ => self.ker.as_ref(),
        };
        for at in t.line.members(grid) {
            let p = &mut self.procs[grid.rank(at)];
            let buf = match t.tensor {
                Tensor::In => {
                    p.stats.received_in += t.payload();
                    &mut p.in_buf
                }
                _ => {
                    p.stats.received_ker += t.payload();
                    &mut p.ker_buf
                }
            };
            for i in t.region.indices() {
                buf.insert(i, source.map_or(0, |s| s[ix(i)]));
            }
        }
        Ok(())
    }

    fn missing(&self, rank: usize, step: u64, tensor: Tensor, element: [u64; 4]) -> SimError {
        SimError::DataMissing { processor: rank, coord: self.procs[rank].coord, step, tensor, element }
    }

    /// Runs the tile; in count-only mode only checks that its data arrived.
    fn compute(&mut self, rank: usize, step: u64, tile: u64) -> Result<(), SimError> {
        let cfg = self.cfg;
        let (prob, plan) = (&cfg.problem, &cfg.plan);
        let at = self.procs[rank].coord;
        let lt = local_tile(plan, tile);
        let c = at.c * plan.w_c + step;
        let (sw, sh) = (prob.sigma_w, prob.sigma_h);
        let in_needed = IndexBox::new(
            [at.b * plan.w_b + lt.b.0, c, sw * (at.w * plan.w_w + lt.w.0), sh * (at.h * plan.w_h + lt.h.0)],
            [
                at.b * plan.w_b + lt.b.0 + lt.b.1,
                c + 1,
                sw * (at.w * plan.w_w + lt.w.0 + lt.w.1 - 1) + prob.n_r,
                sh * (at.h * plan.w_h + lt.h.0 + lt.h.1 - 1) + prob.n_s,
            ],
        );
        debug_assert!(in_footprint(at, plan, prob, step, &lt).intersect(&in_needed) == Some(in_needed));
        let ker_needed = ker_footprint(at, plan, prob, step, &lt);
        let p = &self.procs[rank];
        if let Some(i) = in_needed.indices().find(|i| !p.in_buf.contains_key(i)) {
            return Err(self.missing(rank, step, Tensor::In, i));
        }
        if let Some(i) = ker_needed.indices().find(|i| !p.ker_buf.contains_key(i)) {
            return Err(self.missing(rank, step, Tensor::Ker, i));
        }
        if cfg.mode == SimMode::CountOnly {
            return Ok(());
        }
        let p = &mut self.procs[rank];
        for b in lt.b.0..lt.b.0 + lt.b.1 {
            let gb = at.b * plan.w_b + b;
            for k in lt.k.0..lt.k.0 + lt.k.1 {
                let gk = at.k * plan.w_k + k;
                for w in lt.w.0..lt.w.0 + lt.w.1 {
                    let gw = at.w * plan.w_w + w;
                    for h in lt.h.0..lt.h.0 + lt.h.1 {
                        let gh = at.h * plan.w_h + h;
                        let mut acc = 0;
                        for r in 0..prob.n_r {
                            for s in 0..prob.n_s {
                                acc += p.in_buf[&[gb, c, sw * gw + r, sh * gh + s]] * p.ker_buf[&[gk, c, r, s]];
                            }
                        }
                        p.out[ix([b, k, w, h])] += acc;
                    }
                }
            }
        }
        Ok(())
    }

    /// Sums each `c` line into its `c = 0` member in chunks no larger than
    /// the tile buffers.
    fn reduce(&mut self) -> Result<(), SimError> {
        let grid = self.cfg.grid;
        let step = self.cfg.plan.w_c;
        let chunk = self.cfg.schedule.buffers.total().max(1);
        for root in grid.coords().filter(|at| at.c == 0) {
            let root_rank = grid.rank(root);
            for c in 1..grid.p_c {
                let src = grid.rank(GridCoord { c, ..root });
                let incoming: Vec<([usize; 4], i64)> = self.procs[src]
                    .out
                    .indexed_iter()
                    .map(|((a, b, c, d), &v)| ([a, b, c, d], v))
                    .collect();
                let mut sent = 0;
                while sent < self.out_block {
                    let len = chunk.min(self.out_block - sent);
                    self.sample(root_rank, step, len)?;
                    let r = &mut self.procs[root_rank];
                    let (lo, hi) = (sent as usize, ((sent + len) as usize).min(incoming.len()));
                    for (i, v) in incoming.get(lo..hi).unwrap_or(&[]) {
                        r.out[*i] += v;
                    }
                    r.stats.reduction_volume += len;
                    sent += len;
                }
            }
        }
        Ok(())
    }
}

/// Simulates the configured run.
pub fn run(cfg: &SimConfig) -> Result<SimReport, SimError> {
    let prob = &cfg.problem;
    let plan = &cfg.plan;
    let grid = cfg.grid;
    if cfg.schedule.grid != grid || cfg.distribution.grid != grid {
        return Err(SimError::Inconsistent("grid, layout and schedule disagree".into()));
    }
    if grid.size() != cfg.machine.p {
        return Err(SimError::Inconsistent(format!("grid has {} processors, p = {}", grid.size(), cfg.machine.p)));
    }
    let (input, ker) = match cfg.mode {
        SimMode::FullCompute => {
            let (i, k) = generate_inputs(prob, cfg.seed);
            (Some(i), Some(k))
        }
        SimMode::CountOnly => (None, None),
    };
    let block = [plan.w_b, plan.w_k, plan.w_w, plan.w_h].map(|d| d as usize);
    let out_block = plan.out_block();
    let procs = grid
        .coords()
        .map(|coord| {
            let owned = cfg.distribution.owned(coord, Tensor::In) + cfg.distribution.owned(coord, Tensor::Ker);
            Proc {
                coord,
                in_buf: HashMap::new(),
                ker_buf: HashMap::new(),
                out: Array4::zeros(if cfg.mode == SimMode::FullCompute { block } else { [0; 4] }),
                owned,
                stats: ProcStats { coord, initial_footprint: owned + out_block, ..Default::default() },
            }
        })
        .collect();
    let mut m = Machine { cfg, procs, input, ker, out_block };
    let n = grid.size() as usize;
    for rank in 0..n {
        m.sample(rank, 0, 0)?;
    }

    let mut transfers = cfg.schedule.transfers.iter().peekable();
    for step in 0..cfg.schedule.steps {
        for tile in 0..cfg.schedule.tiles_per_step {
            for p in &mut m.procs {
                p.in_buf.clear();
                p.ker_buf.clear();
            }
            while let Some(t) = transfers.next_if(|t| (t.step, t.tile) == (step, tile)) {
                m.deliver(t)?;
            }
            for rank in 0..n {
                m.sample(rank, step, 0)?;
            }
            for rank in 0..n {
                m.compute(rank, step, tile)?;
            }
        }
    }
    if let Some(t) = transfers.next() {
        return Err(SimError::Inconsistent(format!("transfer outside the schedule's steps: step {} tile {}", t.step, t.tile)));
    }
    for p in &mut m.procs {
        p.in_buf.clear();
        p.ker_buf.clear();
    }
    m.reduce()?;

    let correct = match cfg.mode {
        SimMode::CountOnly => None,
        SimMode::FullCompute => {
            let expected = reference_convolution(prob, m.input.as_ref().unwrap(), m.ker.as_ref().unwrap())?;
            let mut gathered = Array4::<i64>::zeros(expected.raw_dim());
            for p in m.procs.iter().filter(|p| p.coord.c == 0) {
                let at = p.coord;
                let origin = [at.b * plan.w_b, at.k * plan.w_k, at.w * plan.w_w, at.h * plan.w_h];
                for ((a, b, c, d), &v) in p.out.indexed_iter() {
                    gathered[[a + origin[0] as usize, b + origin[1] as usize, c + origin[2] as usize, d + origin[3] as usize]] = v;
                }
            }
            Some(gathered == expected)
        }
    };

    let processors: Vec<ProcStats> = m.procs.iter().map(|p| p.stats).collect();
    let cost_i = processors.iter().map(|s| s.initial_footprint).max().unwrap_or(0);
    let cost_c = processors.iter().map(ProcStats::received).max().unwrap_or(0);
    let cost_d = processors.iter().map(|s| s.initial_footprint + s.received()).max().unwrap_or(0);
    let peak_memory = processors.iter().map(|s| s.peak_memory).max().unwrap_or(0);
    Ok(SimReport { processors, cost_i, cost_c, cost_d, peak_memory, correct, steps: cfg.schedule.steps })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdentityCheck {
    pub name: &'static str,
    pub passed: bool,
    pub lhs: u64,
    pub rhs: u64,
}

/// Compares a finished run against the analytical model:
///
/// * `broadcast-volume`: measured `cost_c` against the cost model's;
/// * `constant-offset`: `cost_d - cost_global` against the initial In and
///   Ker share;
/// * `peak-within-bound`: peak live elements against the analytical bound;
/// * `bound-within-capacity`: the bound against `m_d`;
/// * `reduction-volume`: per `c` line, `(p_c - 1)` Out blocks;
/// * `functional` (full-compute runs): Out against the reference.
pub fn verify_identities(
    report: &SimReport,
    prob: &ConvProblem,
    machine: &MachineSpec,
    plan: &PartitionPlan,
) -> Result<Vec<IdentityCheck>, SimError> {
    let global = cost_global(plan, prob, machine)?;
    let model = crate::model::cost_distributed(plan, prob, machine)?;
    let bound = memory_distributed(plan, prob, machine)?;
    let share = crate::model::initial_share(prob, machine.p);
    let p_c = prob.n_c / plan.w_c;
    let reduction = report.processors.iter().map(|s| s.reduction_volume).max().unwrap_or(0);
    let check = |name, lhs: u64, rhs: u64, passed: bool| IdentityCheck { name, passed, lhs, rhs };
    let mut out = vec![
        check("broadcast-volume", report.cost_c, model.cost_c, report.cost_c == model.cost_c),
        check(
            "constant-offset",
            report.cost_d.saturating_sub(global.total),
            share,
            report.cost_d >= global.total && report.cost_d - global.total == share,
        ),
        check("peak-within-bound", report.peak_memory, bound, report.peak_memory <= bound),
        check("bound-within-capacity", bound, machine.m_d, bound <= machine.m_d),
        check("reduction-volume", reduction, (p_c - 1) * plan.out_block(), reduction == (p_c - 1) * plan.out_block()),
    ];
    if let Some(ok) = report.correct {
        out.push(check("functional", ok as u64, 1, ok));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::plan_distribution;
    use crate::model::TilePlan;
    use crate::schedule::build_schedule;

    fn config(prob: ConvProblem, plan: PartitionPlan, grid: ProcGrid, m_d: u64, mode: SimMode) -> SimConfig {
        let distribution = plan_distribution(&grid, &plan, &prob).unwrap();
        let schedule = build_schedule(&grid, &plan, &distribution, &prob).unwrap();
        let m = crate::model::tile_memory(&plan.tile, &prob);
        SimConfig {
            problem: prob,
            machine: MachineSpec::new(grid.size(), m, m_d.max(m)).unwrap(),
            plan,
            grid,
            distribution,
            schedule,
            seed: 42,
            mode,
        }
    }

    #[test]
    fn tiny_reference() {
        let prob = ConvProblem::unit_stride(1, 1, 1, 1, 1, 1, 1).unwrap();
        let input = Array4::from_elem((1, 1, 1, 1), 2);
        let ker = Array4::from_elem((1, 1, 1, 1), 3);
        assert_eq!(reference_convolution(&prob, &input, &ker).unwrap()[[0, 0, 0, 0]], 6);
        let bad = Array4::from_elem((1, 1, 2, 1), 3);
        assert!(matches!(reference_convolution(&prob, &bad, &ker), Err(SimError::ShapeMismatch { .. })));
    }

    #[test]
    fn pointwise_reference_is_matmul() {
        let prob = ConvProblem::unit_stride(2, 3, 4, 2, 2, 1, 1).unwrap();
        let (input, ker) = generate_inputs(&prob, 7);
        let out = reference_convolution(&prob, &input, &ker).unwrap();
        for b in 0..2 {
            for k in 0..3 {
                for w in 0..2 {
                    for h in 0..2 {
                        let dot: i64 = (0..4).map(|c| input[[b, c, w, h]] * ker[[k, c, 0, 0]]).sum();
                        assert_eq!(out[[b, k, w, h]], dot);
                    }
                }
            }
        }
    }

    #[test]
    fn inputs_are_small_and_deterministic() {
        let prob = ConvProblem::unit_stride(2, 2, 2, 3, 3, 3, 3).unwrap();
        let (a, b) = generate_inputs(&prob, 5);
        assert_eq!((a.clone(), b.clone()), generate_inputs(&prob, 5));
        assert!(a.iter().chain(b.iter()).all(|v| (-4..=4).contains(v)));
    }

    #[test]
    fn single_processor_run() {
        let prob = ConvProblem::unit_stride(1, 2, 2, 4, 4, 3, 3).unwrap();
        let plan = PartitionPlan::whole(&prob);
        let plan = PartitionPlan { tile: TilePlan { t_c: 1, ..plan.tile }, ..plan };
        let cfg = config(prob, plan, ProcGrid::ones(), 1 << 20, SimMode::FullCompute);
        let report = run(&cfg).unwrap();
        assert_eq!(report.correct, Some(true));
        let seq = crate::model::cost_sequential(&plan.tile, &prob, cfg.machine.m).unwrap();
        assert_eq!(report.cost_d, seq.traffic() + prob.in_size() + prob.ker_size() + prob.out_size());
        let checks = verify_identities(&report, &prob, &cfg.machine, &plan).unwrap();
        assert!(checks.iter().all(|c| c.passed), "{checks:?}");
    }

    #[test]
    fn replicated_out_is_reduced() {
        let prob = ConvProblem::unit_stride(1, 4, 8, 4, 4, 3, 3).unwrap();
        let plan = PartitionPlan::new(1, 2, 4, 4, 2, TilePlan::new(1, 2, 1, 2, 2));
        let cfg = config(prob, plan, ProcGrid::new(1, 2, 2, 1, 2), 1 << 20, SimMode::FullCompute);
        let report = run(&cfg).unwrap();
        assert_eq!(report.correct, Some(true));
        let checks = verify_identities(&report, &prob, &cfg.machine, &plan).unwrap();
        assert!(checks.iter().all(|c| c.passed), "{checks:?}");
    }

    #[test]
    fn dropped_transfer_is_detected() {
        let prob = ConvProblem::unit_stride(1, 4, 4, 4, 4, 3, 3).unwrap();
        let plan = PartitionPlan::new(1, 2, 4, 4, 4, TilePlan::new(1, 2, 1, 2, 2));
        let mut cfg = config(prob, plan, ProcGrid::new(1, 2, 1, 1, 1), 1 << 20, SimMode::CountOnly);
        cfg.schedule.transfers.remove(3);
        assert!(matches!(run(&cfg), Err(SimError::DataMissing { .. })));
    }

    #[test]
    fn undersized_memory_overflows() {
        let prob = ConvProblem::unit_stride(1, 4, 4, 4, 4, 3, 3).unwrap();
        let plan = PartitionPlan::new(1, 2, 4, 4, 4, TilePlan::new(1, 2, 1, 2, 2));
        let cfg = config(prob, plan, ProcGrid::new(1, 2, 1, 1, 1), 0, SimMode::CountOnly);
        match run(&cfg) {
            Err(SimError::MemoryOverflow { processor: 0, step: 0, .. }) => {}
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let prob = ConvProblem::unit_stride(1, 2, 2, 2, 2, 1, 1).unwrap();
        let z = Array4::zeros((1, 2, 2, 2));
        let (_, ker) = generate_inputs(&prob, 1);
        assert!(reference_convolution(&prob, &z, &ker).unwrap().iter().all(|&v| v == 0));
    }
}
