//! End-to-end planning: capacity, closed form, integer plan, layout and
//! schedule for one problem.

use crate::grid::{synthesize_layout, Layout};
use crate::model::{cost_distributed, memory_distributed, ConvProblem, DistributedCost, MachineSpec};
use crate::optimizer::{
    effective_capacity, integerize, solve_closed_form, CapacityMode, ClosedFormSolution, IntegerPlan,
    PermutationScope,
};
use crate::schedule::{build_schedule, CommSchedule};
use crate::sim::{run, SimConfig, SimMode, SimReport};
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct PlanOptions {
    pub scope: PermutationScope,
    pub capacity: CapacityMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanOutcome {
    pub problem: ConvProblem,
    pub machine: MachineSpec,
    pub m_l: f64,
    pub solution: ClosedFormSolution,
    pub integer: IntegerPlan,
    pub layout: Layout,
    pub schedule: CommSchedule,
    pub distributed: DistributedCost,
    /// Analytical bound on live elements per processor.
    pub memory_bound: u64,
}

pub fn plan(prob: &ConvProblem, machine: &MachineSpec, options: PlanOptions) -> Result<PlanOutcome, Error> {
    machine.validate_for(prob)?;
    let m_l = effective_capacity(machine.m, prob, options.capacity)?;
    let solution = solve_closed_form(prob, machine.p, m_l, options.scope)?;
    let integer = integerize(&solution, prob, machine)?;
    let layout = synthesize_layout(&integer, solution.case_label, prob, machine)?;
    let schedule = build_schedule(&layout.grid, &layout.plan, &layout.distribution, prob)?;
    let distributed = cost_distributed(&layout.plan, prob, machine)?;
    let memory_bound = memory_distributed(&layout.plan, prob, machine)?;
    Ok(PlanOutcome {
        problem: *prob,
        machine: *machine,
        m_l,
        solution,
        integer,
        layout,
        schedule,
        distributed,
        memory_bound,
    })
}

impl PlanOutcome {
    pub fn sim_config(&self, seed: u64, mode: SimMode) -> SimConfig {
        SimConfig {
            problem: self.problem,
            machine: self.machine,
            plan: self.layout.plan,
            grid: self.layout.grid,
            distribution: self.layout.distribution.clone(),
            schedule: self.schedule.clone(),
            seed,
            mode,
        }
    }

    pub fn simulate(&self, seed: u64, mode: SimMode) -> Result<SimReport, Error> {
        Ok(run(&self.sim_config(seed, mode))?)
    }
}
