//! Planning, scheduling and simulation of communication-efficient
//! distributed CNN forward convolution.
//!
//! The flow is [`optimizer::effective_capacity`] →
//! [`optimizer::solve_closed_form`] → [`optimizer::integerize`] →
//! [`grid::synthesize_layout`] → [`schedule::build_schedule`] →
//! [`sim::run`]; [`pipeline`] strings them together.

pub mod grid;
pub mod model;
pub mod optimizer;
pub mod pipeline;
pub mod schedule;
pub mod sim;

use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("model error")]
    Model(#[from] model::ModelError),
    #[error("optimizer error")]
    Optimizer(#[from] optimizer::OptimizerError),
    #[error("grid error")]
    Grid(#[from] grid::GridError),
    #[error("schedule error")]
    Schedule(#[from] schedule::ScheduleError),
    #[error("simulator error")]
    Sim(#[from] sim::SimError),
}
