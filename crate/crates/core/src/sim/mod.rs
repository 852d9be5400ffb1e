//! Deterministic capacity-constrained evacuation model on the theater lattice.

mod engine;
pub mod layout;
mod routing;

pub use engine::{AgentPriority, PlanSource, SimConfig, SimResult, Simulator};
pub use layout::{build_default_layout, CellKind, Exit, TheaterLayout};
pub use routing::{distance_fields, nearest_exit_plan, DistanceFields, RoutePlan, UNREACHABLE};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("layout line {line}: {msg}")]
    LayoutParse { line: usize, msg: String },
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("seat ({row}, {col}) cannot reach exit {exit}")]
    UnreachableSeat { row: usize, col: usize, exit: u8 },
    #[error("invalid simulator configuration: {0}")]
    Config(String),
    #[error("invalid occupancy: {0}")]
    Occupancy(String),
    #[error("occupied seat {seat} has no exit in the route plan")]
    Unrouted { seat: usize },
    #[error("evacuation did not finish within {tick_limit} ticks ({stuck} agents left)")]
    NonTermination { stuck: usize, tick_limit: u64 },
}
