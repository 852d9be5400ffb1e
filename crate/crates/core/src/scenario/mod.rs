//! Observational data generation: occupancy sampling, covariate-dependent
//! treatment assignment, noisy factual outcomes and full noiseless tables.

mod dataset;
mod sampling;

pub use dataset::{
    generate_dataset, manifest_path, read_dataset, write_dataset, Dataset, DatasetManifest, GenerationSummary, ScenarioRecord,
};
pub use sampling::{
    assignment_distribution, door_neighborhoods, door_weights, guide_propensity, rate_combinations,
    sample_assignment, sample_doors, sample_occupancy, scenario_seed, splitmix64, to_covariate_grid,
    DoorNeighborhood,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::SimError;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid generation config: {0}")]
    Config(String),
    #[error("scenario {scenario_id}: {source}")]
    Simulation {
        scenario_id: u64,
        #[source]
        source: SimError,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("dataset line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("layout hash mismatch: dataset built for {expected}, got {found}")]
    LayoutMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Evacuation-time statistics of one run, in ticks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct OutcomeTriple {
    pub max_time: f64,
    pub mean_time: f64,
    pub std_time: f64,
}

impl OutcomeTriple {
    pub fn get(&self, component: OutcomeComponent) -> f64 {
        match component {
            OutcomeComponent::Max => self.max_time,
            OutcomeComponent::Mean => self.mean_time,
            OutcomeComponent::Std => self.std_time,
        }
    }
}

impl From<[f64; 3]> for OutcomeTriple {
    fn from([max_time, mean_time, std_time]: [f64; 3]) -> Self {
        Self { max_time, mean_time, std_time }
    }
}

impl From<OutcomeTriple> for [f64; 3] {
    fn from(o: OutcomeTriple) -> Self {
        [o.max_time, o.mean_time, o.std_time]
    }
}

impl From<&crate::sim::SimResult> for OutcomeTriple {
    fn from(r: &crate::sim::SimResult) -> Self {
        Self { max_time: r.max_time, mean_time: r.mean_time, std_time: r.std_time }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeComponent {
    Max,
    Mean,
    Std,
}

impl OutcomeComponent {
    pub const ALL: [OutcomeComponent; 3] = [OutcomeComponent::Max, OutcomeComponent::Mean, OutcomeComponent::Std];

    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeComponent::Max => "max",
            OutcomeComponent::Mean => "mean",
            OutcomeComponent::Std => "std",
        }
    }
}

impl fmt::Display for OutcomeComponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OutcomeComponent {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max" => Ok(Self::Max),
            "mean" => Ok(Self::Mean),
            "std" => Ok(Self::Std),
            _ => Err(format!("unknown outcome {s:?}; expected max, mean or std")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    /// Per-block occupancy rates; every block draws one of these.
    pub occupancy_rates: Vec<f64>,
    pub seeds_per_rate_combo: usize,
    /// Scenarios with fewer occupied seats are dropped.
    pub min_people: usize,
    pub noise_std: f64,
    pub door_radius_m: f64,
    pub cell_pitch_m: f64,
    /// Replaces the rate grid with a single per-block combination.
    #[serde(default)]
    pub fixed_rates: Option<Vec<f64>>,
    /// Keeps only the first `n` rate combinations.
    #[serde(default)]
    pub max_combos: Option<usize>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            occupancy_rates: vec![0.1, 0.5, 0.9],
            seeds_per_rate_combo: 10,
            min_people: 400,
            noise_std: 2.0,
            door_radius_m: 8.0,
            cell_pitch_m: 0.9,
            fixed_rates: None,
            max_combos: None,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::Config(m.to_string()));
        let rates_ok = |r: &[f64]| !r.is_empty() && r.iter().all(|&v| v > 0.0 && v <= 1.0);
        if !rates_ok(&self.occupancy_rates) {
            return bad("occupancy_rates must be a nonempty list of values in (0, 1]");
        }
        if let Some(r) = &self.fixed_rates {
            if !rates_ok(r) {
                return bad("fixed rates must lie in (0, 1]");
            }
        }
        if self.seeds_per_rate_combo == 0 {
            return bad("seeds_per_rate_combo must be positive");
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad("noise_std must be a finite nonnegative number");
        }
        if !(self.door_radius_m > 0.0 && self.cell_pitch_m > 0.0) {
            return bad("door_radius_m and cell_pitch_m must be positive");
        }
        if self.max_combos == Some(0) {
            return bad("max_combos must be positive");
        }
        Ok(())
    }
}
