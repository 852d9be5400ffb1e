use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use super::layout::TheaterLayout;
use super::routing::{distance_fields, greedy_balanced_plan, nearest_exit_plan, DistanceFields, RoutePlan, SeatOrder};
use super::SimError;
use crate::occupancy::Occupancy;
use crate::treatment::{Treatment, DOOR_COUNT};

/// Order in which agents that reach a door on the same tick are let through.
///
/// Agents standing at a door have no remaining distance, so the default rule
/// (smaller remaining distance first, then lower agent id) reduces to arrival
/// tick, then agent id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AgentPriority {
    #[default]
    NearestThenLowestId,
    NearestThenHighestId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Agents absorbed per tick by a fully open door.
    pub capacity_full: u32,
    /// Agents absorbed per tick by a half-open door.
    pub capacity_half: u32,
    pub tick_limit: u64,
    pub agent_priority: AgentPriority,
}

impl SimConfig {
    /// `10 · (rows + cols) · ceil(seats / (doors · capacity_half))`.
    pub fn default_tick_limit(rows: usize, cols: usize, seats: usize, capacity_half: u32) -> u64 {
        let per_tick = (DOOR_COUNT as u64) * u64::from(capacity_half.max(1));
        10 * (rows + cols) as u64 * (seats as u64).div_ceil(per_tick)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.capacity_half == 0 || self.capacity_full == 0 {
            return Err(SimError::Config("door capacities must be at least 1".into()));
        }
        if self.capacity_half >= self.capacity_full {
            return Err(SimError::Config("capacity_half must be smaller than capacity_full".into()));
        }
        if self.tick_limit == 0 {
            return Err(SimError::Config("tick_limit must be positive".into()));
        }
        Ok(())
    }
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            capacity_full: 2,
            capacity_half: 1,
            tick_limit: Self::default_tick_limit(22, 42, 868, 1),
            agent_priority: AgentPriority::default(),
        }
    }
}

/// Evacuation times in ticks for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    /// One entry per agent, agents numbered by seat order.
    pub evac_times: Vec<u64>,
    pub max_time: f64,
    pub mean_time: f64,
    /// Population standard deviation.
    pub std_time: f64,
}

impl SimResult {
    fn from_times(evac_times: Vec<u64>) -> Self {
        let n = evac_times.len() as f64;
        let max_time = evac_times.iter().copied().max().unwrap_or(0) as f64;
        let mean_time = evac_times.iter().map(|&t| t as f64).sum::<f64>() / n;
        let var = evac_times.iter().map(|&t| (t as f64 - mean_time).powi(2)).sum::<f64>() / n;
        Self { evac_times, max_time, mean_time, std_time: var.sqrt() }
    }
}

/// Which route plan a run follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanSource {
    /// Guided plan when the treatment's route-guide bit is set, nearest exit otherwise.
    FromTreatment,
    Nearest,
    Guided,
}

/// Lattice evacuation model bound to one layout and configuration.
///
/// Agents walk one cell per tick along the breadth-first distance field of
/// their assigned exit, so an agent reaches its door on the tick equal to its
/// seat's distance. Doors absorb waiting agents first-come first-served, up to
/// the door's capacity per tick. Distance fields and the guided plan are
/// computed once and shared.
#[derive(Debug)]
pub struct Simulator {
    layout: Arc<TheaterLayout>,
    config: SimConfig,
    fields: DistanceFields,
    guided: OnceLock<Result<RoutePlan, SimError>>,
}

impl Simulator {
    pub fn new(layout: Arc<TheaterLayout>, config: SimConfig) -> Result<Self, SimError> {
        config.validate()?;
        let fields = distance_fields(&layout)?;
        Ok(Self { layout, config, fields, guided: OnceLock::new() })
    }

    pub fn layout(&self) -> &TheaterLayout {
        &self.layout
    }

    pub fn layout_arc(&self) -> Arc<TheaterLayout> {
        Arc::clone(&self.layout)
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn fields(&self) -> &DistanceFields {
        &self.fields
    }

    pub fn nearest_plan(&self, occupancy: &Occupancy) -> RoutePlan {
        nearest_exit_plan(&self.layout, &self.fields, occupancy)
    }

    /// Occupancy-independent balanced plan, cached after the first call.
    ///
    /// Candidates are greedy plans over several fixed seat orders plus the
    /// nearest-exit plan; the one with the smallest full-house makespan with
    /// every door fully open wins, earlier candidates winning ties.
    pub fn guided_plan(&self) -> Result<&RoutePlan, SimError> {
        self.guided
            .get_or_init(|| {
                let full = Occupancy::full(self.layout.seat_count());
                let caps = self.all_full_capacities();
                let mut best = self.nearest_plan(&full);
                let mut best_span = self.run(&full, &best, &caps)?.max_time;
                for order in SeatOrder::ALL {
                    let seats = order.seats(&self.layout, &self.fields);
                    let plan = greedy_balanced_plan(&self.layout, &self.fields, self.config.capacity_full, &seats);
                    let span = self.run(&full, &plan, &caps)?.max_time;
                    if span < best_span {
                        best = plan;
                        best_span = span;
                    }
                }
                Ok(best)
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    /// Door capacities for a treatment, indexed by `exit_id - 1`.
    pub fn capacities(&self, treatment: &Treatment) -> Vec<u32> {
        (1..=DOOR_COUNT as u8)
            .map(|id| {
                if treatment.door_fully_open(id) {
                    self.config.capacity_full
                } else {
                    self.config.capacity_half
                }
            })
            .collect()
    }

    /// Hypothetical configuration with every door fully open.
    pub fn all_full_capacities(&self) -> Vec<u32> {
        vec![self.config.capacity_full; self.layout.exits().len()]
    }

    pub fn simulate(&self, occupancy: &Occupancy, treatment: &Treatment) -> Result<SimResult, SimError> {
        self.simulate_with(occupancy, treatment, PlanSource::FromTreatment)
    }

    pub fn simulate_with(
        &self,
        occupancy: &Occupancy,
        treatment: &Treatment,
        source: PlanSource,
    ) -> Result<SimResult, SimError> {
        if self.layout.exits().len() != DOOR_COUNT {
            return Err(SimError::Config(format!(
                "treatments address {DOOR_COUNT} doors but the layout has {}",
                self.layout.exits().len()
            )));
        }
        let guided = match source {
            PlanSource::FromTreatment => treatment.route_guide(),
            PlanSource::Nearest => false,
            PlanSource::Guided => true,
        };
        let plan = if guided { self.guided_plan()?.clone() } else { self.nearest_plan(occupancy) };
        self.run(occupancy, &plan, &self.capacities(treatment))
    }

    /// Runs the tick loop for a fixed plan and per-door capacities.
    pub fn run(&self, occupancy: &Occupancy, plan: &RoutePlan, capacities: &[u32]) -> Result<SimResult, SimError> {
        let layout = &self.layout;
        if occupancy.len() != layout.seat_count() {
            return Err(SimError::Occupancy(format!(
                "occupancy covers {} seats, layout has {}",
                occupancy.len(),
                layout.seat_count()
            )));
        }
        if capacities.len() != layout.exits().len() || capacities.contains(&0) {
            return Err(SimError::Config("one positive capacity per exit is required".into()));
        }
        // (arrival tick, agent id) per door
        let mut queues: Vec<Vec<(u64, usize)>> = vec![Vec::new(); capacities.len()];
        let mut agents = 0usize;
        for seat in occupancy.occupied_seats() {
            let exit = plan.exit_of(seat).ok_or(SimError::Unrouted { seat })?;
            let arrival = u64::from(self.fields.distance(exit, layout.seat_cell(seat)));
            queues[exit as usize - 1].push((arrival, agents));
            agents += 1;
        }
        if agents == 0 {
            return Err(SimError::Occupancy("no occupied seats".into()));
        }
        for q in &mut queues {
            match self.config.agent_priority {
                AgentPriority::NearestThenLowestId => q.sort_unstable(),
                AgentPriority::NearestThenHighestId => q.sort_unstable_by_key(|&(a, id)| (a, std::cmp::Reverse(id))),
            }
        }

        let mut times = vec![0u64; agents];
        let mut heads = vec![0usize; queues.len()];
        let mut remaining = agents;
        let mut tick = 0u64;
        while remaining > 0 {
            tick += 1;
            if tick > self.config.tick_limit {
                return Err(SimError::NonTermination { stuck: remaining, tick_limit: self.config.tick_limit });
            }
            for (door, queue) in queues.iter().enumerate() {
                let mut served = 0;
                while served < capacities[door] && heads[door] < queue.len() && queue[heads[door]].0 <= tick {
                    times[queue[heads[door]].1] = tick;
                    heads[door] += 1;
                    served += 1;
                    remaining -= 1;
                }
            }
        }
        Ok(SimResult::from_times(times))
    }
}
