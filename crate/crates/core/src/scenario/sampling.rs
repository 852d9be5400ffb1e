use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ScenarioError;
use crate::nn::Tensor;
use crate::occupancy::Occupancy;
use crate::sim::TheaterLayout;
use crate::treatment::{Treatment, DOOR_COUNT, TREATMENT_COUNT};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function applied to `state + γ`.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of scenario `ordinal`: the `ordinal + 1`-th SplitMix64 output of a
/// stream started at `master_seed`. Independent of evaluation order.
pub fn scenario_seed(master_seed: u64, ordinal: u64) -> u64 {
    splitmix64(master_seed.wrapping_add(ordinal.wrapping_mul(GOLDEN_GAMMA)))
}

/// Generator for the occupancy draw of a scenario.
pub(crate) fn occupancy_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for treatment assignment and noise, a separate stream of the same seed.
pub(crate) fn assignment_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// All per-block rate combinations from the rate grid, lexicographic with
/// block A varying slowest.
pub fn rate_combinations(rates: &[f64], blocks: usize) -> Vec<Vec<f64>> {
    let mut combos = vec![Vec::with_capacity(blocks)];
    for _ in 0..blocks {
        combos = combos
            .into_iter()
            .flat_map(|prefix| {
                rates.iter().map(move |&r| {
                    let mut next = prefix.clone();
                    next.push(r);
                    next
                })
            })
            .collect();
    }
    combos
}

/// Each seat is occupied independently with its block's rate.
pub fn sample_occupancy(layout: &TheaterLayout, rates_per_block: &[f64], seed: u64) -> Result<Occupancy, ScenarioError> {
    if rates_per_block.len() != layout.block_count() {
        return Err(ScenarioError::Config(format!(
            "{} rates given for {} blocks",
            rates_per_block.len(),
            layout.block_count()
        )));
    }
    if rates_per_block.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(ScenarioError::Config("occupancy rates must lie in [0, 1]".into()));
    }
    let mut rng = occupancy_rng(seed);
    let bits = (0..layout.seat_count())
        .map(|s| rng.gen_bool(rates_per_block[layout.block_of_seat(s)]))
        .collect();
    Ok(Occupancy::new(bits))
}

/// `p(guide = 1) = 1 / (1 + exp(-Σx / d + 1))` with `d` the seat count.
pub fn guide_propensity(occupancy: &Occupancy) -> f64 {
    let share = occupancy.count() as f64 / occupancy.len() as f64;
    1.0 / (1.0 + (1.0 - share).exp())
}

/// Seats within a radius of one door.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DoorNeighborhood {
    pub exit_id: u8,
    pub seats: Vec<usize>,
}

/// Seats whose cell centre lies within `radius_m` of the door cell centre.
pub fn door_neighborhoods(layout: &TheaterLayout, radius_m: f64, cell_pitch_m: f64) -> Vec<DoorNeighborhood> {
    layout
        .exits()
        .iter()
        .map(|e| {
            let seats = (0..layout.seat_count())
                .filter(|&s| {
                    let (r, c) = layout.seat_position(s);
                    let dr = (r as f64 - e.row as f64) * cell_pitch_m;
                    let dc = (c as f64 - e.col as f64) * cell_pitch_m;
                    dr.hypot(dc) <= radius_m
                })
                .collect();
            DoorNeighborhood { exit_id: e.id, seats }
        })
        .collect()
}

/// Occupied share of each door's neighbourhood; 0 for an empty neighbourhood.
pub fn door_weights(occupancy: &Occupancy, neighborhoods: &[DoorNeighborhood]) -> Vec<f64> {
    neighborhoods
        .iter()
        .map(|n| {
            if n.seats.is_empty() {
                0.0
            } else {
                n.seats.iter().filter(|&&s| occupancy.is_occupied(s)).count() as f64 / n.seats.len() as f64
            }
        })
        .collect()
}

/// Probability of drawing each door among those not yet `taken`, falling
/// back to uniform when the remaining weights are all zero.
fn draw_probabilities(weights: &[f64], taken: Option<usize>) -> Vec<f64> {
    let live = |i: usize| Some(i) != taken;
    let total: f64 = weights.iter().enumerate().filter(|&(i, _)| live(i)).map(|(_, w)| w).sum();
    let left = weights.len() - usize::from(taken.is_some());
    (0..weights.len())
        .map(|i| match (live(i), total > 0.0) {
            (false, _) => 0.0,
            (true, true) => weights[i] / total,
            (true, false) => 1.0 / left as f64,
        })
        .collect()
}

/// Two distinct 1-based door ids, drawn one after the other proportionally to
/// the weights without replacement.
pub fn sample_doors<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> (u8, u8) {
    let first = WeightedIndex::new(draw_probabilities(weights, None))
        .expect("valid door probabilities")
        .sample(rng);
    let second = WeightedIndex::new(draw_probabilities(weights, Some(first)))
        .expect("valid door probabilities")
        .sample(rng);
    (first as u8 + 1, second as u8 + 1)
}

/// Exact probability of every treatment under the assignment policy, indexed
/// like [`crate::treatment::enumerate_treatments`].
pub fn assignment_distribution(occupancy: &Occupancy, neighborhoods: &[DoorNeighborhood]) -> [f64; TREATMENT_COUNT] {
    let weights = door_weights(occupancy, neighborhoods);
    let p_guide = guide_propensity(occupancy);
    let first = draw_probabilities(&weights, None);
    let mut pair = [[0.0; DOOR_COUNT]; DOOR_COUNT];
    for a in 0..DOOR_COUNT {
        let second = draw_probabilities(&weights, Some(a));
        for b in 0..DOOR_COUNT {
            pair[a.min(b)][a.max(b)] += first[a] * second[b];
        }
    }
    let mut out = [0.0; TREATMENT_COUNT];
    for (slot, t) in out.iter_mut().zip(crate::treatment::enumerate_treatments()) {
        let (a, b) = t.open_pair();
        let p = pair[a as usize - 1][b as usize - 1];
        *slot = if t.route_guide() { p_guide * p } else { (1.0 - p_guide) * p };
    }
    out
}

/// Draws the factual treatment from the occupancy alone.
pub fn sample_assignment<R: Rng + ?Sized>(
    occupancy: &Occupancy,
    neighborhoods: &[DoorNeighborhood],
    rng: &mut R,
) -> Treatment {
    let guide = rng.gen_bool(guide_propensity(occupancy));
    let (a, b) = sample_doors(&door_weights(occupancy, neighborhoods), rng);
    Treatment::with_doors(guide, a, b).expect("distinct doors in range")
}

/// `[1, rows, cols]` grid with 1 on occupied seat cells.
pub fn to_covariate_grid(layout: &TheaterLayout, occupancy: &Occupancy) -> Tensor {
    let mut data = vec![0.0; layout.rows() * layout.cols()];
    for s in occupancy.occupied_seats() {
        data[layout.seat_cell(s)] = 1.0;
    }
    Tensor::new(vec![1, layout.rows(), layout.cols()], data).expect("grid shape matches data")
}
