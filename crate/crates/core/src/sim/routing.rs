use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::layout::TheaterLayout;
use super::SimError;
use crate::occupancy::Occupancy;

pub const UNREACHABLE: u32 = u32::MAX;

/// Per-exit breadth-first walking distances over the 4-neighbourhood.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceFields {
    cols: usize,
    /// `fields[exit_id - 1][cell]`, [`UNREACHABLE`] for walls and cut-off cells.
    fields: Vec<Vec<u32>>,
}

impl DistanceFields {
    pub fn distance(&self, exit_id: u8, cell: usize) -> u32 {
        self.fields[exit_id as usize - 1][cell]
    }

    pub fn distance_at(&self, exit_id: u8, row: usize, col: usize) -> u32 {
        self.distance(exit_id, row * self.cols + col)
    }

    pub fn exit_count(&self) -> usize {
        self.fields.len()
    }

    pub fn field(&self, exit_id: u8) -> &[u32] {
        &self.fields[exit_id as usize - 1]
    }
}

/// BFS from every exit; fails if any seat cannot reach any exit.
pub fn distance_fields(layout: &TheaterLayout) -> Result<DistanceFields, SimError> {
    let (rows, cols) = (layout.rows(), layout.cols());
    let cells = layout.cells();
    let mut fields = Vec::with_capacity(layout.exits().len());
    for exit in layout.exits() {
        let mut dist = vec![UNREACHABLE; rows * cols];
        let src = exit.row * cols + exit.col;
        dist[src] = 0;
        let mut queue = VecDeque::from([src]);
        while let Some(cell) = queue.pop_front() {
            let (r, c) = (cell / cols, cell % cols);
            let next = dist[cell] + 1;
            let neighbours = [
                (r > 0).then(|| cell - cols),
                (c > 0).then(|| cell - 1),
                (c + 1 < cols).then(|| cell + 1),
                (r + 1 < rows).then(|| cell + cols),
            ];
            for n in neighbours.into_iter().flatten() {
                if cells[n].walkable() && dist[n] == UNREACHABLE {
                    dist[n] = next;
                    queue.push_back(n);
                }
            }
        }
        for seat in 0..layout.seat_count() {
            if dist[layout.seat_cell(seat)] == UNREACHABLE {
                let (row, col) = layout.seat_position(seat);
                return Err(SimError::UnreachableSeat { row, col, exit: exit.id });
            }
        }
        fields.push(dist);
    }
    Ok(DistanceFields { cols, fields })
}

/// Seat → exit assignment; `None` for seats the plan does not cover.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoutePlan {
    assignment: Vec<Option<u8>>,
}

impl RoutePlan {
    pub fn new(assignment: Vec<Option<u8>>) -> Self {
        Self { assignment }
    }

    pub fn exit_of(&self, seat: usize) -> Option<u8> {
        self.assignment[seat]
    }

    pub fn assignment(&self) -> &[Option<u8>] {
        &self.assignment
    }

    /// Number of covered seats assigned to each exit, indexed by `id - 1`.
    pub fn loads(&self, exits: usize) -> Vec<usize> {
        let mut loads = vec![0; exits];
        for id in self.assignment.iter().flatten() {
            loads[*id as usize - 1] += 1;
        }
        loads
    }
}

fn nearest_exit(fields: &DistanceFields, cell: usize) -> u8 {
    (1..=fields.exit_count() as u8)
        .min_by_key(|&id| (fields.distance(id, cell), id))
        .expect("at least one exit")
}

/// Each occupied seat goes to its closest exit; ties go to the lower exit id.
pub fn nearest_exit_plan(layout: &TheaterLayout, fields: &DistanceFields, occupancy: &Occupancy) -> RoutePlan {
    let assignment = (0..layout.seat_count())
        .map(|seat| occupancy.is_occupied(seat).then(|| nearest_exit(fields, layout.seat_cell(seat))))
        .collect();
    RoutePlan { assignment }
}

/// Seat visiting orders tried by the guided-plan search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum SeatOrder {
    RowMajor,
    ReverseRowMajor,
    ColumnMajor,
    ReverseColumnMajor,
    FarthestFirst,
    NearestFirst,
}

impl SeatOrder {
    pub(crate) const ALL: [SeatOrder; 6] = [
        SeatOrder::RowMajor,
        SeatOrder::ReverseRowMajor,
        SeatOrder::ColumnMajor,
        SeatOrder::ReverseColumnMajor,
        SeatOrder::FarthestFirst,
        SeatOrder::NearestFirst,
    ];

    pub(crate) fn seats(self, layout: &TheaterLayout, fields: &DistanceFields) -> Vec<usize> {
        let mut seats: Vec<usize> = (0..layout.seat_count()).collect();
        let closest = |s: usize| {
            let cell = layout.seat_cell(s);
            fields.distance(nearest_exit(fields, cell), cell)
        };
        match self {
            SeatOrder::RowMajor => {}
            SeatOrder::ReverseRowMajor => seats.reverse(),
            SeatOrder::ColumnMajor => seats.sort_by_key(|&s| {
                let (r, c) = layout.seat_position(s);
                (c, r)
            }),
            SeatOrder::ReverseColumnMajor => seats.sort_by_key(|&s| {
                let (r, c) = layout.seat_position(s);
                std::cmp::Reverse((c, r))
            }),
            SeatOrder::FarthestFirst => seats.sort_by_key(|&s| (std::cmp::Reverse(closest(s)), s)),
            SeatOrder::NearestFirst => seats.sort_by_key(|&s| (closest(s), s)),
        }
        seats
    }
}

/// Greedy load balancing: each seat in `order` takes the exit minimising
/// `load / capacity_full + distance`, ties to the lower exit id.
pub(crate) fn greedy_balanced_plan(
    layout: &TheaterLayout,
    fields: &DistanceFields,
    capacity_full: u32,
    order: &[usize],
) -> RoutePlan {
    let exits = fields.exit_count();
    let mut loads = vec![0u32; exits];
    let mut assignment = vec![None; layout.seat_count()];
    for &seat in order {
        let cell = layout.seat_cell(seat);
        let (best, _) = (0..exits)
            .map(|e| {
                let cost = f64::from(loads[e]) / f64::from(capacity_full) + f64::from(fields.distance(e as u8 + 1, cell));
                (e, cost)
            })
            .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
        loads[best] += 1;
        assignment[seat] = Some(best as u8 + 1);
    }
    RoutePlan { assignment }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::layout::{build_default_layout, CellKind};

    #[test]
    fn exit_cells_are_sources_and_neighbours_are_one_step() {
        let layout = build_default_layout();
        let fields = distance_fields(&layout).unwrap();
        for e in layout.exits() {
            assert_eq!(fields.distance_at(e.id, e.row, e.col), 0);
            let (r, c) = (e.row as isize, e.col as isize);
            for (dr, dc) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= layout.rows() as isize || nc >= layout.cols() as isize {
                    continue;
                }
                if layout.cell(nr as usize, nc as usize).walkable() {
                    assert_eq!(fields.distance_at(e.id, nr as usize, nc as usize), 1);
                }
            }
        }
    }

    #[test]
    fn every_seat_reaches_every_exit() {
        let layout = build_default_layout();
        let fields = distance_fields(&layout).unwrap();
        for e in layout.exits() {
            for s in 0..layout.seat_count() {
                assert_ne!(fields.distance(e.id, layout.seat_cell(s)), UNREACHABLE);
            }
        }
    }

    #[test]
    fn walled_off_seat_is_a_validation_error() {
        let mut layout = build_default_layout();
        // seat (5, 5): wall in all four neighbours
        for (r, c) in [(4, 5), (6, 5), (5, 4), (5, 6)] {
            layout = layout.with_cell(r, c, CellKind::Wall).unwrap();
        }
        match distance_fields(&layout) {
            Err(SimError::UnreachableSeat { row: 5, col: 5, .. }) => {}
            other => panic!("expected unreachable seat, got {other:?}"),
        }
    }

    #[test]
    fn nearest_plan_unique_and_tie_break() {
        let layout = build_default_layout();
        let fields = distance_fields(&layout).unwrap();
        let full = Occupancy::full(layout.seat_count());
        let plan = nearest_exit_plan(&layout, &fields, &full);
        // the seat right next to exit 3 on the right wall
        let e3 = layout.exit(3).unwrap();
        let seat = layout.seat_at(e3.row, e3.col - 1).unwrap();
        assert_eq!(plan.exit_of(seat), Some(3));
        // a tie between two exits resolves to the lower id
        let mut checked = 0;
        for s in 0..layout.seat_count() {
            let cell = layout.seat_cell(s);
            let d: Vec<u32> = (1..=6).map(|id| fields.distance(id, cell)).collect();
            let best = *d.iter().min().unwrap();
            let first = d.iter().position(|&v| v == best).unwrap() as u8 + 1;
            assert_eq!(plan.exit_of(s), Some(first));
            if d.iter().filter(|&&v| v == best).count() > 1 {
                checked += 1;
            }
        }
        assert!(checked > 0, "default layout has equidistant seats");
    }

    #[test]
    fn nearest_plan_partitions_full_house_into_six_groups() {
        let layout = build_default_layout();
        let fields = distance_fields(&layout).unwrap();
        let plan = nearest_exit_plan(&layout, &fields, &Occupancy::full(868));
        let loads = plan.loads(6);
        assert_eq!(loads.iter().sum::<usize>(), 868);
        assert!(loads.iter().all(|&l| l > 0), "{loads:?}");
    }

    #[test]
    fn empty_seats_are_unassigned() {
        let layout = build_default_layout();
        let fields = distance_fields(&layout).unwrap();
        let mut occ = Occupancy::empty(868);
        occ.set(10, true);
        let plan = nearest_exit_plan(&layout, &fields, &occ);
        assert_eq!(plan.assignment().iter().flatten().count(), 1);
        assert!(plan.exit_of(10).is_some());
    }
}
