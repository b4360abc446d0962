//! Combinatorial solvers for both optimisation stages.
//!
//! Tiles of a `k x k` grid are indexed row-major, `i = row * k + col`. The
//! data-acquisition stage is an orienteering problem over those tiles with
//! Manhattan travel distances and the depot at tile 0; the decision stage is a
//! node-weighted shortest path from tile 0 to tile `k*k - 1`.

mod orienteering;
mod shortest_path;

pub use orienteering::{
    brute_force_orienteering, solve_orienteering, DaDecision, OrienteeringInstance,
};
pub use shortest_path::{objective, regret, solve_shortest_path, Neighborhood, PathDecision, ShortestPath};

/// Millisecond clock used to cap heuristic search time.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

/// Grid coordinate `(row, col)`.
pub type Coord = (usize, usize);

pub fn coord(k: usize, node: usize) -> Coord {
    (node / k, node % k)
}

pub fn manhattan(a: Coord, b: Coord) -> usize {
    a.0.abs_diff(b.0) + a.1.abs_diff(b.1)
}

pub(crate) fn node_distance(k: usize, a: usize, b: usize) -> u64 {
    manhattan(coord(k, a), coord(k, b)) as u64
}
