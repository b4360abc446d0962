use alloc::collections::BinaryHeap;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{invalid, Result};

/// Move set of the decision-stage grid graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Neighborhood {
    Four,
    #[default]
    Eight,
}

impl Neighborhood {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Neighborhood::Four => &[(-1, 0), (0, -1), (0, 1), (1, 0)],
            Neighborhood::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }

    /// Tiles adjacent to `node` on a `k x k` grid, in increasing index order.
    pub fn neighbors(self, k: usize, node: usize) -> impl Iterator<Item = usize> {
        let (r, c) = ((node / k) as isize, (node % k) as isize);
        let k = k as isize;
        self.offsets().iter().filter_map(move |&(dr, dc)| {
            let (nr, nc) = (r + dr, c + dc);
            (nr >= 0 && nc >= 0 && nr < k && nc < k).then_some((nr * k + nc) as usize)
        })
    }
}

/// Decision of the contextual task: the tiles visited by a top-left to
/// bottom-right path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathDecision {
    pub x: Vec<bool>,
    /// Visited tiles in travel order, from tile 0 to tile `k*k - 1`.
    pub path: Vec<usize>,
}

impl PathDecision {
    pub fn indicator(&self) -> Vec<f32> {
        self.x.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
    }
}

/// `<theta, x>` accumulated in tile order.
pub fn objective(theta: &[f32], x: &PathDecision) -> f64 {
    theta
        .iter()
        .zip(&x.x)
        .filter(|(_, v)| **v)
        .map(|(&t, _)| t as f64)
        .sum()
}

/// Node-weighted shortest path solver on a `k x k` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShortestPath {
    pub k: usize,
    pub neighborhood: Neighborhood,
}

#[derive(Clone, Copy, PartialEq)]
struct Entry {
    dist: f64,
    node: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on distance, then on node index.
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl ShortestPath {
    pub fn new(k: usize, neighborhood: Neighborhood) -> Self {
        Self { k, neighborhood }
    }

    /// Dijkstra where a path costs the sum of `theta` over every visited
    /// tile, both endpoints included. Equal-cost predecessors resolve to the
    /// lowest tile index.
    pub fn solve(&self, theta: &[f32]) -> Result<PathDecision> {
        let k = self.k;
        let n = k * k;
        if theta.len() != n || n == 0 {
            return Err(invalid(alloc::format!(
                "shortest path: {} costs for a {k}x{k} grid",
                theta.len()
            )));
        }
        if let Some(i) = theta.iter().position(|&t| !(t > 0.0) || !t.is_finite()) {
            return Err(invalid(alloc::format!(
                "shortest path needs positive finite costs, tile {i} has {}",
                theta[i]
            )));
        }
        let mut dist = vec![f64::INFINITY; n];
        let mut pred = vec![usize::MAX; n];
        let mut done = vec![false; n];
        let mut heap = BinaryHeap::new();
        dist[0] = theta[0] as f64;
        heap.push(Entry { dist: dist[0], node: 0 });
        while let Some(Entry { dist: du, node: u }) = heap.pop() {
            if done[u] {
                continue;
            }
            done[u] = true;
            if u == n - 1 {
                break;
            }
            for v in self.neighborhood.neighbors(k, u) {
                if done[v] {
                    continue;
                }
                let nd = du + theta[v] as f64;
                if nd < dist[v] || (nd == dist[v] && u < pred[v]) {
                    dist[v] = nd;
                    pred[v] = u;
                    heap.push(Entry { dist: nd, node: v });
                }
            }
        }
        let mut path = vec![n - 1];
        let mut cur = n - 1;
        while cur != 0 {
            cur = pred[cur];
            path.push(cur);
        }
        path.reverse();
        let mut x = vec![false; n];
        for &v in &path {
            x[v] = true;
        }
        Ok(PathDecision { x, path })
    }
}

/// Shortest path on the 8-neighbourhood grid implied by `theta.len() == k*k`.
pub fn solve_shortest_path(theta: &[f32], k: usize) -> Result<PathDecision> {
    ShortestPath::new(k, Neighborhood::Eight).solve(theta)
}

/// `<theta, x*(theta_hat)> - <theta, x*(theta)>`.
pub fn regret(solver: &ShortestPath, theta: &[f32], theta_hat: &[f32]) -> Result<f64> {
    let best = solver.solve(theta)?;
    let chosen = solver.solve(theta_hat)?;
    Ok(objective(theta, &chosen) - objective(theta, &best))
}
