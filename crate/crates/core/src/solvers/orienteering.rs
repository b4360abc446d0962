use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use super::{node_distance, Clock};
use crate::error::{invalid, Error, Result};

/// Orienteering instance on a `k x k` grid with the depot at tile 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrienteeringInstance {
    pub k: usize,
    pub rewards: Vec<u64>,
    /// Maximum total route length `h`.
    pub budget: u64,
}

impl OrienteeringInstance {
    pub fn new(k: usize, rewards: Vec<u64>, budget: u64) -> Result<Self> {
        if k == 0 || rewards.len() != k * k {
            return Err(invalid(alloc::format!(
                "orienteering: {} rewards for a {k}x{k} grid",
                rewards.len()
            )));
        }
        Ok(Self { k, rewards, budget })
    }

    pub fn num_nodes(&self) -> usize {
        self.k * self.k
    }
}

/// Data-acquisition decision: the selected tiles and the closed drone route
/// that visits them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DaDecision {
    pub selected: Vec<bool>,
    /// Starts and ends at tile 0; `[0]` when only the depot is visited.
    pub route: Vec<usize>,
}

impl DaDecision {
    pub fn depot_only(num_nodes: usize) -> Self {
        Self::from_tour(num_nodes, &[])
    }

    fn from_tour(num_nodes: usize, tour: &[usize]) -> Self {
        let mut selected = vec![false; num_nodes];
        selected[0] = true;
        let mut route = Vec::with_capacity(tour.len() + 2);
        route.push(0);
        for &v in tour {
            selected[v] = true;
            route.push(v);
        }
        if !tour.is_empty() {
            route.push(0);
        }
        Self { selected, route }
    }

    pub fn route_length(&self, k: usize) -> u64 {
        self.route.windows(2).map(|w| node_distance(k, w[0], w[1])).sum()
    }

    pub fn reward(&self, rewards: &[u64]) -> u64 {
        self.selected
            .iter()
            .zip(rewards)
            .filter(|(s, _)| **s)
            .map(|(_, r)| r)
            .sum()
    }

    pub fn num_selected(&self) -> usize {
        self.selected.iter().filter(|s| **s).count()
    }

    /// Selection vector `s` as 0/1 floats.
    pub fn mask(&self) -> Vec<f32> {
        self.selected.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect()
    }

    /// Route starts and ends at the depot, fits the budget, never revisits a
    /// tile and agrees with `selected`.
    pub fn is_feasible(&self, inst: &OrienteeringInstance) -> bool {
        let n = inst.num_nodes();
        if self.selected.len() != n || self.route.first() != Some(&0) || self.route.last() != Some(&0) {
            return false;
        }
        if self.route.len() == 2 || self.route_length(inst.k) > inst.budget {
            return false;
        }
        let inner = if self.route.len() == 1 {
            &self.route[1..]
        } else {
            &self.route[1..self.route.len() - 1]
        };
        let mut seen = vec![false; n];
        seen[0] = true;
        for &v in inner {
            if v >= n || seen[v] {
                return false;
            }
            seen[v] = true;
        }
        seen == self.selected
    }
}

struct Deadline<'a> {
    clock: Option<&'a dyn Clock>,
    end_ms: u64,
}

impl Deadline<'_> {
    fn expired(&self) -> bool {
        self.clock.is_some_and(|c| c.now_ms() >= self.end_ms)
    }
}

/// A closed tour `0 -> tour[0] -> ... -> tour[last] -> 0` under construction.
#[derive(Clone)]
struct Tour {
    nodes: Vec<usize>,
    in_tour: Vec<bool>,
    length: u64,
    reward: u64,
}

struct Search<'a> {
    inst: &'a OrienteeringInstance,
    dist: Vec<u64>,
    n: usize,
}

impl<'a> Search<'a> {
    fn new(inst: &'a OrienteeringInstance) -> Self {
        let n = inst.num_nodes();
        let mut dist = vec![0; n * n];
        for a in 0..n {
            for b in 0..n {
                dist[a * n + b] = node_distance(inst.k, a, b);
            }
        }
        Self { inst, dist, n }
    }

    #[inline]
    fn d(&self, a: usize, b: usize) -> u64 {
        self.dist[a * self.n + b]
    }

    fn empty(&self) -> Tour {
        let mut in_tour = vec![false; self.n];
        in_tour[0] = true;
        Tour {
            nodes: Vec::new(),
            in_tour,
            length: 0,
            reward: self.inst.rewards[0],
        }
    }

    fn neighbours(nodes: &[usize], pos: usize) -> (usize, usize) {
        let prev = if pos == 0 { 0 } else { nodes[pos - 1] };
        let next = if pos == nodes.len() { 0 } else { nodes[pos] };
        (prev, next)
    }

    /// Cheapest position to insert `u`; lowest position wins ties.
    fn best_insertion(&self, nodes: &[usize], u: usize) -> (u64, usize) {
        let mut best = (u64::MAX, 0);
        for pos in 0..=nodes.len() {
            let (p, q) = Self::neighbours(nodes, pos);
            let delta = self.d(p, u) + self.d(u, q) - self.d(p, q);
            if delta < best.0 {
                best = (delta, pos);
            }
        }
        best
    }

    fn insert(&self, tour: &mut Tour, u: usize, pos: usize, delta: u64) {
        tour.nodes.insert(pos, u);
        tour.in_tour[u] = true;
        tour.length += delta;
        tour.reward += self.inst.rewards[u];
    }

    fn removal_gain(&self, nodes: &[usize], pos: usize) -> u64 {
        let v = nodes[pos];
        let prev = if pos == 0 { 0 } else { nodes[pos - 1] };
        let next = if pos + 1 == nodes.len() { 0 } else { nodes[pos + 1] };
        self.d(prev, v) + self.d(v, next) - self.d(prev, next)
    }

    fn remove(&self, tour: &mut Tour, pos: usize) {
        let gain = self.removal_gain(&tour.nodes, pos);
        let v = tour.nodes.remove(pos);
        tour.in_tour[v] = false;
        tour.length -= gain;
        tour.reward -= self.inst.rewards[v];
    }

    /// Greedy insertion by reward / detour ratio until nothing else fits.
    /// Zero-detour insertions rank above any positive detour. Returns whether
    /// anything was inserted.
    fn fill(&self, tour: &mut Tour) -> bool {
        let mut any = false;
        loop {
            let mut best: Option<(usize, u64, usize)> = None;
            for u in 1..self.n {
                let r = self.inst.rewards[u];
                if tour.in_tour[u] || r == 0 {
                    continue;
                }
                let (delta, pos) = self.best_insertion(&tour.nodes, u);
                if tour.length + delta > self.inst.budget {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((b, bd, _)) => ratio_cmp(r, delta, self.inst.rewards[b], bd) == Ordering::Greater,
                };
                if better {
                    best = Some((u, delta, pos));
                }
            }
            let Some((u, delta, pos)) = best else { break };
            self.insert(tour, u, pos, delta);
            any = true;
        }
        any
    }

    /// 2-opt over the closed cycle including the depot. Length only.
    fn two_opt(&self, tour: &mut Tour) {
        let mut cycle = Vec::with_capacity(tour.nodes.len() + 1);
        cycle.push(0);
        cycle.extend_from_slice(&tour.nodes);
        let m = cycle.len();
        if m < 4 {
            return;
        }
        let mut improved = true;
        while improved {
            improved = false;
            for i in 0..m - 2 {
                for j in i + 2..m {
                    if i == 0 && j == m - 1 {
                        continue;
                    }
                    let (a, b) = (cycle[i], cycle[i + 1]);
                    let (c, e) = (cycle[j], cycle[(j + 1) % m]);
                    let before = self.d(a, b) + self.d(c, e);
                    let after = self.d(a, c) + self.d(b, e);
                    if after < before {
                        cycle[i + 1..=j].reverse();
                        tour.length -= before - after;
                        improved = true;
                    }
                }
            }
        }
        tour.nodes.clear();
        tour.nodes.extend_from_slice(&cycle[1..]);
    }

    /// Moves single nodes to a cheaper position. Length only.
    fn or_opt(&self, tour: &mut Tour) {
        let mut improved = true;
        while improved {
            improved = false;
            for pos in 0..tour.nodes.len() {
                let gain = self.removal_gain(&tour.nodes, pos);
                let v = tour.nodes[pos];
                let mut rest = tour.nodes.clone();
                rest.remove(pos);
                let (delta, at) = self.best_insertion(&rest, v);
                if delta < gain {
                    rest.insert(at, v);
                    tour.nodes = rest;
                    tour.length = tour.length - gain + delta;
                    improved = true;
                    break;
                }
            }
        }
    }

    /// Best single exchange of a visited node for a more rewarding unvisited one.
    fn swap(&self, tour: &mut Tour) -> bool {
        let mut best: Option<(u64, u64, usize, usize, usize)> = None; // gain, new len, pos, u, at
        for pos in 0..tour.nodes.len() {
            let v = tour.nodes[pos];
            let mut rest = tour.nodes.clone();
            rest.remove(pos);
            let base = tour.length - self.removal_gain(&tour.nodes, pos);
            for u in 1..self.n {
                if tour.in_tour[u] || self.inst.rewards[u] <= self.inst.rewards[v] {
                    continue;
                }
                let (delta, at) = self.best_insertion(&rest, u);
                let len = base + delta;
                if len > self.inst.budget {
                    continue;
                }
                let gain = self.inst.rewards[u] - self.inst.rewards[v];
                let better = match best {
                    None => true,
                    Some((bg, bl, ..)) => gain > bg || (gain == bg && len < bl),
                };
                if better {
                    best = Some((gain, len, pos, u, at));
                }
            }
        }
        let Some((_, _, pos, u, at)) = best else { return false };
        self.remove(tour, pos);
        let delta = {
            let (p, q) = Self::neighbours(&tour.nodes, at);
            self.d(p, u) + self.d(u, q) - self.d(p, q)
        };
        self.insert(tour, u, at, delta);
        true
    }

    /// Drops one node and refills greedily; keeps the first strict reward gain.
    fn drop_and_fill(&self, tour: &mut Tour) -> bool {
        for pos in 0..tour.nodes.len() {
            let mut trial = tour.clone();
            let dropped = trial.nodes[pos];
            self.remove(&mut trial, pos);
            // The dropped node may not come straight back.
            trial.in_tour[dropped] = true;
            self.two_opt(&mut trial);
            self.fill(&mut trial);
            trial.in_tour[dropped] = false;
            if trial.reward > tour.reward {
                *tour = trial;
                return true;
            }
        }
        false
    }

    fn local_search(&self, tour: &mut Tour, deadline: &Deadline) {
        loop {
            if deadline.expired() {
                return;
            }
            self.two_opt(tour);
            self.or_opt(tour);
            let mut improved = self.fill(tour);
            improved |= self.swap(tour);
            if !improved {
                improved = self.drop_and_fill(tour);
            }
            if !improved {
                return;
            }
        }
    }

    fn run(&self, seed: Option<usize>, deadline: &Deadline) -> Tour {
        let mut tour = self.empty();
        if let Some(u) = seed {
            let delta = 2 * self.d(0, u);
            if delta <= self.inst.budget {
                self.insert(&mut tour, u, 0, delta);
            }
        }
        self.fill(&mut tour);
        self.local_search(&mut tour, deadline);
        tour
    }
}

/// Compares `ra / da` with `rb / db`, treating a zero detour as infinite ratio;
/// equal ratios are `Equal` so the earlier (lower index) candidate is kept.
fn ratio_cmp(ra: u64, da: u64, rb: u64, db: u64) -> Ordering {
    match (da, db) {
        (0, 0) => ra.cmp(&rb),
        (0, _) => Ordering::Greater,
        (_, 0) => Ordering::Less,
        _ => (ra as u128 * db as u128).cmp(&(rb as u128 * da as u128)),
    }
}

fn better_tour(a: &Tour, b: &Tour) -> bool {
    a.reward > b.reward
        || (a.reward == b.reward && (a.length < b.length || (a.length == b.length && a.nodes < b.nodes)))
}

/// Heuristic orienteering solver: greedy ratio insertion followed by 2-opt,
/// relocation, exchange and drop/refill local search, restarted from every
/// reachable seed tile.
///
/// Restarts run in tile-index order and each one is deterministic, so the
/// result only depends on the instance unless `clock` cuts the search short
/// after `time_budget_ms`. The first construction always completes.
pub fn solve_orienteering(
    inst: &OrienteeringInstance,
    time_budget_ms: u64,
    clock: Option<&dyn Clock>,
) -> DaDecision {
    let deadline = Deadline {
        clock,
        end_ms: clock.map_or(0, |c| c.now_ms().saturating_add(time_budget_ms)),
    };
    let search = Search::new(inst);
    let no_deadline = Deadline { clock: None, end_ms: 0 };
    let mut best = search.run(None, &no_deadline);
    for u in 1..search.n {
        if deadline.expired() {
            break;
        }
        if inst.rewards[u] == 0 || 2 * search.d(0, u) > inst.budget {
            continue;
        }
        let cand = search.run(Some(u), &deadline);
        if better_tour(&cand, &best) {
            best = cand;
        }
    }
    DaDecision::from_tour(search.n, &best.nodes)
}

/// Exact orienteering by Held-Karp over every subset of tiles. Only for
/// grids with at most 16 tiles.
pub fn brute_force_orienteering(inst: &OrienteeringInstance) -> Result<DaDecision> {
    let n = inst.num_nodes();
    if n > 16 {
        return Err(Error::TooLarge(alloc::format!("{n} tiles (limit 16)")));
    }
    let m = n - 1;
    let d = |a: usize, b: usize| node_distance(inst.k, a, b);
    const INF: u64 = u64::MAX / 4;
    let full = 1usize << m;
    let mut dp = vec![INF; full * m.max(1)];
    let mut parent = vec![u8::MAX; full * m.max(1)];
    for j in 0..m {
        dp[(1 << j) * m + j] = d(0, j + 1);
    }
    for mask in 1..full {
        for j in 0..m {
            let cur = dp[mask * m + j];
            if mask & (1 << j) == 0 || cur >= INF {
                continue;
            }
            for nx in 0..m {
                if mask & (1 << nx) != 0 {
                    continue;
                }
                let nm = mask | (1 << nx);
                let cand = cur + d(j + 1, nx + 1);
                if cand < dp[nm * m + nx] {
                    dp[nm * m + nx] = cand;
                    parent[nm * m + nx] = j as u8;
                }
            }
        }
    }
    let mut best: (u64, u64, usize, usize) = (inst.rewards[0], 0, 0, usize::MAX);
    for mask in 1..full {
        let mut len = INF;
        let mut last = usize::MAX;
        for j in 0..m {
            if mask & (1 << j) != 0 && dp[mask * m + j] < INF {
                let l = dp[mask * m + j] + d(j + 1, 0);
                if l < len {
                    len = l;
                    last = j;
                }
            }
        }
        if len > inst.budget {
            continue;
        }
        let reward = inst.rewards[0]
            + (0..m).filter(|j| mask & (1 << j) != 0).map(|j| inst.rewards[j + 1]).sum::<u64>();
        if reward > best.0 || (reward == best.0 && len < best.1) {
            best = (reward, len, mask, last);
        }
    }
    let (_, _, mut mask, mut last) = best;
    let mut tour = Vec::new();
    while mask != 0 {
        tour.push(last + 1);
        let p = parent[mask * m + last];
        mask &= !(1 << last);
        if p == u8::MAX {
            break;
        }
        last = p as usize;
    }
    tour.reverse();
    Ok(DaDecision::from_tour(n, &tour))
}
