//! Gradients through combinatorial solvers.
//!
//! Sign conventions: the data-acquisition stage maximises `<pi, s>`, the
//! decision stage minimises `<theta, x>`. The blackbox rule works in the
//! maximisation form directly; the Fenchel-Young estimator negates costs
//! internally and reports its gradient with respect to the cost vector.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::solvers::{solve_orienteering, Clock, DaDecision, OrienteeringInstance, ShortestPath};
use crate::tensor::Tensor;

/// Solver returning the 0/1 indicator maximising `<weights, s>`.
pub trait LinearMaximizer {
    fn argmax(&self, weights: &[f32]) -> Result<Vec<f32>>;
}

/// Solver returning the 0/1 indicator minimising `<costs, x>`.
pub trait LinearMinimizer {
    fn argmin(&self, costs: &[f32]) -> Result<Vec<f32>>;
}

impl LinearMinimizer for ShortestPath {
    fn argmin(&self, costs: &[f32]) -> Result<Vec<f32>> {
        Ok(self.solve(costs)?.indicator())
    }
}

/// Picks the `m` largest weights; ties go to the lower index.
#[derive(Debug, Clone, Copy)]
pub struct TopK {
    pub m: usize,
}

impl LinearMaximizer for TopK {
    fn argmax(&self, weights: &[f32]) -> Result<Vec<f32>> {
        if self.m > weights.len() {
            return Err(invalid("TopK: m exceeds number of items"));
        }
        let mut order: Vec<usize> = (0..weights.len()).collect();
        order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
        let mut s = vec![0.0; weights.len()];
        for &i in &order[..self.m] {
            s[i] = 1.0;
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlackboxConfig {
    /// Interpolation strength.
    pub lambda: f32,
}

impl BlackboxConfig {
    pub fn new(lambda: f32) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(invalid(alloc::format!("blackbox lambda must be > 0, got {lambda}")));
        }
        Ok(Self { lambda })
    }
}

impl Default for BlackboxConfig {
    fn default() -> Self {
        Self { lambda: 20.0 }
    }
}

/// Single-perturbation gradient of a maximisation layer.
///
/// Solves once more at `pi - lambda * grad_s` and returns
/// `-(s' - s_star) / lambda`. The extra solve happens even when `grad_s` is
/// zero so solver-call accounting stays fixed.
pub fn blackbox_backward(
    pi: &[f32],
    s_star: &[f32],
    grad_s: &[f32],
    cfg: &BlackboxConfig,
    solver: &impl LinearMaximizer,
) -> Result<Vec<f32>> {
    if pi.len() != s_star.len() || pi.len() != grad_s.len() {
        return Err(invalid("blackbox: pi, s_star and grad_s must have equal length"));
    }
    let perturbed: Vec<f32> = pi.iter().zip(grad_s).map(|(p, g)| p - cfg.lambda * g).collect();
    let s_prime = solver.argmax(&perturbed)?;
    Ok(s_prime
        .iter()
        .zip(s_star)
        .map(|(a, b)| -(a - b) / cfg.lambda)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PfylConfig {
    /// Gaussian noise scale.
    pub sigma: f32,
    pub num_samples: usize,
    pub seed: u64,
}

impl PfylConfig {
    pub fn new(sigma: f32, num_samples: usize, seed: u64) -> Result<Self> {
        if !(sigma > 0.0) || num_samples == 0 {
            return Err(invalid("PFYL needs sigma > 0 and at least one sample"));
        }
        Ok(Self {
            sigma,
            num_samples,
            seed,
        })
    }
}

impl Default for PfylConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            num_samples: 5,
            seed: 0,
        }
    }
}

/// Perturbed costs are floored here before reaching a solver that needs
/// strictly positive costs.
pub const PERTURBED_COST_FLOOR: f32 = 1e-3;

/// Fenchel-Young loss and gradient for explicit noise draws `noises[m]`.
///
/// Returns `(loss, grad)` where `grad = x_true - mean_m x*(theta_hat + sigma * Z_m)`
/// is the gradient with respect to the predicted costs and
/// `loss = <theta_hat, x_true> - mean_m <theta_hat + sigma * Z_m, x_m>`.
pub fn pfyl_from_noise(
    theta_hat: &[f32],
    x_true: &[f32],
    sigma: f32,
    noises: &[Vec<f32>],
    solver: &impl LinearMinimizer,
) -> Result<(f64, Vec<f32>)> {
    let n = theta_hat.len();
    if x_true.len() != n || noises.is_empty() || noises.iter().any(|z| z.len() != n) {
        return Err(invalid("PFYL: length mismatch or no samples"));
    }
    let mut mean_x = vec![0.0f64; n];
    let mut perturbed_value = 0.0f64;
    let mut costs = vec![0.0f32; n];
    for z in noises {
        for i in 0..n {
            costs[i] = (theta_hat[i] + sigma * z[i]).max(PERTURBED_COST_FLOOR);
        }
        let x = solver.argmin(&costs)?;
        for i in 0..n {
            mean_x[i] += x[i] as f64;
            perturbed_value += costs[i] as f64 * x[i] as f64;
        }
    }
    let m = noises.len() as f64;
    let true_value: f64 = theta_hat.iter().zip(x_true).map(|(&t, &x)| t as f64 * x as f64).sum();
    let loss = true_value - perturbed_value / m;
    let grad = x_true
        .iter()
        .zip(&mean_x)
        .map(|(&y, &mx)| (y as f64 - mx / m) as f32)
        .collect();
    Ok((loss, grad))
}

/// Monte-Carlo Fenchel-Young loss with `cfg.num_samples` Gaussian draws
/// taken from `rng` in sample order.
pub fn pfyl_loss_grad(
    theta_hat: &[f32],
    x_true: &[f32],
    cfg: &PfylConfig,
    solver: &impl LinearMinimizer,
    rng: &mut Rng,
) -> Result<(f64, Vec<f32>)> {
    let noises: Vec<Vec<f32>> = (0..cfg.num_samples)
        .map(|_| (0..theta_hat.len()).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    pfyl_from_noise(theta_hat, x_true, cfg.sigma, &noises, solver)
}

/// Maps surrogate weights to integral solver rewards:
/// `max(0, round(pi * 1000)) + h`, rounding half away from zero.
pub fn pi_to_rewards(pi: &[f32], h: u64) -> Vec<u64> {
    pi.iter()
        .map(|&p| {
            let r = libm::round(p as f64 * 1e3);
            (if r > 0.0 { r as u64 } else { 0 }) + h
        })
        .collect()
}

/// The surrogate data-acquisition solver as a differentiable layer.
///
/// Every solve, forward or backward, bumps a shared call counter.
#[derive(Clone)]
pub struct DaLayer {
    pub k: usize,
    pub budget: u64,
    pub time_budget_ms: u64,
    pub blackbox: BlackboxConfig,
    clock: Option<Arc<dyn Clock>>,
    calls: Arc<AtomicUsize>,
}

impl core::fmt::Debug for DaLayer {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("DaLayer")
            .field("k", &self.k)
            .field("budget", &self.budget)
            .field("time_budget_ms", &self.time_budget_ms)
            .field("blackbox", &self.blackbox)
            .field("calls", &self.calls())
            .finish()
    }
}

impl DaLayer {
    pub fn new(k: usize, budget: u64, blackbox: BlackboxConfig) -> Self {
        Self {
            k,
            budget,
            time_budget_ms: 0,
            blackbox,
            clock: None,
            calls: Arc::new(AtomicUsize::new(0)),
        }
    }

    /// Caps each solve at `ms` milliseconds measured by `clock`.
    pub fn with_time_budget(mut self, ms: u64, clock: Arc<dyn Clock>) -> Self {
        self.time_budget_ms = ms;
        self.clock = Some(clock);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset_calls(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    pub fn solve_decision(&self, pi: &[f32]) -> Result<DaDecision> {
        let rewards = pi_to_rewards(pi, self.budget);
        let inst = OrienteeringInstance::new(self.k, rewards, self.budget)?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok(solve_orienteering(&inst, self.time_budget_ms, self.clock.as_deref()))
    }
}

impl LinearMaximizer for DaLayer {
    fn argmax(&self, weights: &[f32]) -> Result<Vec<f32>> {
        Ok(self.solve_decision(weights)?.mask())
    }
}

/// Records the data-acquisition solve for the surrogate weights `pi` on the
/// tape. The forward pass solves once; the backward pass runs
/// [`blackbox_backward`], which solves once more. The reward transform is not
/// differentiated.
pub fn attach_da_layer(tape: &mut Tape, pi: Var, layer: &DaLayer) -> Result<(Var, DaDecision)> {
    let pi_values = tape.value(pi).data().to_vec();
    let decision = layer.solve_decision(&pi_values)?;
    let s_star = decision.mask();
    let out = Tensor::from_vec(s_star.clone());
    let layer = layer.clone();
    let s = tape.custom(&[pi], out, move |g, needs| {
        if !needs[0] {
            return Ok(vec![None]);
        }
        let grad = blackbox_backward(&pi_values, &s_star, g.data(), &layer.blackbox, &layer)?;
        Ok(vec![Some(Tensor::from_vec(grad))])
    });
    Ok((s, decision))
}
