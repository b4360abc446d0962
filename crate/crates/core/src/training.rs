//! Losses, evaluation, pretraining with random masks, random search over
//! surrogate weights, and the fixed/learnt `pi` x fine-tune/joint x PFL/DFL
//! training harness.
//!
//! Every function here is a pure function of its configuration, data and
//! seeds. Wall-clock time only enters through an optional [`Clock`], which is
//! used for reporting and as a cap on solver time.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::autodiff::{Adam, Tape, Var};
use crate::datagen::{DatasetConfig, DatasetSplit, Instance};
use crate::diffopt::{attach_da_layer, pfyl_loss_grad, BlackboxConfig, DaLayer, PfylConfig};
use crate::error::{invalid, Error, Result};
use crate::model::{predict, stack_images, BoundParams, ModelConfig, ModelParams, Observation};
use crate::rng::{derive, seeded};
use crate::solvers::{objective, Clock, DaDecision, Neighborhood, ShortestPath};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Mean squared error on the cost predictions.
    Pfl,
    /// Regret of the downstream shortest path, trained through PFYL.
    Dfl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PiMode {
    Fixed,
    Learnt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    /// Start from pretrained parameters.
    Finetune,
    /// Start from a fresh seeded initialisation.
    Joint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub k: usize,
    /// Route length budget of the DA stage; must be below `k * k`.
    pub h: u64,
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub flatten_class_token: bool,
    pub pi_init: (f32, f32),
    pub lr_w: f32,
    pub lr_pi: f32,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    /// Fraction of tiles hidden from each item during pretraining.
    pub mask_ratio: f32,
    pub loss: LossMode,
    pub pi_mode: PiMode,
    pub w_mode: WeightMode,
    pub seed: u64,
    pub search_seeds: usize,
    pub blackbox: BlackboxConfig,
    pub pfyl: PfylConfig,
    pub solver_budget_ms: u64,
    pub neighborhood: Neighborhood,
    pub num_classes: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub data_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            k: 6,
            h: 9,
            d_model: 32,
            blocks: 3,
            heads: 4,
            flatten_class_token: true,
            pi_init: (0.495, 0.505),
            lr_w: 3e-4,
            lr_pi: 1e-3,
            batch_size: 32,
            patience: 10,
            max_epochs: 100,
            mask_ratio: 0.75,
            loss: LossMode::Pfl,
            pi_mode: PiMode::Fixed,
            w_mode: WeightMode::Finetune,
            seed: 0,
            search_seeds: 50,
            blackbox: BlackboxConfig::default(),
            pfyl: PfylConfig::default(),
            solver_budget_ms: 100,
            neighborhood: Neighborhood::Eight,
            num_classes: 5,
            train_size: 2000,
            val_size: 200,
            test_size: 200,
            data_seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let tiles = (self.k * self.k) as u64;
        if self.k < 2 {
            return Err(invalid("k must be at least 2"));
        }
        if self.h >= tiles {
            return Err(invalid(format!("h = {} must be below k*k = {tiles}", self.h)));
        }
        if !(self.pi_init.0 < self.pi_init.1) {
            return Err(invalid("pi_init must be a non-empty range lo < hi"));
        }
        if !(self.lr_w >= 0.0) || !(self.lr_pi >= 0.0) {
            return Err(invalid("learning rates must be non-negative"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(invalid("batch_size and max_epochs must be positive"));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(invalid("mask_ratio must lie in [0, 1)"));
        }
        if self.train_size == 0 || self.val_size == 0 || self.test_size == 0 {
            return Err(invalid("dataset sizes must be at least 1"));
        }
        BlackboxConfig::new(self.blackbox.lambda)?;
        PfylConfig::new(self.pfyl.sigma, self.pfyl.num_samples, self.pfyl.seed)?;
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            blocks: self.blocks,
            heads: self.heads,
            flatten_class_token: self.flatten_class_token,
            ..ModelConfig::new(self.k)
        }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            k: self.k,
            num_classes: self.num_classes,
            train: self.train_size,
            val: self.val_size,
            test: self.test_size,
            seed: self.data_seed,
        }
    }

    pub fn shortest_path(&self) -> ShortestPath {
        ShortestPath::new(self.k, self.neighborhood)
    }
}

// Sub-stream tags for `derive`.
const STREAM_INIT: u64 = 11;
const STREAM_SHUFFLE: u64 = 12;
const STREAM_MASKS: u64 = 13;
const STREAM_VAL_MASKS: u64 = 14;
const STREAM_PFYL: u64 = 15;
const STREAM_PI: u64 = 16;

/// Wall-clock access for training runs.
///
/// `solver_clock` caps each DA solve at the configured budget; without it the
/// solver runs to convergence. `report_clock` only feeds the reported wall
/// times, which are zero without it.
#[derive(Clone, Default)]
pub struct Runtime {
    pub solver_clock: Option<Arc<dyn Clock>>,
    pub report_clock: Option<Arc<dyn Clock>>,
}

impl Runtime {
    fn now(&self) -> u64 {
        self.report_clock.as_ref().map_or(0, |c| c.now_ms())
    }

    pub fn da_layer(&self, cfg: &ExperimentConfig) -> DaLayer {
        let layer = DaLayer::new(cfg.k, cfg.h, cfg.blackbox);
        match &self.solver_clock {
            Some(c) => layer.with_time_budget(cfg.solver_budget_ms, c.clone()),
            None => layer,
        }
    }
}

/// Mean over all entries of `(theta - theta_hat)^2`.
pub fn loss_pfl(theta: &[f32], theta_hat: &[f32]) -> f64 {
    let n = theta.len().max(1) as f64;
    theta
        .iter()
        .zip(theta_hat)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / n
}

/// Mean over instances of `<theta, x*(theta_hat)> - <theta, x*(theta)>`.
pub fn loss_dfl(solver: &ShortestPath, theta: &[Vec<f32>], theta_hat: &[Vec<f32>]) -> Result<f64> {
    if theta.len() != theta_hat.len() || theta.is_empty() {
        return Err(invalid("loss_dfl: need equally many true and predicted cost vectors"));
    }
    let mut total = 0.0;
    for (t, th) in theta.iter().zip(theta_hat) {
        total += crate::solvers::regret(solver, t, th)?;
    }
    Ok(total / theta.len() as f64)
}

/// Aggregate prediction and decision quality over a set of instances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub mse: f64,
    /// Mean `<theta, x*(theta_hat)>`.
    pub objective: f64,
    /// Mean `<theta, x*(theta)>`.
    pub optimal: f64,
    pub regret: f64,
    /// `(objective - optimal) / optimal`.
    pub relative_regret: f64,
}

impl EvalMetrics {
    /// The early-stopping criterion for `loss`; lower is better.
    pub fn criterion(&self, loss: LossMode) -> f64 {
        match loss {
            LossMode::Pfl => self.mse,
            LossMode::Dfl => self.regret,
        }
    }
}

/// Which tiles the model observes.
#[derive(Debug, Clone, Copy)]
pub enum Masks<'a> {
    /// One DA decision shared by every instance, `[k*k]`.
    Shared(&'a [f32]),
    /// One mask per instance.
    PerItem(&'a [Vec<f32>]),
}

impl Masks<'_> {
    fn batch(&self, range: core::ops::Range<usize>) -> Tensor {
        match self {
            Masks::Shared(s) => Tensor::from_vec(s.to_vec()),
            Masks::PerItem(all) => {
                let t = all[range.start].len();
                let data: Vec<f32> = all[range.clone()].iter().flatten().copied().collect();
                Tensor::new(vec![range.len(), t], data).expect("masks share one length")
            }
        }
    }
}

const EVAL_BATCH: usize = 64;

/// Predicted costs for `instances`, one vector per instance.
pub fn predict_costs(params: &ModelParams, masks: Masks<'_>, instances: &[Instance]) -> Result<Vec<Vec<f32>>> {
    let t = params.config().num_tiles();
    let mut out = Vec::with_capacity(instances.len());
    let mut start = 0;
    while start < instances.len() {
        let end = (start + EVAL_BATCH).min(instances.len());
        let mut tape = Tape::new();
        let p = BoundParams::bind(&mut tape, params, false);
        let images = tape.constant(stack_images(instances[start..end].iter().map(|i| &i.image))?);
        let s = tape.constant(masks.batch(start..end));
        let th = predict(&mut tape, &p, params.config(), images, s, Observation::Full)?;
        out.extend(tape.value(th).data().chunks(t).map(<[f32]>::to_vec));
        start = end;
    }
    Ok(out)
}

/// Scores predictions against true costs with the exact shortest-path solver.
pub fn score_predictions(solver: &ShortestPath, instances: &[Instance], predictions: &[Vec<f32>]) -> Result<EvalMetrics> {
    if instances.is_empty() || instances.len() != predictions.len() {
        return Err(invalid("score_predictions: need one prediction per instance"));
    }
    let (mut mse, mut obj, mut opt) = (0.0, 0.0, 0.0);
    for (inst, th) in instances.iter().zip(predictions) {
        let theta = inst.theta.data();
        mse += loss_pfl(theta, th);
        obj += objective(theta, &solver.solve(th)?);
        opt += objective(theta, &solver.solve(theta)?);
    }
    let n = instances.len() as f64;
    let (mse, objective, optimal) = (mse / n, obj / n, opt / n);
    Ok(EvalMetrics {
        mse,
        objective,
        optimal,
        regret: objective - optimal,
        relative_regret: (objective - optimal) / optimal,
    })
}

pub fn evaluate(params: &ModelParams, masks: Masks<'_>, instances: &[Instance], solver: &ShortestPath) -> Result<EvalMetrics> {
    let preds = predict_costs(params, masks, instances)?;
    score_predictions(solver, instances, &preds)
}

/// Surrogate weights for `seed`, uniform in `cfg.pi_init`.
pub fn sample_pi(cfg: &ExperimentConfig, seed: u64) -> Vec<f32> {
    let mut rng = seeded(derive(seed, STREAM_PI));
    let (lo, hi) = cfg.pi_init;
    (0..cfg.k * cfg.k).map(|_| rng.random_range(lo..hi)).collect()
}

/// Keeps a uniformly random subset of `t - round(ratio * t)` tiles.
pub fn random_mask(t: usize, ratio: f32, rng: &mut crate::rng::Rng) -> Vec<f32> {
    let hidden = libm::roundf(ratio * t as f32) as usize;
    let mut idx: Vec<usize> = (0..t).collect();
    idx.shuffle(rng);
    let mut s = vec![1.0; t];
    for &i in &idx[..hidden.min(t)] {
        s[i] = 0.0;
    }
    s
}

fn validation_masks(cfg: &ExperimentConfig, n: usize) -> Vec<Vec<f32>> {
    let mut rng = seeded(derive(cfg.seed, STREAM_VAL_MASKS));
    (0..n).map(|_| random_mask(cfg.k * cfg.k, cfg.mask_ratio, &mut rng)).collect()
}

/// One row of the per-epoch log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: EvalMetrics,
    /// Milliseconds since the run started; zero without a clock.
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    /// Validation metrics of the starting point, before any update.
    pub initial_val: EvalMetrics,
    pub epochs: Vec<EpochMetrics>,
    /// Epoch of the selected state; 0 means the starting point.
    pub best_epoch: usize,
    pub best_val: EvalMetrics,
    pub test: EvalMetrics,
    pub wall_ms: u64,
}

/// Output of a training run: metrics plus the selected parameters and
/// surrogate weights.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: RunMetrics,
    pub params: ModelParams,
    pub pi: Vec<f32>,
    pub decision: DaDecision,
    /// DA decision in force at the end of every epoch.
    pub decisions: Vec<DaDecision>,
    /// Number of batches in which the DA decision differed from the previous batch's.
    pub decision_changes: usize,
    pub batches: usize,
    /// Total DA solves, including the initial solve and one per epoch in learnt mode.
    pub da_solves: usize,
    /// DA solves made inside each training batch, in batch order.
    pub da_solves_per_batch: Vec<usize>,
}

/// Loss on the tape for a batch of predictions `[B, k*k]`.
fn batch_loss(
    tape: &mut Tape,
    cfg: &ExperimentConfig,
    solver: &ShortestPath,
    theta_hat: Var,
    batch: &[&Instance],
    x_true: &[&Vec<f32>],
    pfyl_seed: u64,
) -> Result<Var> {
    match cfg.loss {
        LossMode::Pfl => {
            let theta: Vec<f32> = batch.iter().flat_map(|i| i.theta.data().iter().copied()).collect();
            let theta = tape.constant(Tensor::new(tape.value(theta_hat).shape().to_vec(), theta)?);
            let d = tape.sub(theta_hat, theta)?;
            let sq = tape.square(d);
            Ok(tape.mean(sq))
        }
        LossMode::Dfl => {
            let value = tape.value(theta_hat).clone();
            let t = value.shape()[1];
            let b = batch.len() as f32;
            let mut rng = seeded(pfyl_seed);
            let mut loss = 0.0f64;
            let mut grad = Vec::with_capacity(value.numel());
            for (row, x) in value.data().chunks(t).zip(x_true) {
                let (l, g) = pfyl_loss_grad(row, x, &cfg.pfyl, solver, &mut rng)?;
                loss += l;
                grad.extend(g.into_iter().map(|v| v / b));
            }
            let grad = Tensor::new(value.shape().to_vec(), grad)?;
            Ok(tape.custom(&[theta_hat], Tensor::scalar((loss / b as f64) as f32), move |g, _| {
                let scale = g.item();
                Ok(vec![Some(grad.map(|v| v * scale))])
            }))
        }
    }
}

fn indicator_cache(solver: &ShortestPath, instances: &[Instance]) -> Result<Vec<Vec<f32>>> {
    instances.iter().map(|i| Ok(solver.solve(i.theta.data())?.indicator())).collect()
}

/// Tracks the best state by a validation criterion; ties keep the earlier state.
struct EarlyStop<S> {
    best: f64,
    best_epoch: usize,
    state: S,
    patience: usize,
}

impl<S> EarlyStop<S> {
    fn new(initial: f64, state: S, patience: usize) -> Self {
        Self {
            best: initial,
            best_epoch: 0,
            state,
            patience,
        }
    }

    /// Records the epoch; returns true when training should stop.
    fn update(&mut self, epoch: usize, value: f64, state: impl FnOnce() -> S) -> bool {
        if value < self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.state = state();
        }
        epoch - self.best_epoch >= self.patience.max(1)
    }
}

fn check_nan(loss: f64, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("training loss diverged at epoch {epoch}, batch {batch}")))
    }
}

fn grads_for<'a>(grads: &'a crate::autodiff::Gradients, vars: &[Var]) -> Vec<Option<&'a Tensor>> {
    vars.iter().map(|&v| grads.get(v)).collect()
}

/// Pretrains a model from `cfg.seed` with i.i.d. random masks at
/// `cfg.mask_ratio`. Early stopping uses validation MSE for PFL and
/// validation regret for DFL, on fixed seeded validation masks.
pub fn pretrain(cfg: &ExperimentConfig, data: &DatasetSplit, rt: &Runtime) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start_ms = rt.now();
    let solver = cfg.shortest_path();
    let mut params = ModelParams::init(cfg.model_config(), derive(cfg.seed, STREAM_INIT))?;
    let t = cfg.k * cfg.k;
    let val_masks = validation_masks(cfg, data.val.len());
    let x_true = match cfg.loss {
        LossMode::Dfl => indicator_cache(&solver, &data.train)?,
        LossMode::Pfl => Vec::new(),
    };
    let initial_val = evaluate(&params, Masks::PerItem(&val_masks), &data.val, &solver)?;
    let mut stop = EarlyStop::new(initial_val.criterion(cfg.loss), (params.clone(), initial_val), cfg.patience);
    let mut adam = Adam::new(cfg.lr_w);
    let mut epochs = Vec::new();
    let mut batches = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut seeded(derive(derive(cfg.seed, STREAM_SHUFFLE), epoch as u64)));
        let mut mask_rng = seeded(derive(derive(cfg.seed, STREAM_MASKS), epoch as u64));
        let mut total = 0.0;
        let nb = order.len().div_ceil(cfg.batch_size);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Instance> = chunk.iter().map(|&i| &data.train[i]).collect();
            let xs: Vec<&Vec<f32>> = match cfg.loss {
                LossMode::Dfl => chunk.iter().map(|&i| &x_true[i]).collect(),
                LossMode::Pfl => Vec::new(),
            };
            let masks: Vec<Vec<f32>> = (0..chunk.len()).map(|_| random_mask(t, cfg.mask_ratio, &mut mask_rng)).collect();
            let mut tape = Tape::new();
            let p = BoundParams::bind(&mut tape, &params, true);
            let images = tape.constant(stack_images(batch.iter().map(|i| &i.image))?);
            let s = tape.constant(Masks::PerItem(&masks).batch(0..chunk.len()));
            let th = predict(&mut tape, &p, params.config(), images, s, Observation::Full)?;
            let pfyl_seed = derive(derive(cfg.pfyl.seed ^ cfg.seed, STREAM_PFYL), batches as u64);
            let loss = batch_loss(&mut tape, cfg, &solver, th, &batch, &xs, pfyl_seed)?;
            let lv = tape.value(loss).item() as f64;
            check_nan(lv, epoch, bi)?;
            total += lv;
            let grads = tape.backward(loss)?;
            let g = grads_for(&grads, &p.vars);
            let mut refs: Vec<&mut Tensor> = params.tensors_mut().iter_mut().collect();
            adam.step(&mut refs, &g);
            batches += 1;
        }
        let val = evaluate(&params, Masks::PerItem(&val_masks), &data.val, &solver)?;
        epochs.push(EpochMetrics {
            epoch,
            train_loss: total / nb as f64,
            val,
            wall_ms: rt.now().saturating_sub(start_ms),
        });
        if stop.update(epoch, val.criterion(cfg.loss), || (params.clone(), val)) {
            break;
        }
    }
    let (best_params, best_val) = stop.state;
    let test_masks = {
        let mut rng = seeded(derive(cfg.seed, STREAM_VAL_MASKS ^ 0xff));
        (0..data.test.len()).map(|_| random_mask(t, cfg.mask_ratio, &mut rng)).collect::<Vec<_>>()
    };
    let test = evaluate(&best_params, Masks::PerItem(&test_masks), &data.test, &solver)?;
    Ok(TrainOutcome {
        metrics: RunMetrics {
            initial_val,
            epochs,
            best_epoch: stop.best_epoch,
            best_val,
            test,
            wall_ms: rt.now().saturating_sub(start_ms),
        },
        params: best_params,
        pi: Vec::new(),
        decision: DaDecision::depot_only(t),
        decisions: Vec::new(),
        decision_changes: 0,
        batches,
        da_solves: 0,
        da_solves_per_batch: Vec::new(),
    })
}

/// Random-search entry for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchEntry {
    pub seed: u64,
    pub pi: Vec<f32>,
    pub decision: DaDecision,
    pub val: EvalMetrics,
}

/// Samples `pi` for `seed`, solves the DA problem once and scores the frozen
/// model on the validation split with the resulting mask.
pub fn score_seed(cfg: &ExperimentConfig, data: &DatasetSplit, params: &ModelParams, seed: u64, rt: &Runtime) -> Result<SearchEntry> {
    let pi = sample_pi(cfg, seed);
    let decision = rt.da_layer(cfg).solve_decision(&pi)?;
    let val = evaluate(params, Masks::Shared(&decision.mask()), &data.val, &cfg.shortest_path())?;
    Ok(SearchEntry { seed, pi, decision, val })
}

/// Orders entries by the validation criterion of `loss`, best first; ties
/// keep seed order.
pub fn rank_entries(entries: &mut [SearchEntry], loss: LossMode) {
    entries.sort_by(|a, b| {
        a.val
            .criterion(loss)
            .total_cmp(&b.val.criterion(loss))
            .then(a.seed.cmp(&b.seed))
    });
}

/// Scores seeds `0..num_seeds` and returns them ranked, best first.
pub fn random_search(cfg: &ExperimentConfig, data: &DatasetSplit, params: &ModelParams, num_seeds: usize, rt: &Runtime) -> Result<Vec<SearchEntry>> {
    let mut entries = (0..num_seeds as u64)
        .map(|seed| score_seed(cfg, data, params, seed, rt))
        .collect::<Result<Vec<_>>>()?;
    rank_entries(&mut entries, cfg.loss);
    Ok(entries)
}

/// Warm starts from a ranking: the `top` best seeds plus the seed whose
/// criterion is nearest the median (earliest rank on ties), if not already
/// included.
pub fn warm_starts(ranked: &[SearchEntry], top: usize, loss: LossMode) -> Vec<u64> {
    let mut seeds: Vec<u64> = ranked.iter().take(top).map(|e| e.seed).collect();
    if ranked.is_empty() {
        return seeds;
    }
    let mut values: Vec<f64> = ranked.iter().map(|e| e.val.criterion(loss)).collect();
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let median = if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    };
    let nearest = ranked
        .iter()
        .min_by(|a, b| {
            (a.val.criterion(loss) - median)
                .abs()
                .total_cmp(&(b.val.criterion(loss) - median).abs())
        })
        .map(|e| e.seed);
    if let Some(s) = nearest {
        if !seeds.contains(&s) {
            seeds.push(s);
        }
    }
    seeds
}

/// Runs one ablation combination from surrogate weights `warm_pi`.
///
/// `init` is required for [`WeightMode::Finetune`]; joint runs draw fresh
/// parameters from `cfg.seed`. In learnt mode every batch solves the DA
/// problem once forward and once backward; in fixed mode the decision is
/// solved once per run.
pub fn train_opo(
    cfg: &ExperimentConfig,
    data: &DatasetSplit,
    warm_pi: &[f32],
    init: Option<&ModelParams>,
    rt: &Runtime,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let t = cfg.k * cfg.k;
    if warm_pi.len() != t {
        return Err(invalid(format!("warm-start pi has {} entries, expected {t}", warm_pi.len())));
    }
    let start_ms = rt.now();
    let solver = cfg.shortest_path();
    let layer = rt.da_layer(cfg);
    let mut params = match cfg.w_mode {
        WeightMode::Finetune => init
            .cloned()
            .ok_or_else(|| invalid("fine-tuning needs pretrained parameters"))?,
        WeightMode::Joint => ModelParams::init(cfg.model_config(), derive(cfg.seed, STREAM_INIT))?,
    };
    let mut pi = Tensor::from_vec(warm_pi.to_vec());
    let x_true = match cfg.loss {
        LossMode::Dfl => indicator_cache(&solver, &data.train)?,
        LossMode::Pfl => Vec::new(),
    };

    let mut decision = layer.solve_decision(pi.data())?;
    let initial_val = evaluate(&params, Masks::Shared(&decision.mask()), &data.val, &solver)?;
    let mut stop = EarlyStop::new(
        initial_val.criterion(cfg.loss),
        (params.clone(), pi.clone(), decision.clone(), initial_val),
        cfg.patience,
    );
    let mut adam_w = Adam::new(cfg.lr_w);
    let mut adam_pi = Adam::new(cfg.lr_pi);
    let mut epochs = Vec::new();
    let mut decisions = Vec::new();
    let mut decision_changes = 0;
    let mut batches = 0;
    let mut da_solves_per_batch = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut seeded(derive(derive(cfg.seed, STREAM_SHUFFLE), epoch as u64)));
        let mut total = 0.0;
        let nb = order.len().div_ceil(cfg.batch_size);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let solves_before = layer.calls();
            let batch: Vec<&Instance> = chunk.iter().map(|&i| &data.train[i]).collect();
            let xs: Vec<&Vec<f32>> = match cfg.loss {
                LossMode::Dfl => chunk.iter().map(|&i| &x_true[i]).collect(),
                LossMode::Pfl => Vec::new(),
            };
            let mut tape = Tape::new();
            let p = BoundParams::bind(&mut tape, &params, true);
            let images = tape.constant(stack_images(batch.iter().map(|i| &i.image))?);
            let (s, pi_var) = match cfg.pi_mode {
                PiMode::Fixed => (tape.constant(Tensor::from_vec(decision.mask())), None),
                PiMode::Learnt => {
                    let pv = tape.param(pi.clone());
                    let (s, d) = attach_da_layer(&mut tape, pv, &layer)?;
                    if d != decision {
                        decision_changes += 1;
                        decision = d;
                    }
                    (s, Some(pv))
                }
            };
            let th = predict(&mut tape, &p, params.config(), images, s, Observation::Full)?;
            let pfyl_seed = derive(derive(cfg.pfyl.seed ^ cfg.seed, STREAM_PFYL), batches as u64);
            let loss = batch_loss(&mut tape, cfg, &solver, th, &batch, &xs, pfyl_seed)?;
            let lv = tape.value(loss).item() as f64;
            check_nan(lv, epoch, bi)?;
            total += lv;
            let grads = tape.backward(loss)?;
            let g = grads_for(&grads, &p.vars);
            let mut refs: Vec<&mut Tensor> = params.tensors_mut().iter_mut().collect();
            adam_w.step(&mut refs, &g);
            if let Some(pv) = pi_var {
                let gp = grads.get(pv);
                adam_pi.step(&mut [&mut pi], &[gp]);
            }
            da_solves_per_batch.push(layer.calls() - solves_before);
            batches += 1;
        }
        if cfg.pi_mode == PiMode::Learnt {
            let d = layer.solve_decision(pi.data())?;
            if d != decision {
                decision_changes += 1;
                decision = d;
            }
        }
        decisions.push(decision.clone());
        let val = evaluate(&params, Masks::Shared(&decision.mask()), &data.val, &solver)?;
        epochs.push(EpochMetrics {
            epoch,
            train_loss: total / nb as f64,
            val,
            wall_ms: rt.now().saturating_sub(start_ms),
        });
        if stop.update(epoch, val.criterion(cfg.loss), || (params.clone(), pi.clone(), decision.clone(), val)) {
            break;
        }
    }
    let (best_params, best_pi, best_decision, best_val) = stop.state;
    let test = evaluate(&best_params, Masks::Shared(&best_decision.mask()), &data.test, &solver)?;
    Ok(TrainOutcome {
        metrics: RunMetrics {
            initial_val,
            epochs,
            best_epoch: stop.best_epoch,
            best_val,
            test,
            wall_ms: rt.now().saturating_sub(start_ms),
        },
        params: best_params,
        pi: best_pi.into_data(),
        decision: best_decision,
        decisions,
        decision_changes,
        batches,
        da_solves: layer.calls(),
        da_solves_per_batch,
    })
}
