//! Subcommands of the `opo` binary.
//!
//! Artifacts live under `--out`:
//!
//! ```text
//! dataset/                      instances, manifest.txt, config.hash
//! pretrain/                     checkpoint/, metrics.csv, summary.txt
//! search/                       search.csv, top.txt (best seeds), median.txt
//! train/<pi>_<w>_<loss>_warm<seed>/
//!                               checkpoint/, metrics.csv, summary.txt, pi.opot, route.txt
//! eval/                         eval.txt
//! plots/<name>/                 numeric CSV grids and histograms
//! ```
//!
//! Each command also writes `run.txt` next to its outputs with the version
//! string, the command line and the effective configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use opo_core::datagen::{generate_dataset, DatasetSplit, Split};
use opo_core::model::ModelParams;
use opo_core::solvers::Clock;
use opo_core::training::{
    evaluate, pretrain, rank_entries, sample_pi, score_predictions, score_seed, train_opo, warm_starts, LossMode,
    Masks, PiMode, Runtime, SearchEntry, TrainOutcome, WeightMode,
};

use crate::clock::WallClock;
use crate::config::{self, loss_name, pi_name, w_name, Settings};
use crate::report;
use crate::store;

pub const VERSION: &str = match option_env!("OPO_GIT_DESCRIBE") {
    Some(v) => v,
    None => concat!("v", env!("CARGO_PKG_VERSION")),
};

#[derive(Debug, Parser)]
#[command(name = "opo", version, about = "Optimise-predict-optimise experiments on synthetic terrain maps")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Global {
    /// `key = value` configuration file; unset keys keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Root directory of every artifact.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// Worker threads for the random search.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Record wall-clock times in metrics files (makes them non-reproducible).
    #[arg(long, global = true)]
    pub timing: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PiArg {
    Fixed,
    Learnt,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum WArg {
    Finetune,
    Joint,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LossArg {
    Pfl,
    Dfl,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Val,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    Dataset,
    /// Pretrain the model with random masks.
    Pretrain {
        #[arg(long)]
        loss: Option<LossArg>,
    },
    /// Score random surrogate weights with the frozen pretrained model.
    Search {
        /// Number of best seeds to report as warm starts.
        #[arg(long)]
        top: Option<usize>,
        /// Checkpoint directory (default: <out>/pretrain/checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train one ablation combination, or the whole grid with `--grid`.
    Train {
        #[arg(long)]
        pi: Option<PiArg>,
        #[arg(long)]
        w: Option<WArg>,
        #[arg(long)]
        loss: Option<LossArg>,
        /// Warm-start seed (default: best seed in <out>/search/top.txt).
        #[arg(long)]
        warm: Option<u64>,
        /// Every pi x w x loss combination for every warm start (top.txt and median.txt).
        #[arg(long, conflicts_with_all = ["pi", "w", "loss", "warm"])]
        grid: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint under a DA decision.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Warm-start seed whose pi gives the DA decision.
        #[arg(long, conflicts_with = "pi_file")]
        warm: Option<u64>,
        /// Tensor file with surrogate weights, e.g. a trained run's pi.opot.
        #[arg(long)]
        pi_file: Option<PathBuf>,
        /// Use the true costs as predictions.
        #[arg(long)]
        oracle: bool,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Export plot-ready CSV grids and histograms from run directories.
    Plotdata {
        /// Search or train run directories.
        runs: Vec<PathBuf>,
    },
}

struct Ctx {
    settings: Settings,
    out: PathBuf,
    threads: usize,
    runtime: Runtime,
    command_line: String,
}

impl Ctx {
    fn dataset_dir(&self) -> PathBuf {
        self.out.join("dataset")
    }

    fn load_dataset(&self) -> Result<DatasetSplit> {
        let dir = self.dataset_dir();
        if !dir.join(store::MANIFEST).is_file() {
            bail!(
                "missing {}: run `opo dataset` with the same --out first",
                dir.join(store::MANIFEST).display()
            );
        }
        store::read_dataset(&dir)
    }

    fn load_checkpoint(&self, explicit: Option<&Path>) -> Result<ModelParams> {
        let dir = explicit.map_or_else(|| self.out.join("pretrain").join("checkpoint"), Path::to_path_buf);
        if !dir.join(store::MODEL_DESC).is_file() {
            bail!("missing {}: run `opo pretrain` first or pass --checkpoint", dir.join(store::MODEL_DESC).display());
        }
        store::read_checkpoint(&dir)
    }

    fn write_run_manifest(&self, dir: &Path) -> Result<()> {
        let mut text = String::new();
        let _ = writeln!(text, "version = {VERSION}");
        let _ = writeln!(text, "command = {}", self.command_line);
        text.push_str(&config::render(&self.settings));
        fs::write(dir.join("run.txt"), text).with_context(|| format!("writing {}", dir.join("run.txt").display()))
    }
}

fn create(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn loss_mode(a: LossArg) -> LossMode {
    match a {
        LossArg::Pfl => LossMode::Pfl,
        LossArg::Dfl => LossMode::Dfl,
    }
}

/// Parses `args` and runs the command; returns what the binary prints.
pub fn run_from<I, T>(args: I) -> Result<String>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(&args).map_err(|e| anyhow!("{e}"))?;
    let line = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect::<Vec<_>>().join(" ");
    run(cli, line)
}

pub fn run(cli: Cli, command_line: String) -> Result<String> {
    let mut settings = match &cli.global.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            config::parse(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => Settings::default(),
    };
    if let Some(seed) = cli.global.seed {
        settings.experiment.seed = seed;
    }
    let clock: Arc<dyn Clock> = Arc::new(WallClock::new());
    let ctx = Ctx {
        settings,
        out: cli.global.out.clone(),
        threads: cli.global.threads.max(1),
        runtime: Runtime {
            solver_clock: Some(clock.clone()),
            report_clock: cli.global.timing.then_some(clock),
        },
        command_line,
    };
    match cli.command {
        Command::Dataset => cmd_dataset(&ctx),
        Command::Pretrain { loss } => {
            let mut ctx = ctx;
            if let Some(l) = loss {
                ctx.settings.experiment.loss = loss_mode(l);
            }
            cmd_pretrain(&ctx)
        }
        Command::Search { top, checkpoint } => {
            let mut ctx = ctx;
            if let Some(t) = top {
                ctx.settings.top = t.max(1);
            }
            cmd_search(&ctx, checkpoint.as_deref())
        }
        Command::Train {
            pi,
            w,
            loss,
            warm,
            grid,
            checkpoint,
        } => {
            let mut ctx = ctx;
            let e = &mut ctx.settings.experiment;
            if let Some(p) = pi {
                e.pi_mode = match p {
                    PiArg::Fixed => PiMode::Fixed,
                    PiArg::Learnt => PiMode::Learnt,
                };
            }
            if let Some(w) = w {
                e.w_mode = match w {
                    WArg::Finetune => WeightMode::Finetune,
                    WArg::Joint => WeightMode::Joint,
                };
            }
            if let Some(l) = loss {
                e.loss = loss_mode(l);
            }
            if grid {
                cmd_train_grid(&ctx, checkpoint.as_deref())
            } else {
                cmd_train(&ctx, warm, checkpoint.as_deref())
            }
        }
        Command::Eval {
            checkpoint,
            warm,
            pi_file,
            oracle,
            split,
        } => cmd_eval(&ctx, checkpoint.as_deref(), warm, pi_file.as_deref(), oracle, split),
        Command::Plotdata { runs } => cmd_plotdata(&ctx, &runs),
    }
}

fn cmd_dataset(ctx: &Ctx) -> Result<String> {
    let cfg = ctx.settings.experiment.dataset_config();
    let dir = ctx.dataset_dir();
    let counts = format!("train={} val={} test={}", cfg.train, cfg.val, cfg.test);
    if store::dataset_up_to_date(&dir, &cfg) {
        return Ok(format!("up-to-date {counts}\n"));
    }
    let data = generate_dataset(&cfg)?;
    store::write_dataset(&dir, &cfg, &data)?;
    ctx.write_run_manifest(&dir)?;
    Ok(format!("{counts}\n"))
}

fn write_outcome(ctx: &Ctx, dir: &Path, o: &TrainOutcome) -> Result<()> {
    create(dir)?;
    store::write_checkpoint(&dir.join("checkpoint"), &o.params)?;
    fs::write(dir.join("metrics.csv"), report::metrics_csv(&o.metrics))?;
    fs::write(dir.join("summary.txt"), report::summary(&o.metrics))?;
    ctx.write_run_manifest(dir)
}

fn cmd_pretrain(ctx: &Ctx) -> Result<String> {
    let data = ctx.load_dataset()?;
    let o = pretrain(&ctx.settings.experiment, &data, &ctx.runtime)?;
    let dir = ctx.out.join("pretrain");
    write_outcome(ctx, &dir, &o)?;
    Ok(format!(
        "pretrained ({}) best epoch {} val_mse={} val_regret={}\n",
        loss_name(ctx.settings.experiment.loss),
        o.metrics.best_epoch,
        o.metrics.best_val.mse,
        o.metrics.best_val.regret
    ))
}

/// Scores seeds `0..n` on `threads` workers; worker `w` takes seeds
/// `w, w + threads, ...` with its own copy of the model.
pub fn parallel_search(
    cfg: &opo_core::training::ExperimentConfig,
    data: &DatasetSplit,
    params: &ModelParams,
    n: usize,
    threads: usize,
    rt: &Runtime,
) -> Result<Vec<SearchEntry>> {
    let threads = threads.clamp(1, n.max(1));
    let mut entries: Vec<SearchEntry> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                let replica = params.clone();
                scope.spawn(move || {
                    (w..n)
                        .step_by(threads)
                        .map(|seed| score_seed(cfg, data, &replica, seed as u64, rt))
                        .collect::<opo_core::Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("search worker panicked"))
            .collect::<opo_core::Result<Vec<Vec<_>>>>()
    })?
    .into_iter()
    .flatten()
    .collect();
    entries.sort_by_key(|e| e.seed);
    rank_entries(&mut entries, cfg.loss);
    Ok(entries)
}

fn cmd_search(ctx: &Ctx, checkpoint: Option<&Path>) -> Result<String> {
    let data = ctx.load_dataset()?;
    let params = ctx.load_checkpoint(checkpoint)?;
    let cfg = &ctx.settings.experiment;
    let ranked = parallel_search(cfg, &data, &params, cfg.search_seeds, ctx.threads, &ctx.runtime)?;
    let dir = ctx.out.join("search");
    create(&dir)?;
    fs::write(dir.join("search.csv"), report::search_csv(&ranked))?;
    let top = ctx.settings.top.min(ranked.len());
    let starts = warm_starts(&ranked, top, cfg.loss);
    let lines = |seeds: &[u64]| seeds.iter().map(|s| format!("{s}\n")).collect::<String>();
    fs::write(dir.join("top.txt"), lines(&starts[..top]))?;
    fs::write(dir.join("median.txt"), lines(&starts[top..]))?;
    ctx.write_run_manifest(&dir)?;
    let mut msg = String::new();
    for e in ranked.iter().take(ctx.settings.top) {
        let _ = writeln!(
            msg,
            "seed {} val_regret={} val_relative_regret={}",
            e.seed, e.val.regret, e.val.relative_regret
        );
    }
    let seeds: Vec<String> = starts.iter().map(u64::to_string).collect();
    let _ = writeln!(msg, "warm starts: {}", seeds.join(" "));
    Ok(msg)
}

fn read_seeds(path: &Path) -> Result<Vec<u64>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("missing {}: run `opo search` first or pass --warm", path.display()))?;
    text.split_whitespace()
        .map(|s| s.parse().map_err(|_| anyhow!("{}: bad seed `{s}`", path.display())))
        .collect()
}

/// The best seeds from `top.txt`.
fn read_top(ctx: &Ctx) -> Result<Vec<u64>> {
    read_seeds(&ctx.out.join("search").join("top.txt"))
}

/// Every warm start: the best seeds, then the seed nearest the median score.
fn read_warm_starts(ctx: &Ctx) -> Result<Vec<u64>> {
    let mut seeds = read_top(ctx)?;
    seeds.extend(read_seeds(&ctx.out.join("search").join("median.txt"))?);
    Ok(seeds)
}

fn run_name(cfg: &opo_core::training::ExperimentConfig, warm: u64) -> String {
    format!("{}_{}_{}_warm{warm}", pi_name(cfg.pi_mode), w_name(cfg.w_mode), loss_name(cfg.loss))
}

fn train_one(ctx: &Ctx, warm: u64, init: Option<&ModelParams>, data: &DatasetSplit) -> Result<(PathBuf, TrainOutcome)> {
    let cfg = &ctx.settings.experiment;
    let pi = sample_pi(cfg, warm);
    let o = train_opo(cfg, data, &pi, init, &ctx.runtime)?;
    let dir = ctx.out.join("train").join(run_name(cfg, warm));
    write_outcome(ctx, &dir, &o)?;
    store::write_vector(&dir.join("pi.opot"), &o.pi)?;
    let route: Vec<String> = o.decision.route.iter().map(usize::to_string).collect();
    fs::write(dir.join("route.txt"), format!("{}\n", route.join(" ")))?;
    Ok((dir, o))
}

fn cmd_train(ctx: &Ctx, warm: Option<u64>, checkpoint: Option<&Path>) -> Result<String> {
    let data = ctx.load_dataset()?;
    let warm = match warm {
        Some(w) => w,
        None => *read_top(ctx)?.first().ok_or_else(|| anyhow!("top.txt lists no seeds"))?,
    };
    let init = match ctx.settings.experiment.w_mode {
        WeightMode::Finetune => Some(ctx.load_checkpoint(checkpoint)?),
        WeightMode::Joint => None,
    };
    let (dir, o) = train_one(ctx, warm, init.as_ref(), &data)?;
    Ok(format!(
        "{}: best epoch {} val_regret={} test_relative_regret={} da_solves={}\n",
        dir.display(),
        o.metrics.best_epoch,
        o.metrics.best_val.regret,
        o.metrics.test.relative_regret,
        o.da_solves
    ))
}

fn cmd_train_grid(ctx: &Ctx, checkpoint: Option<&Path>) -> Result<String> {
    let data = ctx.load_dataset()?;
    let starts = read_warm_starts(ctx)?;
    let pretrained = ctx.load_checkpoint(checkpoint)?;
    let mut table = String::from("loss,pi,w,warm,val_regret,val_relative_regret,test_regret,test_relative_regret\n");
    for loss in [LossMode::Pfl, LossMode::Dfl] {
        for pi in [PiMode::Fixed, PiMode::Learnt] {
            for w in [WeightMode::Finetune, WeightMode::Joint] {
                let mut sub = Ctx {
                    settings: ctx.settings.clone(),
                    out: ctx.out.clone(),
                    threads: ctx.threads,
                    runtime: ctx.runtime.clone(),
                    command_line: ctx.command_line.clone(),
                };
                sub.settings.experiment.loss = loss;
                sub.settings.experiment.pi_mode = pi;
                sub.settings.experiment.w_mode = w;
                for &warm in &starts {
                    let init = (w == WeightMode::Finetune).then_some(&pretrained);
                    let (_, o) = train_one(&sub, warm, init, &data)?;
                    let m = &o.metrics;
                    let _ = writeln!(
                        table,
                        "{},{},{},{warm},{},{},{},{}",
                        loss_name(loss),
                        pi_name(pi),
                        w_name(w),
                        m.best_val.regret,
                        m.best_val.relative_regret,
                        m.test.regret,
                        m.test.relative_regret
                    );
                }
            }
        }
    }
    let dir = ctx.out.join("train");
    create(&dir)?;
    fs::write(dir.join("grid.csv"), &table)?;
    Ok(table)
}

fn cmd_eval(
    ctx: &Ctx,
    checkpoint: Option<&Path>,
    warm: Option<u64>,
    pi_file: Option<&Path>,
    oracle: bool,
    split: SplitArg,
) -> Result<String> {
    let data = ctx.load_dataset()?;
    let cfg = &ctx.settings.experiment;
    let split = match split {
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let instances = data.get(split);
    let solver = cfg.shortest_path();
    let m = if oracle {
        let preds: Vec<Vec<f32>> = instances.iter().map(|i| i.theta.data().to_vec()).collect();
        score_predictions(&solver, instances, &preds)?
    } else {
        let params = ctx.load_checkpoint(checkpoint)?;
        let pi = match (warm, pi_file) {
            (_, Some(path)) => store::read_vector(path)?,
            (Some(w), None) => sample_pi(cfg, w),
            (None, None) => sample_pi(cfg, *read_top(ctx)?.first().ok_or_else(|| anyhow!("top.txt lists no seeds"))?),
        };
        let decision = ctx.runtime.da_layer(cfg).solve_decision(&pi)?;
        evaluate(&params, Masks::Shared(&decision.mask()), instances, &solver)?
    };
    let text = format!(
        "split = {}\nmse = {}\nobjective = {}\noptimal_objective = {}\nregret = {}\nrelative_regret = {:?}\n",
        split.name(),
        m.mse,
        m.objective,
        m.optimal,
        m.regret,
        m.relative_regret
    );
    let dir = ctx.out.join("eval");
    create(&dir)?;
    fs::write(dir.join("eval.txt"), &text)?;
    ctx.write_run_manifest(&dir)?;
    Ok(text)
}

fn cmd_plotdata(ctx: &Ctx, runs: &[PathBuf]) -> Result<String> {
    if runs.is_empty() {
        bail!("plotdata needs at least one search or train run directory");
    }
    let cfg = &ctx.settings.experiment;
    let k = cfg.k;
    let mut msg = String::new();
    let mut data = None;
    for run in runs {
        let name = run
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| anyhow!("cannot name run directory {}", run.display()))?;
        let dir = ctx.out.join("plots").join(&name);
        create(&dir)?;
        let search = run.join("search.csv");
        let pi_path = run.join("pi.opot");
        if search.is_file() {
            let text = fs::read_to_string(&search)?;
            for column in ["val_regret", "val_relative_regret", "val_mse"] {
                let values: Vec<f64> = report::parse_search_csv(&text, column)
                    .map_err(|e| anyhow!("{}: {e}", search.display()))?
                    .into_iter()
                    .map(|(_, v)| v)
                    .collect();
                let hist = report::histogram_csv(&values, 10).map_err(|e| anyhow!("{}: {e}", search.display()))?;
                fs::write(dir.join(format!("hist_{column}.csv")), hist)?;
            }
            let _ = writeln!(msg, "{}: histograms", dir.display());
        } else if pi_path.is_file() {
            if data.is_none() {
                data = Some(ctx.load_dataset()?);
            }
            let data = data.as_ref().expect("loaded above");
            let inst = data.test.first().ok_or_else(|| anyhow!("dataset has no test instances"))?;
            let pi = store::read_vector(&pi_path)?;
            if pi.len() != k * k {
                bail!("{}: {} weights do not fit a {k}x{k} grid", pi_path.display(), pi.len());
            }
            let params = store::read_checkpoint(&run.join("checkpoint"))?;
            let decision = ctx.runtime.da_layer(cfg).solve_decision(&pi)?;
            let s = decision.mask();
            let theta_hat = opo_core::training::predict_costs(&params, Masks::Shared(&s), std::slice::from_ref(inst))?
                .remove(0);
            let solver = cfg.shortest_path();
            let x_hat = solver.solve(&theta_hat)?.indicator();
            let x_true = solver.solve(inst.theta.data())?.indicator();
            let panels: [(&str, &[f32]); 6] = [
                ("pi", &pi),
                ("s_star", &s),
                ("theta_hat", &theta_hat),
                ("x_hat", &x_hat),
                ("theta", inst.theta.data()),
                ("x_true", &x_true),
            ];
            for (panel, values) in panels {
                fs::write(dir.join(format!("{panel}.csv")), report::grid_csv(values, k))?;
            }
            let _ = writeln!(msg, "{}: panels", dir.display());
        } else {
            bail!("{} holds neither search.csv nor pi.opot", run.display());
        }
    }
    Ok(msg)
}
