//! Plain-text result files: per-epoch metrics CSV, run summaries and
//! random-search tables. Floats use Rust's shortest round-trip formatting so
//! identical runs give identical bytes.

use std::fmt::Write as _;

use opo_core::training::{EvalMetrics, RunMetrics, SearchEntry};

pub const METRICS_HEADER: &str = "epoch,train_loss,val_mse,val_objective,val_regret,wall_ms";

/// One row per epoch, then a `final` row holding the train loss of the
/// selected epoch and the test-split metrics of the selected state.
pub fn metrics_csv(m: &RunMetrics) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for e in &m.epochs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            e.epoch, e.train_loss, e.val.mse, e.val.objective, e.val.regret, e.wall_ms
        );
    }
    let best_loss = m
        .epochs
        .iter()
        .find(|e| e.epoch == m.best_epoch)
        .map_or(String::new(), |e| e.train_loss.to_string());
    let _ = writeln!(
        out,
        "final,{best_loss},{},{},{},{}",
        m.test.mse, m.test.objective, m.test.regret, m.wall_ms
    );
    out
}

fn eval_lines(out: &mut String, prefix: &str, e: &EvalMetrics) {
    let _ = writeln!(out, "{prefix}_mse = {}", e.mse);
    let _ = writeln!(out, "{prefix}_objective = {}", e.objective);
    let _ = writeln!(out, "{prefix}_optimal_objective = {}", e.optimal);
    let _ = writeln!(out, "{prefix}_regret = {}", e.regret);
    let _ = writeln!(out, "{prefix}_relative_regret = {}", e.relative_regret);
}

pub fn summary(m: &RunMetrics) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "epochs_run = {}", m.epochs.len());
    let _ = writeln!(out, "best_epoch = {}", m.best_epoch);
    eval_lines(&mut out, "initial_val", &m.initial_val);
    eval_lines(&mut out, "best_val", &m.best_val);
    eval_lines(&mut out, "test", &m.test);
    out
}

pub const SEARCH_HEADER: &str = "rank,seed,val_mse,val_objective,val_regret,val_relative_regret,selected_tiles";

/// Ranked random-search table; `selected_tiles` lists DA tiles separated by spaces.
pub fn search_csv(entries: &[SearchEntry]) -> String {
    let mut out = String::from(SEARCH_HEADER);
    out.push('\n');
    for (rank, e) in entries.iter().enumerate() {
        let tiles: Vec<String> = e
            .decision
            .selected
            .iter()
            .enumerate()
            .filter(|(_, s)| **s)
            .map(|(i, _)| i.to_string())
            .collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            rank + 1,
            e.seed,
            e.val.mse,
            e.val.objective,
            e.val.regret,
            e.val.relative_regret,
            tiles.join(" ")
        );
    }
    out
}

/// Reads the `seed` and a metric column back from a search table.
pub fn parse_search_csv(text: &str, column: &str) -> Result<Vec<(u64, f64)>, String> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty search table")?.split(',').collect();
    let col = header
        .iter()
        .position(|h| *h == column)
        .ok_or_else(|| format!("search table has no column `{column}`"))?;
    let seed_col = header.iter().position(|h| *h == "seed").ok_or("search table has no seed column")?;
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let cells: Vec<&str> = l.split(',').collect();
            let seed = cells.get(seed_col).and_then(|s| s.parse().ok()).ok_or("bad seed cell")?;
            let v = cells.get(col).and_then(|s| s.parse().ok()).ok_or("bad metric cell")?;
            Ok((seed, v))
        })
        .collect()
}

/// Equal-width histogram of `values` over `[min, max]`; rows `bin_lo,bin_hi,count`.
pub fn histogram_csv(values: &[f64], bins: usize) -> Result<String, String> {
    if values.is_empty() {
        return Err("no values to bin".into());
    }
    let bins = bins.max(1);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let mut out = String::from("bin_lo,bin_hi,count\n");
    for (i, c) in counts.iter().enumerate() {
        let a = lo + i as f64 * width;
        let _ = writeln!(out, "{},{},{c}", a, a + width);
    }
    Ok(out)
}

/// A `k x k` grid of values as CSV rows in tile order.
pub fn grid_csv(values: &[f32], k: usize) -> String {
    let mut out = String::new();
    for row in values.chunks(k) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}
