//! α × λ sweeps branching from one shared warmup checkpoint.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::latency::LatencyTable;
use crate::search::{retrain, RetrainConfig, Search, SearchConfig, SearchOutcome};
use crate::space::SuperNetConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub alpha: f64,
    pub lambda: f64,
    pub phi: f64,
    pub loss: f64,
    pub layers: usize,
    pub lat_us: f64,
    pub top1: f64,
    /// Minimal final search loss among the rows sharing this α.
    pub selected: bool,
    /// Not dominated in (latency, accuracy) by any other row.
    pub on_front: bool,
}

pub struct GridReport {
    pub rows: Vec<GridRow>,
    pub outcomes: Vec<SearchOutcome>,
}

impl GridReport {
    /// Selected row for each α, in grid order.
    pub fn selected(&self) -> Vec<&GridRow> {
        self.rows.iter().filter(|r| r.selected).collect()
    }
}

/// Marks the per-α loss minimum (first one on ties).
pub fn mark_selected(rows: &mut [GridRow]) {
    for i in 0..rows.len() {
        let best = rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.alpha == rows[i].alpha)
            .fold(None::<(usize, f64)>, |acc, (j, r)| match acc {
                Some((_, l)) if l <= r.loss => acc,
                _ => Some((j, r.loss)),
            });
        rows[i].selected = best.map(|(j, _)| j) == Some(i);
    }
}

/// Marks rows no other row beats on both latency (lower) and top-1 (higher).
pub fn mark_front(rows: &mut [GridRow]) {
    for i in 0..rows.len() {
        let r = &rows[i];
        let dominated = rows.iter().any(|o| {
            o.lat_us <= r.lat_us && o.top1 >= r.top1 && (o.lat_us < r.lat_us || o.top1 > r.top1)
        });
        rows[i].on_front = !dominated;
    }
}

/// Runs every (α, λ) variant. The warmup runs once; the branches run on
/// `threads` workers (all cores when `None`) and are merged in grid order.
#[allow(clippy::too_many_arguments)]
pub fn grid_search(
    net_config: &SuperNetConfig,
    base: &SearchConfig,
    alphas: &[f64],
    lambdas: &[f64],
    train: &Dataset,
    val: &Dataset,
    lut: &LatencyTable,
    retrain_cfg: &RetrainConfig,
    threads: Option<usize>,
) -> Result<GridReport> {
    if alphas.is_empty() || lambdas.is_empty() {
        return Err(Error::config("grid needs at least one alpha and one lambda"));
    }
    let mut warm = Search::new(net_config, base.clone(), train, lut)?;
    warm.run_warmup()?;
    let checkpoint = warm.checkpoint();

    let variants: Vec<(f64, f64)> = alphas
        .iter()
        .flat_map(|&a| lambdas.iter().map(move |&l| (a, l)))
        .collect();
    let run_one = |&(alpha, lambda): &(f64, f64)| -> Result<(GridRow, SearchOutcome)> {
        let mut cfg = base.clone();
        cfg.alpha = alpha;
        cfg.lambda = lambda;
        let outcome = Search::resume(checkpoint.clone(), cfg.clone(), train, lut)?.run()?;
        let (_, metrics) = retrain(net_config, &outcome.arch, train, val, retrain_cfg)?;
        let row = GridRow {
            alpha,
            lambda,
            phi: cfg.phi,
            loss: outcome.arch.loss.total,
            layers: outcome.arch.active_layers(),
            lat_us: outcome.arch.lat_us,
            top1: metrics.top1,
            selected: false,
            on_front: false,
        };
        Ok((row, outcome))
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder.build().map_err(|e| Error::config(e.to_string()))?;
    let results: Vec<Result<(GridRow, SearchOutcome)>> = pool.install(|| variants.par_iter().map(run_one).collect());

    let mut rows = Vec::with_capacity(results.len());
    let mut outcomes = Vec::with_capacity(results.len());
    for r in results {
        let (row, out) = r?;
        rows.push(row);
        outcomes.push(out);
    }
    mark_selected(&mut rows);
    mark_front(&mut rows);
    Ok(GridReport { rows, outcomes })
}
