use std::path::{Path, PathBuf};

use dnas_core::grid::grid_search;
use dnas_core::io::{self, RunConfig};
use dnas_core::latency::LatencyTable;
use dnas_core::search::{retrain as retrain_arch, run_search, SearchOutcome};
use dnas_core::space::{approx_scientific, count_search_space, layer_factors};
use dnas_core::Error;
use serde::Serialize;

use crate::output::{claim_dir, claim_file, now, CliError, CliResult, RunManifest, MANIFEST};
use crate::{BenchArgs, BenchMode, CountArgs, RetrainArgs, SearchArgs};

const THREADS_VAR: &str = "DNAS_THREADS";

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn load_config(path: &Path) -> CliResult<RunConfig> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("config file {} does not exist", path.display())));
    }
    Ok(RunConfig::load(path)?)
}

fn grid_threads() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(None),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| CliError::Usage(format!("{THREADS_VAR}='{v}' is not a positive integer"))),
    }
}

fn write_outcome(dir: &Path, out: &SearchOutcome) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    io::write_search_log(&dir.join("search.csv"), &out.log)?;
    io::write_pruning_log(&dir.join("pruning.csv"), &out.pruning)?;
    io::write_mask_traces(&dir.join("masks"), &out.masks)?;
    io::write_architecture(&dir.join("arch.json"), &out.arch)?;
    Ok(())
}

fn describe(out: &SearchOutcome) -> String {
    out.arch
        .layers
        .iter()
        .map(|l| match l.hidden {
            Some(h) => format!("{}@{h}", l.choice),
            None => l.choice.clone(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Saves the divergence snapshot and turns the error into a runtime failure.
fn diverged(dir: &Path, e: Error) -> CliError {
    match e {
        Error::Diverged { epoch, snapshot } => {
            let path = dir.join("diverged.json");
            match io::write_text(&path, &snapshot) {
                Ok(()) => CliError::Runtime(format!(
                    "search diverged at epoch {epoch}; state written to {}",
                    path.display()
                )),
                Err(w) => CliError::Runtime(format!("search diverged at epoch {epoch}; could not save state: {w}")),
            }
        }
        other => other.into(),
    }
}

pub fn search(a: &SearchArgs) -> CliResult<()> {
    let started = now();
    let mut cfg = load_config(&a.config)?;
    if let Some(l) = &a.lut {
        if !l.is_file() {
            return Err(CliError::Usage(format!("latency table {} does not exist", l.display())));
        }
        cfg.latency.table = Some(absolute(l));
    }
    let mut sc = cfg.search()?.clone();
    if let Some(v) = a.alpha {
        sc.alpha = v;
    }
    if let Some(v) = a.lambda {
        sc.lambda = v;
    }
    if let Some(v) = a.phi {
        sc.phi = v;
    }
    if let Some(v) = a.seed {
        sc.seed = v;
    }
    sc.validate(&cfg.supernet)?;
    let grid = !a.grid_alpha.is_empty() || !a.grid_lambda.is_empty();
    let threads = if grid { grid_threads()? } else { None };
    let (train, val) = cfg.dataset()?;
    let lut = cfg.latency_table()?;
    lut.check_complete(&cfg.supernet)?;

    claim_dir(&a.out, a.force)?;
    io::write_text(&a.out.join("lut.json"), &lut.to_json())?;
    if grid {
        let alphas = if a.grid_alpha.is_empty() { vec![sc.alpha] } else { a.grid_alpha.clone() };
        let lambdas = if a.grid_lambda.is_empty() { vec![sc.lambda] } else { a.grid_lambda.clone() };
        let report = grid_search(&cfg.supernet, &sc, &alphas, &lambdas, &train, &val, &lut, &cfg.retrain, threads)
            .map_err(|e| diverged(&a.out, e))?;
        for (row, out) in report.rows.iter().zip(&report.outcomes) {
            let dir = a.out.join("variants").join(format!("alpha{}_lambda{}", row.alpha, row.lambda));
            write_outcome(&dir, out)?;
            println!(
                "alpha {:<5} lambda {:<5} loss {:.4} lat {:.3} us layers {} top1 {:.3}{}  {}",
                row.alpha,
                row.lambda,
                row.loss,
                row.lat_us,
                row.layers,
                row.top1,
                if row.selected { " *" } else { "" },
                describe(out)
            );
        }
        io::write_pareto(&a.out.join("pareto.csv"), &report.rows)?;
    } else {
        let out = run_search(&cfg.supernet, &sc, &train, &lut).map_err(|e| diverged(&a.out, e))?;
        write_outcome(&a.out, &out)?;
        println!(
            "lat {:.3} us, loss {:.4} (ce {:.4}), {} active layers: {}",
            out.arch.lat_us,
            out.arch.loss.total,
            out.arch.loss.ce,
            out.arch.active_layers(),
            describe(&out)
        );
    }
    let manifest = RunManifest {
        command: if grid { "search-grid" } else { "search" }.into(),
        config: absolute(&a.config),
        seed: sc.seed,
        fingerprint: cfg.supernet.fingerprint(),
        out: absolute(&a.out),
        started,
        finished: now(),
    };
    io::write_json(&a.out.join(MANIFEST), &manifest)?;
    Ok(())
}

pub fn bench(a: &BenchArgs) -> CliResult<()> {
    let cfg = load_config(&a.config)?;
    let table = match a.mode {
        BenchMode::Analytic => LatencyTable::build_analytic(
            &cfg.supernet,
            a.unit_cost.unwrap_or(cfg.latency.unit_cost),
            a.overhead.unwrap_or(cfg.latency.overhead),
        )?,
        BenchMode::Measured => {
            LatencyTable::build_measured(&cfg.supernet, a.repeats.unwrap_or(cfg.latency.repeats), 0)?
        }
    };
    claim_file(&a.out, a.force)?;
    io::write_text(&a.out, &table.to_json())?;
    for w in &table.metadata.warnings {
        eprintln!("warning: {w}");
    }
    println!("{} entries written to {}", table.len(), a.out.display());
    Ok(())
}

pub fn count(a: &CountArgs) -> CliResult<()> {
    let cfg = load_config(&a.config)?;
    let total = count_search_space(&cfg.supernet)?;
    if a.per_layer {
        for (plan, f) in cfg.supernet.layer_plans().iter().zip(layer_factors(&cfg.supernet)) {
            println!("layer {:>2} (stage {} layer {}): {f}", plan.index, plan.stage, plan.layer);
        }
    }
    println!("total: {total}");
    println!("≈{}", approx_scientific(&total));
    Ok(())
}

#[derive(Serialize)]
struct Metrics {
    top1: f64,
    epochs: usize,
    seed: u64,
}

pub fn retrain(a: &RetrainArgs) -> CliResult<()> {
    let started = now();
    if !a.arch.is_file() {
        return Err(CliError::Usage(format!("architecture file {} does not exist", a.arch.display())));
    }
    let arch = io::read_architecture(&a.arch)?;
    let arch_dir = a.arch.parent().map(Path::to_path_buf).unwrap_or_default();
    let config_path = match &a.config {
        Some(p) => p.clone(),
        None => {
            let m = arch_dir.join(MANIFEST);
            if !m.is_file() {
                return Err(CliError::Usage(format!(
                    "no --config given and no {} next to the architecture",
                    MANIFEST
                )));
            }
            let manifest: RunManifest = io::read_json(&m)?;
            manifest.config
        }
    };
    let cfg = load_config(&config_path)?;
    let fingerprint = cfg.supernet.fingerprint();
    if arch.config_hash != fingerprint {
        return Err(CliError::Usage(format!(
            "architecture was sampled from config {} but {} has fingerprint {fingerprint}",
            arch.config_hash,
            config_path.display()
        )));
    }
    arch.validate_against(&cfg.supernet)?;
    let mut rc = cfg.retrain.clone();
    if let Some(v) = a.epochs {
        rc.epochs = v;
    }
    if let Some(v) = a.seed {
        rc.seed = v;
    }
    if let Some(v) = a.lr {
        rc.lr = v;
    }
    let (train, val) = cfg.dataset()?;
    let out = a.out.clone().unwrap_or(arch_dir);
    let metrics_path = out.join("metrics.json");
    claim_file(&metrics_path, a.force)?;
    let (_, m) = retrain_arch(&cfg.supernet, &arch, &train, &val, &rc)?;
    io::write_json(
        &metrics_path,
        &Metrics {
            top1: m.top1,
            epochs: m.epochs,
            seed: m.seed,
        },
    )?;
    println!("top1 {:.4} after {} epochs (seed {})", m.top1, m.epochs, m.seed);
    let manifest = RunManifest {
        command: "retrain".into(),
        config: absolute(&config_path),
        seed: rc.seed,
        fingerprint,
        out: absolute(&out),
        started,
        finished: now(),
    };
    io::write_json(&out.join("retrain_manifest.json"), &manifest)?;
    Ok(())
}
