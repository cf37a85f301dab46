//! Run configuration documents and artifact writers.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::grid::GridRow;
use crate::latency::{LatencyTable, TableMode};
use crate::search::{EpochRecord, MaskRecord, PruneEvent, RetrainConfig, SampledArchitecture, SearchConfig};
use crate::space::SuperNetConfig;

fn default_train_fraction() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: Option<SyntheticSpec>,
    /// CSV file, relative to the config file.
    pub csv: Option<PathBuf>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Seed of the train/validation split.
    #[serde(default)]
    pub split_seed: u64,
}

fn default_unit_cost() -> f64 {
    0.001
}
fn default_overhead() -> f64 {
    1.0
}
fn default_repeats() -> usize {
    9
}
fn default_mode() -> TableMode {
    TableMode::Analytic
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyConfig {
    #[serde(default = "default_mode")]
    pub mode: TableMode,
    #[serde(default = "default_unit_cost")]
    pub unit_cost: f64,
    #[serde(default = "default_overhead")]
    pub overhead: f64,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Prebuilt table, relative to the config file.
    pub table: Option<PathBuf>,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        LatencyConfig {
            mode: default_mode(),
            unit_cost: default_unit_cost(),
            overhead: default_overhead(),
            repeats: default_repeats(),
            table: None,
        }
    }
}

/// One TOML document: `[supernet]`, `[search]`, `[data]`, `[latency]`,
/// `[retrain]`. Only `[supernet]` is required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub supernet: SuperNetConfig,
    pub search: Option<SearchConfig>,
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub latency: LatencyConfig,
    #[serde(default)]
    pub retrain: RetrainConfig,
    /// Directory the relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.supernet.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn search(&self) -> Result<&SearchConfig> {
        self.search.as_ref().ok_or_else(|| Error::config("config has no [search] section"))
    }

    /// Loads the dataset and returns its (train, validation) split.
    pub fn dataset(&self) -> Result<(Dataset, Dataset)> {
        let d = self.data.as_ref().ok_or_else(|| Error::config("config has no [data] section"))?;
        let ds = match (&d.synthetic, &d.csv) {
            (Some(spec), None) => Dataset::synthetic(spec)?,
            (None, Some(p)) => Dataset::from_csv(&self.resolve(p))?,
            _ => return Err(Error::config("[data] needs exactly one of 'synthetic' or 'csv'")),
        };
        ds.split(d.train_fraction, d.split_seed)
    }

    /// Loads the configured table, or builds one.
    pub fn latency_table(&self) -> Result<LatencyTable> {
        let l = &self.latency;
        if let Some(p) = &l.table {
            let p = self.resolve(p);
            if !p.exists() {
                return Err(Error::config(format!("latency table {} does not exist", p.display())));
            }
            return LatencyTable::load(&p);
        }
        match l.mode {
            TableMode::Analytic => LatencyTable::build_analytic(&self.supernet, l.unit_cost, l.overhead),
            TableMode::Measured => LatencyTable::build_measured(&self.supernet, l.repeats, 0),
        }
    }
}

fn create(path: &Path) -> Result<std::fs::File> {
    std::fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::io(path, std::io::Error::other(e.to_string()))
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    s.push('\n');
    write_text(path, &s)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
}

/// Columns: epoch, phase, ce, lat_us, loss, live_candidates, threshold.
pub fn write_search_log(path: &Path, log: &[EpochRecord]) -> Result<()> {
    write_rows(path, log)
}

#[derive(Serialize)]
struct PruneRow<'a> {
    epoch: usize,
    threshold: f64,
    layer: usize,
    removed: String,
    injected: &'a str,
    forced: bool,
}

pub fn write_pruning_log(path: &Path, events: &[PruneEvent]) -> Result<()> {
    let rows: Vec<PruneRow> = events
        .iter()
        .map(|e| PruneRow {
            epoch: e.epoch,
            threshold: e.threshold,
            layer: e.layer,
            removed: e.removed.join(";"),
            injected: e.injected.as_deref().unwrap_or(""),
            forced: e.forced,
        })
        .collect();
    write_rows(path, &rows)
}

#[derive(Serialize)]
struct MaskRow {
    epoch: usize,
    iteration: usize,
    progress: f64,
    signal: f64,
    s: f64,
    l: f64,
    small_mask: usize,
    large_mask: usize,
    reset: bool,
    frozen: bool,
}

/// One CSV per Prunode, `layer<L>_<variant>.csv`, inside `dir`.
pub fn write_mask_traces(dir: &Path, records: &[MaskRecord]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut groups: BTreeMap<(usize, &str), Vec<MaskRow>> = BTreeMap::new();
    for r in records {
        groups.entry((r.layer, r.variant.as_str())).or_default().push(MaskRow {
            epoch: r.epoch,
            iteration: r.iteration,
            progress: r.progress,
            signal: r.signal,
            s: r.s,
            l: r.l,
            small_mask: r.small_mask,
            large_mask: r.large_mask,
            reset: r.reset,
            frozen: r.frozen,
        });
    }
    let mut paths = Vec::new();
    for ((layer, variant), rows) in groups {
        let p = dir.join(format!("layer{layer}_{variant}.csv"));
        write_rows(&p, &rows)?;
        paths.push(p);
    }
    Ok(paths)
}

/// Columns: alpha, lambda, phi, loss, layers, lat_us, top1, selected, on_front.
pub fn write_pareto(path: &Path, rows: &[GridRow]) -> Result<()> {
    write_rows(path, rows)
}

pub fn write_architecture(path: &Path, arch: &SampledArchitecture) -> Result<()> {
    write_json(path, arch)
}

pub fn read_architecture(path: &Path) -> Result<SampledArchitecture> {
    read_json(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    const DOC: &str = r#"
[supernet]
input_dim = 8
classes = 2
stem_filters = 8
granularity = 8
max_expansion = 2.0

[[supernet.stages]]
kind = "irb"
layers = 1
filters = 8
activation = "relu"
variants = [{ kernel = "k3" }]

[search]
alpha = 0.5

[search.threshold]
kind = "linear"
t_initial = 0.2
t_final = 0.55
e_warmup = 2
e_total = 6

[data]
synthetic = { classes = 2, dim = 8, samples = 100, noise = 0.5, seed = 3 }
"#;

    #[test]
    fn parses_sections_with_defaults() {
        let cfg = RunConfig::from_toml(DOC).unwrap();
        let s = cfg.search().unwrap();
        assert_eq!((s.alpha, s.beta, s.batch_size, s.theta_fraction), (0.5, 0.6, 32, 0.2));
        assert_eq!(cfg.latency.mode, TableMode::Analytic);
        let (tr, va) = cfg.dataset().unwrap();
        assert_eq!((tr.len(), va.len()), (80, 20));
        cfg.latency_table().unwrap().check_complete(&cfg.supernet).unwrap();
    }

    #[test]
    fn errors_name_the_line() {
        let bad = DOC.replace("classes = 2\nstem", "classes = \"two\"\nstem");
        match RunConfig::from_toml(&bad) {
            Err(Error::Config(m)) => assert!(m.contains("line 4"), "{m}"),
            other => panic!("{other:?}"),
        }
        let unknown = DOC.replace("alpha = 0.5", "alpha = 0.5\ngamma = 1");
        assert!(RunConfig::from_toml(&unknown).is_err());
    }
}
