//! Latency lookup table and the differentiable expected-latency term.
//!
//! Entries are keyed by `(global layer index, variant identity, hidden
//! width)`. Blocks without an inner hidden dimension (conv blocks, the stem,
//! the head and skip connections) use hidden width 0. All values are μs.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search::SampledArchitecture;
use crate::space::{BlockKind, LayerPlan, SuperNetConfig};
use crate::supernet::{BlockWeights, Binder, ParamStore, SuperNet};
use crate::tensor::{Graph, Tensor, Var};

pub const STEM: &str = "stem";
pub const HEAD: &str = "head";
pub const SKIP: &str = "skip";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LatencyEntryKey {
    pub layer: usize,
    pub variant: String,
    pub hidden: usize,
}

impl LatencyEntryKey {
    pub fn new(layer: usize, variant: &str, hidden: usize) -> Self {
        LatencyEntryKey {
            layer,
            variant: variant.to_string(),
            hidden,
        }
    }
}

impl std::fmt::Display for LatencyEntryKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(layer {}, {}, hidden {})", self.layer, self.variant, self.hidden)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableMode {
    Analytic,
    Measured,
}

/// Fields are declared in alphabetical order so the JSON keys come out sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableMetadata {
    pub config_hash: String,
    pub granularity: usize,
    pub host: Option<String>,
    pub mode: TableMode,
    pub overhead_us: Option<f64>,
    pub repeats: Option<usize>,
    pub timer_resolution_ns: Option<f64>,
    pub timestamp: Option<String>,
    pub unit_cost_us: Option<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyTable {
    pub metadata: TableMetadata,
    entries: BTreeMap<LatencyEntryKey, f64>,
}

#[derive(Serialize, Deserialize)]
struct EntryJson {
    hidden: usize,
    lat_us: f64,
    layer: usize,
    variant: String,
}

#[derive(Serialize, Deserialize)]
struct TableJson {
    entries: Vec<EntryJson>,
    metadata: TableMetadata,
}

/// Rounds to 9 significant digits.
fn sig9(v: f64) -> f64 {
    format!("{v:.8e}").parse().unwrap_or(v)
}

/// Multiply-accumulate counts of the desk-scale blocks.
pub mod macs {
    pub fn dense(inputs: usize, outputs: usize) -> usize {
        inputs * outputs
    }

    /// Expand and project, plus the SE gate (mean and rescale over the
    /// hidden lanes) when present.
    pub fn bottleneck(inputs: usize, hidden: usize, outputs: usize, se: bool) -> usize {
        inputs * hidden + hidden * outputs + if se { 2 * hidden } else { 0 }
    }
}

/// Every key a complete table must hold for `config`.
pub fn required_keys(config: &SuperNetConfig) -> Vec<LatencyEntryKey> {
    let mut keys = vec![LatencyEntryKey::new(0, STEM, 0)];
    for lp in config.layer_plans() {
        for v in &lp.variants {
            for w in v.widths(config.granularity) {
                keys.push(LatencyEntryKey::new(lp.index, &v.id, w.unwrap_or(0)));
            }
        }
        if lp.skippable {
            keys.push(LatencyEntryKey::new(lp.index, SKIP, 0));
        }
    }
    keys.push(LatencyEntryKey::new(config.head_index(), HEAD, 0));
    keys
}

impl LatencyTable {
    pub fn empty_analytic(granularity: usize) -> Self {
        LatencyTable {
            metadata: TableMetadata {
                config_hash: String::new(),
                granularity,
                host: None,
                mode: TableMode::Analytic,
                overhead_us: None,
                repeats: None,
                timer_resolution_ns: None,
                timestamp: None,
                unit_cost_us: None,
                warnings: Vec::new(),
            },
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: LatencyEntryKey, lat_us: f64) {
        self.entries.insert(key, lat_us);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&LatencyEntryKey, &f64)> {
        self.entries.iter()
    }

    pub fn get(&self, layer: usize, variant: &str, hidden: usize) -> Result<f64> {
        let key = LatencyEntryKey::new(layer, variant, hidden);
        self.entries
            .get(&key)
            .copied()
            .ok_or_else(|| Error::MissingLatency(key.to_string()))
    }

    /// Deterministic cost model: `unit_cost` μs per multiply-accumulate plus
    /// a fixed `overhead` per block. Skip connections cost nothing.
    pub fn build_analytic(config: &SuperNetConfig, unit_cost: f64, overhead: f64) -> Result<Self> {
        if !(unit_cost > 0.0) || !(overhead >= 0.0) {
            return Err(Error::config("unit_cost must be positive and overhead non-negative"));
        }
        config.validate()?;
        let mut t = LatencyTable::empty_analytic(config.granularity);
        t.metadata.config_hash = config.fingerprint();
        t.metadata.unit_cost_us = Some(unit_cost);
        t.metadata.overhead_us = Some(overhead);
        let cost = |m: usize| sig9(unit_cost * m as f64 + overhead);

        t.insert(
            LatencyEntryKey::new(0, STEM, 0),
            cost(macs::dense(config.input_dim, config.stem_filters)),
        );
        for lp in config.layer_plans() {
            for v in &lp.variants {
                for w in v.widths(config.granularity) {
                    let m = match (lp.kind, w) {
                        (BlockKind::Conv, _) | (_, None) => macs::dense(lp.in_channels, lp.out_channels),
                        (BlockKind::InvertedBottleneck, Some(h)) => {
                            macs::bottleneck(lp.in_channels, h, lp.out_channels, v.se)
                        }
                    };
                    t.insert(LatencyEntryKey::new(lp.index, &v.id, w.unwrap_or(0)), cost(m));
                }
            }
            if lp.skippable {
                t.insert(LatencyEntryKey::new(lp.index, SKIP, 0), 0.0);
            }
        }
        t.insert(
            LatencyEntryKey::new(config.head_index(), HEAD, 0),
            cost(macs::dense(config.head_in(), config.classes)),
        );
        Ok(t)
    }

    /// Wall-clock table: median of `repeats` timed single-sample forward
    /// passes per block after a short warm-up.
    pub fn build_measured(config: &SuperNetConfig, repeats: usize, seed: u64) -> Result<Self> {
        if repeats < 3 {
            return Err(Error::config("measured mode needs at least 3 repeats"));
        }
        config.validate()?;
        let resolution = timer_resolution_ns();
        let mut t = LatencyTable::empty_analytic(config.granularity);
        t.metadata.mode = TableMode::Measured;
        t.metadata.config_hash = config.fingerprint();
        t.metadata.repeats = Some(repeats);
        t.metadata.host = Some(host_description());
        t.metadata.timestamp = Some(unix_timestamp());
        t.metadata.timer_resolution_ns = Some(resolution);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let mut cache: BTreeMap<(BlockKind, usize, usize, bool, usize), f64> = BTreeMap::new();
        let record = |t: &mut LatencyTable, key: LatencyEntryKey, us: f64| {
            if us * 1e3 < 10.0 * resolution {
                t.metadata
                    .warnings
                    .push(format!("{key}: median {us:.3} us is below 10x timer resolution"));
            }
            t.insert(key, sig9(us));
        };

        let stem = BlockWeights::dense(&mut store, &mut rng, config.input_dim, config.stem_filters, config.stem_activation);
        let us = time_block(&store, &stem, config.input_dim, None, repeats)?;
        record(&mut t, LatencyEntryKey::new(0, STEM, 0), us);

        for lp in config.layer_plans() {
            for v in &lp.variants {
                for w in v.widths(config.granularity) {
                    let sig = (lp.kind, lp.in_channels, lp.out_channels, v.se, w.unwrap_or(0));
                    let us = match cache.get(&sig) {
                        Some(&us) => us,
                        None => {
                            let weights = block_for(&mut store, &mut rng, &lp, v.se, w);
                            let us = time_block(&store, &weights, lp.in_channels, w, repeats)?;
                            cache.insert(sig, us);
                            us
                        }
                    };
                    record(&mut t, LatencyEntryKey::new(lp.index, &v.id, w.unwrap_or(0)), us);
                }
            }
            if lp.skippable {
                let us = time_skip(lp.in_channels, repeats);
                t.insert(LatencyEntryKey::new(lp.index, SKIP, 0), sig9(us));
            }
        }
        let head = BlockWeights::head(&mut store, &mut rng, config.head_in(), config.classes);
        let us = time_block(&store, &head, config.head_in(), None, repeats)?;
        record(&mut t, LatencyEntryKey::new(config.head_index(), HEAD, 0), us);
        Ok(t)
    }

    /// Fails listing every key `config` needs but the table lacks.
    pub fn check_complete(&self, config: &SuperNetConfig) -> Result<()> {
        let missing: Vec<String> = required_keys(config)
            .into_iter()
            .filter(|k| !self.entries.contains_key(k))
            .map(|k| k.to_string())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::IncompleteTable(missing))
        }
    }

    /// Latency of the fixed stem and head.
    pub fn fixed_latency(&self, config: &SuperNetConfig) -> Result<f64> {
        Ok(self.get(0, STEM, 0)? + self.get(config.head_index(), HEAD, 0)?)
    }

    pub fn to_json(&self) -> String {
        let doc = TableJson {
            entries: self
                .entries
                .iter()
                .map(|(k, &v)| EntryJson {
                    hidden: k.hidden,
                    lat_us: sig9(v),
                    layer: k.layer,
                    variant: k.variant.clone(),
                })
                .collect(),
            metadata: self.metadata.clone(),
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("table serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TableJson = serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        let mut entries = BTreeMap::new();
        for e in doc.entries {
            if !(e.lat_us >= 0.0 && e.lat_us.is_finite()) {
                return Err(Error::Serde(format!("entry ({}, {}, {}) has invalid latency", e.layer, e.variant, e.hidden)));
            }
            entries.insert(LatencyEntryKey::new(e.layer, &e.variant, e.hidden), e.lat_us);
        }
        Ok(LatencyTable {
            metadata: doc.metadata,
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn block_for(store: &mut ParamStore, rng: &mut ChaCha8Rng, lp: &LayerPlan, se: bool, hidden: Option<usize>) -> BlockWeights {
    match (lp.kind, hidden) {
        (BlockKind::InvertedBottleneck, Some(h)) => {
            BlockWeights::bottleneck(store, rng, lp.in_channels, h, lp.out_channels, se, lp.activation)
        }
        _ => BlockWeights::conv(store, rng, lp.in_channels, lp.out_channels, lp.activation),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

const WARMUP_RUNS: usize = 3;

fn time_block(store: &ParamStore, block: &BlockWeights, in_ch: usize, hidden: Option<usize>, repeats: usize) -> Result<f64> {
    let input = Tensor::matrix(1, in_ch, (0..in_ch).map(|i| ((i % 7) as f64 - 3.0) * 0.25).collect())?;
    let run = || -> Result<f64> {
        let start = Instant::now();
        let mut g = Graph::new();
        let mut binder = Binder::frozen(store);
        let x = g.constant(input.clone());
        let y = block.forward(&mut g, &mut binder, store, x, hidden)?;
        std::hint::black_box(g.value(y));
        Ok(start.elapsed().as_nanos() as f64 / 1e3)
    };
    for _ in 0..WARMUP_RUNS {
        run()?;
    }
    let times = (0..repeats).map(|_| run()).collect::<Result<Vec<_>>>()?;
    Ok(median(times))
}

fn time_skip(in_ch: usize, repeats: usize) -> f64 {
    let input = vec![0.5; in_ch];
    let times = (0..repeats)
        .map(|_| {
            let start = Instant::now();
            let y = std::hint::black_box(input.clone());
            drop(y);
            start.elapsed().as_nanos() as f64 / 1e3
        })
        .collect();
    median(times)
}

/// Smallest positive step observed between consecutive clock reads.
pub fn timer_resolution_ns() -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..1000 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min((b - a).as_nanos() as f64);
    }
    best
}

fn host_description() -> String {
    let name = std::fs::read_to_string("/etc/hostname")
        .map(|s| s.trim().to_string())
        .or_else(|_| std::env::var("HOSTNAME"))
        .unwrap_or_else(|_| "unknown".to_string());
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{name} {}-{} {cpus} cpus", std::env::consts::OS, std::env::consts::ARCH)
}

fn unix_timestamp() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    secs.to_string()
}

/// Per-candidate latencies of every searchable layer, in candidate order.
pub fn candidate_latencies(net: &SuperNet, lut: &LatencyTable) -> Result<Vec<Vec<f64>>> {
    net.layers.iter().map(|layer| layer.candidate_latencies(lut)).collect()
}

/// Expected latency `Σ_l Σ_i a_{l,i} LAT(B_{l,i})` plus the fixed stem and
/// head, as a differentiable scalar.
pub fn total_latency(g: &mut Graph, net: &SuperNet, coefficients: &[Var], lut: &LatencyTable) -> Result<Var> {
    if coefficients.len() != net.layers.len() {
        return Err(Error::Invariant(format!(
            "{} coefficient vectors for {} layers",
            coefficients.len(),
            net.layers.len()
        )));
    }
    let fixed = lut.fixed_latency(&net.config)?;
    let lats = candidate_latencies(net, lut)?;
    let mut total: Option<Var> = None;
    for (&a, lat) in coefficients.iter().zip(&lats) {
        let term = g.dot_const(a, lat)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| Error::Invariant("supernet has no layers".into()))?;
    g.add_const(total, &[fixed])
}

/// Plain sum of the chosen blocks' latencies.
pub fn final_latency(arch: &SampledArchitecture, config: &SuperNetConfig, lut: &LatencyTable) -> Result<f64> {
    let mut total = lut.fixed_latency(config)?;
    for (choice, lp) in arch.layers.iter().zip(config.layer_plans()) {
        total += match choice.choice.as_str() {
            SKIP => lut.get(lp.index, SKIP, 0)?,
            id => lut.get(lp.index, id, choice.hidden.unwrap_or(0))?,
        };
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{Skippable, StageSpec, VariantSpec};
    use crate::tensor::Activation;

    pub(crate) fn small_config() -> SuperNetConfig {
        SuperNetConfig {
            input_dim: 8,
            classes: 3,
            stem_filters: 8,
            stem_activation: Activation::Swish,
            granularity: 16,
            max_expansion: 4.0,
            tau: 1.0,
            stages: vec![StageSpec {
                kind: BlockKind::InvertedBottleneck,
                layers: 2,
                filters: 8,
                activation: Activation::Relu,
                variants: vec![VariantSpec::new("k3", false), VariantSpec::new("k3", true)],
                skippable: Skippable::PerLayer(vec![true, false]),
            }],
        }
    }

    #[test]
    fn analytic_cost_by_hand() {
        // C_in=8, hidden=16, C_out=8: 0.001 * (8*16 + 16*8) + 1
        let m = macs::bottleneck(8, 16, 8, false);
        assert_eq!(m, 256);
        let t = LatencyTable::build_analytic(&small_config(), 0.001, 1.0).unwrap();
        assert!((t.get(1, "k3", 16).unwrap() - 1.256).abs() < 1e-12);
        // doubling the width doubles the MAC term
        let a = t.get(1, "k3", 16).unwrap() - 1.0;
        let b = t.get(1, "k3", 32).unwrap() - 1.0;
        assert!((b - 2.0 * a).abs() < 1e-12);
        assert!(t.get(1, "k3", 0).is_err());
        assert_eq!(t.get(1, SKIP, 0).unwrap(), 0.0);
        assert!(t.get(2, SKIP, 0).is_err());
    }

    #[test]
    fn analytic_is_strictly_increasing_in_width() {
        let cfg = small_config();
        let t = LatencyTable::build_analytic(&cfg, 0.001, 1.0).unwrap();
        for lp in cfg.layer_plans() {
            for v in &lp.variants {
                let lats: Vec<f64> = v
                    .widths(cfg.granularity)
                    .into_iter()
                    .map(|w| t.get(lp.index, &v.id, w.unwrap()).unwrap())
                    .collect();
                assert!(lats.windows(2).all(|w| w[0] < w[1]), "{lats:?}");
            }
        }
        t.check_complete(&cfg).unwrap();
    }

    #[test]
    fn completeness_lists_every_missing_key() {
        let cfg = small_config();
        let mut t = LatencyTable::build_analytic(&cfg, 0.001, 1.0).unwrap();
        t.entries.remove(&LatencyEntryKey::new(1, "k3", 16));
        t.entries.remove(&LatencyEntryKey::new(2, "k3_se", 32));
        match t.check_complete(&cfg) {
            Err(Error::IncompleteTable(keys)) => {
                assert_eq!(keys.len(), 2);
                assert!(keys[0].contains("k3, hidden 16"));
                assert!(keys[1].contains("k3_se, hidden 32"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn json_is_sorted_and_reproducible() {
        let cfg = small_config();
        let a = LatencyTable::build_analytic(&cfg, 0.0013, 1.0).unwrap().to_json();
        let b = LatencyTable::build_analytic(&cfg, 0.0013, 1.0).unwrap().to_json();
        assert_eq!(a, b);
        let e = a.find("\"entries\"").unwrap();
        let m = a.find("\"metadata\"").unwrap();
        assert!(e < m);
        let back = LatencyTable::from_json(&a).unwrap();
        assert_eq!(back.to_json(), a);
    }

    #[test]
    fn nine_significant_digits() {
        assert_eq!(sig9(1.234_567_891_23), 1.234_567_89);
        assert_eq!(sig9(0.1 + 0.2), 0.3);
    }

    #[test]
    fn measured_table_is_complete_and_medians() {
        let cfg = small_config();
        let t = LatencyTable::build_measured(&cfg, 9, 1).unwrap();
        t.check_complete(&cfg).unwrap();
        assert_eq!(t.metadata.mode, TableMode::Measured);
        assert!(t.metadata.host.is_some());
        assert!(t.entries().all(|(k, &v)| v > 0.0 || k.variant == SKIP));
        assert_eq!(median(vec![5.0, 1.0, 9.0, 3.0, 7.0, 2.0, 8.0, 4.0, 6.0]), 5.0);
    }
}
