#![allow(dead_code)]

use dnas_core::data::Dataset;
use dnas_core::io::RunConfig;
use dnas_core::latency::LatencyTable;

/// Three searchable layers, four variants each, two of them skippable.
pub const TINY: &str = r#"
[supernet]
input_dim = 8
classes = 3
stem_filters = 8
granularity = 8
max_expansion = 4.0

[[supernet.stages]]
kind = "irb"
layers = 1
filters = 12
activation = "swish"
variants = [{ kernel = "k3" }, { kernel = "k3", se = true }, { kernel = "k5" }, { kernel = "k5", se = true }]

[[supernet.stages]]
kind = "irb"
layers = 2
filters = 12
activation = "swish"
variants = [{ kernel = "k3" }, { kernel = "k3", se = true }, { kernel = "k5" }, { kernel = "k5", se = true }]

[search]
alpha = 1.0
batch_size = 32
theta_lr = 0.05
seed = 0

[search.threshold]
kind = "linear"
t_initial = 0.15
t_final = 0.55
e_warmup = 2
e_total = 8

[data]
synthetic = { classes = 3, dim = 8, samples = 240, noise = 0.3, seed = 5, clusters = 2 }
"#;

pub fn tiny() -> (RunConfig, Dataset, Dataset, LatencyTable) {
    let cfg = RunConfig::from_toml(TINY).unwrap();
    let (tr, va) = cfg.dataset().unwrap();
    let lut = cfg.latency_table().unwrap();
    (cfg, tr, va, lut)
}
