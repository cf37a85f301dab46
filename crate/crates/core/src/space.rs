//! Declarative search-space schema and exact candidate counting.
//!
//! A [`SuperNetConfig`] lists stages of identical-kind layers. The first
//! layer of a stage adapts the channel count from the previous stage (or the
//! stem); the remaining layers keep it. A layer is skippable only when its
//! input and output widths agree.

use num_bigint::BigUint;
use num_traits::One;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Activation;

fn default_granularity() -> usize {
    32
}

fn default_expansion() -> f64 {
    8.0
}

fn default_tau() -> f64 {
    1.0
}

fn default_stem_activation() -> Activation {
    Activation::Swish
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuperNetConfig {
    /// Feature width of the input samples.
    pub input_dim: usize,
    pub classes: usize,
    /// Output width of the fixed prologue layer.
    pub stem_filters: usize,
    #[serde(default = "default_stem_activation")]
    pub stem_activation: Activation,
    #[serde(default = "default_granularity")]
    pub granularity: usize,
    #[serde(default = "default_expansion")]
    pub max_expansion: f64,
    /// Gumbel-Softmax temperature, constant for the whole search.
    #[serde(default = "default_tau")]
    pub tau: f64,
    pub stages: Vec<StageSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Single dense layer with activation; no inner hidden dimension.
    Conv,
    /// Expand, mask, activate, optional SE gate, project.
    #[serde(alias = "irb", alias = "fused_irb")]
    InvertedBottleneck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Skippable {
    /// `true`: every shape-preserving layer; `false`: none.
    All(bool),
    PerLayer(Vec<bool>),
}

impl Default for Skippable {
    fn default() -> Self {
        Skippable::All(true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub kind: BlockKind,
    pub layers: usize,
    pub filters: usize,
    pub activation: Activation,
    pub variants: Vec<VariantSpec>,
    #[serde(default)]
    pub skippable: Skippable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    /// Opaque label; variants differ by their independent weights.
    pub kernel: String,
    #[serde(default)]
    pub se: bool,
    /// Whether the inner hidden width is searched. Defaults to true for
    /// inverted bottlenecks and must be false for conv blocks.
    #[serde(default)]
    pub prunable: Option<bool>,
}

impl VariantSpec {
    pub fn new(kernel: &str, se: bool) -> Self {
        VariantSpec {
            kernel: kernel.to_string(),
            se,
            prunable: None,
        }
    }

    /// Identity used in latency tables and sampled architectures.
    pub fn identity(&self) -> String {
        if self.se {
            format!("{}_se", self.kernel)
        } else {
            self.kernel.clone()
        }
    }
}

/// One searchable layer, fully resolved from the stage description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    /// Global index; 0 is the stem, searchable layers start at 1.
    pub index: usize,
    /// 1-based stage number (stage 0 is the stem).
    pub stage: usize,
    /// Position inside the stage.
    pub layer: usize,
    pub kind: BlockKind,
    pub activation: Activation,
    pub in_channels: usize,
    pub out_channels: usize,
    pub skippable: bool,
    pub variants: Vec<VariantPlan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantPlan {
    pub id: String,
    pub se: bool,
    /// `Some(max_hidden)` when the hidden width is searched.
    pub max_hidden: Option<usize>,
    /// Fixed hidden width of a non-prunable inverted bottleneck.
    pub fixed_hidden: Option<usize>,
}

impl VariantPlan {
    /// Number of distinct hidden widths this variant can take.
    pub fn width_count(&self, granularity: usize) -> usize {
        self.max_hidden.map_or(1, |h| h / granularity)
    }

    /// All hidden widths (`None` when the block has no hidden dimension).
    pub fn widths(&self, granularity: usize) -> Vec<Option<usize>> {
        match (self.max_hidden, self.fixed_hidden) {
            (Some(h), _) => (1..=h / granularity).map(|k| Some(k * granularity)).collect(),
            (None, Some(h)) => vec![Some(h)],
            (None, None) => vec![None],
        }
    }
}

impl SuperNetConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SuperNetConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Widest hidden dimension for a block reading `in_channels`, rounded
    /// down to the granularity.
    pub fn max_hidden(&self, in_channels: usize) -> usize {
        let raw = self.max_expansion * in_channels as f64 / self.granularity as f64;
        // guard against 8.0 * 24 / 32 landing at 5.999...
        ((raw + 1e-9).floor() as usize) * self.granularity
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classes == 0 || self.stem_filters == 0 {
            return Err(Error::config("input_dim, classes and stem_filters must be positive"));
        }
        if self.granularity == 0 {
            return Err(Error::config("granularity must be positive"));
        }
        if !(self.max_expansion > 0.0 && self.max_expansion.is_finite()) {
            return Err(Error::config("max_expansion must be positive"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("tau must be positive"));
        }
        if self.stages.is_empty() {
            return Err(Error::config("at least one stage is required"));
        }
        let mut in_ch = self.stem_filters;
        for (si, st) in self.stages.iter().enumerate() {
            let where_ = format!("stages[{si}]");
            if st.layers == 0 || st.filters == 0 {
                return Err(Error::config(format!("{where_}: layers and filters must be positive")));
            }
            if st.variants.is_empty() {
                return Err(Error::config(format!("{where_}: at least one variant per layer")));
            }
            let mut ids: Vec<String> = st.variants.iter().map(VariantSpec::identity).collect();
            ids.sort();
            if ids.windows(2).any(|w| w[0] == w[1]) || ids.iter().any(|i| i == "skip") {
                return Err(Error::config(format!("{where_}: variant identities must be unique and not 'skip'")));
            }
            for v in &st.variants {
                if st.kind == BlockKind::Conv && (v.prunable == Some(true) || v.se) {
                    return Err(Error::config(format!(
                        "{where_}: conv variant '{}' cannot have SE or a prunable hidden width",
                        v.identity()
                    )));
                }
            }
            if let Skippable::PerLayer(flags) = &st.skippable {
                if flags.len() != st.layers {
                    return Err(Error::config(format!(
                        "{where_}: skippable has {} entries for {} layers",
                        flags.len(),
                        st.layers
                    )));
                }
            }
            for li in 0..st.layers {
                let lin = if li == 0 { in_ch } else { st.filters };
                let want_skip = match &st.skippable {
                    Skippable::All(b) => *b && lin == st.filters,
                    Skippable::PerLayer(flags) => flags[li],
                };
                if want_skip && lin != st.filters {
                    return Err(Error::config(format!(
                        "{where_}.layer[{li}]: a width-changing layer ({lin} -> {}) cannot be skippable",
                        st.filters
                    )));
                }
                if st.kind == BlockKind::InvertedBottleneck && self.max_hidden(lin) < self.granularity {
                    return Err(Error::config(format!(
                        "{where_}.layer[{li}]: max hidden width {} is below granularity {}",
                        self.max_hidden(lin),
                        self.granularity
                    )));
                }
            }
            in_ch = st.filters;
        }
        Ok(())
    }

    /// Resolved searchable layers in network order.
    pub fn layer_plans(&self) -> Vec<LayerPlan> {
        let mut out = Vec::new();
        let mut in_ch = self.stem_filters;
        let mut index = 1;
        for (si, st) in self.stages.iter().enumerate() {
            for li in 0..st.layers {
                let lin = if li == 0 { in_ch } else { st.filters };
                let skippable = match &st.skippable {
                    Skippable::All(b) => *b && lin == st.filters,
                    Skippable::PerLayer(flags) => flags[li] && lin == st.filters,
                };
                let variants = st
                    .variants
                    .iter()
                    .map(|v| {
                        let hidden = self.max_hidden(lin);
                        let (max_hidden, fixed_hidden) = match st.kind {
                            BlockKind::Conv => (None, None),
                            BlockKind::InvertedBottleneck if v.prunable.unwrap_or(true) => (Some(hidden), None),
                            BlockKind::InvertedBottleneck => (None, Some(hidden)),
                        };
                        VariantPlan {
                            id: v.identity(),
                            se: v.se,
                            max_hidden,
                            fixed_hidden,
                        }
                    })
                    .collect();
                out.push(LayerPlan {
                    index,
                    stage: si + 1,
                    layer: li,
                    kind: st.kind,
                    activation: st.activation,
                    in_channels: lin,
                    out_channels: st.filters,
                    skippable,
                    variants,
                });
                index += 1;
            }
            in_ch = st.filters;
        }
        out
    }

    /// Width entering the classifier head.
    pub fn head_in(&self) -> usize {
        self.stages.last().map_or(self.stem_filters, |s| s.filters)
    }

    /// Global layer index of the classifier head.
    pub fn head_index(&self) -> usize {
        1 + self.stages.iter().map(|s| s.layers).sum::<usize>()
    }

    /// Short stable hash of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(&digest[..8])
    }
}

/// Per-layer count of distinct choices: every (variant, hidden width) pair
/// plus one for the skip connection when the layer is skippable.
pub fn layer_factors(config: &SuperNetConfig) -> Vec<BigUint> {
    config
        .layer_plans()
        .iter()
        .map(|lp| {
            let blocks: usize = lp.variants.iter().map(|v| v.width_count(config.granularity)).sum();
            BigUint::from(blocks + usize::from(lp.skippable))
        })
        .collect()
}

/// Exact number of architectures in the search space.
pub fn count_search_space(config: &SuperNetConfig) -> Result<BigUint> {
    config.validate()?;
    Ok(layer_factors(config).into_iter().fold(BigUint::one(), |acc, f| acc * f))
}

/// `≈1.7e39`-style two-significant-digit rendering of a big count.
pub fn approx_scientific(n: &BigUint) -> String {
    use num_traits::ToPrimitive;
    let v = n.to_f64().unwrap_or(f64::INFINITY);
    let s = format!("{v:.1e}");
    s.replace(".0e", "e")
}
