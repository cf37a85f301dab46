//! Stochastic SuperNet: shared-weight candidate blocks mixed per layer by
//! Gumbel-Softmax coefficients.

use rand::Rng;
use rand_distr::{Distribution, Gumbel, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latency::{LatencyTable, SKIP};
use crate::pruning::{skip_forward, SkipInjection};
use crate::prunode::MaskState;
use crate::search::SampledArchitecture;
use crate::space::{BlockKind, LayerPlan, SuperNetConfig};
use crate::tensor::{softmax_values, Activation, Graph, Tensor, Var};

/// Index of a network weight tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn default_for_tests() -> Self {
        ParamId(0)
    }
}

/// Arena of network weights (ψ).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Tensor>,
}

impl ParamStore {
    pub fn add(&mut self, t: Tensor) -> ParamId {
        self.params.push(t);
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.params.iter()
    }

    /// Order-sensitive checksum of every weight bit pattern.
    pub fn checksum(&self) -> u64 {
        checksum(self.params.iter().flat_map(|t| t.data().iter().copied()))
    }

    fn uniform<R: Rng>(&mut self, rng: &mut R, shape: Vec<usize>, fan_in: usize) -> ParamId {
        let bound = (1.0 / fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.add(Tensor::new(shape, data).expect("finite init"))
    }
}

pub(crate) fn checksum(values: impl Iterator<Item = f64>) -> u64 {
    // FNV-1a over the IEEE bit patterns
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Binds store entries to graph leaves, at most once per pass, so that
/// candidates sharing a weight accumulate into one gradient.
pub struct Binder {
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl Binder {
    pub fn trainable(store: &ParamStore) -> Self {
        Binder {
            vars: vec![None; store.len()],
            trainable: true,
        }
    }

    pub fn frozen(store: &ParamStore) -> Self {
        Binder {
            vars: vec![None; store.len()],
            trainable: false,
        }
    }

    pub fn bind(&mut self, g: &mut Graph, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let t = store.get(id).clone();
        let v = if self.trainable { g.param(t) } else { g.constant(t) };
        self.vars[id.0] = Some(v);
        v
    }

    /// Every parameter touched by the pass.
    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars.iter().enumerate().filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, inputs: usize, outputs: usize) -> Self {
        let w = store.uniform(rng, vec![inputs, outputs], inputs);
        let b = store.uniform(rng, vec![outputs], inputs);
        Dense { w, b }
    }

    fn apply(&self, g: &mut Graph, binder: &mut Binder, store: &ParamStore, x: Var) -> Result<Var> {
        let w = binder.bind(g, store, self.w);
        let b = binder.bind(g, store, self.b);
        g.linear(x, w, b)
    }
}

/// Weights of one block, shared by every candidate built from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BlockWeights {
    /// `act(x W + b)`, plus `x` when `residual`.
    Conv {
        dense: Dense,
        activation: Activation,
        residual: bool,
    },
    /// Classifier: plain `x W + b`.
    Head { dense: Dense },
    /// Expand to `hidden`, mask, activate, optional SE gate, project.
    Bottleneck {
        expand: Dense,
        project: Dense,
        se: Option<Dense>,
        activation: Activation,
        hidden: usize,
        residual: bool,
    },
}

impl BlockWeights {
    /// Non-residual dense layer (the stem).
    pub fn dense<R: Rng>(store: &mut ParamStore, rng: &mut R, inputs: usize, outputs: usize, activation: Activation) -> Self {
        BlockWeights::Conv {
            dense: Dense::new(store, rng, inputs, outputs),
            activation,
            residual: false,
        }
    }

    pub fn conv<R: Rng>(store: &mut ParamStore, rng: &mut R, inputs: usize, outputs: usize, activation: Activation) -> Self {
        BlockWeights::Conv {
            dense: Dense::new(store, rng, inputs, outputs),
            activation,
            residual: inputs == outputs,
        }
    }

    pub fn head<R: Rng>(store: &mut ParamStore, rng: &mut R, inputs: usize, classes: usize) -> Self {
        BlockWeights::Head {
            dense: Dense::new(store, rng, inputs, classes),
        }
    }

    pub fn bottleneck<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        inputs: usize,
        hidden: usize,
        outputs: usize,
        se: bool,
        activation: Activation,
    ) -> Self {
        let expand = Dense::new(store, rng, inputs, hidden);
        let project = Dense::new(store, rng, hidden, outputs);
        let se = se.then(|| Dense::new(store, rng, 1, 1));
        BlockWeights::Bottleneck {
            expand,
            project,
            se,
            activation,
            hidden,
            residual: inputs == outputs,
        }
    }

    /// Full hidden width, or `None` for blocks without one.
    pub fn hidden(&self) -> Option<usize> {
        match self {
            BlockWeights::Bottleneck { hidden, .. } => Some(*hidden),
            _ => None,
        }
    }

    /// Runs the block; `width` masks the hidden lanes of a bottleneck
    /// (`None` keeps all of them).
    pub fn forward(&self, g: &mut Graph, binder: &mut Binder, store: &ParamStore, x: Var, width: Option<usize>) -> Result<Var> {
        match self {
            BlockWeights::Conv {
                dense,
                activation,
                residual,
            } => {
                let y = dense.apply(g, binder, store, x)?;
                let y = g.activation(y, *activation)?;
                if *residual {
                    g.add(y, x)
                } else {
                    Ok(y)
                }
            }
            BlockWeights::Head { dense } => dense.apply(g, binder, store, x),
            BlockWeights::Bottleneck { hidden, .. } => {
                let h = self.expand(g, binder, store, x)?;
                self.finish(g, binder, store, x, h, width.unwrap_or(*hidden))
            }
        }
    }

    /// Pre-mask expansion of a bottleneck, shared by both Prunode candidates.
    pub fn expand(&self, g: &mut Graph, binder: &mut Binder, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            BlockWeights::Bottleneck { expand, .. } => expand.apply(g, binder, store, x),
            _ => Err(Error::Invariant("expand called on a block without hidden lanes".into())),
        }
    }

    /// Masks the expanded lanes to `width` and finishes the bottleneck.
    pub fn finish(&self, g: &mut Graph, binder: &mut Binder, store: &ParamStore, x: Var, expanded: Var, width: usize) -> Result<Var> {
        let BlockWeights::Bottleneck {
            project,
            se,
            activation,
            hidden,
            residual,
            ..
        } = self
        else {
            return Err(Error::Invariant("finish called on a block without hidden lanes".into()));
        };
        if width == 0 || width > *hidden {
            return Err(Error::Invariant(format!("mask width {width} outside 1..={hidden}")));
        }
        let masked = width < *hidden;
        let mut h = if masked { g.channel_mask(expanded, width)? } else { expanded };
        h = g.activation(h, *activation)?;
        if masked && activation.apply(0.0) != 0.0 {
            h = g.channel_mask(h, width)?;
        }
        if let Some(se) = se {
            let m = g.row_mean_prefix(h, width)?;
            let z = se.apply(g, binder, store, m)?;
            let gate = g.activation(z, Activation::Sigmoid)?;
            h = g.mul_rows(h, gate)?;
        }
        let y = project.apply(g, binder, store, h)?;
        if *residual {
            g.add(y, x)
        } else {
            Ok(y)
        }
    }
}

/// Architecture weight with its Adam moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchWeight {
    pub value: f64,
    pub m: f64,
    pub v: f64,
}

impl ArchWeight {
    pub fn new(value: f64) -> Self {
        ArchWeight { value, m: 0.0, v: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerBlock {
    /// Block with one fixed hidden width (or none).
    Single {
        variant: String,
        hidden: Option<usize>,
        weights: BlockWeights,
        theta: ArchWeight,
    },
    /// Two shared-weight candidates differing only in their mask width.
    Prunode {
        variant: String,
        weights: BlockWeights,
        mask: MaskState,
        small: ArchWeight,
        large: ArchWeight,
    },
    Skip { theta: ArchWeight },
}

impl LayerBlock {
    pub fn is_skip(&self) -> bool {
        matches!(self, LayerBlock::Skip { .. })
    }

    pub fn candidate_count(&self) -> usize {
        match self {
            LayerBlock::Prunode { .. } => 2,
            _ => 1,
        }
    }

    pub fn label(&self) -> String {
        match self {
            LayerBlock::Single { variant, hidden, .. } => match hidden {
                Some(h) => format!("{variant}@{h}"),
                None => variant.clone(),
            },
            LayerBlock::Prunode { variant, mask, .. } => {
                format!("{variant}@{}/{}", mask.small_mask, mask.large_mask)
            }
            LayerBlock::Skip { .. } => SKIP.to_string(),
        }
    }

    pub fn thetas(&self) -> Vec<f64> {
        match self {
            LayerBlock::Single { theta, .. } | LayerBlock::Skip { theta } => vec![theta.value],
            LayerBlock::Prunode { small, large, .. } => vec![small.value, large.value],
        }
    }

    pub fn arch_weights_mut(&mut self) -> Vec<&mut ArchWeight> {
        match self {
            LayerBlock::Single { theta, .. } | LayerBlock::Skip { theta } => vec![theta],
            LayerBlock::Prunode { small, large, .. } => vec![small, large],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticLayer {
    pub plan: LayerPlan,
    pub blocks: Vec<LayerBlock>,
    /// A skip has been injected at some point; it happens at most once.
    pub skip_injected: bool,
}

impl StochasticLayer {
    pub fn candidate_count(&self) -> usize {
        self.blocks.iter().map(LayerBlock::candidate_count).sum()
    }

    /// Holds exactly one block and one skip, so the multipliers apply.
    pub fn multipliers_active(&self) -> bool {
        self.blocks.len() == 2 && self.blocks.iter().filter(|b| b.is_skip()).count() == 1
    }

    pub fn thetas(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(LayerBlock::thetas).collect()
    }

    pub fn arch_weights_mut(&mut self) -> Vec<&mut ArchWeight> {
        self.blocks.iter_mut().flat_map(LayerBlock::arch_weights_mut).collect()
    }

    /// LUT latency of each candidate at its current mask width.
    pub fn candidate_latencies(&self, lut: &LatencyTable) -> Result<Vec<f64>> {
        let layer = self.plan.index;
        let mut out = Vec::with_capacity(self.candidate_count());
        for b in &self.blocks {
            match b {
                LayerBlock::Single { variant, hidden, .. } => out.push(lut.get(layer, variant, hidden.unwrap_or(0))?),
                LayerBlock::Prunode { variant, mask, .. } => {
                    out.push(lut.get(layer, variant, mask.small_mask)?);
                    out.push(lut.get(layer, variant, mask.large_mask)?);
                }
                LayerBlock::Skip { .. } => out.push(lut.get(layer, SKIP, 0)?),
            }
        }
        Ok(out)
    }

    /// Noise-free choice distribution over candidates.
    pub fn probabilities(&self) -> Vec<f64> {
        softmax_values(&self.thetas())
    }
}

/// Draws `n` independent Gumbel(0, 1) samples.
pub fn sample_gumbel<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let dist = Gumbel::new(0.0, 1.0).expect("standard Gumbel");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// `softmax((θ + noise) / τ)` on the graph.
pub fn gumbel_softmax(g: &mut Graph, theta: Var, noise: &[f64], tau: f64) -> Result<Var> {
    if g.value(theta).is_empty() {
        return Err(Error::config("gumbel_softmax needs at least one logit"));
    }
    if !(tau > 0.0) {
        return Err(Error::config("temperature must be positive"));
    }
    let z = g.add_const(theta, noise)?;
    let z = if tau == 1.0 { z } else { g.scale(z, 1.0 / tau)? };
    g.softmax(z)
}

/// Plain-value version of [`gumbel_softmax`].
pub fn gumbel_softmax_values(theta: &[f64], noise: &[f64], tau: f64) -> Result<Vec<f64>> {
    if theta.is_empty() {
        return Err(Error::config("gumbel_softmax needs at least one logit"));
    }
    if theta.len() != noise.len() {
        return Err(Error::Dimension {
            op: "gumbel_softmax",
            lhs: vec![theta.len()],
            rhs: vec![noise.len()],
        });
    }
    if !(tau > 0.0) {
        return Err(Error::config("temperature must be positive"));
    }
    let z: Vec<f64> = theta.iter().zip(noise).map(|(t, n)| (t + n) / tau).collect();
    Ok(softmax_values(&z))
}

/// Weighted sum of the candidates' outputs, `Σ a_i B_i(x)`; with an injected
/// skip the block output is scaled by λ and the skip's by φ.
pub fn layer_forward(
    g: &mut Graph,
    binder: &mut Binder,
    store: &ParamStore,
    layer: &StochasticLayer,
    x: Var,
    a: Var,
    skip: SkipInjection,
) -> Result<Var> {
    let n = layer.candidate_count();
    if g.value(a).len() != n {
        return Err(Error::Dimension {
            op: "layer_forward",
            lhs: vec![n],
            rhs: g.value(a).shape().to_vec(),
        });
    }
    let multipliers = layer.multipliers_active();
    let mut outputs: Vec<(Var, f64)> = Vec::with_capacity(n);
    for b in &layer.blocks {
        match b {
            LayerBlock::Single { weights, hidden, .. } => {
                let y = weights.forward(g, binder, store, x, *hidden)?;
                outputs.push((y, if multipliers { skip.lambda } else { 1.0 }));
            }
            LayerBlock::Prunode { weights, mask, .. } => {
                let h = weights.expand(g, binder, store, x)?;
                let small = weights.finish(g, binder, store, x, h, mask.small_mask)?;
                let large = weights.finish(g, binder, store, x, h, mask.large_mask)?;
                let m = if multipliers { skip.lambda } else { 1.0 };
                outputs.push((small, m));
                outputs.push((large, m));
            }
            LayerBlock::Skip { .. } => {
                let y = skip_forward(g, x, &layer.plan)?;
                outputs.push((y, if multipliers { skip.phi } else { 1.0 }));
            }
        }
    }
    let shape = g.value(outputs[0].0).shape().to_vec();
    if outputs.iter().any(|(o, _)| g.value(*o).shape() != shape.as_slice()) {
        return Err(Error::config(format!(
            "layer {} candidates disagree on output shape",
            layer.plan.index
        )));
    }
    if n == 1 {
        return Ok(outputs[0].0);
    }
    let mut acc: Option<Var> = None;
    for (i, (y, m)) in outputs.into_iter().enumerate() {
        let y = if m == 1.0 { y } else { g.scale(y, m)? };
        let ai = g.select(a, i)?;
        let term = g.scale_by(y, ai)?;
        acc = Some(match acc {
            Some(s) => g.add(s, term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least two candidates"))
}

/// Graph handles produced by one SuperNet forward pass.
pub struct ForwardPass {
    pub logits: Var,
    /// Per-layer θ leaves.
    pub thetas: Vec<Var>,
    /// Per-layer Gumbel-Softmax coefficients.
    pub coefficients: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperNet {
    pub config: SuperNetConfig,
    pub store: ParamStore,
    pub stem: BlockWeights,
    pub layers: Vec<StochasticLayer>,
    pub head: BlockWeights,
}

impl SuperNet {
    /// Builds the full search space with fresh weights and uniform θ.
    pub fn new<R: Rng>(config: &SuperNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let g = config.granularity;
        let mut store = ParamStore::default();
        let stem = BlockWeights::dense(&mut store, rng, config.input_dim, config.stem_filters, config.stem_activation);
        let mut layers = Vec::new();
        for plan in config.layer_plans() {
            let mut blocks = Vec::new();
            for v in &plan.variants {
                let block = match (plan.kind, v.max_hidden, v.fixed_hidden) {
                    (BlockKind::InvertedBottleneck, Some(h), _) if h >= 2 * g => LayerBlock::Prunode {
                        variant: v.id.clone(),
                        weights: BlockWeights::bottleneck(&mut store, rng, plan.in_channels, h, plan.out_channels, v.se, plan.activation),
                        mask: MaskState::new(h, g)?,
                        small: ArchWeight::new(0.0),
                        large: ArchWeight::new(0.0),
                    },
                    (BlockKind::InvertedBottleneck, Some(h), _) | (BlockKind::InvertedBottleneck, None, Some(h)) => {
                        LayerBlock::Single {
                            variant: v.id.clone(),
                            hidden: Some(h),
                            weights: BlockWeights::bottleneck(&mut store, rng, plan.in_channels, h, plan.out_channels, v.se, plan.activation),
                            theta: ArchWeight::new(0.0),
                        }
                    }
                    _ => LayerBlock::Single {
                        variant: v.id.clone(),
                        hidden: None,
                        weights: BlockWeights::conv(&mut store, rng, plan.in_channels, plan.out_channels, plan.activation),
                        theta: ArchWeight::new(0.0),
                    },
                };
                blocks.push(block);
            }
            let mut layer = StochasticLayer {
                plan,
                blocks,
                skip_injected: false,
            };
            let init = 1.0 / layer.candidate_count() as f64;
            for w in layer.arch_weights_mut() {
                w.value = init;
            }
            layers.push(layer);
        }
        let head = BlockWeights::head(&mut store, rng, config.head_in(), config.classes);
        Ok(SuperNet {
            config: config.clone(),
            store,
            stem,
            layers,
            head,
        })
    }

    /// Stand-alone network for one sampled architecture, with fresh weights.
    pub fn from_architecture<R: Rng>(config: &SuperNetConfig, arch: &SampledArchitecture, rng: &mut R) -> Result<Self> {
        arch.validate_against(config)?;
        let mut store = ParamStore::default();
        let stem = BlockWeights::dense(&mut store, rng, config.input_dim, config.stem_filters, config.stem_activation);
        let mut layers = Vec::new();
        for (plan, choice) in config.layer_plans().into_iter().zip(&arch.layers) {
            let block = if choice.choice == SKIP {
                LayerBlock::Skip {
                    theta: ArchWeight::new(1.0),
                }
            } else {
                let v = plan
                    .variants
                    .iter()
                    .find(|v| v.id == choice.choice)
                    .ok_or_else(|| Error::config(format!("unknown variant '{}'", choice.choice)))?;
                let weights = match (plan.kind, choice.hidden) {
                    (BlockKind::InvertedBottleneck, Some(h)) => {
                        BlockWeights::bottleneck(&mut store, rng, plan.in_channels, h, plan.out_channels, v.se, plan.activation)
                    }
                    _ => BlockWeights::conv(&mut store, rng, plan.in_channels, plan.out_channels, plan.activation),
                };
                LayerBlock::Single {
                    variant: v.id.clone(),
                    hidden: choice.hidden,
                    weights,
                    theta: ArchWeight::new(1.0),
                }
            };
            layers.push(StochasticLayer {
                plan,
                blocks: vec![block],
                skip_injected: false,
            });
        }
        let head = BlockWeights::head(&mut store, rng, config.head_in(), config.classes);
        Ok(SuperNet {
            config: config.clone(),
            store,
            stem,
            layers,
            head,
        })
    }

    pub fn live_candidates(&self) -> usize {
        self.layers.iter().map(StochasticLayer::candidate_count).sum()
    }

    /// One Gumbel draw per candidate of every multi-candidate layer.
    pub fn sample_noise<R: Rng>(&self, rng: &mut R) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .map(|l| match l.candidate_count() {
                1 => vec![0.0],
                n => sample_gumbel(rng, n),
            })
            .collect()
    }

    /// Forward pass; `noise == None` gives the noise-free mixture.
    pub fn forward(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        x: Var,
        train_theta: bool,
        noise: Option<&[Vec<f64>]>,
        skip: SkipInjection,
    ) -> Result<ForwardPass> {
        let mut h = self.stem.forward(g, binder, &self.store, x, None)?;
        let mut thetas = Vec::with_capacity(self.layers.len());
        let mut coefficients = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let t = Tensor::vector(layer.thetas())?;
            let theta = if train_theta { g.param(t) } else { g.constant(t) };
            let zeros;
            let n = match noise {
                Some(all) => all[li].as_slice(),
                None => {
                    zeros = vec![0.0; layer.candidate_count()];
                    zeros.as_slice()
                }
            };
            let a = gumbel_softmax(g, theta, n, self.config.tau)?;
            h = layer_forward(g, binder, &self.store, layer, h, a, skip)?;
            thetas.push(theta);
            coefficients.push(a);
        }
        let logits = self.head.forward(g, binder, &self.store, h, None)?;
        Ok(ForwardPass {
            logits,
            thetas,
            coefficients,
        })
    }

    pub fn theta_checksum(&self) -> u64 {
        checksum(self.layers.iter().flat_map(|l| l.thetas()))
    }

    pub fn mask_states(&self) -> Vec<(usize, String, MaskState)> {
        let mut out = Vec::new();
        for l in &self.layers {
            for b in &l.blocks {
                if let LayerBlock::Prunode { variant, mask, .. } = b {
                    out.push((l.plan.index, variant.clone(), mask.clone()));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{Skippable, StageSpec, VariantSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> SuperNetConfig {
        SuperNetConfig {
            input_dim: 6,
            classes: 3,
            stem_filters: 8,
            stem_activation: Activation::Swish,
            granularity: 8,
            max_expansion: 4.0,
            tau: 1.0,
            stages: vec![StageSpec {
                kind: BlockKind::InvertedBottleneck,
                layers: 2,
                filters: 8,
                activation: Activation::Swish,
                variants: vec![VariantSpec::new("k3", false), VariantSpec::new("k3", true)],
                skippable: Skippable::All(true),
            }],
        }
    }

    fn input(g: &mut Graph, rows: usize, cols: usize) -> Var {
        let data = (0..rows * cols).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect();
        g.constant(Tensor::matrix(rows, cols, data).unwrap())
    }

    #[test]
    fn gumbel_softmax_examples() {
        assert_eq!(gumbel_softmax_values(&[0.0, 0.0], &[0.0, 0.0], 1.0).unwrap(), vec![0.5, 0.5]);
        let p = gumbel_softmax_values(&[3.0; 3], &[0.0; 3], 1.0).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let p = gumbel_softmax_values(&[1.0, 0.0], &[0.0, 0.0], 0.5).unwrap();
        let e2 = 2f64.exp();
        assert!((p[0] - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((p[0] - 0.8808).abs() < 1e-4 && (p[1] - 0.1192).abs() < 1e-4);
        assert!(matches!(gumbel_softmax_values(&[], &[], 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn supernet_builds_prunodes_with_uniform_theta() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = SuperNet::new(&cfg(), &mut rng).unwrap();
        assert_eq!(net.layers.len(), 2);
        for l in &net.layers {
            assert_eq!(l.blocks.len(), 2);
            assert_eq!(l.candidate_count(), 4);
            assert!(l.thetas().iter().all(|&t| t == 0.25));
            assert!(!l.multipliers_active());
        }
        assert_eq!(net.mask_states()[0].2.small_mask, 16);
    }

    #[test]
    fn singleton_layer_passes_output_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = SuperNet::new(&cfg(), &mut rng).unwrap();
        net.layers[0].blocks.truncate(1);
        if let LayerBlock::Prunode { weights, .. } = net.layers[0].blocks[0].clone() {
            net.layers[0].blocks[0] = LayerBlock::Single {
                variant: "k3".into(),
                hidden: Some(16),
                weights,
                theta: ArchWeight::new(0.0),
            };
        }
        let mut g = Graph::new();
        let mut b = Binder::frozen(&net.store);
        let x = input(&mut g, 2, 8);
        let a = g.constant(Tensor::vector(vec![1.0]).unwrap());
        let y = layer_forward(&mut g, &mut b, &net.store, &net.layers[0], x, a, SkipInjection::default()).unwrap();
        let LayerBlock::Single { weights, .. } = &net.layers[0].blocks[0] else { unreachable!() };
        let direct = weights.forward(&mut g, &mut b, &net.store, x, Some(16)).unwrap();
        assert_eq!(g.value(y).data(), g.value(direct).data());
    }

    #[test]
    fn injected_skip_multipliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = SuperNet::new(&cfg(), &mut rng).unwrap();
        net.layers[0].blocks[1] = LayerBlock::Skip {
            theta: ArchWeight::new(0.0),
        };
        let layer = net.layers[0].clone();
        assert!(layer.multipliers_active());
        let skip = SkipInjection { phi: 1.1, lambda: 0.4 };
        let mut g = Graph::new();
        let mut b = Binder::frozen(&net.store);
        let x = input(&mut g, 2, 8);
        // the Prunode pair gets a total of 0.5, the skip the other 0.5
        let a = g.constant(Tensor::vector(vec![0.2, 0.3, 0.5]).unwrap());
        let y = layer_forward(&mut g, &mut b, &net.store, &layer, x, a, skip).unwrap();
        let LayerBlock::Prunode { weights, mask, .. } = &layer.blocks[0] else { unreachable!() };
        let u = weights.forward(&mut g, &mut b, &net.store, x, Some(mask.small_mask)).unwrap();
        let v = weights.forward(&mut g, &mut b, &net.store, x, Some(mask.large_mask)).unwrap();
        let (u, v, xs) = (g.value(u).data(), g.value(v).data(), g.value(x).data());
        for i in 0..xs.len() {
            let want = 0.2 * 0.4 * u[i] + 0.3 * 0.4 * v[i] + 0.5 * 1.1 * xs[i];
            assert!((g.value(y).data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn full_mask_matches_unmasked_and_shared_widths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::default();
        let blk = BlockWeights::bottleneck(&mut store, &mut rng, 8, 32, 8, true, Activation::Swish);
        let mut g = Graph::new();
        let mut b = Binder::frozen(&store);
        let x = input(&mut g, 3, 8);
        let full = blk.forward(&mut g, &mut b, &store, x, Some(32)).unwrap();
        let none = blk.forward(&mut g, &mut b, &store, x, None).unwrap();
        assert_eq!(g.value(full).data(), g.value(none).data());
        let h = blk.expand(&mut g, &mut b, &store, x).unwrap();
        let p = blk.finish(&mut g, &mut b, &store, x, h, 16).unwrap();
        let q = blk.finish(&mut g, &mut b, &store, x, h, 16).unwrap();
        assert_eq!(g.value(p).data(), g.value(q).data());
    }

    #[test]
    fn zero_block_with_residual_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::default();
        let blk = BlockWeights::bottleneck(&mut store, &mut rng, 8, 32, 8, false, Activation::Relu);
        for i in 0..store.len() {
            store.get_mut(ParamId(i)).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let mut b = Binder::frozen(&store);
        let x = input(&mut g, 2, 8);
        let y = blk.forward(&mut g, &mut b, &store, x, Some(8)).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn sigmoid_activation_keeps_masked_lanes_dark() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::default();
        let blk = BlockWeights::bottleneck(&mut store, &mut rng, 4, 16, 3, false, Activation::Sigmoid);
        let mut g = Graph::new();
        let mut b = Binder::trainable(&store);
        let x = input(&mut g, 2, 4);
        let y = blk.forward(&mut g, &mut b, &store, x, Some(8)).unwrap();
        let rows = g.row_mean_prefix(y, 3).unwrap();
        let loss = g.dot_const(rows, &[1.0, 1.0]).unwrap();
        g.backward(loss).unwrap();
        let BlockWeights::Bottleneck { project, .. } = &blk else { unreachable!() };
        let pw = b.bound().find(|(id, _)| *id == project.w).unwrap().1;
        let grad = g.grad(pw).unwrap();
        // rows 8.. of the projection never see a signal
        assert!(grad[8 * 3..].iter().all(|&v| v == 0.0));
        assert!(grad[..8 * 3].iter().any(|&v| v != 0.0));
    }
}
