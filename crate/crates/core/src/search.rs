//! Bilevel search: warmup of the network weights, alternating weight and
//! architecture steps with mask updates, per-epoch pruning, final sampling
//! and retraining.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::latency::{candidate_latencies, final_latency, total_latency, LatencyTable, SKIP};
use crate::pruning::{collapse_blocks, collapse_prunode, prune_layer, SkipInjection, ThresholdPolicy};
use crate::prunode::{reset_candidate_weights, weight_signal, MaskState, SignalKind};
use crate::space::SuperNetConfig;
use crate::supernet::{Binder, LayerBlock, ParamStore, SuperNet};
use crate::tensor::{softmax_values, Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    /// `CE + α (ln LAT)^β`
    #[default]
    LogPower,
    /// `CE + α LAT^β`
    Power,
}

/// Latency penalty `α f(LAT)` as a graph node.
pub fn latency_penalty(g: &mut Graph, lat: Var, alpha: f64, beta: f64, form: LossForm) -> Result<Var> {
    let base = match form {
        LossForm::LogPower => {
            let v = g.value(lat).item();
            if !(v > 1.0) {
                return Err(Error::Domain {
                    op: "loss",
                    msg: format!("log-power loss needs LAT > 1 us, got {v}"),
                });
            }
            g.ln(lat)?
        }
        LossForm::Power => lat,
    };
    let p = g.pow(base, beta)?;
    g.scale(p, alpha)
}

/// Total search loss on the graph.
pub fn loss(g: &mut Graph, ce: Var, lat: Var, alpha: f64, beta: f64, form: LossForm) -> Result<Var> {
    let pen = latency_penalty(g, lat, alpha, beta, form)?;
    g.add(ce, pen)
}

/// Plain-value latency penalty.
pub fn latency_penalty_value(lat: f64, alpha: f64, beta: f64, form: LossForm) -> Result<f64> {
    match form {
        LossForm::LogPower if !(lat > 1.0) => Err(Error::Domain {
            op: "loss",
            msg: format!("log-power loss needs LAT > 1 us, got {lat}"),
        }),
        LossForm::LogPower => Ok(alpha * lat.ln().powf(beta)),
        LossForm::Power => Ok(alpha * lat.powf(beta)),
    }
}

pub fn loss_value(ce: f64, lat: f64, alpha: f64, beta: f64, form: LossForm) -> Result<f64> {
    Ok(ce + latency_penalty_value(lat, alpha, beta, form)?)
}

fn default_beta() -> f64 {
    0.6
}
fn default_batch() -> usize {
    32
}
fn default_theta_fraction() -> f64 {
    0.2
}
fn default_theta_lr() -> f64 {
    0.01
}
fn default_psi_lr() -> f64 {
    0.002
}
fn default_phi() -> f64 {
    SkipInjection::default().phi
}
fn default_lambda() -> f64 {
    SkipInjection::default().lambda
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub loss_form: LossForm,
    #[serde(default = "default_phi")]
    pub phi: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub threshold: ThresholdPolicy,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Share of the training split used for architecture steps.
    #[serde(default = "default_theta_fraction")]
    pub theta_fraction: f64,
    #[serde(default = "default_theta_lr")]
    pub theta_lr: f64,
    #[serde(default = "default_psi_lr")]
    pub psi_lr: f64,
    #[serde(default)]
    pub signal: SignalKind,
    #[serde(default)]
    pub seed: u64,
}

impl SearchConfig {
    pub fn new(alpha: f64, threshold: ThresholdPolicy, seed: u64) -> Self {
        SearchConfig {
            alpha,
            beta: default_beta(),
            loss_form: LossForm::default(),
            phi: default_phi(),
            lambda: default_lambda(),
            threshold,
            batch_size: default_batch(),
            theta_fraction: default_theta_fraction(),
            theta_lr: default_theta_lr(),
            psi_lr: default_psi_lr(),
            signal: SignalKind::default(),
            seed,
        }
    }

    pub fn skip(&self) -> SkipInjection {
        SkipInjection {
            phi: self.phi,
            lambda: self.lambda,
        }
    }

    pub fn validate(&self, net: &SuperNetConfig) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !pos(self.beta) {
            return Err(Error::config("alpha must be non-negative and beta positive"));
        }
        if !pos(self.theta_lr) || !pos(self.psi_lr) {
            return Err(Error::config("step sizes must be positive"));
        }
        if !(self.theta_fraction > 0.0 && self.theta_fraction < 1.0) {
            return Err(Error::config("theta_fraction must lie in (0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !self.phi.is_finite() || !self.lambda.is_finite() {
            return Err(Error::config("phi and lambda must be finite"));
        }
        let max_blocks = net
            .layer_plans()
            .iter()
            .map(|l| l.variants.len())
            .max()
            .unwrap_or(1);
        self.threshold.validate(max_blocks)
    }

    /// Whether two configs share an identical warmup phase.
    pub fn same_warmup(&self, other: &SearchConfig) -> bool {
        self.seed == other.seed
            && self.batch_size == other.batch_size
            && self.theta_fraction == other.theta_fraction
            && self.psi_lr == other.psi_lr
            && self.threshold.e_warmup == other.threshold.e_warmup
    }
}

/// RMSprop over the network weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    square_avg: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        RmsProp {
            lr,
            decay: 0.99,
            eps: 1e-8,
            square_avg: store.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    /// Applies the gradients of every parameter bound in the pass.
    pub fn step(&mut self, store: &mut ParamStore, g: &Graph, binder: &Binder) {
        for (id, var) in binder.bound() {
            let Some(grad) = g.grad(var) else { continue };
            let sq = &mut self.square_avg[id.index()];
            let w = store.get_mut(id).data_mut();
            for ((w, s), &gr) in w.iter_mut().zip(sq.iter_mut()).zip(grad) {
                *s = self.decay * *s + (1.0 - self.decay) * gr * gr;
                *w -= self.lr * gr / (s.sqrt() + self.eps);
            }
        }
    }
}

/// Adam over the architecture weights; moments live next to each weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
        }
    }

    /// `grads[l]` holds the gradient of layer `l`'s θ vector.
    pub fn step(&mut self, net: &mut SuperNet, grads: &[Vec<f64>]) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (layer, grad) in net.layers.iter_mut().zip(grads) {
            if layer.candidate_count() < 2 {
                continue;
            }
            for (w, &gr) in layer.arch_weights_mut().into_iter().zip(grad) {
                w.m = self.beta1 * w.m + (1.0 - self.beta1) * gr;
                w.v = self.beta2 * w.v + (1.0 - self.beta2) * gr * gr;
                w.value -= self.lr * (w.m / c1) / ((w.v / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Search,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub ce: f64,
    pub lat_us: f64,
    pub loss: f64,
    pub live_candidates: usize,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub epoch: usize,
    pub threshold: f64,
    pub layer: usize,
    pub removed: Vec<String>,
    pub injected: Option<String>,
    /// Final argmax collapse rather than a threshold decision.
    pub forced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub layer: usize,
    pub variant: String,
    pub progress: f64,
    pub signal: f64,
    pub s: f64,
    pub l: f64,
    pub small_mask: usize,
    pub large_mask: usize,
    pub reset: bool,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerChoice {
    pub stage: usize,
    pub layer: usize,
    /// Variant identity, or `"skip"`.
    pub choice: String,
    pub hidden: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub ce: f64,
    /// Latency penalty `α f(LAT)`.
    pub lat: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledArchitecture {
    pub layers: Vec<LayerChoice>,
    pub lat_us: f64,
    pub loss: LossComponents,
    pub config_hash: String,
}

impl SampledArchitecture {
    pub fn active_layers(&self) -> usize {
        self.layers.iter().filter(|l| l.choice != SKIP).count()
    }

    /// Checks every choice against the declared search space.
    pub fn validate_against(&self, config: &SuperNetConfig) -> Result<()> {
        let plans = config.layer_plans();
        if plans.len() != self.layers.len() {
            return Err(Error::config(format!(
                "architecture has {} layers, config has {}",
                self.layers.len(),
                plans.len()
            )));
        }
        for (p, c) in plans.iter().zip(&self.layers) {
            let at = format!("stage {} layer {}", p.stage, p.layer);
            if (c.stage, c.layer) != (p.stage, p.layer) {
                return Err(Error::config(format!("{at}: architecture lists stage {} layer {}", c.stage, c.layer)));
            }
            if c.choice == SKIP {
                if !p.skippable {
                    return Err(Error::config(format!("{at} is not skippable")));
                }
                if c.hidden.is_some() {
                    return Err(Error::config(format!("{at}: a skip has no hidden width")));
                }
                continue;
            }
            let v = p
                .variants
                .iter()
                .find(|v| v.id == c.choice)
                .ok_or_else(|| Error::config(format!("{at}: unknown variant '{}'", c.choice)))?;
            if !v.widths(config.granularity).contains(&c.hidden) {
                return Err(Error::config(format!(
                    "{at}: hidden width {:?} is not available for '{}' at granularity {}",
                    c.hidden, c.choice, config.granularity
                )));
            }
        }
        Ok(())
    }
}

/// Reads the chosen block of every layer.
pub fn sample_final(net: &SuperNet) -> Result<Vec<LayerChoice>> {
    net.layers
        .iter()
        .map(|l| {
            if l.blocks.len() != 1 {
                return Err(Error::Invariant(format!(
                    "layer {} still holds {} blocks",
                    l.plan.index,
                    l.blocks.len()
                )));
            }
            let (choice, hidden) = match &l.blocks[0] {
                LayerBlock::Skip { .. } => (SKIP.to_string(), None),
                LayerBlock::Single { variant, hidden, .. } => (variant.clone(), *hidden),
                LayerBlock::Prunode {
                    variant,
                    mask,
                    small,
                    large,
                    ..
                } => {
                    let w = if large.value > small.value {
                        mask.large_mask
                    } else {
                        mask.small_mask
                    };
                    (variant.clone(), Some(w))
                }
            };
            Ok(LayerChoice {
                stage: l.plan.stage,
                layer: l.plan.layer,
                choice,
                hidden,
            })
        })
        .collect()
}

/// Everything needed to resume after warmup.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub net: SuperNet,
    pub psi_opt: RmsProp,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub log: Vec<EpochRecord>,
    pub psi_rows: Vec<usize>,
    pub theta_rows: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub arch: SampledArchitecture,
    pub log: Vec<EpochRecord>,
    pub pruning: Vec<PruneEvent>,
    pub masks: Vec<MaskRecord>,
    pub net: SuperNet,
}

pub struct Search<'a> {
    pub config: SearchConfig,
    data: &'a Dataset,
    lut: &'a LatencyTable,
    state: Checkpoint,
    theta_opt: Adam,
    pruning: Vec<PruneEvent>,
    masks: Vec<MaskRecord>,
}

fn batches(rows: &[usize], size: usize) -> Vec<&[usize]> {
    rows.chunks(size).collect()
}

impl<'a> Search<'a> {
    pub fn new(net_config: &SuperNetConfig, config: SearchConfig, data: &'a Dataset, lut: &'a LatencyTable) -> Result<Self> {
        net_config.validate()?;
        config.validate(net_config)?;
        lut.check_complete(net_config)?;
        if data.is_empty() {
            return Err(Error::data(None, "training split is empty"));
        }
        if data.dim() != net_config.input_dim || data.classes() > net_config.classes {
            return Err(Error::config(format!(
                "dataset has dim {} and {} classes; supernet expects dim {} and {} classes",
                data.dim(),
                data.classes(),
                net_config.input_dim,
                net_config.classes
            )));
        }
        if data.len() < 2 {
            return Err(Error::data(None, "need at least two training rows to split"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let net = SuperNet::new(net_config, &mut rng)?;
        let mut rows: Vec<usize> = (0..data.len()).collect();
        rows.shuffle(&mut rng);
        let n_theta = ((data.len() as f64 * config.theta_fraction).round() as usize).clamp(1, data.len() - 1);
        let theta_rows = rows.split_off(data.len() - n_theta);
        let psi_opt = RmsProp::new(&net.store, config.psi_lr);
        let theta_opt = Adam::new(config.theta_lr);
        Ok(Search {
            config,
            data,
            lut,
            state: Checkpoint {
                net,
                psi_opt,
                rng,
                epoch: 0,
                log: Vec::new(),
                psi_rows: rows,
                theta_rows,
            },
            theta_opt,
            pruning: Vec::new(),
            masks: Vec::new(),
        })
    }

    /// Continues from a warmup checkpoint with a possibly different α, λ.
    pub fn resume(checkpoint: Checkpoint, config: SearchConfig, data: &'a Dataset, lut: &'a LatencyTable) -> Result<Self> {
        config.validate(&checkpoint.net.config)?;
        lut.check_complete(&checkpoint.net.config)?;
        if checkpoint.epoch > config.threshold.e_warmup {
            return Err(Error::Schedule("checkpoint is past the warmup phase".into()));
        }
        Ok(Search {
            theta_opt: Adam::new(config.theta_lr),
            config,
            data,
            lut,
            state: checkpoint,
            pruning: Vec::new(),
            masks: Vec::new(),
        })
    }

    pub fn net(&self) -> &SuperNet {
        &self.state.net
    }

    pub fn net_mut(&mut self) -> &mut SuperNet {
        &mut self.state.net
    }

    pub fn epoch(&self) -> usize {
        self.state.epoch
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.state.clone()
    }

    pub fn log(&self) -> &[EpochRecord] {
        &self.state.log
    }

    pub fn theta_rows(&self) -> &[usize] {
        &self.state.theta_rows
    }

    fn diverged(&self, epoch: usize) -> Error {
        #[derive(Serialize)]
        struct Snapshot {
            thetas: Vec<(usize, Vec<f64>)>,
            masks: Vec<(usize, String, MaskState)>,
        }
        let snap = Snapshot {
            thetas: self.state.net.layers.iter().map(|l| (l.plan.index, l.thetas())).collect(),
            masks: self.state.net.mask_states(),
        };
        Error::Diverged {
            epoch,
            snapshot: serde_json::to_string(&snap).unwrap_or_default(),
        }
    }

    fn guard<T>(&self, epoch: usize, r: Result<T>) -> Result<T> {
        match r {
            Err(Error::NonFinite { .. }) => Err(self.diverged(epoch)),
            other => other,
        }
    }

    /// One RMSprop step on the network weights; θ stays constant.
    pub fn psi_step(&mut self, rows: &[usize]) -> Result<f64> {
        let (x, labels) = self.data.batch(rows)?;
        let st = &mut self.state;
        let noise = st.net.sample_noise(&mut st.rng);
        let mut g = Graph::new();
        let mut binder = Binder::trainable(&st.net.store);
        let x = g.constant(x);
        let fp = st.net.forward(&mut g, &mut binder, x, false, Some(&noise), self.config.skip())?;
        let ce = g.softmax_cross_entropy(fp.logits, &labels)?;
        g.backward(ce)?;
        st.psi_opt.step(&mut st.net.store, &g, &binder);
        Ok(g.value(ce).item())
    }

    /// One Adam step on θ with the network weights held constant. Returns
    /// (CE, sampled LAT, loss).
    pub fn theta_step(&mut self, rows: &[usize]) -> Result<(f64, f64, f64)> {
        let (x, labels) = self.data.batch(rows)?;
        let st = &mut self.state;
        let noise = st.net.sample_noise(&mut st.rng);
        let mut g = Graph::new();
        let mut binder = Binder::frozen(&st.net.store);
        let x = g.constant(x);
        let fp = st.net.forward(&mut g, &mut binder, x, true, Some(&noise), self.config.skip())?;
        let ce = g.softmax_cross_entropy(fp.logits, &labels)?;
        let lat = total_latency(&mut g, &st.net, &fp.coefficients, self.lut)?;
        let c = &self.config;
        let total = loss(&mut g, ce, lat, c.alpha, c.beta, c.loss_form)?;
        g.backward(total)?;
        let grads: Vec<Vec<f64>> = fp
            .thetas
            .iter()
            .zip(&st.net.layers)
            .map(|(&t, l)| g.grad(t).map_or_else(|| vec![0.0; l.candidate_count()], <[f64]>::to_vec))
            .collect();
        self.theta_opt.step(&mut st.net, &grads);
        Ok((g.value(ce).item(), g.value(lat).item(), g.value(total).item()))
    }

    /// Advances every Prunode after an architecture step.
    fn update_masks(&mut self, epoch: usize, iteration: usize, progress: f64) {
        let signal_kind = self.config.signal;
        for layer in &mut self.state.net.layers {
            let probs = softmax_values(&layer.thetas());
            let mut offset = 0;
            for b in &mut layer.blocks {
                let n = b.candidate_count();
                if let LayerBlock::Prunode {
                    variant,
                    mask,
                    small,
                    large,
                    ..
                } = b
                {
                    let signal = match signal_kind {
                        SignalKind::ThetaDifference => weight_signal(small.value, large.value),
                        SignalKind::ProbabilityDifference => probs[offset + 1] - probs[offset],
                    };
                    let u = mask.update_masks(progress, signal);
                    if u.reset {
                        let (s, l) = reset_candidate_weights(small.value, large.value);
                        small.value = s;
                        large.value = l;
                    }
                    self.masks.push(MaskRecord {
                        epoch,
                        iteration,
                        layer: layer.plan.index,
                        variant: variant.clone(),
                        progress,
                        signal,
                        s: mask.s,
                        l: mask.l,
                        small_mask: mask.small_mask,
                        large_mask: mask.large_mask,
                        reset: u.reset,
                        frozen: u.was_frozen,
                    });
                }
                offset += n;
            }
        }
    }

    /// Noise-free expected latency of the current distribution.
    pub fn expected_latency(&self) -> Result<f64> {
        let net = &self.state.net;
        let lats = candidate_latencies(net, self.lut)?;
        let mut total = self.lut.fixed_latency(&net.config)?;
        for (l, lat) in net.layers.iter().zip(&lats) {
            total += softmax_values(&l.thetas()).iter().zip(lat).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(total)
    }

    fn record(&mut self, epoch: usize, phase: Phase, ce: f64, lat: f64, threshold: Option<f64>) -> Result<()> {
        let c = &self.config;
        let loss = loss_value(ce, lat, c.alpha, c.beta, c.loss_form);
        let loss = self.guard(epoch, loss)?;
        self.state.log.push(EpochRecord {
            epoch,
            phase,
            ce,
            lat_us: lat,
            loss,
            live_candidates: self.state.net.live_candidates(),
            threshold,
        });
        Ok(())
    }

    /// Trains the network weights on the full training split, θ frozen.
    pub fn run_warmup(&mut self) -> Result<()> {
        while self.state.epoch < self.config.threshold.e_warmup {
            let epoch = self.state.epoch + 1;
            let mut rows: Vec<usize> = (0..self.data.len()).collect();
            rows.shuffle(&mut self.state.rng);
            let mut ce_sum = 0.0;
            let mut n = 0;
            for b in batches(&rows, self.config.batch_size) {
                let r = self.psi_step(b);
                ce_sum += self.guard(epoch, r)? * b.len() as f64;
                n += b.len();
            }
            self.state.epoch = epoch;
            let lat = self.expected_latency()?;
            self.record(epoch, Phase::Warmup, ce_sum / n as f64, lat, None)?;
        }
        Ok(())
    }

    /// One phase-2 epoch: weight steps, architecture steps with mask
    /// updates, then pruning at the epoch's threshold.
    pub fn run_search_epoch(&mut self) -> Result<()> {
        let pol = self.config.threshold;
        let epoch = self.state.epoch + 1;
        if epoch <= pol.e_warmup || epoch > pol.e_total {
            return Err(Error::Schedule(format!("epoch {epoch} is not a search epoch")));
        }
        let mut psi_rows = self.state.psi_rows.clone();
        psi_rows.shuffle(&mut self.state.rng);
        for b in batches(&psi_rows, self.config.batch_size) {
            let r = self.psi_step(b);
            self.guard(epoch, r)?;
        }

        let mut theta_rows = self.state.theta_rows.clone();
        theta_rows.shuffle(&mut self.state.rng);
        let per_epoch = theta_rows.len().div_ceil(self.config.batch_size);
        let total_iters = per_epoch * (pol.e_total - pol.e_warmup);
        let done_before = per_epoch * (epoch - pol.e_warmup - 1);
        let (mut ce_sum, mut lat_sum, mut n) = (0.0, 0.0, 0);
        for (i, b) in batches(&theta_rows, self.config.batch_size).into_iter().enumerate() {
            let r = self.theta_step(b);
            let (ce, lat, _) = self.guard(epoch, r)?;
            ce_sum += ce * b.len() as f64;
            lat_sum += lat * b.len() as f64;
            n += b.len();
            let iteration = done_before + i + 1;
            self.update_masks(epoch, iteration, iteration as f64 / total_iters as f64);
        }

        let t = pol.threshold_at(epoch)?;
        for layer in &mut self.state.net.layers {
            let r = prune_layer(layer, t);
            if !r.is_empty() {
                self.pruning.push(PruneEvent {
                    epoch,
                    threshold: t,
                    layer: r.layer,
                    removed: r.removed,
                    injected: r.injected,
                    forced: false,
                });
            }
        }
        if epoch == pol.e_total {
            for layer in &mut self.state.net.layers {
                let removed = collapse_blocks(layer, self.lut)?;
                if !removed.is_empty() {
                    self.pruning.push(PruneEvent {
                        epoch,
                        threshold: t,
                        layer: layer.plan.index,
                        removed,
                        injected: None,
                        forced: true,
                    });
                }
            }
        }
        self.state.epoch = epoch;
        self.record(epoch, Phase::Search, ce_sum / n as f64, lat_sum / n as f64, Some(t))
    }

    /// Mean CE of the current network (noise-free) over `rows`.
    pub fn evaluate_ce(&self, rows: &[usize]) -> Result<f64> {
        let net = &self.state.net;
        let mut sum = 0.0;
        for b in batches(rows, 256) {
            let (x, labels) = self.data.batch(b)?;
            let mut g = Graph::new();
            let mut binder = Binder::frozen(&net.store);
            let x = g.constant(x);
            let fp = net.forward(&mut g, &mut binder, x, false, None, self.config.skip())?;
            let ce = g.softmax_cross_entropy(fp.logits, &labels)?;
            sum += g.value(ce).item() * b.len() as f64;
        }
        Ok(sum / rows.len() as f64)
    }

    /// Runs whatever epochs remain and samples the final architecture.
    pub fn run(mut self) -> Result<SearchOutcome> {
        self.run_warmup()?;
        while self.state.epoch < self.config.threshold.e_total {
            self.run_search_epoch()?;
        }
        self.finish()
    }

    fn finish(mut self) -> Result<SearchOutcome> {
        for layer in &mut self.state.net.layers {
            collapse_prunode(layer);
        }
        let choices = sample_final(&self.state.net)?;
        let net_config = self.state.net.config.clone();
        let mut arch = SampledArchitecture {
            layers: choices,
            lat_us: 0.0,
            loss: LossComponents {
                ce: 0.0,
                lat: 0.0,
                total: 0.0,
            },
            config_hash: net_config.fingerprint(),
        };
        arch.validate_against(&net_config)?;
        arch.lat_us = final_latency(&arch, &net_config, self.lut)?;
        let ce = self.evaluate_ce(&self.state.theta_rows)?;
        let c = &self.config;
        let lat = latency_penalty_value(arch.lat_us, c.alpha, c.beta, c.loss_form)?;
        arch.loss = LossComponents { ce, lat, total: ce + lat };

        // warmup rows were recorded before α was known for this branch
        for r in &mut self.state.log {
            r.loss = loss_value(r.ce, r.lat_us, c.alpha, c.beta, c.loss_form)?;
        }
        Ok(SearchOutcome {
            arch,
            log: self.state.log,
            pruning: self.pruning,
            masks: self.masks,
            net: self.state.net,
        })
    }
}

/// Full search from scratch.
pub fn run_search(net_config: &SuperNetConfig, config: &SearchConfig, train: &Dataset, lut: &LatencyTable) -> Result<SearchOutcome> {
    Search::new(net_config, config.clone(), train, lut)?.run()
}

fn default_retrain_epochs() -> usize {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrainConfig {
    #[serde(default = "default_retrain_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_psi_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        RetrainConfig {
            epochs: default_retrain_epochs(),
            batch_size: default_batch(),
            lr: default_psi_lr(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainMetrics {
    pub top1: f64,
    pub epochs: usize,
    pub seed: u64,
    pub train_ce: f64,
}

/// Top-1 accuracy of `net` (noise-free) on `data`.
pub fn accuracy(net: &SuperNet, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::data(None, "evaluation split is empty"));
    }
    let rows: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for b in batches(&rows, 256) {
        let (x, labels) = data.batch(b)?;
        let mut g = Graph::new();
        let mut binder = Binder::frozen(&net.store);
        let x = g.constant(x);
        let fp = net.forward(&mut g, &mut binder, x, false, None, SkipInjection::default())?;
        let logits = g.value(fp.logits);
        let k = net.config.classes;
        for (r, &y) in labels.iter().enumerate() {
            let row = &logits.data()[r * k..(r + 1) * k];
            let best = row
                .iter()
                .enumerate()
                .fold(0, |bi, (i, &v)| if v > row[bi] { i } else { bi });
            correct += usize::from(best == y);
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains a fresh network with the sampled architecture and reports its
/// held-out top-1 accuracy.
pub fn retrain(
    net_config: &SuperNetConfig,
    arch: &SampledArchitecture,
    train: &Dataset,
    val: &Dataset,
    config: &RetrainConfig,
) -> Result<(SuperNet, RetrainMetrics)> {
    if config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(Error::config("retrain needs a positive batch size and step size"));
    }
    if train.dim() != net_config.input_dim || val.dim() != net_config.input_dim {
        return Err(Error::config("dataset width does not match the supernet input"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = SuperNet::from_architecture(net_config, arch, &mut rng)?;
    let mut opt = RmsProp::new(&net.store, config.lr);
    let mut rows: Vec<usize> = (0..train.len()).collect();
    let mut train_ce = f64::NAN;
    for _ in 0..config.epochs {
        rows.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0);
        for b in batches(&rows, config.batch_size) {
            let (x, labels) = train.batch(b)?;
            let mut g = Graph::new();
            let mut binder = Binder::trainable(&net.store);
            let x = g.constant(x);
            let fp = net.forward(&mut g, &mut binder, x, false, None, SkipInjection::default())?;
            let ce = g.softmax_cross_entropy(fp.logits, &labels)?;
            g.backward(ce)?;
            opt.step(&mut net.store, &g, &binder);
            sum += g.value(ce).item() * b.len() as f64;
            n += b.len();
        }
        train_ce = sum / n as f64;
    }
    let top1 = accuracy(&net, val)?;
    Ok((
        net,
        RetrainMetrics {
            top1,
            epochs: config.epochs,
            seed: config.seed,
            train_ce,
        },
    ))
}
