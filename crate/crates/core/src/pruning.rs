//! Threshold-scheduled block removal and skip-connection injection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latency::LatencyTable;
use crate::space::LayerPlan;
use crate::supernet::{ArchWeight, LayerBlock, StochasticLayer};
use crate::tensor::{softmax_values, Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdKind {
    Linear,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdPolicy {
    pub kind: ThresholdKind,
    pub t_initial: f64,
    pub t_final: f64,
    pub e_warmup: usize,
    pub e_total: usize,
}

impl Default for ThresholdPolicy {
    /// 0.15 rising to 0.55 over epochs 70..=200.
    fn default() -> Self {
        ThresholdPolicy {
            kind: ThresholdKind::Linear,
            t_initial: 0.15,
            t_final: 0.55,
            e_warmup: 70,
            e_total: 200,
        }
    }
}

impl ThresholdPolicy {
    pub fn linear(t_initial: f64, t_final: f64, e_warmup: usize, e_total: usize) -> Self {
        ThresholdPolicy {
            kind: ThresholdKind::Linear,
            t_initial,
            t_final,
            e_warmup,
            e_total,
        }
    }

    pub fn constant(t: f64, e_warmup: usize, e_total: usize) -> Self {
        ThresholdPolicy {
            kind: ThresholdKind::Constant,
            t_initial: t,
            t_final: t,
            e_warmup,
            e_total,
        }
    }

    /// `max_blocks` is the largest number of blocks in any layer.
    pub fn validate(&self, max_blocks: usize) -> Result<()> {
        if self.e_warmup >= self.e_total {
            return Err(Error::Schedule(format!(
                "e_warmup {} must be below e_total {}",
                self.e_warmup, self.e_total
            )));
        }
        if !(self.t_initial >= 0.0) || self.t_initial > 1.0 / max_blocks.max(1) as f64 + 1e-12 {
            return Err(Error::Schedule(format!(
                "t_initial {} exceeds 1/{max_blocks}",
                self.t_initial
            )));
        }
        if self.kind == ThresholdKind::Linear && !(self.t_final >= 0.5 && self.t_final <= 1.0) {
            return Err(Error::Schedule(format!("t_final {} must lie in [0.5, 1]", self.t_final)));
        }
        Ok(())
    }

    /// Threshold in force at the end of epoch `e`.
    pub fn threshold_at(&self, e: usize) -> Result<f64> {
        if e < self.e_warmup {
            return Err(Error::Schedule(format!(
                "no pruning threshold during warmup (epoch {e} < {})",
                self.e_warmup
            )));
        }
        if e > self.e_total {
            return Err(Error::Schedule(format!("epoch {e} is past e_total {}", self.e_total)));
        }
        Ok(match self.kind {
            ThresholdKind::Constant => self.t_initial,
            ThresholdKind::Linear => {
                let frac = (e - self.e_warmup) as f64 / (self.e_total - self.e_warmup) as f64;
                self.t_initial + (self.t_final - self.t_initial) * frac
            }
        })
    }
}

/// Output multipliers while a layer holds one block and one skip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkipInjection {
    pub phi: f64,
    pub lambda: f64,
}

impl Default for SkipInjection {
    fn default() -> Self {
        SkipInjection { phi: 1.1, lambda: 0.55 }
    }
}

/// Identity; only layers whose input and output widths agree accept it.
pub fn skip_forward(g: &Graph, x: Var, plan: &LayerPlan) -> Result<Var> {
    let width = g.value(x).shape().last().copied().unwrap_or(0);
    if plan.in_channels != plan.out_channels || width != plan.in_channels {
        return Err(Error::config(format!(
            "layer {} cannot be skipped ({} -> {} channels, input width {width})",
            plan.index, plan.in_channels, plan.out_channels
        )));
    }
    Ok(x)
}

/// Noise-free choice probability of every block; a Prunode's is the sum of
/// its two candidates.
pub fn block_probabilities(layer: &StochasticLayer) -> Vec<f64> {
    let p = layer.probabilities();
    let mut out = Vec::with_capacity(layer.blocks.len());
    let mut i = 0;
    for b in &layer.blocks {
        let n = b.candidate_count();
        out.push(p[i..i + n].iter().sum());
        i += n;
    }
    out
}

fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub layer: usize,
    pub removed: Vec<String>,
    /// Label of the block a skip replaced.
    pub injected: Option<String>,
}

impl PruneReport {
    pub fn is_empty(&self) -> bool {
        self.removed.is_empty() && self.injected.is_none()
    }
}

/// Removes blocks below `t`, lowest probability first, recomputing the
/// distribution after each removal. When a skippable layer would drop to one
/// block, the penultimate block is replaced by a skip that takes over its
/// probability mass; the fresh skip is not judged in the same pass.
pub fn prune_layer(layer: &mut StochasticLayer, t: f64) -> PruneReport {
    let mut report = PruneReport {
        layer: layer.plan.index,
        removed: Vec::new(),
        injected: None,
    };
    while layer.blocks.len() > 1 {
        let probs = block_probabilities(layer);
        // ties go to the later block
        let (idx, p) = probs
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |best, (i, p)| if p <= best.1 { (i, p) } else { best });
        if !(p < t) {
            break;
        }
        let label = layer.blocks[idx].label();
        let is_penultimate = layer.blocks.len() == 2;
        if is_penultimate && layer.plan.skippable && !layer.skip_injected && !layer.blocks[idx].is_skip() {
            let theta = logsumexp(&layer.blocks[idx].thetas());
            layer.blocks[idx] = LayerBlock::Skip {
                theta: ArchWeight::new(theta),
            };
            layer.skip_injected = true;
            report.injected = Some(label);
            break;
        }
        layer.blocks.remove(idx);
        report.removed.push(label);
    }
    report
}

fn block_latency(layer: &StochasticLayer, i: usize, lut: &LatencyTable) -> Result<f64> {
    let lats = layer.candidate_latencies(lut)?;
    let start: usize = layer.blocks[..i].iter().map(LayerBlock::candidate_count).sum();
    let n = layer.blocks[i].candidate_count();
    Ok(lats[start..start + n].iter().copied().fold(f64::INFINITY, f64::min))
}

/// Keeps only the most probable block; ties favour the cheaper block, then
/// the earlier one. Returns the labels of the removed blocks.
pub fn collapse_blocks(layer: &mut StochasticLayer, lut: &LatencyTable) -> Result<Vec<String>> {
    if layer.blocks.len() <= 1 {
        return Ok(Vec::new());
    }
    let probs = block_probabilities(layer);
    let mut best = 0;
    for i in 1..probs.len() {
        let better = probs[i] > probs[best]
            || (probs[i] == probs[best] && block_latency(layer, i, lut)? < block_latency(layer, best, lut)?);
        if better {
            best = i;
        }
    }
    let keep = layer.blocks.swap_remove(best);
    let removed = layer.blocks.iter().map(LayerBlock::label).collect();
    layer.blocks = vec![keep];
    Ok(removed)
}

/// Turns a lone Prunode into a fixed block at the width of its preferred
/// candidate; ties pick the narrower one.
pub fn collapse_prunode(layer: &mut StochasticLayer) {
    if layer.blocks.len() != 1 {
        return;
    }
    if let LayerBlock::Prunode {
        variant,
        weights,
        mask,
        small,
        large,
    } = layer.blocks[0].clone()
    {
        let (hidden, theta) = if large.value > small.value {
            (mask.large_mask, large)
        } else {
            (mask.small_mask, small)
        };
        layer.blocks[0] = LayerBlock::Single {
            variant,
            hidden: Some(hidden),
            weights,
            theta,
        };
    }
}

/// Choice probabilities as a plain vector, for logging.
pub fn layer_distribution(layer: &StochasticLayer) -> Vec<f64> {
    softmax_values(&layer.thetas())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{BlockKind, VariantPlan};
    use crate::supernet::{BlockWeights, Dense, ParamId};
    use crate::tensor::{Activation, Tensor};

    fn plan(skippable: bool) -> LayerPlan {
        LayerPlan {
            index: 1,
            stage: 1,
            layer: 0,
            kind: BlockKind::Conv,
            activation: Activation::Relu,
            in_channels: 4,
            out_channels: 4,
            skippable,
            variants: Vec::<VariantPlan>::new(),
        }
    }

    fn simple(name: &str, theta: f64) -> LayerBlock {
        LayerBlock::Single {
            variant: name.into(),
            hidden: None,
            weights: BlockWeights::Head {
                dense: Dense {
                    w: ParamId::default_for_tests(),
                    b: ParamId::default_for_tests(),
                },
            },
            theta: ArchWeight::new(theta),
        }
    }

    fn layer(thetas: &[f64], skippable: bool) -> StochasticLayer {
        StochasticLayer {
            plan: plan(skippable),
            blocks: thetas
                .iter()
                .enumerate()
                .map(|(i, &t)| simple(&format!("b{i}"), t))
                .collect(),
            skip_injected: false,
        }
    }

    #[test]
    fn default_schedule() {
        let p = ThresholdPolicy::default();
        assert_eq!(p.threshold_at(70).unwrap(), 0.15);
        assert_eq!(p.threshold_at(200).unwrap(), 0.55);
        assert!((p.threshold_at(135).unwrap() - 0.35).abs() < 1e-15);
        assert!(matches!(p.threshold_at(69), Err(Error::Schedule(_))));
        let c = ThresholdPolicy::constant(0.2, 5, 10);
        assert!((5..=10).all(|e| c.threshold_at(e).unwrap() == 0.2));
    }

    #[test]
    fn policy_validation() {
        assert!(ThresholdPolicy::default().validate(4).is_ok());
        assert!(ThresholdPolicy::default().validate(8).is_err());
        assert!(ThresholdPolicy::linear(0.1, 0.4, 1, 5).validate(2).is_err());
        assert!(ThresholdPolicy::linear(0.1, 0.6, 5, 5).validate(2).is_err());
    }

    #[test]
    fn probabilities_examples() {
        assert_eq!(block_probabilities(&layer(&[0.0; 4], false)), vec![0.25; 4]);
        let p = block_probabilities(&layer(&[1.0, 0.0, 0.0, 0.0], false));
        let e = 1f64.exp();
        let want = [e / (e + 3.0), 1.0 / (e + 3.0), 1.0 / (e + 3.0), 1.0 / (e + 3.0)];
        for (got, want) in p.iter().zip(want) {
            assert!((got - want).abs() < 1e-15);
        }
        // 0.47537, 0.17488
        assert!((p[0] - 0.475_37).abs() < 1e-5 && (p[1] - 0.174_88).abs() < 1e-5);
    }

    #[test]
    fn cascade_to_singleton_without_skip() {
        let mut l = layer(&[1.0, 0.0, 0.0, 0.0], false);
        let r = prune_layer(&mut l, 0.2);
        // 0.175 < 0.2, then 0.21 ≥ 0.2 after renormalising over three blocks
        assert_eq!(r.removed, vec!["b3"]);
        let r = prune_layer(&mut l, 0.3);
        assert_eq!(r.removed, vec!["b2", "b1"]);
        assert_eq!(l.blocks.len(), 1);
        assert_eq!(l.blocks[0].label(), "b0");
        assert!(r.injected.is_none());
    }

    #[test]
    fn penultimate_block_becomes_skip() {
        let th = (0.6f64 / 0.4).ln();
        let mut l = layer(&[th, 0.0], true);
        let r = prune_layer(&mut l, 0.55);
        assert_eq!(r.injected.as_deref(), Some("b1"));
        assert!(l.multipliers_active());
        assert!(l.blocks[1].is_skip());
        assert_eq!(l.blocks[1].thetas(), vec![0.0]);
        // injection happens once: the next removal leaves a singleton
        let r = prune_layer(&mut l, 0.7);
        assert_eq!(r.removed, vec!["skip"]);
        assert!(!l.multipliers_active());
    }

    #[test]
    fn nothing_below_threshold() {
        let mut l = layer(&[0.0, 0.0], true);
        assert!(prune_layer(&mut l, 0.15).is_empty());
        assert_eq!(l.blocks.len(), 2);
    }

    #[test]
    fn exact_threshold_is_kept() {
        let mut l = layer(&[0.0; 4], false);
        assert!(prune_layer(&mut l, 0.25).is_empty());
    }

    #[test]
    fn skip_forward_identity_and_shape_check() {
        let mut g = Graph::new();
        let x = g.param(Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = skip_forward(&g, x, &plan(true)).unwrap();
        assert_eq!(y, x);
        let mut wide = plan(true);
        wide.out_channels = 8;
        assert!(matches!(skip_forward(&g, x, &wide), Err(Error::Config(_))));
    }

    #[test]
    fn collapse_breaks_ties_towards_cheaper() {
        let mut lut = LatencyTable::empty_analytic(4);
        lut.insert(crate::latency::LatencyEntryKey::new(1, "b0", 0), 5.0);
        lut.insert(crate::latency::LatencyEntryKey::new(1, "b1", 0), 3.0);
        let mut l = layer(&[0.0, 0.0], false);
        assert_eq!(collapse_blocks(&mut l, &lut).unwrap(), vec!["b0"]);
        assert_eq!(l.blocks[0].label(), "b1");
    }
}
