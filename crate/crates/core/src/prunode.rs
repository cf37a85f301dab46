//! Bi-path hidden-width search.
//!
//! A Prunode holds two candidates of one block that share weights and differ
//! only in how many inner hidden channels they keep. After every
//! architecture step the pair is nudged towards the candidate the
//! architecture weights prefer, while the gap between the two masks shrinks
//! with training progress until they sit on consecutive widths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latency::LatencyTable;

pub const DEFAULT_C: f64 = 0.8;
pub const DEFAULT_MAX_DISTANCE: f64 = 0.6;
pub const DEFAULT_MOMENTUM: f64 = 0.4;

/// Nearest multiple of `granularity`, ties away from zero.
pub fn round_to_granularity(x: f64, granularity: usize) -> i64 {
    let g = granularity as f64;
    (x / g).round() as i64 * granularity as i64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskState {
    /// Last preference signal; zeroed whenever the candidates' weights are reset.
    pub weight: f64,
    /// Momentum accumulator.
    pub update: f64,
    /// Small-mask fraction of `max_channels`.
    pub s: f64,
    /// Large-mask fraction of `max_channels`.
    pub l: f64,
    pub small_mask: usize,
    pub large_mask: usize,
    pub max_channels: usize,
    pub granularity: usize,
    pub c: f64,
    pub max_distance: f64,
    pub momentum: f64,
}

/// Outcome of one [`MaskState::update_masks`] call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskUpdate {
    /// The candidates' architecture weights must be reset to their mean.
    pub reset: bool,
    /// The call was a no-op because the masks had already converged.
    pub was_frozen: bool,
}

impl MaskState {
    pub fn new(max_channels: usize, granularity: usize) -> Result<Self> {
        if granularity == 0 || max_channels % granularity != 0 {
            return Err(Error::config(format!(
                "granularity {granularity} must divide max_channels {max_channels}"
            )));
        }
        if max_channels < 2 * granularity {
            return Err(Error::config(format!(
                "max_channels {max_channels} leaves no room for two masks at granularity {granularity}"
            )));
        }
        let s = 0.5;
        let small_mask = clip(
            round_to_granularity(s * max_channels as f64, granularity),
            granularity as i64,
            (max_channels - granularity) as i64,
        );
        Ok(MaskState {
            weight: 0.0,
            update: 0.0,
            s,
            l: 1.0,
            small_mask,
            large_mask: max_channels,
            max_channels,
            granularity,
            c: DEFAULT_C,
            max_distance: DEFAULT_MAX_DISTANCE,
            momentum: DEFAULT_MOMENTUM,
        })
    }

    pub fn with_constants(mut self, c: f64, max_distance: f64, momentum: f64) -> Self {
        self.c = c;
        self.max_distance = max_distance;
        self.momentum = momentum;
        self
    }

    /// Masks stop moving once they are at most one granularity step apart.
    pub fn is_frozen(&self) -> bool {
        (self.l - self.s) * self.max_channels as f64 <= self.granularity as f64
    }

    /// Advance the masks after one architecture-weight step.
    ///
    /// `signal` is positive when the large candidate is preferred.
    pub fn update_masks(&mut self, progress: f64, signal: f64) -> MaskUpdate {
        if self.is_frozen() {
            return MaskUpdate {
                reset: false,
                was_frozen: true,
            };
        }
        let progress = progress.clamp(0.0, 1.0);
        self.weight = signal;
        self.update = self.update * self.momentum + self.weight;
        let one_minus = 1.0 - progress;
        let distance = self.max_distance * (one_minus * one_minus);
        self.s += self.update;
        let reset = if self.s > 0.0 {
            self.weight = 0.0;
            self.s = self.s.min(1.0 - self.c * distance);
            true
        } else {
            // corner case: keep the accumulated update, no reset
            self.s = 0.0;
            false
        };
        self.l = self.s + distance;

        let g = self.granularity as i64;
        let max = self.max_channels as i64;
        self.small_mask = clip(round_to_granularity(self.s * self.max_channels as f64, self.granularity), g, max - g);
        self.large_mask = clip(
            round_to_granularity(self.l * self.max_channels as f64, self.granularity),
            self.small_mask as i64 + g,
            max,
        );
        MaskUpdate {
            reset,
            was_frozen: false,
        }
    }

    /// Checks the mask bounds every state must satisfy.
    pub fn check(&self) -> Result<()> {
        let g = self.granularity;
        let ok = self.s >= 0.0
            && self.small_mask % g == 0
            && self.large_mask % g == 0
            && self.small_mask >= g
            && self.small_mask + g <= self.max_channels
            && self.small_mask + g <= self.large_mask
            && self.large_mask <= self.max_channels;
        if ok {
            Ok(())
        } else {
            Err(Error::Invariant(format!("invalid mask state {self:?}")))
        }
    }
}

fn clip(v: i64, lo: i64, hi: i64) -> usize {
    v.max(lo).min(hi) as usize
}

/// How the scalar preference signal is read off the pair of candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    /// `θ_large − θ_small`.
    #[default]
    ThetaDifference,
    /// Difference of the two candidates' softmax probabilities in the layer.
    ProbabilityDifference,
}

/// Positive values push both masks wider.
pub fn weight_signal(theta_small: f64, theta_large: f64) -> f64 {
    theta_large - theta_small
}

/// Both weights collapse to their mean.
pub fn reset_candidate_weights(theta_small: f64, theta_large: f64) -> (f64, f64) {
    let m = 0.5 * (theta_small + theta_large);
    (m, m)
}

/// Gumbel-weighted latency of the pair, in μs.
pub fn prunode_latency(
    state: &MaskState,
    a_small: f64,
    a_large: f64,
    lut: &LatencyTable,
    layer: usize,
    variant: &str,
) -> Result<f64> {
    let small = lut.get(layer, variant, state.small_mask)?;
    let large = lut.get(layer, variant, state.large_mask)?;
    Ok(a_small * small + a_large * large)
}
