//! Goal-conditioned shape servoing by reinforcement learning.
//!
//! A soft actor-critic agent learns to reshape a simulated loin by pushing
//! its boundary: observations and goals are boundary token sets, the policy
//! is a transformer over the combined tokens, and an action picks a boundary
//! token and a push length along its inward normal. Training runs entirely
//! in [`crate::sim`]; a trained checkpoint then serves push decisions for
//! real or simulated masks through [`ActServer`].

mod agent;
mod net;
mod sac;

pub use agent::{
    evaluate, load_policy, save_policy, train, ActDecision, ActServer, EvalReport, PolicyMeta,
    SetStat, ShapeEnv, StepOutcome, TrainReport,
};
pub use net::{
    actor_forward, critic_forward, mode_action, sample_action, ArchConfig, Network, PolicyStats,
};
pub use sac::{sac_update, Optimizers, Replay, SacLosses};

use crate::contour::{BoundaryTokenSet, ContourError, SegMask};
use crate::nn::CheckpointError;
use crate::sim::SimError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("empty observation")]
    EmptyObservation,
    #[error("no valid push origin")]
    NoValidPushOrigin,
    #[error("both masks empty")]
    BothMasksEmpty,
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    MaskDimensionMismatch(usize, usize, usize, usize),
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Contour(#[from] ContourError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One push: token choice `i` plus length `d` (px) along the token's inward
/// normal. `u` is the pre-squash Gaussian sample behind `d` (stored so the
/// critic can be conditioned on the normalized length `tanh(u)`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PushAction {
    pub i: usize,
    pub d: f64,
    pub u: f64,
    /// Push origin: the chosen token position, px.
    pub origin: [f64; 2],
    /// Realized displacement `d · n̂ᵢ`, px.
    pub vector: [f64; 2],
}

/// Replay tuple (o, g, a, r, o').
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Transition {
    pub o: BoundaryTokenSet,
    pub g: BoundaryTokenSet,
    pub a: PushAction,
    pub r: f64,
    pub o_next: BoundaryTokenSet,
    /// True only on environment-defined termination (goal reached); episode
    /// timeouts are not terminal, so the critic still bootstraps there.
    pub terminal: bool,
}

/// Full agent configuration (architecture, SAC constants, environment).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RlConfig {
    pub arch: ArchConfig,
    /// Push length range [d_min, d_max], px, realized via a tanh-affine map.
    pub d_min_px: f64,
    pub d_max_px: f64,
    pub gamma: f64,
    /// Target-network exponential averaging weight per update.
    pub polyak: f64,
    pub target_entropy: f64,
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub alpha_lr: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Uniform-random warmup pushes before SAC updates begin.
    pub warmup_transitions: usize,
    pub episodes: usize,
    /// Episodes collected per set; one CSV row and one update burst per set.
    pub episodes_per_set: usize,
    pub updates_per_set: usize,
    pub episode_len: usize,
    /// Convergence thresholds (centroid distance px, variance ratio).
    pub eps1_px: f64,
    pub eps2: f64,
    /// Use the literal lowest-IoU-over-shifts reward instead of the best
    /// alignment.
    pub literal_min_reward: bool,
    /// Rendered mask side, px (square).
    pub img: usize,
    pub meters_per_px: f64,
    /// Loin geometry for training episodes.
    pub loin_length_m: f64,
    pub loin_width_m: f64,
    pub loin_aspect_jitter: f64,
    /// Spawn pose jitter: |Δx|,|Δy| (m) and |Δθ| (rad) bounds.
    pub spawn_offset_m: f64,
    pub spawn_angle_rad: f64,
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig::desk()
    }
}

impl RlConfig {
    /// Small configuration that trains in minutes on one core.
    pub fn desk() -> Self {
        RlConfig {
            arch: ArchConfig {
                n_tokens: 16,
                d_model: 64,
                n_layers: 2,
                n_heads: 4,
                ff_hidden: 256,
                head_hidden: 64,
            },
            d_min_px: 6.0,
            d_max_px: 48.0,
            gamma: 0.95,
            polyak: 0.005,
            target_entropy: -1.0,
            critic_lr: 1e-4,
            actor_lr: 3e-4,
            alpha_lr: 3e-4,
            batch_size: 32,
            replay_capacity: 50_000,
            warmup_transitions: 500,
            episodes: 3000,
            episodes_per_set: 32,
            updates_per_set: 96,
            episode_len: 8,
            eps1_px: 10.0,
            eps2: 1.2,
            literal_min_reward: false,
            img: 128,
            meters_per_px: 0.002,
            loin_length_m: 0.15,
            loin_width_m: 0.04,
            loin_aspect_jitter: 0.08,
            spawn_offset_m: 0.012,
            spawn_angle_rad: 0.10,
            seed: 0,
        }
    }

    /// Full-size configuration matching the deployed system's scale.
    pub fn full() -> Self {
        let mut cfg = RlConfig::desk();
        cfg.arch = ArchConfig {
            n_tokens: 32,
            d_model: 256,
            n_layers: 3,
            n_heads: 8,
            ff_hidden: 1024,
            head_hidden: 128,
        };
        cfg.episodes = 96_000;
        cfg.updates_per_set = 256;
        cfg
    }

    pub fn validate(&self) -> Result<(), RlError> {
        if self.arch.n_tokens == 0 || self.arch.d_model == 0 || self.arch.n_layers == 0 {
            return Err(RlError::BadConfig("zero-sized architecture".into()));
        }
        if self.arch.d_model % self.arch.n_heads != 0 {
            return Err(RlError::BadConfig(
                "d_model must be a multiple of n_heads".into(),
            ));
        }
        if !(self.d_min_px < self.d_max_px && self.d_min_px > 0.0) {
            return Err(RlError::BadConfig("push range must satisfy 0 < d_min < d_max".into()));
        }
        if self.batch_size == 0 || self.episode_len == 0 {
            return Err(RlError::BadConfig("batch_size and episode_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(RlError::BadConfig("gamma must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Tool radius in pixels at this config's scale.
    pub fn tool_radius_px(&self, tool_radius_m: f64) -> f64 {
        tool_radius_m / self.meters_per_px
    }
}

/// Best-alignment IoU between an observation and a goal searched over all
/// integer translations of `g` within a ±5 px window (121 shifts); the
/// literal variant takes the worst alignment instead. Either way the result
/// sits in [0, 1] and is invariant to small translational discrepancies
/// under the default semantics.
pub fn reward(o_next: &SegMask, g: &SegMask, literal_min: bool) -> Result<f64, RlError> {
    if o_next.height() != g.height() || o_next.width() != g.width() {
        return Err(RlError::MaskDimensionMismatch(
            o_next.height(),
            o_next.width(),
            g.height(),
            g.width(),
        ));
    }
    if o_next.is_empty() && g.is_empty() {
        return Err(RlError::BothMasksEmpty);
    }
    let packed_o = o_next.packed_rows();
    let mut best: Option<f64> = None;
    for dy in -5i64..=5 {
        for dx in -5i64..=5 {
            let shifted = g.translated(dx, dy).packed_rows();
            let mut inter = 0u64;
            let mut union = 0u64;
            for (a, b) in packed_o.rows.iter().zip(&shifted.rows) {
                inter += (a & b).count_ones() as u64;
                union += (a | b).count_ones() as u64;
            }
            let iou = if union == 0 {
                0.0
            } else {
                inter as f64 / union as f64
            };
            best = Some(match best {
                None => iou,
                Some(b) if literal_min => b.min(iou),
                Some(b) => b.max(iou),
            });
        }
    }
    Ok(best.expect("121 shifts evaluated"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contour::SegMask;

    fn square(dim: usize, r0: usize, c0: usize, size: usize) -> SegMask {
        SegMask::from_fn(dim, dim, |r, c| {
            r >= r0 && r < r0 + size && c >= c0 && c < c0 + size
        })
    }

    #[test]
    fn identical_masks_score_one() {
        let g = square(32, 10, 10, 8);
        assert_eq!(reward(&g.clone(), &g, false).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_beyond_shift_reach_scores_zero() {
        let o = square(64, 4, 4, 6);
        let g = square(64, 40, 40, 6);
        assert_eq!(reward(&o, &g, false).unwrap(), 0.0);
        assert_eq!(reward(&o, &g, true).unwrap(), 0.0);
    }

    #[test]
    fn three_px_shift_recovered_by_max_semantics() {
        let g = square(32, 12, 12, 8);
        let o = g.translated(3, 0);
        assert_eq!(reward(&o, &g, false).unwrap(), 1.0);
        // The literal-min variant points the other way.
        assert!(reward(&o, &g, true).unwrap() < 0.5);
    }

    #[test]
    fn both_empty_is_an_error() {
        let e = SegMask::new(32, 32);
        assert!(matches!(
            reward(&e.clone(), &e, false),
            Err(RlError::BothMasksEmpty)
        ));
    }

    #[test]
    fn one_empty_scores_zero() {
        let o = square(32, 10, 10, 5);
        let e = SegMask::new(32, 32);
        assert_eq!(reward(&o, &e, false).unwrap(), 0.0);
        assert_eq!(reward(&e, &o, false).unwrap(), 0.0);
    }

    /// The packed-row fast path must agree exactly with a literal double
    /// loop over shifted masks.
    #[test]
    fn packed_iou_matches_double_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for case in 0..200 {
            let o = SegMask::from_fn(32, 32, |_, _| rng.gen_bool(0.3));
            let g = SegMask::from_fn(32, 32, |_, _| rng.gen_bool(0.3));
            if o.is_empty() && g.is_empty() {
                continue;
            }
            for literal_min in [false, true] {
                let fast = reward(&o, &g, literal_min).unwrap();
                let mut oracle: Option<f64> = None;
                for dy in -5i64..=5 {
                    for dx in -5i64..=5 {
                        let shifted = g.translated(dx, dy);
                        let mut inter = 0usize;
                        let mut union = 0usize;
                        for r in 0..32 {
                            for c in 0..32 {
                                let a = o.get(r, c);
                                let b = shifted.get(r, c);
                                inter += usize::from(a && b);
                                union += usize::from(a || b);
                            }
                        }
                        let iou = if union == 0 {
                            0.0
                        } else {
                            inter as f64 / union as f64
                        };
                        oracle = Some(match oracle {
                            None => iou,
                            Some(b) if literal_min => b.min(iou),
                            Some(b) => b.max(iou),
                        });
                    }
                }
                assert_eq!(fast, oracle.unwrap(), "case {case}");
            }
        }
    }

    #[test]
    fn config_validation_rejects_bad_settings() {
        let mut cfg = RlConfig::desk();
        cfg.arch.n_heads = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = RlConfig::desk();
        cfg.d_min_px = 90.0;
        assert!(cfg.validate().is_err());
        assert!(RlConfig::desk().validate().is_ok());
        assert!(RlConfig::full().validate().is_ok());
    }

    #[test]
    fn config_json_roundtrip() {
        let cfg = RlConfig::desk();
        let s = serde_json::to_string(&cfg).unwrap();
        let back: RlConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back.arch.d_model, cfg.arch.d_model);
        assert_eq!(back.d_max_px, cfg.d_max_px);
    }
}
