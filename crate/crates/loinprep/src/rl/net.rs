//! Policy/critic network: a transformer encoder over boundary tokens with a
//! per-token actor head and twin per-token critic heads.
//!
//! Observation and goal token sets (N each) embed into 2N tokens; after
//! unmasked self-attention only the observation outputs are kept, so the
//! goal acts purely as conditioning context. The actor head emits one
//! (logit, mean, log_std) triple per kept token; the critic heads score one
//! (features, push length) pair per token and the final Q is the expectation
//! over the categorical token choice.

use super::{PushAction, RlError};
use crate::contour::BoundaryTokenSet;
use crate::nn::{bind_set, init, ParamSet, SetBinding, Tape, Tensor, VarId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub(crate) const SET_TRUNK: u32 = 0;
pub(crate) const SET_ACTOR: u32 = 1;
pub(crate) const SET_CRITIC1: u32 = 2;
pub(crate) const SET_CRITIC2: u32 = 3;
pub(crate) const SET_ALPHA: u32 = 4;

/// Additive pre-softmax penalty that zeroes masked tokens' probability.
pub(crate) const MASK_PENALTY: f64 = -1e30;
/// Log-std bounds for the push-length Gaussian.
pub(crate) const LOG_STD_MIN: f64 = -5.0;
pub(crate) const LOG_STD_MAX: f64 = 2.0;
/// Guard inside log terms of the tanh-affine Jacobian.
const JAC_EPS: f64 = 1e-9;

/// Transformer sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Boundary tokens per mask (N); the encoder sees 2N.
    pub n_tokens: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_hidden: usize,
    /// Hidden width of the actor and critic MLP heads.
    pub head_hidden: usize,
}

/// All learnable parameters plus target copies of the critic heads.
#[derive(Debug, Clone)]
pub struct Network {
    pub arch: ArchConfig,
    /// Pixel half-extents (x, y) used to normalize token positions; fixed at
    /// training time and stored in checkpoints.
    pub feature_scale: [f64; 2],
    pub trunk: ParamSet,
    pub actor: ParamSet,
    pub critic1: ParamSet,
    pub critic2: ParamSet,
    pub target1: ParamSet,
    pub target2: ParamSet,
    /// Entropy temperature, log-parameterized (1×1).
    pub log_alpha: ParamSet,
}

impl Network {
    pub fn new(arch: ArchConfig, feature_scale: [f64; 2], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = arch.d_model;
        let mut trunk = ParamSet::new();
        trunk.add("embed.w", init::xavier(5, d, &mut rng));
        trunk.add("embed.b", Tensor::zeros(1, d));
        trunk.add("src.obs", init::normal(1, d, 0.02, &mut rng));
        trunk.add("src.goal", init::normal(1, d, 0.02, &mut rng));
        for l in 0..arch.n_layers {
            trunk.add(format!("l{l}.ln1.g"), Tensor::from_vec(1, d, vec![1.0; d]));
            trunk.add(format!("l{l}.ln1.b"), Tensor::zeros(1, d));
            for nm in ["wq", "wk", "wv", "wo"] {
                trunk.add(format!("l{l}.attn.{nm}"), init::xavier(d, d, &mut rng));
                trunk.add(format!("l{l}.attn.b{}", &nm[1..]), Tensor::zeros(1, d));
            }
            trunk.add(format!("l{l}.ln2.g"), Tensor::from_vec(1, d, vec![1.0; d]));
            trunk.add(format!("l{l}.ln2.b"), Tensor::zeros(1, d));
            trunk.add(format!("l{l}.ff.w1"), init::xavier(d, arch.ff_hidden, &mut rng));
            trunk.add(format!("l{l}.ff.b1"), Tensor::zeros(1, arch.ff_hidden));
            trunk.add(format!("l{l}.ff.w2"), init::xavier(arch.ff_hidden, d, &mut rng));
            trunk.add(format!("l{l}.ff.b2"), Tensor::zeros(1, d));
        }
        trunk.add("final_ln.g", Tensor::from_vec(1, d, vec![1.0; d]));
        trunk.add("final_ln.b", Tensor::zeros(1, d));

        let actor = head_params(d, arch.head_hidden, 3, &mut rng);
        let critic1 = head_params(d + 1, arch.head_hidden, 1, &mut rng);
        let critic2 = head_params(d + 1, arch.head_hidden, 1, &mut rng);
        let target1 = critic1.clone();
        let target2 = critic2.clone();
        // Rewards live in [0, 1] per push, so per-action Q gaps are small;
        // starting the temperature at 1 would drown them in entropy bonus
        // for thousands of updates before the tuner anneals it down.
        let mut log_alpha = ParamSet::new();
        let mut alpha0 = Tensor::zeros(1, 1);
        alpha0.data[0] = 0.1f64.ln();
        log_alpha.add("log_alpha", alpha0);
        Network {
            arch,
            feature_scale,
            trunk,
            actor,
            critic1,
            critic2,
            target1,
            target2,
            log_alpha,
        }
    }

    /// All-zero parameters (masking sanity / no-op checkpoints).
    pub fn zeros(arch: ArchConfig, feature_scale: [f64; 2]) -> Self {
        let mut net = Network::new(arch, feature_scale, 0);
        for set in [
            &mut net.trunk,
            &mut net.actor,
            &mut net.critic1,
            &mut net.critic2,
            &mut net.target1,
            &mut net.target2,
            &mut net.log_alpha,
        ] {
            for idx in 0..set.len() {
                let v = set.value_mut(idx);
                v.data.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        net
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.value(0).data[0].exp()
    }
}

fn head_params(input: usize, hidden: usize, output: usize, rng: &mut ChaCha8Rng) -> ParamSet {
    let mut set = ParamSet::new();
    set.add("h.w", init::xavier(input, hidden, rng));
    set.add("h.b", Tensor::zeros(1, hidden));
    set.add("out.w", init::xavier(hidden, output, rng));
    set.add("out.b", Tensor::zeros(1, output));
    set
}

/// Tape bindings for one parameter set: trainable leaves or frozen inputs.
/// Stacks `pairs` of (observation, goal) token sets into a (B·2N)×5 feature
/// matrix: rows are [x/hx − 1-centered, y-centered, n̂x, n̂y, v].
pub(crate) fn featurize_pairs(
    pairs: &[(&BoundaryTokenSet, &BoundaryTokenSet)],
    scale: [f64; 2],
    n_tokens: usize,
) -> Result<Tensor, RlError> {
    let two_n = 2 * n_tokens;
    let mut x = Tensor::zeros(pairs.len() * two_n, 5);
    for (b, (o, g)) in pairs.iter().enumerate() {
        if o.tokens.len() != n_tokens || g.tokens.len() != n_tokens {
            return Err(RlError::BadConfig(format!(
                "expected {n_tokens} tokens per set, got {} observation / {} goal",
                o.tokens.len(),
                g.tokens.len()
            )));
        }
        for (k, tok) in o.tokens.iter().chain(g.tokens.iter()).enumerate() {
            let r = b * two_n + k;
            x.set(r, 0, tok.p[0] / scale[0] - 1.0);
            x.set(r, 1, tok.p[1] / scale[1] - 1.0);
            x.set(r, 2, tok.n[0]);
            x.set(r, 3, tok.n[1]);
            x.set(r, 4, f64::from(tok.v));
        }
    }
    Ok(x)
}

/// Runs the encoder over embedded tokens and keeps the observation rows:
/// (B·2N)×5 input → (B·N)×D features.
pub(crate) fn trunk_apply(net: &Network, tape: &mut Tape, tb: &SetBinding, x: VarId) -> VarId {
    let a = &net.arch;
    let p = &net.trunk;
    let two_n = 2 * a.n_tokens;
    let w = tb.get(p, "embed.w");
    let b = tb.get(p, "embed.b");
    let mut e = tape.matmul(x, w);
    e = tape.add_row_broadcast(e, b);
    let src_o = tb.get(p, "src.obs");
    let src_g = tb.get(p, "src.goal");
    e = tape.add_row_to_block_range(e, src_o, two_n, 0, a.n_tokens);
    e = tape.add_row_to_block_range(e, src_g, two_n, a.n_tokens, two_n);
    for l in 0..a.n_layers {
        let h = tape.layer_norm(
            e,
            tb.get(p, &format!("l{l}.ln1.g")),
            tb.get(p, &format!("l{l}.ln1.b")),
        );
        let q = tape.matmul(h, tb.get(p, &format!("l{l}.attn.wq")));
        let q = tape.add_row_broadcast(q, tb.get(p, &format!("l{l}.attn.bq")));
        let k = tape.matmul(h, tb.get(p, &format!("l{l}.attn.wk")));
        let k = tape.add_row_broadcast(k, tb.get(p, &format!("l{l}.attn.bk")));
        let v = tape.matmul(h, tb.get(p, &format!("l{l}.attn.wv")));
        let v = tape.add_row_broadcast(v, tb.get(p, &format!("l{l}.attn.bv")));
        let att = tape.multi_head_attention(q, k, v, a.n_heads, two_n);
        let att = tape.matmul(att, tb.get(p, &format!("l{l}.attn.wo")));
        let att = tape.add_row_broadcast(att, tb.get(p, &format!("l{l}.attn.bo")));
        e = tape.add(e, att);
        let h2 = tape.layer_norm(
            e,
            tb.get(p, &format!("l{l}.ln2.g")),
            tb.get(p, &format!("l{l}.ln2.b")),
        );
        let f = tape.matmul(h2, tb.get(p, &format!("l{l}.ff.w1")));
        let f = tape.add_row_broadcast(f, tb.get(p, &format!("l{l}.ff.b1")));
        let f = tape.gelu(f);
        let f = tape.matmul(f, tb.get(p, &format!("l{l}.ff.w2")));
        let f = tape.add_row_broadcast(f, tb.get(p, &format!("l{l}.ff.b2")));
        e = tape.add(e, f);
    }
    e = tape.layer_norm(e, tb.get(p, "final_ln.g"), tb.get(p, "final_ln.b"));
    tape.take_rows_per_block(e, two_n, 0, a.n_tokens)
}

/// Actor head: (B·N)×D features → (B·N)×3 stats with the log-std column
/// clamped to its bounds.
pub(crate) fn actor_apply(net: &Network, tape: &mut Tape, ab: &SetBinding, feats: VarId) -> VarId {
    let p = &net.actor;
    let h = tape.matmul(feats, ab.get(p, "h.w"));
    let h = tape.add_row_broadcast(h, ab.get(p, "h.b"));
    let h = tape.gelu(h);
    let out = tape.matmul(h, ab.get(p, "out.w"));
    let out = tape.add_row_broadcast(out, ab.get(p, "out.b"));
    // Clamp only the log-std column, leaving logits and means untouched.
    let logit_mean = tape.slice_cols(out, 0, 2);
    let log_std = tape.slice_cols(out, 2, 3);
    let log_std = tape.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX);
    tape.concat_cols(logit_mean, log_std)
}

/// One critic head: features plus normalized push length → (B·N)×1 Q-values.
pub(crate) fn critic_apply(
    set: &ParamSet,
    tape: &mut Tape,
    cb: &SetBinding,
    feats: VarId,
    d_norm: VarId,
) -> VarId {
    let cin = tape.concat_cols(feats, d_norm);
    let h = tape.matmul(cin, cb.get(set, "h.w"));
    let h = tape.add_row_broadcast(h, cb.get(set, "h.b"));
    let h = tape.gelu(h);
    let q = tape.matmul(h, cb.get(set, "out.w"));
    tape.add_row_broadcast(q, cb.get(set, "out.b"))
}

/// Per-token policy statistics: N rows of (logit, mean, log_std). Logits of
/// invalid tokens (v = 0) are −∞.
#[derive(Debug, Clone)]
pub struct PolicyStats {
    pub stats: Tensor,
    pub valid: Vec<bool>,
}

impl PolicyStats {
    /// Categorical probabilities over valid tokens.
    pub fn probs(&self) -> Vec<f64> {
        let n = self.stats.rows;
        let max = (0..n)
            .filter(|&i| self.valid[i])
            .map(|i| self.stats.get(i, 0))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut p = vec![0.0; n];
        let mut sum = 0.0;
        for i in 0..n {
            if self.valid[i] {
                p[i] = (self.stats.get(i, 0) - max).exp();
                sum += p[i];
            }
        }
        p.iter_mut().for_each(|v| *v /= sum);
        p
    }
}

/// Deterministic forward pass of embed → encoder → actor head for a single
/// (observation, goal) pair.
pub fn actor_forward(
    net: &Network,
    o: &BoundaryTokenSet,
    g: &BoundaryTokenSet,
) -> Result<PolicyStats, RlError> {
    let valid: Vec<bool> = o.tokens.iter().map(|t| t.v == 1).collect();
    if !valid.iter().any(|&v| v) {
        return Err(RlError::NoValidPushOrigin);
    }
    let x = featurize_pairs(&[(o, g)], net.feature_scale, net.arch.n_tokens)?;
    let mut tape = Tape::new();
    let xin = tape.input(x);
    let tb = bind_set(&mut tape, SET_TRUNK, &net.trunk, false);
    let ab = bind_set(&mut tape, SET_ACTOR, &net.actor, false);
    let feats = trunk_apply(net, &mut tape, &tb, xin);
    let stats_id = actor_apply(net, &mut tape, &ab, feats);
    let mut stats = tape.value(stats_id).clone();
    for (i, &ok) in valid.iter().enumerate() {
        if !ok {
            stats.set(i, 0, f64::NEG_INFINITY);
        }
    }
    Ok(PolicyStats { stats, valid })
}

/// Expected Q under the categorical weights `p_i`, for each twin critic.
/// `d_norm` holds the normalized push length (tanh of the pre-squash sample)
/// per token; entries with zero weight do not affect the result.
pub fn critic_forward(
    net: &Network,
    o: &BoundaryTokenSet,
    g: &BoundaryTokenSet,
    p_i: &[f64],
    d_norm: &[f64],
) -> Result<(f64, f64), RlError> {
    let n = net.arch.n_tokens;
    assert_eq!(p_i.len(), n, "p_i must have one weight per token");
    assert_eq!(d_norm.len(), n);
    let sum: f64 = p_i.iter().sum();
    assert!(
        (sum - 1.0).abs() <= 1e-6,
        "p_i must sum to 1 (got {sum})"
    );
    let x = featurize_pairs(&[(o, g)], net.feature_scale, n)?;
    let mut tape = Tape::new();
    let xin = tape.input(x);
    let tb = bind_set(&mut tape, SET_TRUNK, &net.trunk, false);
    let c1 = bind_set(&mut tape, SET_CRITIC1, &net.critic1, false);
    let c2 = bind_set(&mut tape, SET_CRITIC2, &net.critic2, false);
    let feats = trunk_apply(net, &mut tape, &tb, xin);
    let dvec = tape.input(Tensor::from_vec(n, 1, d_norm.to_vec()));
    let q1 = critic_apply(&net.critic1, &mut tape, &c1, feats, dvec);
    let q2 = critic_apply(&net.critic2, &mut tape, &c2, feats, dvec);
    let expect = |tape: &Tape, q: VarId| -> f64 {
        let qv = tape.value(q);
        (0..n).map(|i| p_i[i] * qv.get(i, 0)).sum()
    };
    Ok((expect(&tape, q1), expect(&tape, q2)))
}

/// Maps a normalized length t ∈ [−1, 1] to pixels.
pub(crate) fn affine_d(t: f64, d_min: f64, d_max: f64) -> f64 {
    0.5 * (d_max + d_min) + 0.5 * (d_max - d_min) * t
}

/// Log-density of the tanh-affine push length given pre-squash `u`.
pub(crate) fn log_prob_d(u: f64, mean: f64, log_std: f64, d_min: f64, d_max: f64) -> f64 {
    let std = log_std.exp();
    let z = (u - mean) / std;
    let log_normal = -0.5 * z * z - log_std - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let t = u.tanh();
    let half = 0.5 * (d_max - d_min);
    log_normal - (half * (1.0 - t * t) + JAC_EPS).ln()
}

/// Samples (i, d) from the policy; returns the action and its log-probability.
pub fn sample_action(
    stats: &PolicyStats,
    o: &BoundaryTokenSet,
    d_min: f64,
    d_max: f64,
    rng: &mut impl Rng,
) -> Result<(PushAction, f64), RlError> {
    let p = stats.probs();
    if !p.iter().any(|&v| v > 0.0) {
        return Err(RlError::NoValidPushOrigin);
    }
    let roll: f64 = rng.gen();
    let mut acc = 0.0;
    let mut i = p.len() - 1;
    for (k, &pk) in p.iter().enumerate() {
        acc += pk;
        if roll < acc {
            i = k;
            break;
        }
    }
    // Guard against roundoff landing past the last nonzero bucket.
    while p[i] == 0.0 {
        i -= 1;
    }
    let mean = stats.stats.get(i, 1);
    let log_std = stats.stats.get(i, 2);
    let eps: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
    let u = mean + log_std.exp() * eps;
    let t = u.tanh();
    let d = affine_d(t, d_min, d_max);
    let log_p = p[i].ln() + log_prob_d(u, mean, log_std, d_min, d_max);
    Ok((make_action(o, i, d, u), log_p))
}

/// Deployment-deterministic action: argmax token, mean length.
pub fn mode_action(
    stats: &PolicyStats,
    o: &BoundaryTokenSet,
    d_min: f64,
    d_max: f64,
) -> Result<PushAction, RlError> {
    let mut best: Option<(usize, f64)> = None;
    for i in 0..stats.stats.rows {
        if !stats.valid[i] {
            continue;
        }
        let logit = stats.stats.get(i, 0);
        if best.map_or(true, |(_, b)| logit > b) {
            best = Some((i, logit));
        }
    }
    let (i, _) = best.ok_or(RlError::NoValidPushOrigin)?;
    let u = stats.stats.get(i, 1);
    let d = affine_d(u.tanh(), d_min, d_max);
    Ok(make_action(o, i, d, u))
}

fn make_action(o: &BoundaryTokenSet, i: usize, d: f64, u: f64) -> PushAction {
    let tok = &o.tokens[i];
    PushAction {
        i,
        d,
        u,
        origin: tok.p,
        vector: [d * tok.n[0], d * tok.n[1]],
    }
}
