//! Vision-transformer board-contact classifier.
//!
//! A sensor frame is resized (aspect-preserving) to 240×320, cropped to
//! 160×240 — at a uniformly random offset during training, centred at
//! inference — and the trajectory-start baseline frame is subtracted. The
//! difference image is partitioned into 24 patches of 40×40 RGB pixels,
//! each linearly embedded to 64 dimensions. A learnable classification
//! token is prepended, learnable positional embeddings are added, and a
//! 6-layer pre-norm encoder with 6 attention heads mixes the tokens. The
//! classification token is read out through a linear map that parametrizes
//! a binary softmax.
//!
//! Training minimizes categorical cross-entropy with schedule-free AdamW
//! (learning rate 3e-4, weight decay 10.0, batch 128) for a single epoch —
//! consecutive frames of one cutting trajectory are strongly correlated, so
//! a second pass mostly re-fits the same information. For the same reason
//! the train/hold-out split is by trajectory, never by frame. Inputs are
//! augmented with matched ±10° rotations: the frame and its baseline turn
//! together so the subtraction stays meaningful.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::Image;
use super::{ContactLabel, FrameSource, TactileError};
use crate::nn::{
    bind_set, init, load_checkpoint, save_checkpoint, Checkpoint, ParamSet, ScheduleFreeAdamW,
    SetBinding, Tape, Tensor, VarId,
};

/// Sensor frames are brought to this size before cropping.
pub const RESIZE_HEIGHT: usize = 240;
pub const RESIZE_WIDTH: usize = 320;
/// Crop fed to the classifier.
pub const CROP_HEIGHT: usize = 160;
pub const CROP_WIDTH: usize = 240;
/// Square patch edge; the crop tiles into a 4×6 grid of patches.
pub const PATCH: usize = 40;
/// Patch count (24) and flattened patch length (40·40·3).
pub const N_PATCHES: usize = (CROP_HEIGHT / PATCH) * (CROP_WIDTH / PATCH);
pub const PATCH_DIM: usize = PATCH * PATCH * 3;
/// Largest valid crop offset on either axis.
pub const MAX_CROP_OFFSET: (usize, usize) = (RESIZE_HEIGHT - CROP_HEIGHT, RESIZE_WIDTH - CROP_WIDTH);
/// Centred crop used at inference time.
pub const CENTER_CROP: (usize, usize) = (MAX_CROP_OFFSET.0 / 2, MAX_CROP_OFFSET.1 / 2);

const SET_VIT: u32 = 0;
const CHECKPOINT_KIND: &str = "tactile-vit";

/// Classifier architecture and training hyperparameters.
///
/// The defaults mirror the deployed sensor model; the geometry fields
/// (`n_patches`, `patch_dim`, `d_model`, …) are only meant to shrink for
/// finite-difference tests and must keep their defaults when the network is
/// used on real frames.
#[derive(Debug, Clone, PartialEq)]
pub struct VitConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    /// Per-head channel width. 64 model dimensions do not split evenly into
    /// 6 heads, so attention runs at an inner width of `n_heads × head_dim`
    /// (66) and the output projection maps back to `d_model`.
    pub head_dim: usize,
    pub d_model: usize,
    /// Feed-forward hidden width; 256 is the 4× expansion of the 64-wide
    /// tokens. Set to 4 for the literal-width variant.
    pub ff_hidden: usize,
    pub n_patches: usize,
    pub patch_dim: usize,
    pub dropout: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    /// Augmentation rotation bound, degrees.
    pub rotation_deg: f64,
    /// Fraction of trajectories held out for validation.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            n_layers: 6,
            n_heads: 6,
            head_dim: 11,
            d_model: 64,
            ff_hidden: 256,
            n_patches: N_PATCHES,
            patch_dim: PATCH_DIM,
            dropout: 0.01,
            lr: 3e-4,
            weight_decay: 10.0,
            batch: 128,
            rotation_deg: 10.0,
            holdout_fraction: 0.2,
            seed: 0,
        }
    }
}

impl VitConfig {
    /// Reads the feed-forward width as the literal 4 instead of a 4×
    /// expansion ratio.
    pub fn with_literal_ff(mut self) -> Self {
        self.ff_hidden = 4;
        self
    }

    /// Tiny two-layer geometry for finite-difference checks: every weight
    /// matrix stays small enough to perturb entry by entry.
    pub fn probe() -> Self {
        VitConfig {
            n_layers: 2,
            n_heads: 2,
            head_dim: 5,
            d_model: 12,
            ff_hidden: 16,
            n_patches: 4,
            patch_dim: 10,
            batch: 8,
            ..VitConfig::default()
        }
    }

    fn tokens(&self) -> usize {
        self.n_patches + 1
    }

    fn attn_width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    fn matches_sensor_geometry(&self) -> bool {
        self.n_patches == N_PATCHES && self.patch_dim == PATCH_DIM
    }
}

/// Classifier parameters plus the configuration they were built for.
#[derive(Debug, Clone)]
pub struct VitNet {
    pub cfg: VitConfig,
    pub params: ParamSet,
}

impl VitNet {
    pub fn new(cfg: VitConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let mut p = ParamSet::new();
        p.add("embed.w", init::xavier(cfg.patch_dim, d, &mut rng));
        p.add("embed.b", Tensor::zeros(1, d));
        p.add("cls", init::normal(1, d, 0.02, &mut rng));
        p.add("pos", init::normal(cfg.tokens(), d, 0.02, &mut rng));
        for l in 0..cfg.n_layers {
            let a = cfg.attn_width();
            p.add(format!("l{l}.ln1.g"), ones(1, d));
            p.add(format!("l{l}.ln1.b"), Tensor::zeros(1, d));
            for name in ["wq", "wk", "wv"] {
                p.add(format!("l{l}.attn.{name}"), init::xavier(d, a, &mut rng));
            }
            for name in ["bq", "bk", "bv"] {
                p.add(format!("l{l}.attn.{name}"), Tensor::zeros(1, a));
            }
            p.add(format!("l{l}.attn.wo"), init::xavier(a, d, &mut rng));
            p.add(format!("l{l}.attn.bo"), Tensor::zeros(1, d));
            p.add(format!("l{l}.ln2.g"), ones(1, d));
            p.add(format!("l{l}.ln2.b"), Tensor::zeros(1, d));
            p.add(format!("l{l}.ff.w1"), init::xavier(d, cfg.ff_hidden, &mut rng));
            p.add(format!("l{l}.ff.b1"), Tensor::zeros(1, cfg.ff_hidden));
            p.add(format!("l{l}.ff.w2"), init::xavier(cfg.ff_hidden, d, &mut rng));
            p.add(format!("l{l}.ff.b2"), Tensor::zeros(1, d));
        }
        p.add("final_ln.g", ones(1, d));
        p.add("final_ln.b", Tensor::zeros(1, d));
        p.add("head.w", init::xavier(d, 2, &mut rng));
        p.add("head.b", Tensor::zeros(1, 2));
        VitNet { cfg, params: p }
    }

    /// All-zero parameters (symmetric-logit sanity checks).
    pub fn zeros(cfg: VitConfig) -> Self {
        let mut net = VitNet::new(cfg);
        for idx in 0..net.params.len() {
            net.params.value_mut(idx).data.iter_mut().for_each(|x| *x = 0.0);
        }
        net
    }
}

fn ones(rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| 1.0)
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

/// Turns a raw frame/baseline pair into the classifier's input tokens: one
/// row per patch of the baseline-subtracted crop, channels interleaved,
/// scaled to [−1, 1]. `crop` is the (row, col) offset of the 160×240 window
/// in the resized 240×320 image; `rotation` (radians) is applied to the
/// frame *and* the baseline so the subtraction still cancels the gel
/// texture.
pub fn preprocess(
    frame: &Image,
    baseline: &Image,
    crop: (usize, usize),
    rotation: Option<f64>,
) -> Result<Tensor, TactileError> {
    if frame.height != baseline.height || frame.width != baseline.width {
        return Err(TactileError::SizeMismatch {
            expected: (baseline.height, baseline.width),
            got: (frame.height, frame.width),
        });
    }
    let f = frame.resize_cover(RESIZE_HEIGHT, RESIZE_WIDTH);
    let b = baseline.resize_cover(RESIZE_HEIGHT, RESIZE_WIDTH);
    Ok(patch_tokens(&f, &b, crop, rotation))
}

/// [`preprocess`] for images already at 240×320.
pub(crate) fn patch_tokens(
    frame: &Image,
    baseline: &Image,
    crop: (usize, usize),
    rotation: Option<f64>,
) -> Tensor {
    assert!(
        crop.0 <= MAX_CROP_OFFSET.0 && crop.1 <= MAX_CROP_OFFSET.1,
        "crop offset {crop:?} outside the resized frame"
    );
    let (f, b) = match rotation {
        Some(a) => (frame.rotate(a), baseline.rotate(a)),
        None => (frame.clone(), baseline.clone()),
    };
    let mut out = Tensor::zeros(N_PATCHES, PATCH_DIM);
    let cols = CROP_WIDTH / PATCH;
    for pr in 0..CROP_HEIGHT / PATCH {
        for pc in 0..cols {
            let patch = pr * cols + pc;
            for py in 0..PATCH {
                let r = crop.0 + pr * PATCH + py;
                for px in 0..PATCH {
                    let c = crop.1 + pc * PATCH + px;
                    let fp = f.pixel(r, c);
                    let bp = b.pixel(r, c);
                    for ch in 0..3 {
                        out.data[patch * PATCH_DIM + (py * PATCH + px) * 3 + ch] =
                            (f64::from(fp[ch]) - f64::from(bp[ch])) / 255.0;
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Encoder forward: `patches` holds `frames` blocks of `n_patches` rows and
/// returns one logit pair per frame. Passing an RNG enables dropout (teacher
/// mode); inference omits it and is deterministic.
pub(crate) fn vit_logits(
    net: &VitNet,
    tape: &mut Tape,
    vb: &SetBinding,
    patches: VarId,
    frames: usize,
    mut rng: Option<&mut ChaCha8Rng>,
) -> VarId {
    let cfg = &net.cfg;
    let p = &net.params;
    let tokens = cfg.tokens();
    let mut x = tape.matmul(patches, vb.get(p, "embed.w"));
    x = tape.add_row_broadcast(x, vb.get(p, "embed.b"));
    x = tape.prepend_row_per_block(x, vb.get(p, "cls"), cfg.n_patches);
    x = tape.add_block_broadcast(x, vb.get(p, "pos"), tokens);
    x = maybe_dropout(tape, x, cfg.dropout, rng.as_deref_mut());
    for l in 0..cfg.n_layers {
        let h = tape.layer_norm(
            x,
            vb.get(p, &format!("l{l}.ln1.g")),
            vb.get(p, &format!("l{l}.ln1.b")),
        );
        let q = tape.matmul(h, vb.get(p, &format!("l{l}.attn.wq")));
        let q = tape.add_row_broadcast(q, vb.get(p, &format!("l{l}.attn.bq")));
        let k = tape.matmul(h, vb.get(p, &format!("l{l}.attn.wk")));
        let k = tape.add_row_broadcast(k, vb.get(p, &format!("l{l}.attn.bk")));
        let v = tape.matmul(h, vb.get(p, &format!("l{l}.attn.wv")));
        let v = tape.add_row_broadcast(v, vb.get(p, &format!("l{l}.attn.bv")));
        let att = tape.multi_head_attention(q, k, v, cfg.n_heads, tokens);
        let att = tape.matmul(att, vb.get(p, &format!("l{l}.attn.wo")));
        let att = tape.add_row_broadcast(att, vb.get(p, &format!("l{l}.attn.bo")));
        let att = maybe_dropout(tape, att, cfg.dropout, rng.as_deref_mut());
        x = tape.add(x, att);
        let h2 = tape.layer_norm(
            x,
            vb.get(p, &format!("l{l}.ln2.g")),
            vb.get(p, &format!("l{l}.ln2.b")),
        );
        let f = tape.matmul(h2, vb.get(p, &format!("l{l}.ff.w1")));
        let f = tape.add_row_broadcast(f, vb.get(p, &format!("l{l}.ff.b1")));
        let f = tape.gelu(f);
        let f = maybe_dropout(tape, f, cfg.dropout, rng.as_deref_mut());
        let f = tape.matmul(f, vb.get(p, &format!("l{l}.ff.w2")));
        let f = tape.add_row_broadcast(f, vb.get(p, &format!("l{l}.ff.b2")));
        let f = maybe_dropout(tape, f, cfg.dropout, rng.as_deref_mut());
        x = tape.add(x, f);
    }
    x = tape.layer_norm(x, vb.get(p, "final_ln.g"), vb.get(p, "final_ln.b"));
    let cls = tape.take_rows_per_block(x, tokens, 0, 1);
    debug_assert_eq!(tape.value(cls).shape(), (frames, cfg.d_model));
    let out = tape.matmul(cls, vb.get(p, "head.w"));
    tape.add_row_broadcast(out, vb.get(p, "head.b"))
}

fn maybe_dropout(tape: &mut Tape, x: VarId, p: f64, rng: Option<&mut ChaCha8Rng>) -> VarId {
    let Some(rng) = rng else { return x };
    if p <= 0.0 {
        return x;
    }
    let (rows, cols) = tape.value(x).shape();
    let keep = 1.0 - p;
    let mask = Tensor::from_fn(rows, cols, |_, _| {
        if rng.gen::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    tape.mul_const_tensor(x, mask)
}

/// Softmax class probabilities `[p(no-contact), p(contact)]` for one frame's
/// patch tokens. Sums to 1 by construction and is deterministic (no
/// dropout).
pub fn class_probabilities(net: &VitNet, patches: &Tensor) -> [f64; 2] {
    assert_eq!(patches.shape(), (net.cfg.n_patches, net.cfg.patch_dim));
    let mut tape = Tape::new();
    let vb = bind_set(&mut tape, SET_VIT, &net.params, false);
    let x = tape.input(patches.clone());
    let logits = vit_logits(net, &mut tape, &vb, x, 1, None);
    let l = tape.value(logits);
    softmax_pair(l.get(0, 0), l.get(0, 1))
}

fn softmax_pair(l0: f64, l1: f64) -> [f64; 2] {
    let m = l0.max(l1);
    let e0 = (l0 - m).exp();
    let e1 = (l1 - m).exp();
    [e0 / (e0 + e1), e1 / (e0 + e1)]
}

/// Probability that `frame` shows board contact, relative to the
/// trajectory-start `baseline`. Centre crop, no augmentation.
pub fn contact_probability(
    net: &VitNet,
    frame: &Image,
    baseline: &Image,
) -> Result<f64, TactileError> {
    if !net.cfg.matches_sensor_geometry() {
        return Err(TactileError::Config(
            "classifier geometry does not match the sensor pipeline".into(),
        ));
    }
    let tokens = preprocess(frame, baseline, CENTER_CROP, None)?;
    Ok(class_probabilities(net, &tokens)[1])
}

// ---------------------------------------------------------------------------
// Training and evaluation
// ---------------------------------------------------------------------------

/// Hold-out confusion counts and the derived rates. When the classifier
/// never predicts contact, precision has an empty denominator and is
/// reported as 1.0 by convention with `degenerate_precision` set (and a
/// warning printed); an empty recall denominator is treated the same way.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
    pub degenerate_precision: bool,
}

/// Outcome of [`train_classifier`].
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub metrics: Metrics,
    pub train_frames: usize,
    pub holdout_frames: usize,
    /// Trajectory indices reserved for validation.
    pub holdout_trajectories: Vec<usize>,
    pub updates: usize,
}

/// Trains the classifier for a single epoch and evaluates it on held-out
/// trajectories. The split is by trajectory: frames within one cut are
/// near-duplicates of their temporal neighbours, so a frame-level split
/// would leak.
pub fn train_classifier(
    data: &dyn FrameSource,
    cfg: &VitConfig,
) -> Result<(VitNet, TrainReport), TactileError> {
    if !cfg.matches_sensor_geometry() {
        return Err(TactileError::Config(
            "classifier geometry does not match the sensor pipeline".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (holdout_trajs, samples) = split_dataset(data, cfg, &mut rng)?;

    let mut net = VitNet::new(cfg.clone());
    let mut opt = ScheduleFreeAdamW::new(SET_VIT, &net.params, cfg.lr, cfg.weight_decay);
    let mut baselines: HashMap<usize, Image> = HashMap::new();
    let mut updates = 0;
    let rot = cfg.rotation_deg.to_radians();
    for batch in samples.chunks(cfg.batch.max(1)) {
        let mut patches = Tensor::zeros(batch.len() * N_PATCHES, PATCH_DIM);
        let mut labels = Vec::with_capacity(batch.len());
        for (row, &(traj, idx)) in batch.iter().enumerate() {
            let frame = resized(&data.frame(traj, idx)?.image);
            let base = cached_baseline(&mut baselines, data, traj)?;
            let angle = rng.gen_range(-rot..=rot);
            let crop = (
                rng.gen_range(0..=MAX_CROP_OFFSET.0),
                rng.gen_range(0..=MAX_CROP_OFFSET.1),
            );
            let tokens = patch_tokens(&frame, &base, crop, Some(angle));
            let at = row * N_PATCHES * PATCH_DIM;
            patches.data[at..at + N_PATCHES * PATCH_DIM].copy_from_slice(&tokens.data);
            labels.push(match data.label(traj, idx) {
                Some(ContactLabel::Contact) => 1,
                _ => 0,
            });
        }
        let frames = batch.len();
        opt.write_training_params(&mut net.params);
        let mut tape = Tape::new();
        let vb = bind_set(&mut tape, SET_VIT, &net.params, true);
        let x = tape.input(patches);
        let logits = vit_logits(&net, &mut tape, &vb, x, frames, Some(&mut rng));
        let ce = tape.softmax_cross_entropy(logits, labels);
        let loss = tape.mean_all(ce);
        let grads = tape.backward(loss);
        opt.step(&mut net.params, &grads);
        updates += 1;
    }
    opt.write_eval_params(&mut net.params);

    let metrics = evaluate_classifier(&net, data, &holdout_trajs)?;
    let train_frames = samples.len();
    let holdout_frames = holdout_trajs
        .iter()
        .map(|&t| data.frames(t).saturating_sub(1))
        .sum();
    Ok((
        net,
        TrainReport {
            metrics,
            train_frames,
            holdout_frames,
            holdout_trajectories: holdout_trajs,
            updates,
        },
    ))
}

type Sample = (usize, usize);

/// Validates labels, checks both classes are present, and splits the
/// trajectories into train/hold-out with a shuffled per-sample order for the
/// training epoch. Frame 0 of every trajectory is its baseline and never a
/// sample.
fn split_dataset(
    data: &dyn FrameSource,
    cfg: &VitConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<Sample>), TactileError> {
    let mut trajs: Vec<usize> = (0..data.trajectories())
        .filter(|&t| data.frames(t) >= 2)
        .collect();
    if trajs.len() < 2 {
        return Err(TactileError::Config(
            "need at least two trajectories to split train/hold-out".into(),
        ));
    }
    let mut seen = [false; 2];
    for &t in &trajs {
        for idx in 1..data.frames(t) {
            match data.label(t, idx) {
                Some(ContactLabel::Contact) => seen[1] = true,
                Some(ContactLabel::NoContact) => seen[0] = true,
                None => {
                    return Err(TactileError::Config(format!(
                        "unlabeled frame {idx} in trajectory {t}"
                    )))
                }
            }
        }
    }
    if !(seen[0] && seen[1]) {
        return Err(TactileError::SingleClass);
    }
    trajs.shuffle(rng);
    let n_hold = ((trajs.len() as f64 * cfg.holdout_fraction).round() as usize)
        .clamp(1, trajs.len() - 1);
    let holdout = trajs.split_off(trajs.len() - n_hold);
    let mut samples: Vec<Sample> = trajs
        .iter()
        .flat_map(|&t| (1..data.frames(t)).map(move |i| (t, i)))
        .collect();
    samples.shuffle(rng);
    Ok((holdout, samples))
}

fn resized(img: &Image) -> Image {
    img.resize_cover(RESIZE_HEIGHT, RESIZE_WIDTH)
}

fn cached_baseline(
    cache: &mut HashMap<usize, Image>,
    data: &dyn FrameSource,
    traj: usize,
) -> Result<Image, TactileError> {
    if let Some(img) = cache.get(&traj) {
        return Ok(img.clone());
    }
    let img = resized(&data.frame(traj, 0)?.image);
    cache.insert(traj, img.clone());
    Ok(img)
}

/// Scores every non-baseline frame of the given trajectories with the
/// deterministic inference path (centre crop, no dropout) and tallies the
/// confusion matrix.
pub fn evaluate_classifier(
    net: &VitNet,
    data: &dyn FrameSource,
    trajectories: &[usize],
) -> Result<Metrics, TactileError> {
    const CHUNK: usize = 32;
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for &traj in trajectories {
        let base = resized(&data.frame(traj, 0)?.image);
        let idxs: Vec<usize> = (1..data.frames(traj)).collect();
        for chunk in idxs.chunks(CHUNK) {
            let mut patches = Tensor::zeros(chunk.len() * N_PATCHES, PATCH_DIM);
            let mut truth = Vec::with_capacity(chunk.len());
            for (row, &idx) in chunk.iter().enumerate() {
                let frame = resized(&data.frame(traj, idx)?.image);
                let tokens = patch_tokens(&frame, &base, CENTER_CROP, None);
                let at = row * N_PATCHES * PATCH_DIM;
                patches.data[at..at + N_PATCHES * PATCH_DIM].copy_from_slice(&tokens.data);
                truth.push(data.label(traj, idx).ok_or_else(|| {
                    TactileError::Config(format!("unlabeled frame {idx} in trajectory {traj}"))
                })?);
            }
            let frames = chunk.len();
            let mut tape = Tape::new();
            let vb = bind_set(&mut tape, SET_VIT, &net.params, false);
            let x = tape.input(patches);
            let logits = vit_logits(net, &mut tape, &vb, x, frames, None);
            let l = tape.value(logits);
            for (row, label) in truth.into_iter().enumerate() {
                let predicted = l.get(row, 1) > l.get(row, 0);
                match (predicted, label == ContactLabel::Contact) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, false) => tn += 1,
                    (false, true) => fn_ += 1,
                }
            }
        }
    }
    let total = tp + fp + tn + fn_;
    let degenerate_precision = tp + fp == 0;
    if degenerate_precision {
        eprintln!(
            "tactile: classifier made no contact predictions on the hold-out set; \
             precision reported as 1.0 by convention"
        );
    }
    Ok(Metrics {
        accuracy: if total == 0 {
            0.0
        } else {
            (tp + tn) as f64 / total as f64
        },
        precision: if degenerate_precision {
            1.0
        } else {
            tp as f64 / (tp + fp) as f64
        },
        recall: if tp + fn_ == 0 {
            1.0
        } else {
            tp as f64 / (tp + fn_) as f64
        },
        true_positives: tp,
        false_positives: fp,
        true_negatives: tn,
        false_negatives: fn_,
        degenerate_precision,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub fn save_classifier(path: &Path, net: &VitNet) -> Result<(), TactileError> {
    let mut ck = Checkpoint::new(CHECKPOINT_KIND);
    let c = &net.cfg;
    let meta = &mut ck.meta;
    meta.insert("n_layers".into(), c.n_layers.to_string());
    meta.insert("n_heads".into(), c.n_heads.to_string());
    meta.insert("head_dim".into(), c.head_dim.to_string());
    meta.insert("d_model".into(), c.d_model.to_string());
    meta.insert("ff_hidden".into(), c.ff_hidden.to_string());
    meta.insert("n_patches".into(), c.n_patches.to_string());
    meta.insert("patch_dim".into(), c.patch_dim.to_string());
    meta.insert("dropout".into(), c.dropout.to_string());
    meta.insert("seed".into(), c.seed.to_string());
    ck.push_param_set("vit", &net.params);
    save_checkpoint(path, &ck)?;
    Ok(())
}

pub fn load_classifier(path: &Path) -> Result<VitNet, TactileError> {
    let ck = load_checkpoint(path, Some(CHECKPOINT_KIND))?;
    let need = |key: &str| {
        ck.meta_usize(key)
            .ok_or_else(|| TactileError::Config(format!("checkpoint missing {key}")))
    };
    let cfg = VitConfig {
        n_layers: need("n_layers")?,
        n_heads: need("n_heads")?,
        head_dim: need("head_dim")?,
        d_model: need("d_model")?,
        ff_hidden: need("ff_hidden")?,
        n_patches: need("n_patches")?,
        patch_dim: need("patch_dim")?,
        dropout: ck
            .meta_f64("dropout")
            .ok_or_else(|| TactileError::Config("checkpoint missing dropout".into()))?,
        seed: ck.meta_usize("seed").unwrap_or(0) as u64,
        ..VitConfig::default()
    };
    let mut net = VitNet::new(cfg);
    ck.read_param_set("vit", &mut net.params)?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;

    fn flat(h: usize, w: usize, v: u8) -> Image {
        Image::from_fn(h, w, |_, _| [v, v, v])
    }

    #[test]
    fn crop_tiles_into_24_patches() {
        let f = flat(480, 640, 90);
        let b = flat(480, 640, 80);
        let t = preprocess(&f, &b, CENTER_CROP, None).unwrap();
        assert_eq!(t.shape(), (24, 4800));
        // every entry is the same constant difference
        for v in &t.data {
            assert!((v - 10.0 / 255.0).abs() < 1e-12);
        }
    }

    #[test]
    fn self_subtraction_is_exactly_zero() {
        let f = Image::from_fn(300, 400, |r, c| {
            [(r % 256) as u8, (c % 256) as u8, ((r * c) % 256) as u8]
        });
        let t = preprocess(&f, &f, (17, 33), Some(0.12)).unwrap();
        assert!(t.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let f = flat(480, 640, 10);
        let b = flat(480, 639, 10);
        assert!(matches!(
            preprocess(&f, &b, CENTER_CROP, None),
            Err(TactileError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn crop_shift_by_one_patch_permutes_patch_contents() {
        let f = Image::from_fn(240, 320, |r, c| {
            [(r % 251) as u8, (c % 241) as u8, ((r + 3 * c) % 255) as u8]
        });
        let b = flat(240, 320, 0);
        let a = patch_tokens(&f, &b, (0, 0), None);
        let shifted = patch_tokens(&f, &b, (0, PATCH), None);
        // column-shift by one patch: patch (pr, pc) of the shifted crop is
        // patch (pr, pc+1) of the original
        for pr in 0..4 {
            for pc in 0..5 {
                let from = pr * 6 + pc + 1;
                let to = pr * 6 + pc;
                assert_eq!(
                    a.data[from * PATCH_DIM..(from + 1) * PATCH_DIM],
                    shifted.data[to * PATCH_DIM..(to + 1) * PATCH_DIM]
                );
            }
        }
    }

    #[test]
    fn class_probabilities_sum_to_one() {
        let net = VitNet::new(VitConfig::default());
        let f = Image::from_fn(480, 640, |r, c| [(r % 256) as u8, (c % 256) as u8, 128]);
        let b = flat(480, 640, 100);
        let t = preprocess(&f, &b, CENTER_CROP, None).unwrap();
        let p = class_probabilities(&net, &t);
        assert!((p[0] + p[1] - 1.0).abs() <= 1e-9);
        assert!(p[0] > 0.0 && p[1] > 0.0);
    }

    #[test]
    fn zero_final_map_yields_even_odds() {
        let mut net = VitNet::new(VitConfig { seed: 7, ..VitConfig::default() });
        for name in ["head.w", "head.b"] {
            let idx = net.params.index_of(name).unwrap();
            net.params.value_mut(idx).data.iter_mut().for_each(|x| *x = 0.0);
        }
        let f = Image::from_fn(480, 640, |r, c| [(r % 256) as u8, (c % 256) as u8, 7]);
        let b = flat(480, 640, 3);
        let p = contact_probability(&net, &f, &b).unwrap();
        assert!((p - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn probability_ignores_global_illumination_offsets() {
        let net = VitNet::new(VitConfig { seed: 5, ..VitConfig::default() });
        let f = Image::from_fn(240, 320, |r, c| {
            [(60 + r % 100) as u8, (70 + c % 90) as u8, 90]
        });
        let b = flat(240, 320, 80);
        let brighten = |img: &Image| {
            Image::from_fn(img.height, img.width, |r, c| {
                let px = img.pixel(r, c);
                [px[0] + 40, px[1] + 40, px[2] + 40]
            })
        };
        let p0 = contact_probability(&net, &f, &b).unwrap();
        let p1 = contact_probability(&net, &brighten(&f), &brighten(&b)).unwrap();
        assert_eq!(p0, p1);
    }

    #[test]
    fn gradients_match_finite_differences_on_probe_network() {
        let cfg = VitConfig::probe();
        let net = VitNet::new(VitConfig { seed: 11, ..cfg.clone() });
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frames = 3;
        let x = Tensor::from_fn(frames * cfg.n_patches, cfg.patch_dim, |_, _| {
            rng.gen_range(-0.5..0.5)
        });
        let labels = vec![0usize, 1, 1];
        let mut params = net.params.clone();
        let report = gradcheck(&mut params, SET_VIT, 1e-5, |params, tape| {
            let mut scratch = net.clone();
            scratch.params = params.clone();
            let vb = bind_set(tape, SET_VIT, params, true);
            let xin = tape.input(x.clone());
            let logits = vit_logits(&scratch, tape, &vb, xin, frames, None);
            let ce = tape.softmax_cross_entropy(logits, labels.clone());
            tape.mean_all(ce)
        });
        assert!(
            report.max_rel_err <= 1e-3,
            "worst relative error {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn checkpoint_round_trips_parameters_and_config() {
        let net = VitNet::new(VitConfig { seed: 9, n_layers: 2, ..VitConfig::default() });
        let dir = std::env::temp_dir().join("loinprep-vit-ck");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vit.lpck");
        save_classifier(&path, &net).unwrap();
        let back = load_classifier(&path).unwrap();
        assert_eq!(back.cfg, net.cfg);
        for idx in 0..net.params.len() {
            assert_eq!(back.params.value(idx).data, net.params.value(idx).data);
        }
    }
}
