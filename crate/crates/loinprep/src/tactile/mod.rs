//! Tactile board-contact sensing and on-line cutting-trajectory correction.
//!
//! A gel-pad sensor in the knife handle images its own contact membrane;
//! pressing the blade edge against the cutting board leaves a ridge-shaped
//! deformation pattern in the difference between the current frame and a
//! baseline captured at the start of the cut. The [`vit`] classifier turns
//! that difference into a per-frame contact probability; [`monitor`] watches
//! the probability stream and raises a [`ContactEvent`] at the first frame
//! with p ≥ 0.5; [`adjust_remaining`] then translates every later waypoint
//! of the planned cut just far enough along the local blade normal that the
//! edge stays on the inferred board plane instead of pressing into it.
//!
//! No sensor hardware is attached here: [`SynthDataset`] procedurally
//! generates labeled frames - a textured gel image, per-frame sensor noise,
//! and (after a per-trajectory contact onset) a blade-edge pressure ridge
//! whose amplitude ramps up as the cut proceeds. Datasets round-trip to
//! directories of PPM frames with a JSON manifest ([`save_dataset`] /
//! [`DiskDataset`]), and trained classifiers share the checkpoint container
//! used elsewhere in the crate.

mod image;
mod vit;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cutting::{lowest_blade_point, KnifeModel, Trajectory};
use crate::geom::{GeomError, Plane, Pose};
use crate::nn::CheckpointError;

pub use image::{max_abs_diff, mean_abs_diff, Image};
pub use vit::{
    class_probabilities, contact_probability, evaluate_classifier, load_classifier, preprocess,
    save_classifier, train_classifier, Metrics, TrainReport, VitConfig, VitNet, CENTER_CROP,
    CROP_HEIGHT, CROP_WIDTH, MAX_CROP_OFFSET, N_PATCHES, PATCH, PATCH_DIM, RESIZE_HEIGHT,
    RESIZE_WIDTH,
};

/// Contact probability at or above which the monitor fires.
pub const CONTACT_THRESHOLD: f64 = 0.5;
/// Clearance below the inferred board plane tolerated after correction.
pub const CLEARANCE_TOL: f64 = 1e-9;
/// |n̂_b · n̂_k| below which the corrective direction is rejected.
const DEGENERATE_NORMAL_TOL: f64 = 1e-3;
/// Correcting a rigid pose moves every blade point by the same vector, so
/// the deepest index can only change a couple of times before the plane
/// constraint holds for all of them; the cap is generous.
const MAX_CORRECTION_ROUNDS: usize = 8;

#[derive(Debug, Error)]
pub enum TactileError {
    #[error("image size mismatch: expected {}x{}, got {}x{}", expected.0, expected.1, got.0, got.1)]
    SizeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("dataset contains a single class")]
    SingleClass,
    #[error("degenerate correction direction")]
    DegenerateCorrection,
    #[error("trajectory correction failed to converge at waypoint {0}")]
    CorrectionDiverged(usize),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeomError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

/// Ground-truth annotation of one tactile frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContactLabel {
    NoContact,
    Contact,
}

/// One sensor reading: an RGB frame, its capture time relative to the start
/// of the cut, and (in training sets) a label.
#[derive(Debug, Clone, PartialEq)]
pub struct TactileFrame {
    pub image: Image,
    pub t: f64,
    pub label: Option<ContactLabel>,
}

/// Frame-addressable dataset. Frames materialize on demand — synthetic sets
/// render them, disk sets read them — because a full campaign of raw sensor
/// frames does not fit in memory. Frame 0 of every trajectory is the
/// baseline reading taken before the blade moves.
pub trait FrameSource {
    fn trajectories(&self) -> usize;
    fn frames(&self, traj: usize) -> usize;
    fn frame(&self, traj: usize, idx: usize) -> Result<TactileFrame, TactileError>;
    fn label(&self, traj: usize, idx: usize) -> Option<ContactLabel>;
}

// ---------------------------------------------------------------------------
// Synthetic sensor
// ---------------------------------------------------------------------------

/// Procedural tactile-frame generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub trajectories: usize,
    pub frames_per_trajectory: usize,
    /// Raw sensor resolution; frames are downscaled by the preprocessing
    /// pipeline, so this is deliberately larger than the classifier crop.
    pub sensor_height: usize,
    pub sensor_width: usize,
    /// Fraction of trajectories that reach the board at all. The rest cut
    /// through the product only and stay contact-free.
    pub contact_fraction: f64,
    /// Peak ridge intensity on a [0, 1] pixel scale.
    pub amplitude: f64,
    /// Per-pixel uniform sensor noise bound on a [0, 1] pixel scale.
    pub noise: f64,
    /// Probability that a frame's ridge evidence is buried at the noise
    /// level (label kept), blurring the class boundary; 0 keeps the classes
    /// separable by construction.
    pub ambiguity: f64,
    /// Sensor frame period in seconds (~18 Hz loop).
    pub frame_dt: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            trajectories: 150,
            frames_per_trajectory: 80,
            sensor_height: 480,
            sensor_width: 640,
            contact_fraction: 0.7,
            amplitude: 0.35,
            noise: 0.02,
            ambiguity: 0.0,
            frame_dt: 1.0 / 18.0,
        }
    }
}

impl SynthConfig {
    /// Small native-resolution variant for unit tests.
    pub fn tiny() -> Self {
        SynthConfig {
            trajectories: 8,
            frames_per_trajectory: 8,
            sensor_height: 120,
            sensor_width: 160,
            ..SynthConfig::default()
        }
    }
}

/// Pressure-ridge color gains: the sensor's directional illumination makes
/// deformations read strongest in the red channel.
const CHANNEL_GAIN: [f64; 3] = [1.0, 0.8, 0.6];

/// Per-trajectory generator state: gel texture, ridge geometry, and the
/// contact onset. Fixed within a trajectory — the gel does not change and
/// the blade presses along the same line for the whole cut.
#[derive(Debug, Clone)]
struct TrajShape {
    contact: bool,
    onset: usize,
    ramp: f64,
    line_r: f64,
    line_c: f64,
    /// Unit normal of the ridge line in (row, col) coordinates.
    normal: (f64, f64),
    sigma: f64,
    /// Texture component k: `amp · sin(2π f_r r/h + φ_r) · sin(2π f_c c/w + φ_c)`
    /// stored as [f_r, φ_r, f_c, φ_c, amp].
    waves: [[f64; 5]; 3],
}

/// Deterministic labeled tactile frames, materialized lazily.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    cfg: SynthConfig,
    seed: u64,
    trajs: Vec<TrajShape>,
}

impl SynthDataset {
    pub fn new(cfg: SynthConfig, seed: u64) -> Self {
        let trajs = (0..cfg.trajectories)
            .map(|t| TrajShape::derive(seed, t, &cfg))
            .collect();
        SynthDataset { cfg, seed, trajs }
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    fn truth(&self, traj: usize, idx: usize) -> ContactLabel {
        let shape = &self.trajs[traj];
        if shape.contact && idx >= shape.onset {
            ContactLabel::Contact
        } else {
            ContactLabel::NoContact
        }
    }

    fn materialize(&self, traj: usize, idx: usize) -> Image {
        let cfg = &self.cfg;
        let shape = &self.trajs[traj];
        let (h, w) = (cfg.sensor_height, cfg.sensor_width);
        let mut rng = stream(self.seed, traj as u64, 1 + idx as u64);
        let mut amp = if shape.contact && idx >= shape.onset {
            // the ridge starts at half strength and firms up as the blade
            // keeps pressing
            cfg.amplitude * (0.5 + 0.5 * (((idx - shape.onset) as f64) / shape.ramp).min(1.0))
        } else {
            0.0
        };
        // All stochastic draws happen before the amplitude is used, so the
        // same seed yields the same ridge shape and noise field at every
        // amplitude setting.
        if cfg.ambiguity > 0.0 {
            let buried = rng.gen::<f64>() < cfg.ambiguity;
            let level = rng.gen::<f64>();
            if buried {
                amp = level * cfg.noise;
            }
        }
        let mut rows = vec![[0.0f64; 3]; h];
        let mut cols = vec![[0.0f64; 3]; w];
        for (k, wave) in shape.waves.iter().enumerate() {
            let [fr, pr, fc, pc, a] = *wave;
            for (r, row) in rows.iter_mut().enumerate() {
                row[k] = a * (std::f64::consts::TAU * fr * r as f64 / h as f64 + pr).sin();
            }
            for (c, col) in cols.iter_mut().enumerate() {
                col[k] = (std::f64::consts::TAU * fc * c as f64 / w as f64 + pc).sin();
            }
        }
        let cut = 4.0 * shape.sigma;
        let inv = 1.0 / (2.0 * shape.sigma * shape.sigma);
        let mut img = Image::new(h, w);
        for r in 0..h {
            let dr = (r as f64 - shape.line_r) * shape.normal.0;
            for c in 0..w {
                let base = 0.5
                    + rows[r][0] * cols[c][0]
                    + rows[r][1] * cols[c][1]
                    + rows[r][2] * cols[c][2];
                let noise = (rng.gen::<f64>() * 2.0 - 1.0) * cfg.noise;
                let dist = dr + (c as f64 - shape.line_c) * shape.normal.1;
                let g = if amp > 0.0 && dist.abs() < cut {
                    amp * (-dist * dist * inv).exp()
                } else {
                    0.0
                };
                let at = (r * w + c) * 3;
                for ch in 0..3 {
                    let v = base + g * CHANNEL_GAIN[ch] + noise;
                    img.data[at + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        img
    }
}

impl TrajShape {
    fn derive(seed: u64, traj: usize, cfg: &SynthConfig) -> TrajShape {
        let mut rng = stream(seed, traj as u64, 0);
        let h = cfg.sensor_height as f64;
        let w = cfg.sensor_width as f64;
        let contact = rng.gen::<f64>() < cfg.contact_fraction;
        let n = cfg.frames_per_trajectory as f64;
        // contact, when it happens, arrives in the later part of the cut
        let lo = (0.5 * n).max(1.0);
        let hi = (0.85 * n).max(lo + 1e-9);
        let onset = (rng.gen_range(lo..hi) as usize)
            .clamp(1, cfg.frames_per_trajectory.saturating_sub(1).max(1));
        let ramp = rng.gen_range(5.0..15.0);
        let line_r = rng.gen_range(0.3..0.7) * h;
        let line_c = rng.gen_range(0.3..0.7) * w;
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let sigma = rng.gen_range(h / 40.0..h / 20.0);
        let mut waves = [[0.0; 5]; 3];
        for wave in &mut waves {
            *wave = [
                rng.gen_range(1.5..6.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(1.5..6.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.02..0.05),
            ];
        }
        TrajShape {
            contact,
            onset,
            ramp,
            line_r,
            line_c,
            normal: (theta.cos(), -theta.sin()),
            sigma,
            waves,
        }
    }
}

impl FrameSource for SynthDataset {
    fn trajectories(&self) -> usize {
        self.cfg.trajectories
    }

    fn frames(&self, _traj: usize) -> usize {
        self.cfg.frames_per_trajectory
    }

    fn frame(&self, traj: usize, idx: usize) -> Result<TactileFrame, TactileError> {
        assert!(traj < self.cfg.trajectories && idx < self.cfg.frames_per_trajectory);
        Ok(TactileFrame {
            image: self.materialize(traj, idx),
            t: idx as f64 * self.cfg.frame_dt,
            label: Some(self.truth(traj, idx)),
        })
    }

    fn label(&self, traj: usize, idx: usize) -> Option<ContactLabel> {
        Some(self.truth(traj, idx))
    }
}

/// splitmix64 finalizer, used to derive independent per-frame RNG streams.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed ^ mix(a.wrapping_add(1) ^ mix(b))))
}

// ---------------------------------------------------------------------------
// Dataset storage
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct Manifest {
    trajectories: BTreeMap<String, ManifestTrajectory>,
}

#[derive(Serialize, Deserialize)]
struct ManifestTrajectory {
    frames: Vec<ManifestFrame>,
}

#[derive(Serialize, Deserialize)]
struct ManifestFrame {
    file: String,
    t: f64,
    label: Option<ContactLabel>,
}

/// Writes every frame of `data` as `traj_NNN/frame_NNNN.ppm` under `dir`
/// plus a `manifest.json` with timestamps and labels keyed by trajectory id.
pub fn save_dataset(data: &dyn FrameSource, dir: &Path) -> Result<(), TactileError> {
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest {
        trajectories: BTreeMap::new(),
    };
    for traj in 0..data.trajectories() {
        let id = format!("{traj:03}");
        let tdir = dir.join(format!("traj_{id}"));
        fs::create_dir_all(&tdir)?;
        let mut frames = Vec::with_capacity(data.frames(traj));
        for idx in 0..data.frames(traj) {
            let frame = data.frame(traj, idx)?;
            let file = format!("frame_{idx:04}.ppm");
            frame.image.write_ppm(&tdir.join(&file))?;
            frames.push(ManifestFrame {
                file: format!("traj_{id}/{file}"),
                t: frame.t,
                label: frame.label,
            });
        }
        manifest
            .trajectories
            .insert(id, ManifestTrajectory { frames });
    }
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Dataset backed by a directory written with [`save_dataset`]; frames are
/// read from disk on access.
pub struct DiskDataset {
    dir: PathBuf,
    trajs: Vec<ManifestTrajectory>,
}

impl DiskDataset {
    pub fn load(dir: &Path) -> Result<Self, TactileError> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        Ok(DiskDataset {
            dir: dir.to_path_buf(),
            // BTreeMap iteration is id-ordered, so indices are stable
            trajs: manifest.trajectories.into_values().collect(),
        })
    }
}

impl FrameSource for DiskDataset {
    fn trajectories(&self) -> usize {
        self.trajs.len()
    }

    fn frames(&self, traj: usize) -> usize {
        self.trajs[traj].frames.len()
    }

    fn frame(&self, traj: usize, idx: usize) -> Result<TactileFrame, TactileError> {
        let mf = &self.trajs[traj].frames[idx];
        Ok(TactileFrame {
            image: Image::read_ppm(&self.dir.join(&mf.file))?,
            t: mf.t,
            label: mf.label,
        })
    }

    fn label(&self, traj: usize, idx: usize) -> Option<ContactLabel> {
        self.trajs[traj].frames[idx].label
    }
}

// ---------------------------------------------------------------------------
// Contact monitoring
// ---------------------------------------------------------------------------

/// A detected board contact: the sensor fired while the knife was at
/// waypoint `waypoint`, and the deepest blade point at that pose — the one
/// that must have touched first — becomes the origin of the inferred board
/// plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactEvent {
    pub waypoint: usize,
    pub time: f64,
    /// Densified blade index (full edge) of the contact point.
    pub blade_index: usize,
    /// Plane origin `b`: world coordinates of the deepest blade point.
    pub origin: Vector3<f64>,
    /// Unit board normal `n̂_b`.
    pub normal: Vector3<f64>,
}

impl ContactEvent {
    /// Builds the event for a given waypoint from the knife geometry.
    pub fn at_waypoint(
        traj: &Trajectory,
        waypoint: usize,
        knife: &KnifeModel,
        n_b: &Vector3<f64>,
    ) -> Result<ContactEvent, TactileError> {
        let w = traj.waypoints.get(waypoint).ok_or_else(|| {
            TactileError::Config(format!("waypoint {waypoint} outside the trajectory"))
        })?;
        let (j, b) = lowest_blade_point(&w.pose, knife, n_b);
        let plane = Plane::new(b, *n_b)?;
        Ok(ContactEvent {
            waypoint,
            time: w.t,
            blade_index: j,
            origin: b,
            normal: *plane.normal(),
        })
    }

    /// The inferred board plane through `origin`.
    pub fn plane(&self) -> Result<Plane, TactileError> {
        Ok(Plane::new(self.origin, self.normal)?)
    }
}

/// Index of the first probability at or above the 0.5 trigger, if any.
pub fn first_crossing(probs: impl IntoIterator<Item = f64>) -> Option<usize> {
    probs.into_iter().position(|p| p >= CONTACT_THRESHOLD)
}

/// Waypoint whose timestamp is closest to `t` (ties break earlier). `None`
/// on an empty trajectory.
fn nearest_waypoint(traj: &Trajectory, t: f64) -> Option<usize> {
    traj.waypoints
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            (a.t - t)
                .abs()
                .partial_cmp(&(b.t - t).abs())
                .expect("finite timestamps")
        })
        .map(|(i, _)| i)
}

/// [`monitor`] with the classifier factored out: `samples` are
/// (timestamp, contact probability) pairs in stream order.
pub fn monitor_probs(
    samples: &[(f64, f64)],
    traj: &Trajectory,
    knife: &KnifeModel,
    n_b: &Vector3<f64>,
) -> Result<Option<ContactEvent>, TactileError> {
    let Some(k) = first_crossing(samples.iter().map(|s| s.1)) else {
        return Ok(None);
    };
    let Some(i) = nearest_waypoint(traj, samples[k].0) else {
        return Ok(None);
    };
    Ok(Some(ContactEvent::at_waypoint(traj, i, knife, n_b)?))
}

/// Scores the frame stream in order and raises an event at the first frame
/// whose contact probability reaches 0.5, matched to the nearest trajectory
/// waypoint by timestamp. Later frames are not scored: one cut yields at
/// most one event, and the stream is abandoned once it fires.
pub fn monitor(
    frames: &[TactileFrame],
    baseline: &TactileFrame,
    net: &VitNet,
    traj: &Trajectory,
    knife: &KnifeModel,
    n_b: &Vector3<f64>,
) -> Result<Option<ContactEvent>, TactileError> {
    for frame in frames {
        if contact_probability(net, &frame.image, &baseline.image)? >= CONTACT_THRESHOLD {
            let Some(i) = nearest_waypoint(traj, frame.t) else {
                return Ok(None);
            };
            return Ok(Some(ContactEvent::at_waypoint(traj, i, knife, n_b)?));
        }
    }
    Ok(None)
}

// ---------------------------------------------------------------------------
// Trajectory correction
// ---------------------------------------------------------------------------

/// Lifts one pose out of the inferred board plane. Each round finds the
/// deepest blade point `k[j']`; if it penetrates, the pose translates by
/// `a·n̂_k[j']` with `a = n̂_bᵀ(b − k[j']) / (n̂_bᵀ n̂_k[j'])`, which lands
/// exactly on the plane. The translation moves every blade point equally,
/// so a different index can become deepest and the loop repeats until the
/// whole edge clears. Returns the corrected pose and the number of rounds
/// applied.
fn correct_pose(
    pose: &Pose,
    plane: &Plane,
    origin: &Vector3<f64>,
    knife: &KnifeModel,
    waypoint: usize,
) -> Result<(Pose, usize), TactileError> {
    let normals = knife.curve().full_normals();
    let n_b = plane.normal();
    let mut pose = *pose;
    for round in 0..MAX_CORRECTION_ROUNDS {
        let (j, k_world) = lowest_blade_point(&pose, knife, n_b);
        if plane.signed_distance(&k_world) >= -CLEARANCE_TOL {
            return Ok((pose, round));
        }
        let n_k = pose.rotate(&normals[j]);
        let denom = n_b.dot(&n_k);
        if denom.abs() < DEGENERATE_NORMAL_TOL {
            return Err(TactileError::DegenerateCorrection);
        }
        let a = n_b.dot(&(origin - k_world)) / denom;
        pose = Pose::from_translation(a * n_k).compose(&pose);
    }
    Err(TactileError::CorrectionDiverged(waypoint))
}

/// Corrects every waypoint after the contact event so that no blade point
/// penetrates the inferred board plane: penetrating poses translate along
/// the blade-surface normal at their deepest point until the plane
/// constraint holds with equality; clear poses pass through untouched.
///
/// Only poses move. The waypoints' contact bookkeeping (`contact_index`,
/// `contact_s`) keeps describing the nominal plan — after a correction the
/// blade rides on the inferred plane rather than the planned contact path.
pub fn adjust_remaining(
    traj: &Trajectory,
    event: &ContactEvent,
    knife: &KnifeModel,
) -> Result<Trajectory, TactileError> {
    let plane = event.plane()?;
    let mut out = traj.clone();
    for wi in (event.waypoint + 1)..out.waypoints.len() {
        let (pose, _) = correct_pose(&out.waypoints[wi].pose, &plane, &event.origin, knife, wi)?;
        out.waypoints[wi].pose = pose;
    }
    Ok(out)
}

/// Result of [`simulate_raised_board`].
#[derive(Debug, Clone)]
pub struct RaisedBoardOutcome {
    pub event: ContactEvent,
    pub adjusted: Trajectory,
    /// Worst signed distance of any future blade point to the inferred
    /// plane before / after correction.
    pub clearance_before: f64,
    pub clearance_after: f64,
    /// Future waypoints that needed at least one correction round.
    pub corrected_waypoints: usize,
    /// Worst-case correction rounds for a single pose.
    pub max_rounds: usize,
    /// Largest per-waypoint descent of the deepest blade point — the pose
    /// error bound on the inferred plane origin.
    pub descent_step_bound: f64,
}

/// Replays a planned cut against a board raised to `z = raise` (the plan
/// assumed z = 0): the event fires at the first waypoint whose deepest
/// blade point reaches the raised surface, exactly as a perfectly timed
/// sensor would report it, and the remaining trajectory is corrected.
/// Returns `None` when the plan never reaches the raised board.
pub fn simulate_raised_board(
    traj: &Trajectory,
    knife: &KnifeModel,
    raise: f64,
) -> Result<Option<RaisedBoardOutcome>, TactileError> {
    let n_b = Vector3::z();
    let depths: Vec<f64> = traj
        .waypoints
        .iter()
        .map(|w| lowest_blade_point(&w.pose, knife, &n_b).1.z)
        .collect();
    let Some(at) = depths.iter().position(|&z| z <= raise) else {
        return Ok(None);
    };
    let event = ContactEvent::at_waypoint(traj, at, knife, &n_b)?;
    let plane = event.plane()?;
    let clearance = |t: &Trajectory| -> f64 {
        let mut worst = f64::INFINITY;
        for w in &t.waypoints[event.waypoint + 1..] {
            for p in knife.curve().full_points() {
                worst = worst.min(plane.signed_distance(&w.pose.apply(p)));
            }
        }
        worst
    };
    let clearance_before = clearance(traj);
    let mut adjusted = traj.clone();
    let mut corrected_waypoints = 0;
    let mut max_rounds = 0;
    for wi in (event.waypoint + 1)..adjusted.waypoints.len() {
        let (pose, rounds) =
            correct_pose(&adjusted.waypoints[wi].pose, &plane, &event.origin, knife, wi)?;
        adjusted.waypoints[wi].pose = pose;
        if rounds > 0 {
            corrected_waypoints += 1;
        }
        max_rounds = max_rounds.max(rounds);
    }
    let clearance_after = clearance(&adjusted);
    let descent_step_bound = depths
        .windows(2)
        .map(|w| (w[1] - w[0]).abs())
        .fold(0.0, f64::max);
    Ok(Some(RaisedBoardOutcome {
        event,
        adjusted,
        clearance_before,
        clearance_after,
        corrected_waypoints,
        max_rounds,
        descent_step_bound,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cutting::{initial_knife_pose, plan_cut, CutSegmentProfile, StrokeDirection, Waypoint};
    use approx::assert_relative_eq;

    fn first_contact_frame(data: &SynthDataset, traj: usize) -> Option<usize> {
        (0..data.frames(traj)).find(|&i| data.label(traj, i) == Some(ContactLabel::Contact))
    }

    #[test]
    fn generator_is_deterministic_per_seed() {
        let a = SynthDataset::new(SynthConfig::tiny(), 42);
        let b = SynthDataset::new(SynthConfig::tiny(), 42);
        let c = SynthDataset::new(SynthConfig::tiny(), 43);
        let fa = a.frame(2, 5).unwrap();
        let fb = b.frame(2, 5).unwrap();
        let fc = c.frame(2, 5).unwrap();
        assert_eq!(fa, fb);
        assert_ne!(fa.image, fc.image);
        for traj in 0..a.trajectories() {
            for idx in 0..a.frames(traj) {
                assert_eq!(a.label(traj, idx), b.label(traj, idx));
            }
        }
    }

    #[test]
    fn ridge_energy_grows_with_amplitude() {
        let base_cfg = SynthConfig {
            trajectories: 1,
            frames_per_trajectory: 12,
            contact_fraction: 1.0,
            ..SynthConfig::tiny()
        };
        let mut last = -1.0;
        for amp in [0.15, 0.25, 0.35, 0.45] {
            let data = SynthDataset::new(
                SynthConfig {
                    amplitude: amp,
                    ..base_cfg.clone()
                },
                7,
            );
            let baseline = data.frame(0, 0).unwrap();
            let contact = data.frame(0, data.frames(0) - 1).unwrap();
            assert_eq!(contact.label, Some(ContactLabel::Contact));
            let energy = mean_abs_diff(&contact.image, &baseline.image);
            assert!(
                energy > last,
                "mean |diff| not increasing: {energy} after {last} at amplitude {amp}"
            );
            last = energy;
        }
    }

    #[test]
    fn zero_ambiguity_classes_are_separable() {
        let data = SynthDataset::new(
            SynthConfig {
                trajectories: 6,
                frames_per_trajectory: 10,
                contact_fraction: 0.6,
                ..SynthConfig::tiny()
            },
            11,
        );
        let mut weakest_contact = u8::MAX;
        let mut strongest_clear = 0u8;
        let mut seen = (false, false);
        for traj in 0..data.trajectories() {
            let baseline = data.frame(traj, 0).unwrap();
            for idx in 1..data.frames(traj) {
                let frame = data.frame(traj, idx).unwrap();
                let peak = max_abs_diff(&frame.image, &baseline.image);
                match frame.label.unwrap() {
                    ContactLabel::Contact => {
                        weakest_contact = weakest_contact.min(peak);
                        seen.0 = true;
                    }
                    ContactLabel::NoContact => {
                        strongest_clear = strongest_clear.max(peak);
                        seen.1 = true;
                    }
                }
            }
        }
        assert!(seen.0 && seen.1, "test config must produce both classes");
        // noise is bounded (±0.02 → ≤ 11 gray levels incl. quantization)
        // while the weakest ridge crest is ≥ half the 0.35 amplitude
        assert!(strongest_clear <= 12, "noise floor {strongest_clear}");
        assert!(
            weakest_contact >= 20,
            "weakest ridge peak {weakest_contact} not separable from noise {strongest_clear}"
        );
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let data = SynthDataset::new(
            SynthConfig {
                trajectories: 2,
                frames_per_trajectory: 3,
                sensor_height: 60,
                sensor_width: 80,
                contact_fraction: 1.0,
                ..SynthConfig::tiny()
            },
            3,
        );
        let dir = std::env::temp_dir().join("loinprep-tactile-ds");
        let _ = fs::remove_dir_all(&dir);
        save_dataset(&data, &dir).unwrap();
        let back = DiskDataset::load(&dir).unwrap();
        assert_eq!(back.trajectories(), data.trajectories());
        for traj in 0..data.trajectories() {
            assert_eq!(back.frames(traj), data.frames(traj));
            for idx in 0..data.frames(traj) {
                let a = data.frame(traj, idx).unwrap();
                let b = back.frame(traj, idx).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn first_crossing_takes_the_first_trigger() {
        assert_eq!(first_crossing([0.1, 0.4, 0.6, 0.9]), Some(2));
        assert_eq!(first_crossing([0.49, 0.2, 0.0, 0.3]), None);
        assert_eq!(first_crossing([0.5]), Some(0));
    }

    fn descending_cut() -> (Trajectory, KnifeModel) {
        let knife = KnifeModel::sashimi_default();
        let start = initial_knife_pose(
            &Vector3::new(0.0, 0.0, 0.03),
            &Vector3::x(),
            0.0,
            StrokeDirection::Backward,
            &knife,
        )
        .unwrap();
        let profile = CutSegmentProfile::backward(0.08, 0.033);
        let mut segs = plan_cut(&start, &[profile], &knife).unwrap();
        (segs.remove(0), knife)
    }

    #[test]
    fn monitor_matches_frames_to_nearest_waypoints() {
        let (traj, knife) = descending_cut();
        let n_b = Vector3::z();
        // 18 Hz sensor stream against 50 Hz waypoints: the trigger at
        // t = 0.111 s sits between waypoints 5 (0.10 s) and 6 (0.12 s),
        // closer to 6
        let samples: Vec<(f64, f64)> = (0..4)
            .map(|i| {
                let t = i as f64 / 18.0;
                (t, if i == 2 { 0.73 } else { 0.21 })
            })
            .collect();
        let event = monitor_probs(&samples, &traj, &knife, &n_b).unwrap().unwrap();
        assert_eq!(event.waypoint, 6);
        assert_relative_eq!(event.time, traj.waypoints[6].t, epsilon = 1e-12);
        let (j, b) = lowest_blade_point(&traj.waypoints[6].pose, &knife, &n_b);
        assert_eq!(event.blade_index, j);
        assert_relative_eq!((event.origin - b).norm(), 0.0, epsilon = 1e-15);
        assert_eq!(event.normal, Vector3::z());

        let quiet: Vec<(f64, f64)> = (0..30).map(|i| (i as f64 / 18.0, 0.3)).collect();
        assert!(monitor_probs(&quiet, &traj, &knife, &n_b).unwrap().is_none());
    }

    #[test]
    fn adjustment_without_penetration_is_identity() {
        let (traj, knife) = descending_cut();
        // plane origin well below everything the blade reaches
        let event = ContactEvent {
            waypoint: 0,
            time: traj.waypoints[0].t,
            blade_index: 0,
            origin: Vector3::new(0.0, 0.0, -0.5),
            normal: Vector3::z(),
        };
        let adjusted = adjust_remaining(&traj, &event, &knife).unwrap();
        assert_eq!(adjusted, traj);
    }

    fn flat_knife(normal: [f64; 3]) -> KnifeModel {
        KnifeModel::new(
            vec![[0.0, 0.01, 0.0], [0.05, 0.01, 0.0], [0.10, 0.01, 0.0]],
            vec![normal; 3],
            (0, 2),
        )
        .unwrap()
    }

    fn single_step_trajectory(first: Pose, second: Pose) -> Trajectory {
        Trajectory {
            segment: 0,
            waypoints: vec![
                Waypoint {
                    t: 0.0,
                    pose: first,
                    contact_index: 0,
                    contact_s: 0.0,
                },
                Waypoint {
                    t: 0.02,
                    pose: second,
                    contact_index: 0,
                    contact_s: 0.0,
                },
            ],
        }
    }

    #[test]
    fn aligned_normals_translate_by_exactly_the_penetration() {
        // blade surface normal equals the board normal, so the correction
        // scalar must equal the raw penetration depth
        let knife = flat_knife([0.0, 0.0, 1.0]);
        let delta = 0.004;
        let above = Pose::identity();
        let below = Pose::from_translation(Vector3::new(0.0, 0.0, -delta));
        let traj = single_step_trajectory(above, below);
        // the blade rides at y = 0.01 in its own frame; at the identity pose
        // its lowest points sit at z = 0, which is where contact fired
        let event = ContactEvent {
            waypoint: 0,
            time: 0.0,
            blade_index: 0,
            origin: Vector3::new(0.05, 0.01, 0.0),
            normal: Vector3::z(),
        };
        let adjusted = adjust_remaining(&traj, &event, &knife).unwrap();
        let shift = adjusted.waypoints[1].pose.translation() - below.translation();
        assert_relative_eq!((shift - Vector3::new(0.0, 0.0, delta)).norm(), 0.0, epsilon = 1e-12);
        let plane = event.plane().unwrap();
        for p in knife.curve().full_points() {
            assert!(plane.signed_distance(&adjusted.waypoints[1].pose.apply(p)) >= -1e-12);
        }
    }

    #[test]
    fn sideways_blade_normal_is_rejected() {
        // blade surface normal perpendicular to the board normal: no
        // translation along it can resolve the penetration
        let knife = flat_knife([0.0, 1.0, 0.0]);
        let below = Pose::from_translation(Vector3::new(0.0, 0.0, -0.003));
        let traj = single_step_trajectory(Pose::identity(), below);
        let event = ContactEvent {
            waypoint: 0,
            time: 0.0,
            blade_index: 0,
            origin: Vector3::new(0.05, 0.01, 0.0),
            normal: Vector3::z(),
        };
        // knife-frame [0,1,0] maps to a horizontal world direction here
        let err = adjust_remaining(&traj, &event, &knife).unwrap_err();
        assert!(matches!(err, TactileError::DegenerateCorrection));
        assert_eq!(err.to_string(), "degenerate correction direction");
    }

    #[test]
    fn raised_board_is_cleared_after_adjustment() {
        let (traj, knife) = descending_cut();
        let raise = 0.005;
        let outcome = simulate_raised_board(&traj, &knife, raise).unwrap().unwrap();
        assert!(outcome.event.waypoint > 0, "cut must start above the board");
        assert!(
            outcome.event.waypoint + 1 < traj.waypoints.len(),
            "event must leave trajectory to correct"
        );
        // the plan pressed into the raised board before correction…
        assert!(outcome.clearance_before < -1e-4);
        // …and clears the inferred plane afterwards, for every blade point
        assert!(
            outcome.clearance_after >= -CLEARANCE_TOL,
            "clearance {}",
            outcome.clearance_after
        );
        assert!(outcome.corrected_waypoints > 0);
        assert!(outcome.max_rounds <= 3, "fixpoint took {}", outcome.max_rounds);
        // the inferred origin can trail the true surface by at most one
        // waypoint's descent
        assert!(
            (outcome.event.origin.z - raise).abs() <= outcome.descent_step_bound,
            "origin z {} vs raise {raise} (bound {})",
            outcome.event.origin.z,
            outcome.descent_step_bound
        );
    }

    #[test]
    fn correction_scalar_equals_bisection_root() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let unit = |rng: &mut ChaCha8Rng| -> Vector3<f64> {
            loop {
                let v = Vector3::new(
                    rng.gen_range(-1.0f64..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                if v.norm() > 1e-3 {
                    return v / v.norm();
                }
            }
        };
        let mut checked = 0;
        while checked < 100 {
            let n_b = unit(&mut rng);
            let n_k = unit(&mut rng);
            if n_b.dot(&n_k).abs() < 0.05 {
                continue;
            }
            let b = Vector3::new(
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
            );
            let k = b + Vector3::new(
                rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.05..0.05),
            );
            let plane = Plane::new(b, n_b).unwrap();
            let a = n_b.dot(&(b - k)) / n_b.dot(&n_k);
            // bisect signed_distance(k + α·n̂_k) over a bracket around the root
            let f = |alpha: f64| plane.signed_distance(&(k + alpha * n_k));
            let span = 2.0 * a.abs() + 1.0;
            let (mut lo, mut hi) = (-span, span);
            if f(lo) > f(hi) {
                std::mem::swap(&mut lo, &mut hi);
            }
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if f(mid) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let root = 0.5 * (lo + hi);
            assert!(
                (a - root).abs() <= 1e-9,
                "formula {a} vs bisection {root}"
            );
            checked += 1;
        }
    }

    #[test]
    fn zero_network_precision_convention() {
        // an all-zero classifier ties every logit pair and never predicts
        // contact; precision degenerates to the 1.0 convention
        let data = SynthDataset::new(
            SynthConfig {
                trajectories: 3,
                frames_per_trajectory: 4,
                sensor_height: 240,
                sensor_width: 320,
                contact_fraction: 1.0,
                ..SynthConfig::tiny()
            },
            5,
        );
        let net = VitNet::zeros(VitConfig::default());
        let metrics = evaluate_classifier(&net, &data, &[0, 1, 2]).unwrap();
        assert_eq!(metrics.true_positives + metrics.false_positives, 0);
        assert!(metrics.degenerate_precision);
        assert_eq!(metrics.precision, 1.0);
        assert!(metrics.recall < 1.0, "synthetic set has contact frames");
        // contact frames exist, so some labels were positive
        assert!(first_contact_frame(&data, 0).is_some());
    }

    #[test]
    fn training_is_deterministic_and_splits_by_trajectory() {
        let cfg = SynthConfig {
            trajectories: 6,
            frames_per_trajectory: 5,
            sensor_height: 240,
            sensor_width: 320,
            contact_fraction: 0.7,
            ..SynthConfig::tiny()
        };
        let data = SynthDataset::new(cfg, 21);
        let vit = VitConfig {
            n_layers: 1,
            batch: 8,
            seed: 2,
            ..VitConfig::default()
        };
        let (net_a, report_a) = train_classifier(&data, &vit).unwrap();
        let (net_b, report_b) = train_classifier(&data, &vit).unwrap();
        assert_eq!(report_a.metrics, report_b.metrics);
        assert_eq!(report_a.holdout_trajectories, report_b.holdout_trajectories);
        for idx in 0..net_a.params.len() {
            assert_eq!(
                net_a.params.value(idx).data,
                net_b.params.value(idx).data,
                "parameter {} diverged",
                net_a.params.name(idx)
            );
        }
        // by-trajectory split: hold-out plus training trajectories cover the
        // dataset without overlap
        let hold = &report_a.holdout_trajectories;
        assert!(!hold.is_empty() && hold.len() < 6);
        assert_eq!(report_a.train_frames, (6 - hold.len()) * 4);
    }

    #[test]
    fn single_class_dataset_is_rejected() {
        let data = SynthDataset::new(
            SynthConfig {
                trajectories: 4,
                frames_per_trajectory: 4,
                contact_fraction: 0.0,
                ..SynthConfig::tiny()
            },
            1,
        );
        let err = train_classifier(&data, &VitConfig::default()).unwrap_err();
        assert!(matches!(err, TactileError::SingleClass));
    }
}
