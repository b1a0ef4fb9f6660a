//! Tilt-aware, multi-stroke knife motion planning.
//!
//! A cut is described by an initial knife pose (blade touching the top edge of
//! the product, x-axis along the cut direction) and a list of segment profiles
//! (stroke direction, blade length to use, vertical descent, tilt). Each
//! segment is planned so that the blade point currently designated as the
//! contact point slides monotonically along the edge while the edge tangent at
//! that point stays parallel to the board — the contact point is always the
//! lowest point of the blade. Tilt is a rotation about the contact tangent
//! line, so it never disturbs the contact point's path.
//!
//! The knife frame follows the physical model: origin at the handle, x toward
//! the tip, y downward, z out of the blade plane. The slightly curved edge is
//! interpolated from a sparse set of points with a C¹ monotone (PCHIP) cubic
//! and densified to 1 mm arclength resolution for contact search.
//!
//! World convention: z up, board horizontal. A *backward* stroke pulls the
//! knife handle-ward so the contact point walks heel → tip; *forward* pushes
//! tip-ward and the contact point walks tip → heel.

use crate::geom::{GeomError, Pose};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::OnceLock;
use thiserror::Error;

/// Arclength spacing of the densified blade used for contact search.
pub const BLADE_RESOLUTION: f64 = 0.001;
/// Target translation between consecutive trajectory waypoints.
pub const WAYPOINT_SPACING: f64 = 0.002;
/// Nominal time between consecutive waypoints (s).
pub const WAYPOINT_DT: f64 = 0.02;
/// Default distance the plan is allowed to descend past the nominal board
/// height so the tactile loop has something to detect.
pub const DEFAULT_OVER_PENETRATION: f64 = 0.003;
/// Default sideways swipe that pushes a finished slice clear of the loin.
pub const DEFAULT_SWIPE: f64 = 0.09;
/// How far below the contact plane a knife point may sit before the plan is
/// rejected — the interpolated edge is only trustworthy to about this level.
const BOARD_GUARD_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CutError {
    #[error("blade too short for stroke")]
    BladeTooShort,
    /// Some blade point, or the handle, would dip below the plane of the
    /// current contact point (e.g. an aggressive tilt on a concave edge).
    #[error("spine or handle intersects board at waypoint {0}")]
    BoardIntersection(usize),
    #[error("invalid knife model: {0}")]
    BadModel(String),
    #[error("invalid cut profile: {0}")]
    BadProfile(String),
    #[error(transparent)]
    Geometry(#[from] GeomError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Monotone cubic interpolation
// ---------------------------------------------------------------------------

/// Shape-preserving C¹ cubic interpolant (Fritsch–Carlson slopes).
#[derive(Clone, Debug)]
pub struct Pchip {
    xs: Vec<f64>,
    ys: Vec<f64>,
    ds: Vec<f64>,
}

impl Pchip {
    /// Fits the interpolant; `xs` must be strictly increasing, length ≥ 2.
    pub fn new(xs: &[f64], ys: &[f64]) -> Result<Self, CutError> {
        if xs.len() < 2 || xs.len() != ys.len() {
            return Err(CutError::BadModel(
                "interpolation needs at least two matched knots".into(),
            ));
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CutError::BadModel(
                "interpolation knots must be strictly increasing".into(),
            ));
        }
        let n = xs.len();
        let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / h[i]).collect();
        let mut ds = vec![0.0; n];
        for i in 1..n - 1 {
            if delta[i - 1] * delta[i] <= 0.0 {
                ds[i] = 0.0;
            } else {
                let w1 = 2.0 * h[i] + h[i - 1];
                let w2 = h[i] + 2.0 * h[i - 1];
                ds[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
            }
        }
        ds[0] = endpoint_slope(h[0], h.get(1).copied().unwrap_or(h[0]), delta[0], {
            delta.get(1).copied().unwrap_or(delta[0])
        });
        ds[n - 1] = endpoint_slope(
            h[n - 2],
            if n >= 3 { h[n - 3] } else { h[n - 2] },
            delta[n - 2],
            if n >= 3 { delta[n - 3] } else { delta[n - 2] },
        );
        Ok(Pchip {
            xs: xs.to_vec(),
            ys: ys.to_vec(),
            ds,
        })
    }

    fn segment(&self, x: f64) -> (usize, f64, f64) {
        let n = self.xs.len();
        let x = x.clamp(self.xs[0], self.xs[n - 1]);
        let k = self.xs.partition_point(|&k| k <= x).clamp(1, n - 1) - 1;
        let h = self.xs[k + 1] - self.xs[k];
        ((k), (x - self.xs[k]) / h, h)
    }

    /// Interpolated value (x clamped to the knot range).
    pub fn eval(&self, x: f64) -> f64 {
        let (k, t, h) = self.segment(x);
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * self.ys[k] + h * h10 * self.ds[k] + h01 * self.ys[k + 1] + h * h11 * self.ds[k + 1]
    }

    /// Interpolated derivative dy/dx.
    pub fn deriv(&self, x: f64) -> f64 {
        let (k, t, h) = self.segment(x);
        let t2 = t * t;
        (6.0 * t2 - 6.0 * t) / h * self.ys[k]
            + (3.0 * t2 - 4.0 * t + 1.0) * self.ds[k]
            + (-6.0 * t2 + 6.0 * t) / h * self.ys[k + 1]
            + (3.0 * t2 - 2.0 * t) * self.ds[k + 1]
    }
}

/// One-sided three-point endpoint slope with the usual shape-preserving clamps.
fn endpoint_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let mut s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if s * d0 <= 0.0 {
        s = 0.0;
    } else if d0 * d1 < 0.0 && s.abs() > 3.0 * d0.abs() {
        s = 3.0 * d0;
    }
    s
}

// ---------------------------------------------------------------------------
// Knife model and densified blade curve
// ---------------------------------------------------------------------------

/// Sparse blade model in the knife frame: edge points ordered by increasing x,
/// matching unit edge normals, and the index interval of the usable region.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnifeModel {
    pub points: Vec<[f64; 3]>,
    pub normals: Vec<[f64; 3]>,
    /// Inclusive sparse-point interval `[j_lo, j_hi]` usable for cutting.
    pub usable: (usize, usize),
    #[serde(skip, default)]
    curve: OnceLock<BladeCurve>,
}

impl PartialEq for KnifeModel {
    fn eq(&self, other: &Self) -> bool {
        self.points == other.points && self.normals == other.normals && self.usable == other.usable
    }
}

impl KnifeModel {
    pub fn new(
        points: Vec<[f64; 3]>,
        normals: Vec<[f64; 3]>,
        usable: (usize, usize),
    ) -> Result<Self, CutError> {
        let model = KnifeModel {
            points,
            normals,
            usable,
            curve: OnceLock::new(),
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<(), CutError> {
        if self.points.len() < 2 {
            return Err(CutError::BadModel("need at least two blade points".into()));
        }
        if self.normals.len() != self.points.len() {
            return Err(CutError::BadModel(
                "points and normals must have equal length".into(),
            ));
        }
        if self.points.windows(2).any(|w| w[1][0] <= w[0][0]) {
            return Err(CutError::BadModel(
                "blade points must have strictly increasing x".into(),
            ));
        }
        for n in &self.normals {
            let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if (norm - 1.0).abs() > 1e-3 {
                return Err(CutError::BadModel(format!(
                    "edge normal has norm {norm:.6}, expected unit"
                )));
            }
        }
        let (lo, hi) = self.usable;
        if lo >= hi || hi >= self.points.len() {
            return Err(CutError::BadModel(format!(
                "usable interval ({lo}, {hi}) out of range for {} points",
                self.points.len()
            )));
        }
        Ok(())
    }

    /// Loads a model from JSON (`{"points": [[x,y,z],…], "normals": […],
    /// "usable": [j_lo, j_hi]}`).
    pub fn from_json_str(text: &str) -> Result<Self, CutError> {
        let model: KnifeModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self, CutError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// A gently curved 24 cm sashimi-style blade with the deepest point near
    /// mid-blade; normals are consistent with the interpolated edge.
    pub fn sashimi_default() -> Self {
        // Knot depths chosen so the monotone cubic has no inflection: the
        // interpolated edge is concave (belly-down) over its whole span, so
        // leveling the tangent at any point leaves the rest of the blade on
        // or above the board.
        let xs = [0.10, 0.16, 0.22, 0.28, 0.34];
        let ys = [0.0090, 0.0123, 0.0133, 0.0121, 0.0081];
        let y = Pchip::new(&xs, &ys).expect("static knots");
        let points: Vec<[f64; 3]> = xs.iter().map(|&x| [x, y.eval(x), 0.0]).collect();
        let normals: Vec<[f64; 3]> = xs
            .iter()
            .map(|&x| {
                let slope = y.deriv(x);
                let norm = (1.0 + slope * slope).sqrt();
                [-slope / norm, 1.0 / norm, 0.0]
            })
            .collect();
        KnifeModel::new(points, normals, (0, xs.len() - 1)).expect("static model")
    }

    /// The densified usable edge (built once, cached).
    pub fn curve(&self) -> &BladeCurve {
        self.curve
            .get_or_init(|| BladeCurve::build(self, BLADE_RESOLUTION).expect("validated model"))
    }
}

/// One arclength-parameterized dense sampling of the blade edge.
#[derive(Clone, Debug)]
struct DenseSpan {
    fine_x: Vec<f64>,
    fine_s: Vec<f64>,
    points: Vec<Vector3<f64>>,
    normals: Vec<Vector3<f64>>,
    arclen: Vec<f64>,
    total: f64,
}

/// Densified blade edge: the usable span drives contact bookkeeping, the full
/// span (handle to tip) drives collision checks and contact-origin search.
#[derive(Clone, Debug)]
pub struct BladeCurve {
    res: f64,
    y: Pchip,
    z: Pchip,
    nx: Pchip,
    ny: Pchip,
    nz: Pchip,
    usable: DenseSpan,
    full: DenseSpan,
}

impl BladeCurve {
    fn build(model: &KnifeModel, res: f64) -> Result<Self, CutError> {
        model.validate()?;
        let xs: Vec<f64> = model.points.iter().map(|p| p[0]).collect();
        let component = |rows: &[[f64; 3]], i: usize| -> Vec<f64> {
            rows.iter().map(|r| r[i]).collect()
        };
        let y = Pchip::new(&xs, &component(&model.points, 1))?;
        let z = Pchip::new(&xs, &component(&model.points, 2))?;
        let nx = Pchip::new(&xs, &component(&model.normals, 0))?;
        let ny = Pchip::new(&xs, &component(&model.normals, 1))?;
        let nz = Pchip::new(&xs, &component(&model.normals, 2))?;

        let (lo, hi) = model.usable;
        let usable = Self::span(&y, &z, &nx, &ny, &nz, xs[lo], xs[hi], res);
        let full = Self::span(&y, &z, &nx, &ny, &nz, xs[0], xs[xs.len() - 1], res);
        Ok(BladeCurve {
            res,
            y,
            z,
            nx,
            ny,
            nz,
            usable,
            full,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn span(
        y: &Pchip,
        z: &Pchip,
        nx: &Pchip,
        ny: &Pchip,
        nz: &Pchip,
        x_lo: f64,
        x_hi: f64,
        res: f64,
    ) -> DenseSpan {
        // Fine arclength table by trapezoid integration of the speed.
        let n_fine = (((x_hi - x_lo) / 5e-5).ceil() as usize).max(2);
        let mut fine_x = Vec::with_capacity(n_fine + 1);
        let mut fine_s = Vec::with_capacity(n_fine + 1);
        let speed = |x: f64| -> f64 {
            let dy = y.deriv(x);
            let dz = z.deriv(x);
            (1.0 + dy * dy + dz * dz).sqrt()
        };
        let mut s = 0.0;
        let mut prev_x = x_lo;
        let mut prev_v = speed(x_lo);
        fine_x.push(x_lo);
        fine_s.push(0.0);
        for i in 1..=n_fine {
            let x = x_lo + (x_hi - x_lo) * i as f64 / n_fine as f64;
            let v = speed(x);
            s += (x - prev_x) * 0.5 * (prev_v + v);
            fine_x.push(x);
            fine_s.push(s);
            prev_x = x;
            prev_v = v;
        }
        let total = s;

        let mut span = DenseSpan {
            fine_x,
            fine_s,
            points: Vec::new(),
            normals: Vec::new(),
            arclen: Vec::new(),
            total,
        };
        let mut grid: Vec<f64> = (0..=(total / res).floor() as usize)
            .map(|k| k as f64 * res)
            .collect();
        if total - grid.last().copied().unwrap_or(0.0) > 1e-9 {
            grid.push(total);
        }
        for &s in &grid {
            let x = Self::invert(&span.fine_x, &span.fine_s, s, total);
            span.points.push(Vector3::new(x, y.eval(x), z.eval(x)));
            span.normals
                .push(Vector3::new(nx.eval(x), ny.eval(x), nz.eval(x)).normalize());
            span.arclen.push(s);
        }
        span
    }

    fn invert(fine_x: &[f64], fine_s: &[f64], s: f64, total: f64) -> f64 {
        let s = s.clamp(0.0, total);
        let i = fine_s
            .partition_point(|&v| v <= s)
            .clamp(1, fine_s.len() - 1)
            - 1;
        let span = fine_s[i + 1] - fine_s[i];
        let t = if span > 0.0 { (s - fine_s[i]) / span } else { 0.0 };
        fine_x[i] + t * (fine_x[i + 1] - fine_x[i])
    }

    /// Maps usable arclength (clamped to `[0, total]`) to the x parameter.
    fn x_at(&self, s: f64) -> f64 {
        Self::invert(&self.usable.fine_x, &self.usable.fine_s, s, self.usable.total)
    }

    /// Edge point at usable arclength `s` (knife frame).
    pub fn point_at(&self, s: f64) -> Vector3<f64> {
        let x = self.x_at(s);
        Vector3::new(x, self.y.eval(x), self.z.eval(x))
    }

    /// Unit edge tangent at usable arclength `s`, pointing tip-ward.
    pub fn tangent_at(&self, s: f64) -> Vector3<f64> {
        let x = self.x_at(s);
        Vector3::new(1.0, self.y.deriv(x), self.z.deriv(x)).normalize()
    }

    /// Unit edge normal at usable arclength `s`, interpolated from the model.
    pub fn normal_at(&self, s: f64) -> Vector3<f64> {
        let x = self.x_at(s);
        Vector3::new(self.nx.eval(x), self.ny.eval(x), self.nz.eval(x)).normalize()
    }

    /// Densified usable points (1 mm apart plus the exact end point).
    pub fn points(&self) -> &[Vector3<f64>] {
        &self.usable.points
    }

    pub fn normals(&self) -> &[Vector3<f64>] {
        &self.usable.normals
    }

    /// Arclength of each densified usable point.
    pub fn arclengths(&self) -> &[f64] {
        &self.usable.arclen
    }

    /// Total usable arclength.
    pub fn total_arclength(&self) -> f64 {
        self.usable.total
    }

    /// The entire densified edge, handle to tip.
    pub fn full_points(&self) -> &[Vector3<f64>] {
        &self.full.points
    }

    pub fn full_normals(&self) -> &[Vector3<f64>] {
        &self.full.normals
    }

    /// Densified usable index closest to usable arclength `s`.
    pub fn index_near(&self, s: f64) -> usize {
        let k = (s.clamp(0.0, self.usable.total) / self.res).round() as usize;
        k.min(self.usable.points.len() - 1)
    }
}

/// Heights within this band of the minimum are treated as exact ties (Hermite
/// evaluation noise on a flat blade is a few ulps).
const TIE_BAND: f64 = 1e-12;

/// Index and world position of the blade point with the smallest height along
/// `n_b` (board normal), searched over the entire densified edge. Heights
/// within [`TIE_BAND`] of the minimum tie, and ties resolve to the smaller
/// index.
pub fn lowest_blade_point(
    pose: &Pose,
    knife: &KnifeModel,
    n_b: &Vector3<f64>,
) -> (usize, Vector3<f64>) {
    let curve = knife.curve();
    let points = curve.full_points();
    let mut min = f64::INFINITY;
    for p in points {
        min = min.min(n_b.dot(&pose.apply(p)));
    }
    let best = points
        .iter()
        .position(|p| n_b.dot(&pose.apply(p)) - min <= TIE_BAND)
        .expect("nonempty blade");
    (best, pose.apply(&points[best]))
}

/// Contact arclength implied by a pose: the height minimum over the densified
/// edge, refined by one parabolic step so chained segments pick up where the
/// previous one stopped (the terminal contact rarely sits on the 1 mm grid).
/// Exact ties (straight blades) resolve toward the heel for backward strokes
/// and the tip for forward ones.
fn contact_arclength(pose: &Pose, curve: &BladeCurve, prefer_high: bool) -> f64 {
    let up = Vector3::z();
    let heights: Vec<f64> = curve
        .points()
        .iter()
        .map(|p| up.dot(&pose.apply(p)))
        .collect();
    let min = heights.iter().copied().fold(f64::INFINITY, f64::min);
    let tied: Vec<usize> = heights
        .iter()
        .enumerate()
        .filter(|(_, &h)| h - min <= 1e-12)
        .map(|(j, _)| j)
        .collect();
    let j = if prefer_high {
        *tied.last().expect("nonempty curve")
    } else {
        tied[0]
    };
    let mut s = curve.arclengths()[j];
    if tied.len() == 1 && j > 0 && j + 1 < heights.len() {
        let denom = heights[j - 1] - 2.0 * heights[j] + heights[j + 1];
        if denom > 1e-15 {
            let offset = 0.5 * (heights[j - 1] - heights[j + 1]) / denom * curve.res;
            s += offset.clamp(-0.5 * curve.res, 0.5 * curve.res);
        }
    }
    s
}

// ---------------------------------------------------------------------------
// Profiles and trajectories
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrokeDirection {
    /// Knife pushes tip-ward; contact walks tip → heel.
    Forward,
    /// Knife pulls handle-ward; contact walks heel → tip.
    Backward,
}

/// One cutting stroke: how much blade to slide past the contact point, how far
/// to descend, the blade tilt, and an optional sideways swipe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutSegmentProfile {
    pub direction: StrokeDirection,
    /// Blade arclength consumed by the stroke (m, ≥ 0).
    pub length: f64,
    /// Vertical descent of the contact point over the stroke (m, ≥ 0).
    pub depth: f64,
    /// Tilt about the contact tangent line (radians, |tilt| ≤ 45°). The tilt
    /// ramps linearly from the pose's current tilt to this value.
    #[serde(default)]
    pub tilt: f64,
    /// Sideways translation over the stroke (m, ≥ 0), pushing away from the
    /// remaining product; used for the post-cut swipe.
    #[serde(default)]
    pub lateral: f64,
    /// Overrides the waypoint count (≥ 2 unless the segment is motionless);
    /// `None` derives it from [`WAYPOINT_SPACING`].
    #[serde(default)]
    pub waypoint_count: Option<usize>,
}

impl CutSegmentProfile {
    pub fn backward(length: f64, depth: f64) -> Self {
        CutSegmentProfile {
            direction: StrokeDirection::Backward,
            length,
            depth,
            tilt: 0.0,
            lateral: 0.0,
            waypoint_count: None,
        }
    }

    pub fn forward(length: f64, depth: f64) -> Self {
        CutSegmentProfile {
            direction: StrokeDirection::Forward,
            ..CutSegmentProfile::backward(length, depth)
        }
    }

    pub fn with_tilt(mut self, tilt: f64) -> Self {
        self.tilt = tilt;
        self
    }

    /// A level sideways push (no slide, no descent) of `lateral` meters.
    pub fn swipe(lateral: f64, tilt: f64) -> Self {
        CutSegmentProfile {
            direction: StrokeDirection::Backward,
            length: 0.0,
            depth: 0.0,
            tilt,
            lateral,
            waypoint_count: None,
        }
    }

    fn validate(&self) -> Result<(), CutError> {
        let ok = self.length.is_finite()
            && self.depth.is_finite()
            && self.tilt.is_finite()
            && self.lateral.is_finite()
            && self.length >= 0.0
            && self.depth >= 0.0
            && self.lateral >= 0.0;
        if !ok {
            return Err(CutError::BadProfile(
                "length, depth and lateral must be finite and non-negative".into(),
            ));
        }
        if self.tilt.abs() > std::f64::consts::FRAC_PI_4 + 1e-12 {
            return Err(CutError::BadProfile("tilt must be within ±45°".into()));
        }
        if self.waypoint_count == Some(0) {
            return Err(CutError::BadProfile("waypoint count must be ≥ 1".into()));
        }
        Ok(())
    }

    fn is_motionless(&self) -> bool {
        self.length == 0.0 && self.depth == 0.0 && self.lateral == 0.0
    }
}

/// One timestamped knife pose plus which densified blade point is in contact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: f64,
    pub pose: Pose,
    /// Nearest densified blade index of the contact point.
    pub contact_index: usize,
    /// Exact contact arclength along the usable edge.
    pub contact_s: f64,
}

/// Planned knife path for one segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub segment: usize,
    pub waypoints: Vec<Waypoint>,
}

impl Trajectory {
    /// CSV export: `t`, the 12 row-major pose numbers, contact index.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "t,r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,tz,contact\n",
        );
        for w in &self.waypoints {
            let a = w.pose.to_array();
            out.push_str(&format!("{}", w.t));
            for v in a {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{}\n", w.contact_index));
        }
        out
    }

    /// World contact point at each waypoint.
    pub fn contact_path(&self, knife: &KnifeModel) -> Vec<Vector3<f64>> {
        let curve = knife.curve();
        self.waypoints
            .iter()
            .map(|w| w.pose.apply(&curve.point_at(w.contact_s)))
            .collect()
    }

    /// Height of the densified lowest blade point relative to the designated
    /// contact point, per waypoint (≈ 0 when tangency holds).
    pub fn tangency_residuals(&self, knife: &KnifeModel) -> Vec<f64> {
        let up = Vector3::z();
        self.waypoints
            .iter()
            .map(|w| {
                let b = w.pose.apply(&knife.curve().point_at(w.contact_s));
                let (_, lowest) = lowest_blade_point(&w.pose, knife, &up);
                up.dot(&(lowest - b))
            })
            .collect()
    }

    /// Total descent of the contact point from first to last waypoint.
    pub fn contact_descent(&self, knife: &KnifeModel) -> f64 {
        let path = self.contact_path(knife);
        match (path.first(), path.last()) {
            (Some(a), Some(b)) => a.z - b.z,
            _ => 0.0,
        }
    }
}

// ---------------------------------------------------------------------------
// Pose construction
// ---------------------------------------------------------------------------

/// Orthonormal frame attached to the blade at arclength `s`: edge tangent,
/// in-plane edge-ward axis, and their cross product.
fn blade_frame(curve: &BladeCurve, s: f64) -> Matrix3<f64> {
    let t = curve.tangent_at(s);
    let m = Vector3::z().cross(&t).normalize();
    let b = t.cross(&m);
    Matrix3::from_columns(&[t, m, b])
}

/// Knife pose that puts the blade point at arclength `s` on `contact` with the
/// edge tangent leveled along `cut_dir` (unit, horizontal) and the blade
/// tilted by `tilt` about the contact tangent line.
fn leveling_pose(
    curve: &BladeCurve,
    s: f64,
    contact: &Vector3<f64>,
    cut_dir: &Vector3<f64>,
    tilt: f64,
) -> Result<Pose, CutError> {
    let down = -Vector3::z();
    let yp = cut_dir.cross(&down);
    let fw = Matrix3::from_columns(&[*cut_dir, down, yp]);
    let fk = blade_frame(curve, s);
    let r0 = fw * fk.transpose();
    let r = if tilt == 0.0 {
        r0
    } else {
        Pose::from_axis_angle(*cut_dir, tilt)?.rotation() * r0
    };
    let p = contact - r * curve.point_at(s);
    Ok(Pose::new(r, p)?)
}

/// Initial knife pose for a cut: the anchor blade point (heel end for backward
/// strokes, tip end for forward) is placed on `contact` with the edge leveled
/// along `cut_dir` (horizontal projection is taken) and tilted by `tilt`.
pub fn initial_knife_pose(
    contact: &Vector3<f64>,
    cut_dir: &Vector3<f64>,
    tilt: f64,
    direction: StrokeDirection,
    knife: &KnifeModel,
) -> Result<Pose, CutError> {
    let curve = knife.curve();
    let mut h = Vector3::new(cut_dir.x, cut_dir.y, 0.0);
    if h.norm() < 1e-9 {
        return Err(CutError::BadProfile(
            "cut direction has no horizontal component".into(),
        ));
    }
    h /= h.norm();
    let s = match direction {
        StrokeDirection::Backward => 0.0,
        StrokeDirection::Forward => curve.total_arclength(),
    };
    leveling_pose(curve, s, contact, &h, tilt)
}

/// Horizontal cut direction implied by a knife pose (world tangent at the
/// contact point, projected onto the board plane).
fn derive_cut_dir(pose: &Pose, curve: &BladeCurve, s: f64) -> Result<Vector3<f64>, CutError> {
    let tau = pose.rotate(&curve.tangent_at(s));
    let mut h = Vector3::new(tau.x, tau.y, 0.0);
    if h.norm() < 1e-9 {
        let x = pose.rotate(&Vector3::x());
        h = Vector3::new(x.x, x.y, 0.0);
    }
    if h.norm() < 1e-9 {
        return Err(CutError::BadProfile(
            "cut direction has no horizontal component".into(),
        ));
    }
    Ok(h / h.norm())
}

/// Tilt of a knife pose about the cut direction, inferred from where the
/// blade-plane normal points.
fn infer_tilt(pose: &Pose, curve: &BladeCurve, s: f64, cut_dir: &Vector3<f64>) -> f64 {
    let fk = blade_frame(curve, s);
    let bw = pose.rotate(&fk.column(2).into_owned());
    let down = -Vector3::z();
    let yp = cut_dir.cross(&down);
    let up = Vector3::z();
    up.dot(&bw).atan2(yp.dot(&bw))
}

// ---------------------------------------------------------------------------
// Planning
// ---------------------------------------------------------------------------

struct SegmentGeometry {
    s0: f64,
    s_end: f64,
    c0: Vector3<f64>,
    cut_dir: Vector3<f64>,
    yp: Vector3<f64>,
    tilt0: f64,
}

fn segment_geometry(
    t_init: &Pose,
    profile: &CutSegmentProfile,
    curve: &BladeCurve,
) -> Result<SegmentGeometry, CutError> {
    let prefer_high = profile.direction == StrokeDirection::Forward;
    let s0 = contact_arclength(t_init, curve, prefer_high);
    let dir = match profile.direction {
        StrokeDirection::Backward => 1.0,
        StrokeDirection::Forward => -1.0,
    };
    let s_end = s0 + dir * profile.length;
    let total = curve.total_arclength();
    // Half a densification step of slack: chained contacts are recovered from
    // the pose and may sit up to res/2 off the previous segment's endpoint.
    let tol = 0.5 * curve.res + 1e-9;
    if s_end < -tol || s_end > total + tol {
        return Err(CutError::BladeTooShort);
    }
    let s_end = s_end.clamp(0.0, total);
    let c0 = t_init.apply(&curve.point_at(s0));
    let cut_dir = derive_cut_dir(t_init, curve, s0)?;
    let down = -Vector3::z();
    let yp = cut_dir.cross(&down);
    let tilt0 = infer_tilt(t_init, curve, s0, &cut_dir);
    Ok(SegmentGeometry {
        s0,
        s_end,
        c0,
        cut_dir,
        yp,
        tilt0,
    })
}

/// Plans one stroke from the current knife pose. Returns the trajectory and
/// the terminal pose, which seeds the next segment.
pub fn plan_tangent_path(
    t_init: &Pose,
    profile: &CutSegmentProfile,
    knife: &KnifeModel,
) -> Result<(Trajectory, Pose), CutError> {
    plan_segment(t_init, profile, knife, 0.0, 0)
}

fn plan_segment(
    t_init: &Pose,
    profile: &CutSegmentProfile,
    knife: &KnifeModel,
    t0: f64,
    segment: usize,
) -> Result<(Trajectory, Pose), CutError> {
    profile.validate()?;
    let curve = knife.curve();
    let geo = segment_geometry(t_init, profile, curve)?;

    let pose_at = |u: f64| -> Result<Pose, CutError> {
        let s = geo.s0 + (geo.s_end - geo.s0) * u;
        let c = geo.c0 - Vector3::z() * (profile.depth * u) - geo.yp * (profile.lateral * u);
        let rho = geo.tilt0 + (profile.tilt - geo.tilt0) * u;
        leveling_pose(curve, s, &c, &geo.cut_dir, rho)
    };

    let tilt_change = (profile.tilt - geo.tilt0).abs() > 1e-12;
    let steps = match profile.waypoint_count {
        Some(n) => {
            if n == 1 && (!profile.is_motionless() || tilt_change) {
                return Err(CutError::BadProfile(
                    "waypoint count 1 requires a motionless segment".into(),
                ));
            }
            n - 1
        }
        None if profile.is_motionless() && !tilt_change => 0,
        None => {
            // Estimate the origin path length to hit the target spacing.
            let probes = 32;
            let mut len = 0.0;
            let mut prev = *t_init.translation();
            for k in 1..=probes {
                let p = *pose_at(k as f64 / probes as f64)?.translation();
                len += (p - prev).norm();
                prev = p;
            }
            ((len / WAYPOINT_SPACING).ceil() as usize).max(1)
        }
    };

    let mut waypoints = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let u = if steps == 0 { 0.0 } else { i as f64 / steps as f64 };
        let pose = if i == 0 { *t_init } else { pose_at(u)? };
        let s = geo.s0 + (geo.s_end - geo.s0) * u;
        let c = pose.apply(&curve.point_at(s));
        // Nothing on the knife — the whole edge (usable or not) or the
        // handle — may dip below the plane of the current contact point.
        // The tolerance matches the 1 mm densification quality and the
        // tangency bound the planner guarantees.
        let mut lowest = 0.0f64;
        for p in curve.full_points() {
            lowest = lowest.min(pose.apply(p).z - c.z);
        }
        lowest = lowest.min(pose.translation().z - c.z);
        if lowest < -BOARD_GUARD_TOL {
            return Err(CutError::BoardIntersection(i));
        }
        waypoints.push(Waypoint {
            t: t0 + i as f64 * WAYPOINT_DT,
            pose,
            contact_index: curve.index_near(s),
            contact_s: s,
        });
    }
    let terminal = waypoints.last().expect("at least one waypoint").pose;
    Ok((Trajectory { segment, waypoints }, terminal))
}

/// Plans a full cut: each stroke is chained from the previous stroke's
/// terminal pose, exactly as returned.
pub fn plan_cut(
    t_init: &Pose,
    profiles: &[CutSegmentProfile],
    knife: &KnifeModel,
) -> Result<Vec<Trajectory>, CutError> {
    let mut out = Vec::with_capacity(profiles.len());
    let mut cur = *t_init;
    let mut t0 = 0.0;
    for (i, profile) in profiles.iter().enumerate() {
        let (traj, next) = plan_segment(&cur, profile, knife, t0, i)?;
        t0 = traj.waypoints.last().expect("nonempty").t + WAYPOINT_DT;
        cur = next;
        out.push(traj);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Slice bookkeeping poses
// ---------------------------------------------------------------------------

/// Horizontal axis along which slices advance (the knife-frame z-axis,
/// projected onto the board plane). Points toward the remaining product.
pub fn loin_axis(t_init: &Pose) -> Vector3<f64> {
    let a = t_init.rotate(&Vector3::z());
    let mut h = Vector3::new(a.x, a.y, 0.0);
    let n = h.norm();
    assert!(n > 1e-9, "knife pose has a vertical blade-plane normal");
    h /= n;
    h
}

/// Pose for the stabilizing hand: a fixed offset of `margin` meters from the
/// cut plane along the loin axis (on the remaining-product side). `thickness`
/// is accepted for call-site symmetry with the slicing loop; the retreat per
/// slice comes from the updated `t_init` itself.
pub fn stabilizer_pose(t_init: &Pose, thickness: f64, margin: f64) -> Pose {
    assert!(
        (0.01..=0.05).contains(&margin),
        "stabilizer margin must be in [0.01, 0.05] m"
    );
    assert!(thickness >= 0.0, "slice thickness must be non-negative");
    let axis = loin_axis(t_init);
    Pose::new(*t_init.rotation(), t_init.translation() + axis * margin)
        .expect("offset of a valid pose")
}

/// Initial contact pose for the next slice: advanced by `thickness` along the
/// loin axis, orientation preserved.
pub fn next_cut_pose(t_init: &Pose, thickness: f64) -> Result<Pose, CutError> {
    if !(thickness > 0.0) {
        return Err(CutError::BadProfile(
            "slice thickness must be positive".into(),
        ));
    }
    let axis = loin_axis(t_init);
    Ok(Pose::new(*t_init.rotation(), t_init.translation() + axis * thickness)?)
}
