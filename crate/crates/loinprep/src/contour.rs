//! Binary segmentation masks and the boundary-token / mask-statistics features
//! derived from them.
//!
//! Masks are indexed `(row = y, col = x)`. Boundary extraction is a
//! crack-following trace along pixel-square borders (vertices sit on the
//! half-integer corners of pixel squares), so a 4×4 solid square yields a
//! closed polyline of perimeter exactly 16 px. Statistics follow the
//! centroid / projected-variance definitions used by the shape-servoing
//! convergence test.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ContourError {
    /// A mask required to contain foreground was empty.
    #[error("empty observation")]
    EmptyMask,
    /// The goal mask has zero variance along its minor axis; convergence
    /// ratios would divide by zero. A 1-px goal line is a config bug.
    #[error("degenerate goal")]
    DegenerateGoal,
    #[error("malformed PGM: {0}")]
    MalformedPgm(String),
    #[error("malformed token CSV: {0}")]
    MalformedCsv(String),
}

/// Binary segmentation image (`true` = foreground).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl SegMask {
    pub fn new(height: usize, width: usize) -> Self {
        SegMask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = SegMask::new(height, width);
        for r in 0..height {
            for c in 0..width {
                if f(r, c) {
                    m.bits[r * width + c] = true;
                }
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    /// Out-of-frame coordinates read as background.
    #[inline]
    pub fn get_signed(&self, row: i64, col: i64) -> bool {
        if row < 0 || col < 0 || row >= self.height as i64 || col >= self.width as i64 {
            return false;
        }
        self.bits[row as usize * self.width + col as usize]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.bits[row * self.width + col] = v;
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// Copy translated by (`dx` columns, `dy` rows); pixels shifted out of
    /// frame are dropped.
    pub fn translated(&self, dx: i64, dy: i64) -> SegMask {
        let mut out = SegMask::new(self.height, self.width);
        for r in 0..self.height as i64 {
            for c in 0..self.width as i64 {
                if self.get_signed(r, c) {
                    let (nr, nc) = (r + dy, c + dx);
                    if nr >= 0 && nc >= 0 && nr < self.height as i64 && nc < self.width as i64 {
                        out.bits[nr as usize * self.width + nc as usize] = true;
                    }
                }
            }
        }
        out
    }

    /// Rows packed into u64 words, LSB = column 0; used for fast shifted-IoU.
    pub fn packed_rows(&self) -> PackedMask {
        let words = self.width.div_ceil(64);
        let mut rows = vec![0u64; self.height * words];
        for r in 0..self.height {
            for c in 0..self.width {
                if self.bits[r * self.width + c] {
                    rows[r * words + c / 64] |= 1u64 << (c % 64);
                }
            }
        }
        PackedMask {
            height: self.height,
            width: self.width,
            words_per_row: words,
            rows,
        }
    }

    /// Serializes as binary PGM (P5), foreground = 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.bits.iter().map(|&b| if b { 255u8 } else { 0u8 }));
        out
    }

    /// Parses binary PGM (P5); any sample > 127 counts as foreground.
    pub fn from_pgm(data: &[u8]) -> Result<Self, ContourError> {
        let mut pos = 0usize;
        let mut fields = Vec::with_capacity(4);
        // Header: magic, width, height, maxval, separated by whitespace with
        // optional '#' comment lines.
        while fields.len() < 4 {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < data.len() && data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < data.len() && !data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(ContourError::MalformedPgm("truncated header".into()));
            }
            fields.push(
                std::str::from_utf8(&data[start..pos])
                    .map_err(|_| ContourError::MalformedPgm("non-ASCII header".into()))?
                    .to_string(),
            );
        }
        if fields[0] != "P5" {
            return Err(ContourError::MalformedPgm(format!(
                "expected P5, got {}",
                fields[0]
            )));
        }
        let width: usize = fields[1]
            .parse()
            .map_err(|_| ContourError::MalformedPgm("bad width".into()))?;
        let height: usize = fields[2]
            .parse()
            .map_err(|_| ContourError::MalformedPgm("bad height".into()))?;
        let maxval: usize = fields[3]
            .parse()
            .map_err(|_| ContourError::MalformedPgm("bad maxval".into()))?;
        if maxval == 0 || maxval > 255 {
            return Err(ContourError::MalformedPgm(format!("maxval {maxval}")));
        }
        pos += 1; // single whitespace byte after maxval
        let need = width * height;
        if data.len() < pos + need {
            return Err(ContourError::MalformedPgm("truncated raster".into()));
        }
        let bits = data[pos..pos + need].iter().map(|&b| b > 127).collect();
        Ok(SegMask {
            height,
            width,
            bits,
        })
    }

    /// Labels 4-connected foreground components and returns a mask holding
    /// only the largest (ties broken by first-discovered in scan order).
    pub fn largest_component(&self) -> Result<SegMask, ContourError> {
        if self.is_empty() {
            return Err(ContourError::EmptyMask);
        }
        let (h, w) = (self.height, self.width);
        let mut label = vec![u32::MAX; h * w];
        let mut best: (usize, u32) = (0, 0); // (size, label)
        let mut next = 0u32;
        let mut stack = Vec::new();
        for start in 0..h * w {
            if !self.bits[start] || label[start] != u32::MAX {
                continue;
            }
            let lab = next;
            next += 1;
            let mut size = 0usize;
            stack.push(start);
            label[start] = lab;
            while let Some(idx) = stack.pop() {
                size += 1;
                let (r, c) = (idx / w, idx % w);
                let mut visit = |nr: usize, nc: usize| {
                    let nidx = nr * w + nc;
                    if self.bits[nidx] && label[nidx] == u32::MAX {
                        label[nidx] = lab;
                        stack.push(nidx);
                    }
                };
                if r > 0 {
                    visit(r - 1, c);
                }
                if r + 1 < h {
                    visit(r + 1, c);
                }
                if c > 0 {
                    visit(r, c - 1);
                }
                if c + 1 < w {
                    visit(r, c + 1);
                }
            }
            if size > best.0 {
                best = (size, lab);
            }
        }
        let bits = label.iter().map(|&l| l == best.1).collect();
        Ok(SegMask {
            height: h,
            width: w,
            bits,
        })
    }
}

/// Bit-packed mask rows for popcount-based IoU.
pub struct PackedMask {
    pub height: usize,
    pub width: usize,
    pub words_per_row: usize,
    pub rows: Vec<u64>,
}

/// One boundary sample of Fig.-7 style: position (px), inward unit normal,
/// and a validity flag (1 iff a tool disk can be placed on the outward side).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryToken {
    /// Position on the boundary polyline, (x = col, y = row) in pixels.
    pub p: [f64; 2],
    /// Inward unit normal (pushes travel along it, into the object).
    pub n: [f64; 2],
    /// 1 = a tool disk fits at the push origin `p − r·n̂` without touching
    /// foreground or leaving the frame; 0 otherwise.
    pub v: u8,
}

/// Which mask a token set was sampled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenSource {
    Observation,
    Goal,
}

/// Fixed-size set of boundary tokens for one mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryTokenSet {
    pub tokens: Vec<BoundaryToken>,
    pub source: TokenSource,
}

impl BoundaryTokenSet {
    /// CSV rows `px,py,nx,ny,v` (no header).
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            writeln!(s, "{},{},{},{},{}", t.p[0], t.p[1], t.n[0], t.n[1], t.v).unwrap();
        }
        s
    }

    pub fn from_csv(csv: &str, source: TokenSource) -> Result<Self, ContourError> {
        let mut tokens = Vec::new();
        for (ln, line) in csv.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 5 {
                return Err(ContourError::MalformedCsv(format!(
                    "line {}: expected 5 fields",
                    ln + 1
                )));
            }
            let num = |s: &str| -> Result<f64, ContourError> {
                s.trim()
                    .parse()
                    .map_err(|_| ContourError::MalformedCsv(format!("line {}: bad number", ln + 1)))
            };
            tokens.push(BoundaryToken {
                p: [num(parts[0])?, num(parts[1])?],
                n: [num(parts[2])?, num(parts[3])?],
                v: if num(parts[4])? != 0.0 { 1 } else { 0 },
            });
        }
        Ok(BoundaryTokenSet { tokens, source })
    }
}

/// Centroid / principal-axis statistics of a mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskStats {
    /// Foreground centroid, (x = col, y = row) px.
    pub centroid: [f64; 2],
    /// Unit minor axis (direction of least variance).
    pub e_min: [f64; 2],
    /// Unit major axis.
    pub e_max: [f64; 2],
    /// Variance of pixel coordinates projected on `e_min`, px².
    pub var_min: f64,
    /// Variance projected on `e_max`, px².
    pub var_max: f64,
}

/// Closed boundary polyline; consecutive vertices are 1 px apart (pixel-border
/// cracks), the closing edge `last → first` is implied.
pub type Polyline = Vec<[f64; 2]>;

/// Traces the outer boundary of the largest 4-connected foreground component.
///
/// The result is a closed polyline over pixel-square corners, oriented so its
/// shoelace area in (x = col, y = row) coordinates is positive
/// (counterclockwise in that coordinate convention).
pub fn extract_boundary(mask: &SegMask) -> Result<Polyline, ContourError> {
    let comp = mask.largest_component()?;
    let (h, w) = (comp.height as i64, comp.width as i64);

    // Start pixel: topmost, then leftmost, foreground pixel of the component.
    // It necessarily has background (or frame) above, so its top crack exists.
    let mut start_px = None;
    'scan: for r in 0..h {
        for c in 0..w {
            if comp.get_signed(r, c) {
                start_px = Some((r, c));
                break 'scan;
            }
        }
    }
    let (r0, c0) = start_px.expect("component is non-empty");

    // Directed crack edges around foreground pixels, keyed by start vertex.
    // Vertices live on half-integer corners; store doubled to stay integral.
    // Each foreground pixel contributes one edge per background 4-neighbor,
    // oriented consistently (rotationally symmetric rules) so loops chain.
    let mut edges: Vec<((i64, i64), (i64, i64))> = Vec::new();
    let mut by_start: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for r in 0..h {
        for c in 0..w {
            if !comp.get_signed(r, c) {
                continue;
            }
            let (x2, y2) = (2 * c, 2 * r); // doubled pixel center
            let mut push = |s: (i64, i64), e: (i64, i64)| {
                by_start.entry(s).or_default().push(edges.len());
                edges.push((s, e));
            };
            if !comp.get_signed(r - 1, c) {
                push((x2 - 1, y2 - 1), (x2 + 1, y2 - 1)); // top, +x
            }
            if !comp.get_signed(r, c + 1) {
                push((x2 + 1, y2 - 1), (x2 + 1, y2 + 1)); // right, +y
            }
            if !comp.get_signed(r + 1, c) {
                push((x2 + 1, y2 + 1), (x2 - 1, y2 + 1)); // bottom, −x
            }
            if !comp.get_signed(r, c - 1) {
                push((x2 - 1, y2 + 1), (x2 - 1, y2 - 1)); // left, −y
            }
        }
    }

    // Walk from the start pixel's top edge until it repeats. At a saddle
    // vertex (two outgoing cracks) prefer the sharper turn toward the pixel we
    // are circling, which keeps the loop from jumping across the crack to a
    // diagonally-touching region.
    let start_vertex = (2 * c0 - 1, 2 * r0 - 1);
    let start_edge = *by_start[&start_vertex]
        .iter()
        .find(|&&i| edges[i].1 == (2 * c0 + 1, 2 * r0 - 1))
        .expect("top crack of start pixel exists");
    let mut used = vec![false; edges.len()];
    let mut poly: Vec<(i64, i64)> = Vec::new();
    let mut cur = start_edge;
    loop {
        used[cur] = true;
        let (s, e) = edges[cur];
        poly.push(s);
        let dir = (e.0 - s.0, e.1 - s.1);
        // Candidate priorities: right turn, straight, left turn (rotating
        // (dx,dy) by +90° here is (−dy,dx)).
        let prefs = [
            (-dir.1, dir.0),
            dir,
            (dir.1, -dir.0),
        ];
        let mut next = None;
        'pref: for want in prefs {
            for &cand in by_start.get(&e).into_iter().flatten() {
                let (cs, ce) = edges[cand];
                let cdir = (ce.0 - cs.0, ce.1 - cs.1);
                if cdir == want {
                    next = Some(cand);
                    break 'pref;
                }
            }
        }
        let next = next.expect("crack edges form closed loops");
        if next == start_edge {
            break;
        }
        debug_assert!(!used[next], "tracer revisited a crack edge");
        cur = next;
    }

    let mut polyline: Polyline = poly
        .iter()
        .map(|&(x2, y2)| [x2 as f64 / 2.0, y2 as f64 / 2.0])
        .collect();
    if shoelace_area(&polyline) < 0.0 {
        polyline.reverse();
    }
    Ok(polyline)
}

/// Signed shoelace area of a closed polyline in (x, y) coordinates.
pub fn shoelace_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    let mut a = 0.0;
    for i in 0..n {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % n];
        a += x0 * y1 - x1 * y0;
    }
    a / 2.0
}

/// Total length of a closed polyline.
pub fn polyline_perimeter(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let [x0, y0] = poly[i];
            let [x1, y1] = poly[(i + 1) % n];
            ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt()
        })
        .sum()
}

/// Samples `n` boundary tokens at uniform arclength.
///
/// `phase` ∈ [0, 1) rotates the sampling offsets along the boundary
/// (0 = start at the topmost-leftmost boundary pixel's corner, the
/// deterministic default; training may randomize it as augmentation).
pub fn sample_tokens_with_phase(
    mask: &SegMask,
    n: usize,
    tool_radius_px: f64,
    phase: f64,
) -> Result<BoundaryTokenSet, ContourError> {
    let poly = extract_boundary(mask)?;
    let m = poly.len();
    // Cumulative arclength over the closed polyline.
    let mut cum = Vec::with_capacity(m + 1);
    cum.push(0.0);
    for i in 0..m {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % m];
        cum.push(cum[i] + ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt());
    }
    let total = cum[m];

    let centroid = mask_stats(mask)?.centroid;
    let mut tokens = Vec::with_capacity(n);
    for k in 0..n {
        let s = (phase.rem_euclid(1.0) + k as f64 / n as f64).rem_euclid(1.0) * total;
        // Segment containing arclength s.
        let seg = match cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(m - 1),
            Err(i) => i - 1,
        };
        let seg_len = cum[seg + 1] - cum[seg];
        let t = if seg_len > 0.0 {
            (s - cum[seg]) / seg_len
        } else {
            0.0
        };
        let [x0, y0] = poly[seg];
        let [x1, y1] = poly[(seg + 1) % m];
        let p = [x0 + t * (x1 - x0), y0 + t * (y1 - y0)];

        // Tangent by central difference two vertices out; ±2 px of context
        // smooths over single-pixel jaggies.
        let a = poly[(seg + m - 2) % m];
        let b = poly[(seg + 3) % m];
        let (mut tx, mut ty) = (b[0] - a[0], b[1] - a[1]);
        let tn = (tx * tx + ty * ty).sqrt();
        if tn < 1e-9 {
            // Degenerate (boundary doubles back); fall back to the segment.
            tx = x1 - x0;
            ty = y1 - y0;
        }
        let tn = (tx * tx + ty * ty).sqrt();
        let (tx, ty) = (tx / tn, ty / tn);
        // Rotate the tangent 90° and orient toward foreground by probing.
        let mut nrm = [-ty, tx];
        if !points_inward(mask, p, nrm, centroid) {
            nrm = [ty, -tx];
        }

        let origin = [p[0] - tool_radius_px * nrm[0], p[1] - tool_radius_px * nrm[1]];
        let v = u8::from(tool_fits(mask, origin, tool_radius_px));
        tokens.push(BoundaryToken { p, n: nrm, v });
    }
    Ok(BoundaryTokenSet {
        tokens,
        source: TokenSource::Observation,
    })
}

/// [`sample_tokens_with_phase`] at the deterministic phase 0.
pub fn sample_tokens(
    mask: &SegMask,
    n: usize,
    tool_radius_px: f64,
) -> Result<BoundaryTokenSet, ContourError> {
    sample_tokens_with_phase(mask, n, tool_radius_px, 0.0)
}

/// Probes at increasing offsets to decide whether `n` points into the mask at
/// `p`; falls back to the centroid direction on flat ties.
fn points_inward(mask: &SegMask, p: [f64; 2], n: [f64; 2], centroid: [f64; 2]) -> bool {
    for step in [1.5f64, 3.0] {
        let fwd = sample_nearest(mask, p[0] + step * n[0], p[1] + step * n[1]);
        let back = sample_nearest(mask, p[0] - step * n[0], p[1] - step * n[1]);
        if fwd != back {
            return fwd;
        }
    }
    // Both probes agree (thin structure); point toward the centroid.
    (centroid[0] - p[0]) * n[0] + (centroid[1] - p[1]) * n[1] >= 0.0
}

fn sample_nearest(mask: &SegMask, x: f64, y: f64) -> bool {
    mask.get_signed(y.round() as i64, x.round() as i64)
}

/// A tool disk at `origin` is usable iff it stays fully in frame and covers no
/// foreground pixel center.
fn tool_fits(mask: &SegMask, origin: [f64; 2], r: f64) -> bool {
    let (w, h) = (mask.width() as f64, mask.height() as f64);
    if origin[0] - r < -0.5 || origin[1] - r < -0.5 || origin[0] + r > w - 0.5 || origin[1] + r > h - 0.5
    {
        return false;
    }
    let r2 = r * r;
    let c_lo = ((origin[0] - r).floor() as i64).max(0);
    let c_hi = ((origin[0] + r).ceil() as i64).min(mask.width() as i64 - 1);
    let r_lo = ((origin[1] - r).floor() as i64).max(0);
    let r_hi = ((origin[1] + r).ceil() as i64).min(mask.height() as i64 - 1);
    for row in r_lo..=r_hi {
        for col in c_lo..=c_hi {
            let (dx, dy) = (col as f64 - origin[0], row as f64 - origin[1]);
            if dx * dx + dy * dy <= r2 && mask.get(row as usize, col as usize) {
                return false;
            }
        }
    }
    true
}

/// Centroid, principal axes, and projected variances of the foreground.
///
/// Sums run in row-major scan order; variances are the projection sums
/// `Σ⟨p − μ, ê⟩² / n` evaluated through the covariance quadratic form.
pub fn mask_stats(mask: &SegMask) -> Result<MaskStats, ContourError> {
    let mut n = 0usize;
    let (mut sx, mut sy) = (0.0f64, 0.0f64);
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if mask.get(r, c) {
                n += 1;
                sx += c as f64;
                sy += r as f64;
            }
        }
    }
    if n == 0 {
        return Err(ContourError::EmptyMask);
    }
    let mu = [sx / n as f64, sy / n as f64];
    let (mut sxx, mut sxy, mut syy) = (0.0f64, 0.0f64, 0.0f64);
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if mask.get(r, c) {
                let dx = c as f64 - mu[0];
                let dy = r as f64 - mu[1];
                sxx += dx * dx;
                sxy += dx * dy;
                syy += dy * dy;
            }
        }
    }
    let (cxx, cxy, cyy) = (sxx / n as f64, sxy / n as f64, syy / n as f64);
    // Closed-form eigensystem of [[cxx, cxy], [cxy, cyy]].
    let mean = (cxx + cyy) / 2.0;
    let half_diff = (cxx - cyy) / 2.0;
    let root = (half_diff * half_diff + cxy * cxy).sqrt();
    let theta = 0.5 * (2.0 * cxy).atan2(cxx - cyy);
    let mut e_max = [theta.cos(), theta.sin()];
    // Canonical sign: positive x, or positive y when x ≈ 0.
    if e_max[0] < 0.0 || (e_max[0].abs() < 1e-12 && e_max[1] < 0.0) {
        e_max = [-e_max[0], -e_max[1]];
    }
    let mut e_min = [-e_max[1], e_max[0]];
    if e_min[0] < 0.0 || (e_min[0].abs() < 1e-12 && e_min[1] < 0.0) {
        e_min = [-e_min[0], -e_min[1]];
    }
    let var_max = mean + root;
    let var_min = (mean - root).max(0.0);
    Ok(MaskStats {
        centroid: mu,
        e_min,
        e_max,
        var_min,
        var_max,
    })
}

/// Variance of `mask`'s foreground projected onto arbitrary unit axis `e`.
pub fn projected_variance(mask: &SegMask, mu: [f64; 2], e: [f64; 2]) -> Result<f64, ContourError> {
    let mut n = 0usize;
    let mut acc = 0.0f64;
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if mask.get(r, c) {
                let d = (c as f64 - mu[0]) * e[0] + (r as f64 - mu[1]) * e[1];
                acc += d * d;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(ContourError::EmptyMask);
    }
    Ok(acc / n as f64)
}

/// Shape-servoing stopping rule: centroids within `eps1` px and the
/// observation's variance along the goal's minor axis at most `eps2` times the
/// goal's.
pub fn converged(
    o: &SegMask,
    g: &SegMask,
    eps1_px: f64,
    eps2: f64,
) -> Result<bool, ContourError> {
    let so = mask_stats(o)?;
    let sg = mask_stats(g)?;
    if sg.var_min <= 1e-12 {
        return Err(ContourError::DegenerateGoal);
    }
    let d = ((sg.centroid[0] - so.centroid[0]).powi(2)
        + (sg.centroid[1] - so.centroid[1]).powi(2))
    .sqrt();
    // ê_min comes from the goal; project the observation onto it.
    let var_o = projected_variance(o, so.centroid, sg.e_min)?;
    Ok(d < eps1_px && var_o / sg.var_min <= eps2)
}
