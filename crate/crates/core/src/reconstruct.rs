//! Recovering an [`ActionPlan`] from a digitised trace.
//!
//! The input timing is discarded; only geometry is used. Steps:
//! resample at a uniform arc-length step, find salient key points on the
//! smoothed turning-angle signal, fit a circular arc per segment for the
//! curvature, measure peak sharpness with a weighted mixture fit for the
//! time offsets, then nudge the targets until the synthesised key points
//! land on the input ones.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Vec2};
use crate::slm::{self, ActionPlan, DynamicParams, PlacedStroke, StrokeShape, VirtualTarget};

pub use crate::slm::output_key_times;

/// Samples below this smoothed turning value never become key points.
pub const KEY_POINT_NOISE_FLOOR: f64 = 1e-6;

const EM_MAX_ITERS: usize = 100;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    /// Scale divided out at ingestion (original max extent).
    pub raw_scale: Option<f64>,
    /// The y axis was flipped to the y-down canvas convention.
    pub y_flipped: bool,
    /// Original timestamps, kept for reference only.
    pub timestamps: Option<Vec<f64>>,
}

/// An ordered point sequence. `pen_up_breaks` holds the indices of points
/// that start a new drawn segment after a pen lift.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RawTrace {
    pub points: Vec<Vec2>,
    #[serde(default)]
    pub pen_up_breaks: Vec<usize>,
    #[serde(default)]
    pub meta: TraceMeta,
}

impl RawTrace {
    pub fn new(points: Vec<Vec2>) -> Self {
        RawTrace {
            points,
            ..Default::default()
        }
    }

    pub fn with_breaks(points: Vec<Vec2>, breaks: Vec<usize>) -> Self {
        RawTrace {
            points,
            pen_up_breaks: breaks,
            ..Default::default()
        }
    }

    pub fn extent(&self) -> f64 {
        geom::extent(self.points.iter().copied())
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.points.iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidTrace(format!("point {i} is not finite")));
        }
        let first = self
            .points
            .first()
            .ok_or_else(|| Error::InvalidTrace("trace is empty".into()))?;
        if !self.points.iter().any(|p| p != first) {
            return Err(Error::InvalidTrace(
                "trace needs at least 2 distinct points".into(),
            ));
        }
        if self
            .pen_up_breaks
            .windows(2)
            .any(|w| w[0] >= w[1])
            || self.pen_up_breaks.iter().any(|&b| b == 0 || b >= self.points.len())
        {
            return Err(Error::InvalidTrace(
                "pen-up breaks must be strictly increasing interior indices".into(),
            ));
        }
        Ok(())
    }

    /// Index ranges of the drawn segments.
    pub fn segments(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::with_capacity(self.pen_up_breaks.len() + 1);
        let mut start = 0;
        for &b in &self.pen_up_breaks {
            out.push(start..b);
            start = b;
        }
        out.push(start..self.points.len());
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionConfig {
    pub resample_divisor: f64,
    pub hanning_window: usize,
    pub dt_min: f64,
    pub dt_max: f64,
    pub mse_rel_threshold: f64,
    pub max_iters: usize,
    pub sigma_ref: f64,
    pub sigma_min: f64,
    /// A maximum becomes a key point only if its topographic prominence is
    /// at least this fraction of its height. Removes resampling ripple.
    pub min_prominence: f64,
    /// Levenberg-Marquardt iterations fitting the adjusted plan to the
    /// shape of the trace. Zero skips the refinement.
    pub refine_iters: usize,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        ReconstructionConfig {
            resample_divisor: 200.0,
            hanning_window: 40,
            dt_min: 0.01,
            dt_max: 1.0,
            mse_rel_threshold: 0.002,
            max_iters: 32,
            sigma_ref: 20.0,
            sigma_min: 2.0,
            min_prominence: 0.5,
            refine_iters: 30,
        }
    }
}

impl ReconstructionConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.resample_divisor,
            self.dt_min,
            self.dt_max,
            self.mse_rel_threshold,
            self.sigma_ref,
            self.sigma_min,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(
                "reconstruction parameters must be positive".into(),
            ));
        }
        if self.dt_min >= self.dt_max {
            return Err(Error::InvalidArgument("dt_min must be below dt_max".into()));
        }
        if self.sigma_min >= self.sigma_ref {
            return Err(Error::InvalidArgument(
                "sigma_min must be below sigma_ref".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.min_prominence) {
            return Err(Error::InvalidArgument(
                "min_prominence must lie in [0, 1]".into(),
            ));
        }
        if self.hanning_window == 0 || self.max_iters == 0 {
            return Err(Error::InvalidArgument(
                "window and iteration cap must be non-zero".into(),
            ));
        }
        Ok(())
    }
}

/// Arc-length resampling at `extent / resample_divisor`, segment by segment.
pub fn resample_uniform(trace: &RawTrace, cfg: &ReconstructionConfig) -> Result<RawTrace> {
    let extent = trace.extent();
    if extent == 0.0 {
        return Err(Error::ZeroExtent);
    }
    if trace.points.iter().any(|p| !p.is_finite()) {
        return Err(Error::InvalidTrace("non-finite point".into()));
    }
    let spacing = extent / cfg.resample_divisor;
    let mut points = Vec::new();
    let mut breaks = Vec::new();
    for (k, range) in trace.segments().into_iter().enumerate() {
        if k > 0 {
            breaks.push(points.len());
        }
        resample_polyline(&trace.points[range], spacing, &mut points);
    }
    Ok(RawTrace {
        points,
        pen_up_breaks: breaks,
        meta: trace.meta.clone(),
    })
}

fn resample_polyline(pts: &[Vec2], spacing: f64, out: &mut Vec<Vec2>) {
    let dense = densify(pts, spacing / 4.0);
    let pts = &dense[..];
    let mut cum = Vec::with_capacity(pts.len());
    let mut acc = 0.0;
    cum.push(0.0);
    for w in pts.windows(2) {
        acc += w[0].distance(w[1]);
        cum.push(acc);
    }
    let total = acc;
    if total == 0.0 {
        out.push(pts[0]);
        return;
    }
    let n = ((total / spacing) - 1e-9).ceil().max(1.0) as usize;
    let step = total / n as f64;
    let mut seg = 0;
    out.push(pts[0]);
    for j in 1..n {
        let s = j as f64 * step;
        while seg + 1 < cum.len() - 1 && cum[seg + 1] < s {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let u = if len > 0.0 { (s - cum[seg]) / len } else { 0.0 };
        out.push(pts[seg].lerp(pts[seg + 1], u));
    }
    out.push(*pts.last().unwrap());
}

/// Inserts centripetal Catmull-Rom points so that no piece is longer than
/// `max_step`. Sparse input vertices would otherwise carry all of the
/// turning of the stretch around them after linear resampling.
fn densify(pts: &[Vec2], max_step: f64) -> Vec<Vec2> {
    let mut clean: Vec<Vec2> = Vec::with_capacity(pts.len());
    for p in pts {
        if clean.last() != Some(p) {
            clean.push(*p);
        }
    }
    let n = clean.len();
    if n < 3 {
        return clean;
    }
    let mut turn = vec![0.0; n];
    for v in 1..n - 1 {
        turn[v] = vertex_turn(clean[v - 1], clean[v], clean[v + 1]);
    }
    let corner: Vec<bool> = (0..n)
        .map(|v| {
            let near = turn[v.saturating_sub(1)].max(turn[(v + 1).min(n - 1)]);
            turn[v] > CORNER_TURN || turn[v] > CORNER_RATIO * near
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    out.push(clean[0]);
    for i in 0..n - 1 {
        let p1 = clean[i];
        let p2 = clean[i + 1];
        // corners keep their tangent discontinuity
        let p0 = if i > 0 && !corner[i] {
            clean[i - 1]
        } else {
            p1 * 2.0 - p2
        };
        let p3 = if i + 2 < n && !corner[i + 1] {
            clean[i + 2]
        } else {
            p2 * 2.0 - p1
        };
        let pieces = (p1.distance(p2) / max_step).ceil().clamp(1.0, 256.0) as usize;
        for k in 1..pieces {
            out.push(catmull_rom(p0, p1, p2, p3, k as f64 / pieces as f64));
        }
        out.push(p2);
    }
    out
}

/// Vertices turning by more than this many radians, or by much more than
/// their neighbours, are treated as corners.
const CORNER_TURN: f64 = 0.5;
const CORNER_RATIO: f64 = 4.0;

fn vertex_turn(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    let (u, v) = (b - a, c - b);
    u.cross(v).atan2(u.dot(v)).abs()
}

fn catmull_rom(p0: Vec2, p1: Vec2, p2: Vec2, p3: Vec2, u: f64) -> Vec2 {
    // Barry-Goldman pyramid with knots spaced by sqrt(chord length)
    let knot = |a: Vec2, b: Vec2| a.distance(b).sqrt().max(1e-12);
    let t0 = 0.0;
    let t1 = t0 + knot(p0, p1);
    let t2 = t1 + knot(p1, p2);
    let t3 = t2 + knot(p2, p3);
    let t = t1 + u * (t2 - t1);
    let mix = |a: Vec2, b: Vec2, ta: f64, tb: f64| a * ((tb - t) / (tb - ta)) + b * ((t - ta) / (tb - ta));
    let a1 = mix(p0, p1, t0, t1);
    let a2 = mix(p1, p2, t1, t2);
    let a3 = mix(p2, p3, t2, t3);
    let b1 = mix(a1, a2, t0, t2);
    let b2 = mix(a2, a3, t1, t3);
    mix(b1, b2, t1, t2)
}

/// Unsmoothed `1 - cos(turning angle)` at every interior point.
pub fn turning_signal_raw(points: &[Vec2]) -> Vec<f64> {
    points
        .windows(3)
        .map(|w| {
            let a = w[1] - w[0];
            let b = w[2] - w[1];
            let (na, nb) = (a.norm(), b.norm());
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                let turn = a.cross(b).atan2(a.dot(b));
                1.0 - turn.cos()
            }
        })
        .collect()
}

/// Normalised Hann taps. Even widths are bumped to the next odd length so
/// the window stays centred on a sample.
pub fn hanning_taps(width: usize) -> Vec<f64> {
    let n = width | 1;
    let taps: Vec<f64> = (0..n)
        .map(|j| {
            let x = PI * (j + 1) as f64 / (n + 1) as f64;
            x.sin().powi(2)
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|w| w / sum).collect()
}

/// Variance, in samples squared, of the smoothing kernel.
pub fn hanning_variance(width: usize) -> f64 {
    let taps = hanning_taps(width);
    let c = (taps.len() / 2) as f64;
    taps.iter()
        .enumerate()
        .map(|(j, w)| w * (j as f64 - c).powi(2))
        .sum()
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut k = i.rem_euclid(period);
    if k >= n as isize {
        k = period - k;
    }
    k as usize
}

pub fn smooth(signal: &[f64], width: usize) -> Vec<f64> {
    if signal.is_empty() {
        return Vec::new();
    }
    let taps = hanning_taps(width);
    let half = (taps.len() / 2) as isize;
    (0..signal.len())
        .map(|i| {
            taps.iter()
                .enumerate()
                .map(|(j, w)| w * signal[reflect(i as isize + j as isize - half, signal.len())])
                .sum()
        })
        .collect()
}

/// Smoothed turning signal; entry `j` belongs to trace point `j + 1`.
pub fn turning_angle_signal(trace: &RawTrace, cfg: &ReconstructionConfig) -> Vec<f64> {
    smooth(&turning_signal_raw(&trace.points), cfg.hanning_window)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyPointSet {
    /// Indices into the resampled trace, first and last sample included.
    pub indices: Vec<usize>,
    pub positions: Vec<Vec2>,
    /// Sharpness of each interior key point, empty until estimated.
    pub sharpness: Vec<f64>,
}

impl KeyPointSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn interior(&self) -> &[usize] {
        let n = self.indices.len();
        if n <= 2 {
            &[]
        } else {
            &self.indices[1..n - 1]
        }
    }
}

/// Endpoints plus every strict local maximum of the smoothed signal above
/// the noise floor whose prominence is at least `min_prominence` of its
/// height.
pub fn detect_key_points(signal: &[f64], trace: &RawTrace, min_prominence: f64) -> KeyPointSet {
    let last = trace.points.len().saturating_sub(1);
    let mut indices = vec![0];
    let n = signal.len();
    for j in 1..n.saturating_sub(1) {
        let v = signal[j];
        if !(v > KEY_POINT_NOISE_FLOOR && v > signal[j - 1]) {
            continue;
        }
        // a flat top of equal values counts once, at its centre
        let mut run_end = j;
        while run_end + 1 < n && signal[run_end + 1] == v {
            run_end += 1;
        }
        if run_end + 1 < n && v > signal[run_end + 1] && prominence(signal, j) >= min_prominence * v {
            let idx = (j + run_end) / 2 + 1;
            if idx < last {
                indices.push(idx);
            }
        }
    }
    if last > 0 {
        indices.push(last);
    }
    let positions = indices.iter().map(|&i| trace.points[i]).collect();
    KeyPointSet {
        indices,
        positions,
        sharpness: Vec::new(),
    }
}

/// Height of a peak above the higher of the two lowest points separating it
/// from higher ground (or the signal ends).
fn prominence(signal: &[f64], j: usize) -> f64 {
    let v = signal[j];
    let mut left = v;
    for &x in signal[..j].iter().rev() {
        if x > v {
            break;
        }
        left = left.min(x);
    }
    let mut right = v;
    for &x in &signal[j + 1..] {
        if x > v {
            break;
        }
        right = right.min(x);
    }
    v - left.max(right)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArcFit {
    /// Half of the signed angle swept between the segment endpoints.
    pub theta: f64,
    pub center: Option<Vec2>,
    pub radius: f64,
    /// Fewer than three points; `theta` is 0.
    pub degenerate: bool,
}

/// Algebraic (Kasa) least-squares circle through `segment`, reported as the
/// half-angle of the arc it subtends. Counter-clockwise turning is positive.
pub fn fit_circle_arc(segment: &[Vec2]) -> ArcFit {
    let flat = ArcFit {
        theta: 0.0,
        center: None,
        radius: f64::INFINITY,
        degenerate: false,
    };
    if segment.len() < 3 {
        return ArcFit {
            degenerate: true,
            ..flat
        };
    }
    let n = segment.len() as f64;
    let c = segment.iter().fold(Vec2::ZERO, |a, p| a + *p) * (1.0 / n);
    let ext = geom::extent(segment.iter().copied());
    if ext == 0.0 {
        return ArcFit {
            degenerate: true,
            ..flat
        };
    }
    // centred and scaled for conditioning
    let q: Vec<Vec2> = segment.iter().map(|p| (*p - c) * (1.0 / ext)).collect();
    let (mut sxx, mut sxy, mut syy, mut sx, mut sy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut sxz, mut syz, mut sz) = (0.0, 0.0, 0.0);
    for p in &q {
        let z = p.norm_sq();
        sxx += p.x * p.x;
        sxy += p.x * p.y;
        syy += p.y * p.y;
        sx += p.x;
        sy += p.y;
        sxz += p.x * z;
        syz += p.y * z;
        sz += z;
    }
    let a = [[sxx, sxy, sx], [sxy, syy, sy], [sx, sy, n]];
    let b = [-sxz, -syz, -sz];
    let Some([d, e, f]) = solve3(a, b) else {
        return flat;
    };
    let center = Vec2::new(-d / 2.0, -e / 2.0);
    let r2 = center.norm_sq() - f;
    if !(r2 > 0.0) || r2.sqrt() > 1e4 {
        return flat;
    }
    let mut sweep = 0.0;
    for w in q.windows(2) {
        let u = w[0] - center;
        let v = w[1] - center;
        sweep += u.cross(v).atan2(u.dot(v));
    }
    let limit = PI - 1e-6;
    ArcFit {
        theta: (sweep / 2.0).clamp(-limit, limit),
        center: Some(c + center * ext),
        radius: r2.sqrt() * ext,
        degenerate: false,
    }
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    let scale = a
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= 1e-12 * scale {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..3 {
            let k = a[row][col] / a[col][col];
            for c in col..3 {
                a[row][c] -= k * a[col][c];
            }
            b[row] -= k * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let s: f64 = (row + 1..3).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Result of the weighted mixture fit over the turning signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessFit {
    pub key_points: KeyPointSet,
    /// Fitted component means and spreads, in signal samples.
    pub means: Vec<f64>,
    pub spreads: Vec<f64>,
    pub iterations: usize,
    /// EM hit the iteration cap; the last iterate is used.
    pub not_converged: bool,
}

/// Sharpness of each interior key point from a 1-D Gaussian mixture fitted by
/// weighted EM to the turning signal (sample positions weighted by signal
/// value). A uniform background component soaks up turning that belongs to
/// no peak. Narrow components are sharp.
pub fn estimate_sharpness(
    signal: &[f64],
    kps: &KeyPointSet,
    cfg: &ReconstructionConfig,
) -> SharpnessFit {
    let centres: Vec<f64> = kps.interior().iter().map(|&i| i as f64 - 1.0).collect();
    let g = centres.len();
    if g == 0 || signal.is_empty() {
        return SharpnessFit {
            key_points: KeyPointSet {
                sharpness: Vec::new(),
                ..kps.clone()
            },
            means: Vec::new(),
            spreads: Vec::new(),
            iterations: 0,
            not_converged: false,
        };
    }
    let total: f64 = signal.iter().map(|v| v.max(0.0)).sum();
    let weights: Vec<f64> = if total > 0.0 {
        signal.iter().map(|v| v.max(0.0) / total).collect()
    } else {
        vec![1.0 / signal.len() as f64; signal.len()]
    };
    let n = signal.len();
    let window = cfg.hanning_window as f64;
    let floor = 0.5;
    let mut means = centres.clone();
    let mut spreads = vec![(window / 4.0).max(1.0); g];
    let mut mix = vec![1.0 / (g + 1) as f64; g + 1];
    let background = 1.0 / n as f64;

    let mut resp = vec![0.0; g + 1];
    let mut prev_ll = f64::NEG_INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < EM_MAX_ITERS {
        iterations += 1;
        let mut nk = vec![0.0; g + 1];
        let mut sx = vec![0.0; g];
        let mut ll = 0.0;
        // E and first half of M
        for (x, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let x = x as f64;
            let mut norm = 0.0;
            for c in 0..g {
                let z = (x - means[c]) / spreads[c];
                resp[c] = mix[c] * (-0.5 * z * z).exp() / (spreads[c] * (2.0 * PI).sqrt());
                norm += resp[c];
            }
            resp[g] = mix[g] * background;
            norm += resp[g];
            if norm <= 0.0 {
                continue;
            }
            ll += w * norm.ln();
            for c in 0..=g {
                let r = w * resp[c] / norm;
                nk[c] += r;
                if c < g {
                    sx[c] += r * x;
                }
            }
        }
        for c in 0..g {
            if nk[c] > 1e-300 {
                means[c] = (sx[c] / nk[c]).clamp(centres[c] - window, centres[c] + window);
            }
        }
        // variances around the updated means
        let mut sv = vec![0.0; g];
        for (x, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let x = x as f64;
            let mut norm = 0.0;
            for c in 0..g {
                let z = (x - means[c]) / spreads[c];
                resp[c] = mix[c] * (-0.5 * z * z).exp() / (spreads[c] * (2.0 * PI).sqrt());
                norm += resp[c];
            }
            norm += mix[g] * background;
            if norm <= 0.0 {
                continue;
            }
            for c in 0..g {
                sv[c] += w * resp[c] / norm * (x - means[c]).powi(2);
            }
        }
        for c in 0..g {
            if nk[c] > 1e-300 {
                spreads[c] = (sv[c] / nk[c]).sqrt().max(floor);
            }
        }
        let sum: f64 = nk.iter().sum();
        if sum > 0.0 {
            for c in 0..=g {
                mix[c] = (nk[c] / sum).max(1e-12);
            }
        }
        if (ll - prev_ll).abs() <= 1e-10 * ll.abs().max(1e-12) {
            converged = true;
            break;
        }
        prev_ll = ll;
    }

    let kernel_var = hanning_variance(cfg.hanning_window);
    let sharpness = spreads
        .iter()
        .map(|&s| sharpness_from_spread(s, kernel_var, cfg))
        .collect();
    SharpnessFit {
        key_points: KeyPointSet {
            sharpness,
            ..kps.clone()
        },
        means,
        spreads,
        iterations,
        not_converged: !converged,
    }
}

/// Clamped log-ratio mapping of a component spread to `[0, 1]`. The known
/// variance of the smoothing kernel is removed first so the measure refers
/// to the unsmoothed corner.
pub fn sharpness_from_spread(spread: f64, kernel_var: f64, cfg: &ReconstructionConfig) -> f64 {
    let corrected = (spread * spread - kernel_var).max(0.0).sqrt();
    if corrected <= 0.0 {
        return 1.0;
    }
    ((cfg.sigma_ref / corrected).ln() / (cfg.sigma_ref / cfg.sigma_min).ln()).clamp(0.0, 1.0)
}

pub fn map_sharpness_to_dt(lambda: f64, cfg: &ReconstructionConfig) -> f64 {
    cfg.dt_min + (cfg.dt_max - cfg.dt_min) * lambda
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjustReport {
    /// Number of error evaluations performed.
    pub iterations: usize,
    pub mse_history: Vec<f64>,
    pub final_mse: f64,
    pub converged: bool,
    /// The error grew three times in a row; the best iterate was returned.
    pub diverged: bool,
}

/// Moves each virtual target by the residual between the input key point and
/// the synthesised key point until the mean squared residual falls under
/// `(mse_rel_threshold * extent)^2`.
pub fn adjust_targets(
    trace: &RawTrace,
    kps: &KeyPointSet,
    plan: &ActionPlan,
    cfg: &ReconstructionConfig,
) -> Result<(ActionPlan, AdjustReport)> {
    if kps.positions.len() != plan.targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} key points for {} targets",
            kps.positions.len(),
            plan.targets.len()
        )));
    }
    let extent = trace.extent();
    let threshold = (cfg.mse_rel_threshold * extent).powi(2);
    let strokes = plan.strokes()?;
    let times = output_key_times(plan)?;

    let mut current = plan.clone();
    let mut best = (f64::INFINITY, plan.clone());
    let mut history = Vec::new();
    let mut rising = 0;
    let mut converged = false;
    let mut diverged = false;
    for _ in 0..cfg.max_iters {
        let placed: Vec<PlacedStroke> = slm::place(&current.targets, &strokes);
        let origin = current.targets[0].position;
        let residuals: Vec<Vec2> = kps
            .positions
            .iter()
            .zip(&times)
            .map(|(p, &z)| *p - slm::position_at(origin, &placed, z))
            .collect();
        let mse = residuals.iter().map(|r| r.norm_sq()).sum::<f64>() / residuals.len() as f64;
        if let Some(&last) = history.last() {
            rising = if mse > last { rising + 1 } else { 0 };
        }
        history.push(mse);
        if mse < best.0 {
            best = (mse, current.clone());
        }
        if mse < threshold {
            converged = true;
            break;
        }
        if rising >= 3 {
            diverged = true;
            break;
        }
        for (t, r) in current.targets.iter_mut().zip(&residuals) {
            t.position += *r;
        }
    }
    let (final_mse, out) = if converged {
        (*history.last().unwrap(), current)
    } else {
        best
    };
    Ok((
        out,
        AdjustReport {
            iterations: history.len(),
            mse_history: history,
            final_mse,
            converged,
            diverged,
        },
    ))
}

fn project_to_segment(p: Vec2, a: Vec2, b: Vec2) -> Vec2 {
    let ab = b - a;
    let len = ab.norm_sq();
    let u = if len > 0.0 {
        ((p - a).dot(ab) / len).clamp(0.0, 1.0)
    } else {
        0.0
    };
    a.lerp(b, u)
}

/// Outcome of the least-squares shape refinement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub iterations: usize,
    /// Root-mean-square trace-to-path distance before and after.
    pub initial_rms: f64,
    pub final_rms: f64,
}

/// Free parameters of a plan during shape refinement: every target
/// position, every Δt except the first (which has no predecessor) and
/// every θ.
struct PlanParams<'a> {
    base: &'a ActionPlan,
    cfg: &'a ReconstructionConfig,
}

impl PlanParams<'_> {
    fn pack(&self, plan: &ActionPlan) -> Vec<f64> {
        let mut x: Vec<f64> = plan
            .targets
            .iter()
            .flat_map(|t| [t.position.x, t.position.y])
            .collect();
        x.extend(plan.dynamics.iter().skip(1).map(|d| d.dt));
        x.extend(plan.dynamics.iter().map(|d| d.theta));
        x
    }

    fn unpack(&self, x: &[f64]) -> ActionPlan {
        let m = self.base.targets.len();
        let mut plan = self.base.clone();
        for (i, t) in plan.targets.iter_mut().enumerate() {
            t.position = Vec2::new(x[2 * i], x[2 * i + 1]);
        }
        let lim = std::f64::consts::PI - 1e-3;
        for i in 1..m - 1 {
            plan.dynamics[i].dt = x[2 * m + i - 1].clamp(self.cfg.dt_min, self.cfg.dt_max);
        }
        for i in 0..m - 1 {
            plan.dynamics[i].theta = x[3 * m - 2 + i].clamp(-lim, lim);
        }
        plan
    }
}

const REFINE_DT_START: f64 = 0.6;
const REFINE_RMS_TOL: f64 = 1e-4;
const ENDPOINT_WEIGHT: f64 = 4.0;

/// Residual vector between trace points and their nearest points on the
/// synthesised path. Correspondences move monotonically along both curves.
fn shape_residuals(trace: &[Vec2], plan: &ActionPlan) -> Result<Vec<f64>> {
    let placed = plan.placed_strokes()?;
    let strokes = plan.strokes()?;
    let origin = plan.targets[0].position;
    let start = strokes.iter().map(|s| s.t0).fold(f64::INFINITY, f64::min);
    let end = strokes.iter().map(|s| s.support_end()).fold(0.0, f64::max);
    // lognormal quantiles spread samples evenly along each stroke's arc
    let per_stroke = (2 * trace.len() / strokes.len()).max(16);
    let mut times = vec![start, end];
    for s in &strokes {
        for k in 1..per_stroke {
            let q = k as f64 / per_stroke as f64;
            let z = std::f64::consts::SQRT_2 * statrs::function::erf::erf_inv(2.0 * q - 1.0);
            times.push(s.t0 + (s.mu + s.sigma * z).exp());
        }
    }
    times.sort_by(f64::total_cmp);
    let path: Vec<Vec2> = times
        .iter()
        .map(|&t| slm::position_at(origin, &placed, t))
        .collect();
    let mut cum = Vec::with_capacity(path.len());
    let mut acc = 0.0;
    cum.push(0.0);
    for w in path.windows(2) {
        acc += w[0].distance(w[1]);
        cum.push(acc);
    }
    let trace_len: f64 = trace.windows(2).map(|w| w[0].distance(w[1])).sum();
    let mut out = Vec::with_capacity(2 * trace.len());
    let mut along = 0.0;
    let mut j = 0;
    for (k, p) in trace.iter().enumerate() {
        if k > 0 {
            along += trace[k - 1].distance(*p);
        }
        // expected position by arc-length fraction, then a local search
        let target = if trace_len > 0.0 { along / trace_len * acc } else { 0.0 };
        let guess = cum.partition_point(|&c| c < target).min(path.len() - 2);
        let lo = j.min(guess).saturating_sub(8);
        let hi = (j.max(guess) + 16).min(path.len() - 2);
        let (best, proj) = (lo..=hi)
            .map(|s| (s, project_to_segment(*p, path[s], path[s + 1])))
            .min_by(|a, b| (a.1 - *p).norm_sq().total_cmp(&(b.1 - *p).norm_sq()))
            .unwrap();
        j = best;
        let r = *p - proj;
        out.push(r.x);
        out.push(r.y);
    }
    // pin both ends so the path cannot overhang the trace
    for (p, q) in [(trace[0], path[0]), (trace[trace.len() - 1], path[path.len() - 1])] {
        let r = (p - q) * ENDPOINT_WEIGHT;
        out.push(r.x);
        out.push(r.y);
    }
    Ok(out)
}

/// Levenberg-Marquardt fit of targets, Δt and θ to the shape of the trace.
pub fn refine_plan(
    trace: &RawTrace,
    plan: &ActionPlan,
    cfg: &ReconstructionConfig,
) -> Result<(ActionPlan, RefineReport)> {
    let params = PlanParams { base: plan, cfg };
    let pts = &trace.points;
    let extent = trace.extent();
    let cost = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let r = shape_residuals(pts, &params.unpack(x))?;
        Ok((r.iter().map(|v| v * v).sum(), r))
    };
    let m = plan.targets.len();
    let mut x = params.pack(plan);
    let (mut f, mut r) = cost(&x)?;
    let initial_rms = (f / pts.len() as f64).sqrt();
    let mut damping = 1e-3;
    let mut iterations = 0;
    let tol = (REFINE_RMS_TOL * extent).powi(2) * pts.len() as f64;
    while iterations < cfg.refine_iters && f > tol {
        iterations += 1;
        let n = x.len();
        let mut jac = nalgebra::DMatrix::<f64>::zeros(r.len(), n);
        for c in 0..n {
            let mut h = if c < 2 * plan.targets.len() { 1e-6 * extent } else { 1e-6 };
            if (2 * m..3 * m - 2).contains(&c) && x[c] + h > cfg.dt_max {
                h = -h;
            }
            let mut xp = x.clone();
            xp[c] += h;
            let rp = shape_residuals(pts, &params.unpack(&xp))?;
            for (row, (a, b)) in rp.iter().zip(&r).enumerate() {
                jac[(row, c)] = (a - b) / h;
            }
        }
        let rv = nalgebra::DVector::from_column_slice(&r);
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * rv;
        let mut improved = false;
        let mut stalled = false;
        for _ in 0..10 {
            let mut a = jtj.clone();
            for d in 0..n {
                a[(d, d)] += damping * jtj[(d, d)].max(1e-12);
            }
            let Some(chol) = a.cholesky() else {
                damping *= 10.0;
                continue;
            };
            let step = chol.solve(&(-&jtr));
            let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let (fc, rc) = cost(&cand)?;
            if fc < f {
                stalled = fc > f * (1.0 - 1e-4);
                x = params.pack(&params.unpack(&cand));
                f = fc;
                r = rc;
                damping = (damping * 0.3).max(1e-9);
                improved = true;
                break;
            }
            damping *= 10.0;
        }
        if !improved || stalled {
            break;
        }
    }
    Ok((
        params.unpack(&x),
        RefineReport {
            iterations,
            initial_rms,
            final_rms: (f / pts.len() as f64).sqrt(),
        },
    ))
}

/// Everything produced while reconstructing one trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub plan: ActionPlan,
    /// Resampled trace the plan was fitted to.
    pub resampled: RawTrace,
    /// Per drawn segment.
    pub key_points: Vec<KeyPointSet>,
    pub reports: Vec<AdjustReport>,
    pub refinements: Vec<RefineReport>,
    pub em_not_converged: bool,
}

impl Reconstruction {
    pub fn max_iterations(&self) -> usize {
        self.reports.iter().map(|r| r.iterations).max().unwrap_or(0)
    }
}

pub fn reconstruct_plan(trace: &RawTrace, cfg: &ReconstructionConfig) -> Result<ActionPlan> {
    reconstruct(trace, cfg).map(|r| r.plan)
}

/// Full reconstruction. Drawn segments are fitted independently and joined
/// by pen-up connector strokes.
pub fn reconstruct(trace: &RawTrace, cfg: &ReconstructionConfig) -> Result<Reconstruction> {
    cfg.validate()?;
    if trace.extent() == 0.0 {
        return Err(Error::ZeroExtent);
    }
    trace.validate()?;
    let resampled = resample_uniform(trace, cfg)?;
    let extent = resampled.extent();

    let mut targets: Vec<VirtualTarget> = Vec::new();
    let mut dynamics: Vec<DynamicParams> = Vec::new();
    let mut key_points = Vec::new();
    let mut reports = Vec::new();
    let mut refinements = Vec::new();
    let mut em_not_converged = false;
    for range in resampled.segments() {
        let seg = RawTrace {
            points: resampled.points[range].to_vec(),
            pen_up_breaks: Vec::new(),
            meta: TraceMeta::default(),
        };
        let joined = !targets.is_empty();
        if joined {
            dynamics.push(DynamicParams::new(cfg.dt_max, 0.0));
        }
        if seg.extent() == 0.0 {
            // a dot: reached with the pen up, nothing drawn
            targets.push(VirtualTarget {
                position: seg.points[0],
                pen_up: joined,
            });
            continue;
        }
        let fitted = reconstruct_segment(&seg, extent, cfg)?;
        em_not_converged |= fitted.em_not_converged;
        let mut seg_targets = fitted.plan.targets;
        seg_targets[0].pen_up = joined;
        targets.extend(seg_targets);
        dynamics.extend(fitted.plan.dynamics);
        key_points.push(fitted.key_points);
        reports.push(fitted.report);
        refinements.push(fitted.refine);
    }
    if targets.len() < 2 {
        return Err(Error::InvalidTrace("trace yields fewer than 2 targets".into()));
    }
    let shapes = vec![StrokeShape::default(); dynamics.len()];
    let plan = ActionPlan {
        targets,
        dynamics,
        shapes,
    };
    plan.validate()?;
    Ok(Reconstruction {
        plan,
        resampled,
        key_points,
        reports,
        refinements,
        em_not_converged,
    })
}

struct SegmentFit {
    plan: ActionPlan,
    key_points: KeyPointSet,
    report: AdjustReport,
    refine: RefineReport,
    em_not_converged: bool,
}

fn reconstruct_segment(
    seg: &RawTrace,
    extent: f64,
    cfg: &ReconstructionConfig,
) -> Result<SegmentFit> {
    let signal = turning_angle_signal(seg, cfg);
    let kps = detect_key_points(&signal, seg, cfg.min_prominence);
    let fit = estimate_sharpness(&signal, &kps, cfg);
    let kps = fit.key_points;

    let thetas: Vec<f64> = kps
        .indices
        .windows(2)
        .map(|w| fit_circle_arc(&seg.points[w[0]..=w[1]]).theta)
        .collect();
    let dynamics: Vec<DynamicParams> = thetas
        .iter()
        .enumerate()
        .map(|(i, &theta)| {
            let dt = if i == 0 {
                cfg.dt_max
            } else {
                map_sharpness_to_dt(kps.sharpness[i - 1], cfg)
            };
            DynamicParams::new(dt, theta)
        })
        .collect();
    let targets = kps
        .positions
        .iter()
        .map(|p| VirtualTarget {
            position: *p,
            pen_up: false,
        })
        .collect();
    let initial = ActionPlan {
        targets,
        shapes: vec![StrokeShape::default(); dynamics.len()],
        dynamics,
    };
    // the convergence threshold is relative to the whole trace
    let scaled = ReconstructionConfig {
        mse_rel_threshold: cfg.mse_rel_threshold * extent / seg.extent(),
        ..*cfg
    };
    let (plan, report) = adjust_targets(seg, &kps, &initial, &scaled)?;
    let (plan, refine) = if cfg.refine_iters > 0 {
        // near dt_max the shape barely depends on Δt, so start lower
        let mut start = plan.clone();
        for d in start.dynamics.iter_mut().skip(1) {
            d.dt = d.dt.min(REFINE_DT_START);
        }
        let (start, _) = adjust_targets(seg, &kps, &start, &scaled)?;
        refine_plan(seg, &start, &scaled)?
    } else {
        let rms = 0.0;
        (plan, RefineReport { iterations: 0, initial_rms: rms, final_rms: rms })
    };
    Ok(SegmentFit {
        plan,
        key_points: kps,
        report,
        refine,
        em_not_converged: fit.not_converged,
    })
}
