//! Sigma-Lognormal trajectory model.
//!
//! A plan of `m` virtual targets drives `m - 1` strokes. Each stroke has a
//! lognormal speed profile and travels along a circular arc whose chord joins
//! two consecutive targets; strokes overlap in time and their displacements
//! add up.
//!
//! Because the running arc angle is an affine function of the lognormal CDF,
//! the displacement a stroke has produced by time `t` has a closed form in
//! `F(t)`. Integration therefore evaluates exact per-step increments instead
//! of a quadrature, which makes the result independent of the sampling step.

use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};
use statrs::function::erf::{erf, erfc};

use crate::error::{Error, Result};
use crate::geom::Vec2;

/// Default integration step, seconds.
pub const DEFAULT_SAMPLE_STEP: f64 = 1.0 / 240.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VirtualTarget {
    pub position: Vec2,
    /// The stroke arriving at this target is not drawn.
    #[serde(default)]
    pub pen_up: bool,
}

impl VirtualTarget {
    pub fn new(x: f64, y: f64) -> Self {
        VirtualTarget {
            position: Vec2::new(x, y),
            pen_up: false,
        }
    }

    pub fn lifted(x: f64, y: f64) -> Self {
        VirtualTarget {
            position: Vec2::new(x, y),
            pen_up: true,
        }
    }
}

/// Per-stroke style parameters: onset offset as a fraction of the previous
/// stroke's duration, and the arc half-angle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicParams {
    pub dt: f64,
    pub theta: f64,
}

impl DynamicParams {
    pub fn new(dt: f64, theta: f64) -> Self {
        DynamicParams { dt, theta }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrokeShape {
    /// Seconds between the 3-sigma onset and 3-sigma end of the profile.
    pub duration: f64,
    /// Asymmetry of the profile, in (0, 1).
    pub skew: f64,
}

impl Default for StrokeShape {
    fn default() -> Self {
        StrokeShape {
            duration: 0.3,
            skew: 0.1,
        }
    }
}

impl StrokeShape {
    pub fn validate(&self) -> Result<()> {
        if !(self.skew > 0.0 && self.skew < 1.0) {
            return Err(Error::InvalidShape(format!(
                "skew must lie in (0, 1), got {}",
                self.skew
            )));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::InvalidShape(format!(
                "duration must be positive, got {}",
                self.duration
            )));
        }
        Ok(())
    }
}

/// Low-level parameters of one lognormal stroke.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrokeLognormal {
    pub t0: f64,
    pub mu: f64,
    pub sigma: f64,
    pub theta: f64,
    pub t1: f64,
}

impl StrokeLognormal {
    /// Builds a stroke from duration/skew plus the offset `dt` relative to
    /// the onset and duration of the preceding stroke. The first stroke of a
    /// plan passes `prev_onset = 0` and `prev_duration = 0`.
    pub fn from_explicit(
        shape: StrokeShape,
        dt: f64,
        theta: f64,
        prev_onset: f64,
        prev_duration: f64,
    ) -> Result<Self> {
        shape.validate()?;
        if prev_duration < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "previous duration must be non-negative, got {prev_duration}"
            )));
        }
        let sigma = (-(1.0 - shape.skew).ln()).sqrt();
        // ln((e^{6s} - 1) / T), with expm1 for small sigma
        let mu = 3.0 * sigma - ((6.0 * sigma).exp_m1() / shape.duration).ln();
        let t1 = prev_onset + prev_duration * dt;
        let t0 = t1 - (mu - 3.0 * sigma).exp();
        Ok(StrokeLognormal {
            t0,
            mu,
            sigma,
            theta,
            t1,
        })
    }

    /// Time of peak speed.
    pub fn mode(&self) -> f64 {
        self.t0 + (self.mu - self.sigma * self.sigma).exp()
    }

    /// Time at which half of the stroke mass has been delivered.
    pub fn median(&self) -> f64 {
        self.t0 + self.mu.exp()
    }

    /// Support used for evaluation: beyond `t0 + e^{mu + 6 sigma}` the
    /// remaining mass is below 1e-9.
    pub fn support_end(&self) -> f64 {
        self.t0 + (self.mu + 6.0 * self.sigma).exp()
    }

    /// Nominal 3-sigma end of the stroke.
    pub fn nominal_end(&self) -> f64 {
        self.t0 + (self.mu + 3.0 * self.sigma).exp()
    }

    pub fn shifted(&self, by: f64) -> Self {
        StrokeLognormal {
            t0: self.t0 + by,
            t1: self.t1 + by,
            ..*self
        }
    }

    fn z(&self, t: f64) -> Option<f64> {
        let dt = t - self.t0;
        (dt > 0.0).then(|| (dt.ln() - self.mu) / self.sigma)
    }

    /// Lognormal CDF at `t`, as the pair `(F, 1 - F)` with both halves
    /// computed without cancellation.
    pub fn cdf_pair(&self, t: f64) -> (f64, f64) {
        match self.z(t) {
            None => (0.0, 1.0),
            Some(z) => {
                let lower = 0.5 * erfc(-z / SQRT_2);
                let upper = 0.5 * erfc(z / SQRT_2);
                (lower, upper)
            }
        }
    }

    pub fn cdf(&self, t: f64) -> f64 {
        self.cdf_pair(t).0
    }

    /// `F(b) - F(a)` for `a <= b`, accurate in both tails.
    pub fn mass_between(&self, a: f64, b: f64) -> f64 {
        let (fa, ua) = self.cdf_pair(a);
        let (fb, ub) = self.cdf_pair(b);
        if fa > 0.5 {
            ua - ub
        } else {
            fb - fa
        }
    }
}

/// Lognormal speed profile of a stroke (1/s). Zero on and before `t0`.
pub fn lognormal_profile(t: f64, s: &StrokeLognormal) -> f64 {
    let dt = t - s.t0;
    if dt <= 0.0 {
        return 0.0;
    }
    let z = (dt.ln() - s.mu) / s.sigma;
    (-0.5 * z * z).exp() / (s.sigma * (2.0 * PI).sqrt() * dt)
}

/// Running deviation of the stroke direction from its chord. Ramps from
/// `-theta` to `+theta` as the stroke's cumulative mass goes from 0 to 1.
pub fn stroke_angle(t: f64, s: &StrokeLognormal) -> f64 {
    match s.z(t) {
        None => -s.theta,
        Some(z) => s.theta * erf(z / SQRT_2),
    }
}

/// Ratio between arc length and chord length for an arc of half-angle
/// `theta`.
pub fn arc_scale(theta: f64) -> f64 {
    let s = theta.sin();
    if s.abs() > 0.0 {
        theta / s
    } else {
        1.0
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// One stroke bound to its chord.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlacedStroke {
    pub lognormal: StrokeLognormal,
    pub chord: Vec2,
}

impl PlacedStroke {
    /// Displacement produced once a fraction `f` of the stroke mass has been
    /// delivered. Equals the chord at `f = 1`.
    pub fn displacement_at_fraction(&self, f: f64) -> Vec2 {
        let theta = self.lognormal.theta;
        let len = self.chord.norm();
        if len == 0.0 || f <= 0.0 {
            return Vec2::ZERO;
        }
        let mag = arc_scale(theta) * len * f * sinc(theta * f);
        Vec2::from_polar(mag, self.chord.angle() - theta + theta * f)
    }

    pub fn displacement_at(&self, t: f64) -> Vec2 {
        self.displacement_at_fraction(self.lognormal.cdf(t))
    }

    /// Displacement produced during `[a, b]`.
    pub fn increment(&self, a: f64, b: f64) -> Vec2 {
        let theta = self.lognormal.theta;
        let len = self.chord.norm();
        if len == 0.0 || b <= self.lognormal.t0 {
            return Vec2::ZERO;
        }
        let fa = self.lognormal.cdf(a);
        let df = self.lognormal.mass_between(a, b);
        let mag = arc_scale(theta) * len * df * sinc(theta * df);
        Vec2::from_polar(mag, self.chord.angle() - theta + theta * (2.0 * fa + df))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionPlan {
    pub targets: Vec<VirtualTarget>,
    pub dynamics: Vec<DynamicParams>,
    pub shapes: Vec<StrokeShape>,
}

impl ActionPlan {
    /// Plan with default stroke shapes.
    pub fn new(targets: Vec<VirtualTarget>, dynamics: Vec<DynamicParams>) -> Result<Self> {
        let shapes = vec![StrokeShape::default(); dynamics.len()];
        let plan = ActionPlan {
            targets,
            dynamics,
            shapes,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Plan over `points` where every stroke shares the same dynamics.
    pub fn uniform(points: &[Vec2], dynamics: DynamicParams) -> Result<Self> {
        let targets = points
            .iter()
            .map(|p| VirtualTarget {
                position: *p,
                pen_up: false,
            })
            .collect::<Vec<_>>();
        let n = targets.len().saturating_sub(1);
        ActionPlan::new(targets, vec![dynamics; n])
    }

    pub fn stroke_count(&self) -> usize {
        self.dynamics.len()
    }

    pub fn positions(&self) -> Vec<Vec2> {
        self.targets.iter().map(|t| t.position).collect()
    }

    pub fn extent(&self) -> f64 {
        crate::geom::extent(self.targets.iter().map(|t| t.position))
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.targets.len();
        if m < 2 {
            return Err(Error::InvalidPlan(format!(
                "a plan needs at least 2 targets, got {m}"
            )));
        }
        if self.dynamics.len() != m - 1 || self.shapes.len() != m - 1 {
            return Err(Error::InvalidPlan(format!(
                "{m} targets need {} dynamics and shapes, got {} and {}",
                m - 1,
                self.dynamics.len(),
                self.shapes.len()
            )));
        }
        for (i, t) in self.targets.iter().enumerate() {
            if !t.position.is_finite() {
                return Err(Error::InvalidPlan(format!("target {i} is not finite")));
            }
        }
        for (i, d) in self.dynamics.iter().enumerate() {
            if !(d.dt.is_finite() && d.dt >= 0.0) {
                return Err(Error::InvalidPlan(format!(
                    "stroke {i}: dt must be finite and non-negative, got {}",
                    d.dt
                )));
            }
            if !(d.theta.abs() < PI) {
                return Err(Error::InvalidPlan(format!(
                    "stroke {i}: |theta| must be below pi, got {}",
                    d.theta
                )));
            }
        }
        for s in &self.shapes {
            s.validate()?;
        }
        Ok(())
    }

    /// Lognormal parameters of every stroke, chained through the onset
    /// recurrence.
    pub fn strokes(&self) -> Result<Vec<StrokeLognormal>> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.dynamics.len());
        let (mut onset, mut duration) = (0.0, 0.0);
        for (d, shape) in self.dynamics.iter().zip(&self.shapes) {
            let s = StrokeLognormal::from_explicit(*shape, d.dt, d.theta, onset, duration)?;
            onset = s.t1;
            duration = shape.duration;
            out.push(s);
        }
        Ok(out)
    }

    pub fn placed_strokes(&self) -> Result<Vec<PlacedStroke>> {
        let strokes = self.strokes()?;
        Ok(place(&self.targets, &strokes))
    }

    /// Pen position at time `t`.
    pub fn position_at(&self, t: f64) -> Result<Vec2> {
        let placed = self.placed_strokes()?;
        Ok(position_at(self.targets[0].position, &placed, t))
    }
}

pub(crate) fn place(targets: &[VirtualTarget], strokes: &[StrokeLognormal]) -> Vec<PlacedStroke> {
    strokes
        .iter()
        .zip(targets.windows(2))
        .map(|(s, w)| PlacedStroke {
            lognormal: *s,
            chord: w[1].position - w[0].position,
        })
        .collect()
}

pub fn position_at(origin: Vec2, strokes: &[PlacedStroke], t: f64) -> Vec2 {
    strokes
        .iter()
        .fold(origin, |p, s| p + s.displacement_at(t))
}

/// Distribution of random plans with a clear corner at every interior
/// target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomPlanConfig {
    pub targets: std::ops::RangeInclusive<usize>,
    pub theta_max: f64,
    pub dt: std::ops::RangeInclusive<f64>,
    pub chord: std::ops::RangeInclusive<f64>,
    /// Heading change at each junction on top of the arc tangents, degrees.
    pub corner_degrees: std::ops::RangeInclusive<f64>,
}

impl Default for RandomPlanConfig {
    fn default() -> Self {
        RandomPlanConfig {
            targets: 3..=8,
            theta_max: 1.0,
            dt: 0.3..=1.0,
            chord: 0.5..=1.0,
            corner_degrees: 60.0..=150.0,
        }
    }
}

impl RandomPlanConfig {
    pub fn sample(&self, rng: &mut impl rand::Rng) -> ActionPlan {
        let m = rng.gen_range(self.targets.clone()).max(2);
        let thetas: Vec<f64> = (0..m - 1)
            .map(|_| rng.gen_range(-self.theta_max..=self.theta_max))
            .collect();
        let mut heading: f64 = rng.gen_range(-PI..PI);
        let mut p = Vec2::ZERO;
        let mut targets = vec![VirtualTarget {
            position: p,
            pen_up: false,
        }];
        let mut dynamics = Vec::with_capacity(m - 1);
        for (i, &theta) in thetas.iter().enumerate() {
            if i > 0 {
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let corner = rng.gen_range(self.corner_degrees.clone()).to_radians();
                // leave the previous arc along its exit tangent, enter this one
                // along its entry tangent, then turn the corner
                heading += thetas[i - 1] + theta + sign * corner;
            }
            p += Vec2::from_polar(rng.gen_range(self.chord.clone()), heading);
            targets.push(VirtualTarget {
                position: p,
                pen_up: false,
            });
            dynamics.push(DynamicParams::new(rng.gen_range(self.dt.clone()), theta));
        }
        ActionPlan {
            shapes: vec![StrokeShape::default(); m - 1],
            targets,
            dynamics,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub position: Vec2,
    pub speed: f64,
    pub drawn: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub samples: Vec<TrajectorySample>,
    pub dt: f64,
}

impl Trajectory {
    pub fn positions(&self) -> Vec<Vec2> {
        self.samples.iter().map(|s| s.position).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }

    pub fn extent(&self) -> f64 {
        crate::geom::extent(self.samples.iter().map(|s| s.position))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegrationConfig {
    /// Sampling step, seconds.
    pub dt: f64,
    /// Extra time after the last stroke's nominal end. `None` runs until
    /// every stroke has delivered its full truncated support.
    pub tail_margin: Option<f64>,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        IntegrationConfig {
            dt: DEFAULT_SAMPLE_STEP,
            tail_margin: None,
        }
    }
}

impl IntegrationConfig {
    pub fn with_step(dt: f64) -> Self {
        IntegrationConfig {
            dt,
            ..Default::default()
        }
    }
}

/// Samples the trajectory of `plan` at a uniform step.
pub fn integrate_trajectory(plan: &ActionPlan, cfg: &IntegrationConfig) -> Result<Trajectory> {
    let strokes = plan.strokes()?;
    integrate_strokes(&plan.targets, &strokes, cfg)
}

/// Like [`integrate_trajectory`] for explicit lognormal parameters, one per
/// consecutive target pair.
pub fn integrate_strokes(
    targets: &[VirtualTarget],
    strokes: &[StrokeLognormal],
    cfg: &IntegrationConfig,
) -> Result<Trajectory> {
    if !(cfg.dt > 0.0 && cfg.dt.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "sampling step must be positive, got {}",
            cfg.dt
        )));
    }
    if targets.len() < 2 || strokes.len() != targets.len() - 1 {
        return Err(Error::InvalidPlan(format!(
            "{} targets with {} strokes",
            targets.len(),
            strokes.len()
        )));
    }
    let placed = place(targets, strokes);
    let start = strokes.iter().map(|s| s.t0).fold(f64::INFINITY, f64::min);
    let end = match cfg.tail_margin {
        Some(margin) => strokes.last().map_or(start, |s| s.nominal_end()) + margin.max(0.0),
        None => strokes
            .iter()
            .map(|s| s.support_end())
            .fold(f64::NEG_INFINITY, f64::max),
    };
    let steps = ((end - start) / cfg.dt).ceil().max(1.0) as usize;
    let key_times = interior_key_times(strokes);
    let origin = targets[0].position;

    let mut samples = Vec::with_capacity(steps + 1);
    let mut active = 0usize;
    for k in 0..=steps {
        let t = start + k as f64 * cfg.dt;
        let position = position_at(origin, &placed, t);
        let speed = if k < steps {
            let next = start + (k + 1) as f64 * cfg.dt;
            placed
                .iter()
                .fold(Vec2::ZERO, |acc, s| acc + s.increment(t, next))
                .norm()
                / cfg.dt
        } else {
            0.0
        };
        while active < key_times.len() && key_times[active] <= t {
            active += 1;
        }
        samples.push(TrajectorySample {
            t,
            position,
            speed,
            drawn: !targets[active + 1].pen_up,
        });
    }
    Ok(Trajectory {
        samples,
        dt: cfg.dt,
    })
}

/// Finite-difference speed between consecutive samples.
pub fn speed_profile(traj: &Trajectory) -> Vec<f64> {
    traj.samples
        .windows(2)
        .map(|w| (w[1].position - w[0].position).norm() / traj.dt)
        .collect()
}

/// Times at which each stroke takes over from its predecessor: the plan
/// start, one crossing per interior target, and the plan end.
pub fn output_key_times(plan: &ActionPlan) -> Result<Vec<f64>> {
    let strokes = plan.strokes()?;
    let start = strokes.iter().map(|s| s.t0).fold(f64::INFINITY, f64::min);
    let end = strokes
        .iter()
        .map(|s| s.support_end())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = Vec::with_capacity(strokes.len() + 1);
    out.push(start);
    out.extend(interior_key_times(&strokes));
    out.push(end);
    Ok(out)
}

pub(crate) fn interior_key_times(strokes: &[StrokeLognormal]) -> Vec<f64> {
    strokes
        .windows(2)
        .map(|w| crossing_time(&w[0], &w[1]))
        .collect()
}

/// Earliest time at which `next` dominates `prev` while both are positive.
/// Falls back to the middle of the gap when the supports do not overlap.
pub fn crossing_time(prev: &StrokeLognormal, next: &StrokeLognormal) -> f64 {
    let gap_mid = || 0.5 * (prev.support_end() + next.t0);
    if prev.support_end() <= next.t0 {
        return gap_mid();
    }
    let f = |t: f64| lognormal_profile(t, next) - lognormal_profile(t, prev);
    let both = |t: f64| lognormal_profile(t, next) > 0.0 && lognormal_profile(t, prev) > 0.0;
    let lo0 = next.t0.max(prev.t0);
    let hi0 = next.support_end().min(prev.support_end());
    const SCAN: usize = 256;
    let step = (hi0 - lo0) / SCAN as f64;
    let mut lo = lo0;
    for k in 1..=SCAN {
        let t = lo0 + k as f64 * step;
        if both(t) && f(t) >= 0.0 {
            let mut hi = t;
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if both(mid) && f(mid) >= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return hi;
        }
        lo = t;
    }
    gap_mid()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stroke(theta: f64) -> StrokeLognormal {
        StrokeLognormal::from_explicit(StrokeShape::default(), 1.0, theta, 0.0, 0.0).unwrap()
    }

    /// Composite trapezoid over a uniform grid.
    fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, h: f64) -> f64 {
        let n = ((b - a) / h).ceil() as usize;
        let h = (b - a) / n as f64;
        let mut acc = 0.5 * (f(a) + f(b));
        for k in 1..n {
            acc += f(a + k as f64 * h);
        }
        acc * h
    }

    #[test]
    fn profile_vanishes_at_onset() {
        let s = stroke(0.0);
        assert_eq!(lognormal_profile(s.t0, &s), 0.0);
        assert_eq!(lognormal_profile(s.t0 - 1.0, &s), 0.0);
    }

    #[test]
    fn profile_mode_matches_grid_search() {
        let s = stroke(0.0);
        let (mut best_t, mut best) = (s.t0, 0.0);
        let n = 2_000_000;
        let span = (s.mu + 3.0 * s.sigma).exp();
        for k in 1..n {
            let t = s.t0 + span * k as f64 / n as f64;
            let v = lognormal_profile(t, &s);
            if v > best {
                best = v;
                best_t = t;
            }
        }
        assert!((best_t - s.mode()).abs() < 2.0 * span / n as f64);
    }

    #[test]
    fn profile_has_unit_mass() {
        for skew in [0.05, 0.1, 0.3, 0.6] {
            let shape = StrokeShape {
                duration: 0.3,
                skew,
            };
            let s = StrokeLognormal::from_explicit(shape, 1.0, 0.0, 0.0, 0.0).unwrap();
            let end = s.t0 + (s.mu + 6.0 * s.sigma).exp();
            let mass = trapezoid(|t| lognormal_profile(t, &s), s.t0, end, 1e-5);
            assert!((mass - 1.0).abs() < 1e-4, "skew {skew}: mass {mass}");
        }
    }

    #[test]
    fn explicit_parameters() {
        let s = stroke(0.0);
        // sqrt(-ln 0.9)
        assert!((s.sigma - 0.324_592_845_974_501_7).abs() < 1e-14);
        assert_eq!(s.t1, 0.0);
        assert!((s.t0 - (0.0 - (s.mu - 3.0 * s.sigma).exp())).abs() < 1e-15);

        assert!(StrokeLognormal::from_explicit(
            StrokeShape {
                duration: 0.3,
                skew: 1.0
            },
            1.0,
            0.0,
            0.0,
            0.0
        )
        .is_err());
        assert!(StrokeLognormal::from_explicit(
            StrokeShape {
                duration: 0.0,
                skew: 0.1
            },
            1.0,
            0.0,
            0.0,
            0.0
        )
        .is_err());
    }

    #[test]
    fn onset_recurrence_uses_previous_duration() {
        let s = StrokeLognormal::from_explicit(StrokeShape::default(), 0.5, 0.0, 0.2, 0.3).unwrap();
        assert!((s.t1 - 0.35).abs() < 1e-15);
    }

    #[test]
    fn angle_ramp() {
        let s = stroke(0.7);
        assert!((stroke_angle(s.t0 + 1e6, &s) - 0.7).abs() < 1e-12);
        assert!(stroke_angle(s.median(), &s).abs() < 1e-12);
        assert_eq!(stroke_angle(s.t0, &s), -0.7);
        let flat = stroke(0.0);
        for t in [flat.t0, flat.mode(), flat.median(), 3.0] {
            assert_eq!(stroke_angle(t, &flat), 0.0);
        }
    }

    #[test]
    fn arc_scale_values() {
        assert_eq!(arc_scale(0.0), 1.0);
        assert!((arc_scale(PI / 2.0) - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert!((arc_scale(PI / 6.0) - 1.047_197_551_196_597_6).abs() < 1e-12);
    }

    #[test]
    fn straight_stroke_lands_on_target() {
        let plan = ActionPlan::new(
            vec![VirtualTarget::new(0.0, 0.0), VirtualTarget::new(1.0, 0.0)],
            vec![DynamicParams::new(1.0, 0.0)],
        )
        .unwrap();
        let traj = integrate_trajectory(&plan, &IntegrationConfig::default()).unwrap();
        let end = traj.samples.last().unwrap().position;
        assert!(end.distance(Vec2::new(1.0, 0.0)) < 1e-6);
    }

    #[test]
    fn closed_form_increment_matches_quadrature() {
        // brute-force integration of Lambda * h * |c| * (cos, sin)(alpha + phi)
        for theta in [-1.4, -0.2, 0.8] {
            let s = stroke(theta);
            let chord = Vec2::new(0.6, -0.8);
            let placed = PlacedStroke {
                lognormal: s,
                chord,
            };
            let (a, b) = (s.t0, s.mode() + 0.05);
            let h = 1e-6;
            let gx = trapezoid(
                |t| {
                    lognormal_profile(t, &s)
                        * arc_scale(theta)
                        * chord.norm()
                        * (chord.angle() + stroke_angle(t, &s)).cos()
                },
                a,
                b,
                h,
            );
            let gy = trapezoid(
                |t| {
                    lognormal_profile(t, &s)
                        * arc_scale(theta)
                        * chord.norm()
                        * (chord.angle() + stroke_angle(t, &s)).sin()
                },
                a,
                b,
                h,
            );
            let inc = placed.increment(a, b);
            assert!((inc.x - gx).abs() < 1e-6 && (inc.y - gy).abs() < 1e-6);
        }
    }

    #[test]
    fn sequential_strokes_visit_middle_target() {
        let plan = ActionPlan::uniform(
            &[Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0), Vec2::new(1.0, 1.0)],
            DynamicParams::new(1.0, 0.3),
        )
        .unwrap();
        let traj = integrate_trajectory(&plan, &IntegrationConfig::default()).unwrap();
        let closest = traj
            .samples
            .iter()
            .map(|s| s.position.distance(Vec2::new(1.0, 0.0)))
            .fold(f64::INFINITY, f64::min);
        // With dt = 1 the handover happens at the 3-sigma points, so each
        // stroke still owes (or has already spent) Phi(-3) of its chord.
        let tail = 0.5 * erfc(3.0 / SQRT_2);
        assert!(closest < 2.0 * tail * plan.extent(), "closest {closest}");
    }

    #[test]
    fn stationary_plan_has_zero_speed() {
        let plan = ActionPlan::uniform(
            &[Vec2::new(0.5, 0.5); 4],
            DynamicParams::new(0.5, 0.4),
        )
        .unwrap();
        let traj = integrate_trajectory(&plan, &IntegrationConfig::default()).unwrap();
        assert!(speed_profile(&traj).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_input() {
        let plan = ActionPlan::uniform(
            &[Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0)],
            DynamicParams::new(1.0, 0.0),
        )
        .unwrap();
        assert!(integrate_trajectory(&plan, &IntegrationConfig::with_step(0.0)).is_err());
        assert!(ActionPlan::new(vec![VirtualTarget::new(0.0, 0.0)], vec![]).is_err());
        assert!(ActionPlan::uniform(
            &[Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0)],
            DynamicParams::new(1.0, PI),
        )
        .is_err());
    }

    #[test]
    fn pen_up_strokes_are_flagged() {
        let plan = ActionPlan::new(
            vec![
                VirtualTarget::new(0.0, 0.0),
                VirtualTarget::lifted(1.0, 0.0),
                VirtualTarget::new(2.0, 0.0),
            ],
            vec![DynamicParams::new(1.0, 0.0); 2],
        )
        .unwrap();
        let traj = integrate_trajectory(&plan, &IntegrationConfig::default()).unwrap();
        assert!(!traj.samples[0].drawn);
        assert!(traj.samples.last().unwrap().drawn);
    }

    #[test]
    fn crossing_of_offset_identical_strokes() {
        let a = stroke(0.0);
        let b = a.shifted(0.1);
        let z = crossing_time(&a, &b);
        assert!((lognormal_profile(z, &a) - lognormal_profile(z, &b)).abs() < 1e-9);
        assert!(z > b.t0 && z < b.mode());
    }

    #[test]
    fn key_times_of_single_stroke() {
        let plan = ActionPlan::uniform(
            &[Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0)],
            DynamicParams::new(1.0, 0.0),
        )
        .unwrap();
        let z = output_key_times(&plan).unwrap();
        assert_eq!(z.len(), 2);
        let s = plan.strokes().unwrap()[0];
        assert_eq!(z[0], s.t0);
        assert_eq!(z[1], s.support_end());
    }

    #[test]
    fn sequential_key_time_sits_at_the_junction() {
        let plan = ActionPlan::uniform(
            &[Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0), Vec2::new(1.0, 1.0)],
            DynamicParams::new(1.0, 0.0),
        )
        .unwrap();
        let s = plan.strokes().unwrap();
        let z = output_key_times(&plan).unwrap()[1];
        // between the two peaks, within a tenth of a duration of the handover
        assert!(z > s[0].mode() && z < s[1].mode());
        assert!((z - s[1].t1).abs() < 0.1 * 0.3);
    }

    #[test]
    fn disjoint_supports_use_gap_midpoint() {
        let a = stroke(0.0);
        let b = a.shifted(10.0);
        let z = crossing_time(&a, &b);
        assert_eq!(z, 0.5 * (a.support_end() + b.t0));
    }
}
