use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sigmastyle::reconstruct::*;
use sigmastyle::slm::*;
use sigmastyle::Vec2;

fn trace_of(plan: &ActionPlan) -> RawTrace {
    let traj = integrate_trajectory(plan, &IntegrationConfig::default()).unwrap();
    RawTrace::new(traj.positions())
}

fn six_target_plan() -> ActionPlan {
    let targets = [(0.0, 0.0), (1.0, 0.2), (0.4, 0.9), (1.3, 1.4), (0.9, 0.3), (1.8, 0.6)]
        .iter()
        .map(|&(x, y)| VirtualTarget::new(x, y))
        .collect();
    let dynamics = [(1.0, 0.3), (0.6, -0.4), (0.8, 0.5), (0.5, -0.2), (0.7, 0.6)]
        .iter()
        .map(|&(dt, th)| DynamicParams::new(dt, th))
        .collect();
    ActionPlan::new(targets, dynamics).unwrap()
}

fn mean_deviation(a: &[Vec2], b: &[Vec2]) -> f64 {
    let nearest = |p: &Vec2, set: &[Vec2]| set.iter().map(|q| p.distance(*q)).fold(f64::INFINITY, f64::min);
    let ab: f64 = a.iter().map(|p| nearest(p, b)).sum::<f64>() / a.len() as f64;
    let ba: f64 = b.iter().map(|p| nearest(p, a)).sum::<f64>() / b.len() as f64;
    0.5 * (ab + ba)
}

fn count_peaks(speed: &[f64]) -> usize {
    let top = speed.iter().cloned().fold(0.0, f64::max);
    (1..speed.len() - 1)
        .filter(|&i| speed[i] > speed[i - 1] && speed[i] >= speed[i + 1] && speed[i] > 0.05 * top)
        .count()
}

#[test]
fn six_target_figure_round_trip() {
    let plan = six_target_plan();
    let trace = trace_of(&plan);
    let rec = reconstruct_plan(&trace, &ReconstructionConfig::default()).unwrap();
    assert_eq!(rec.targets.len(), 6);
    let again = trace_of(&rec);
    let dev = mean_deviation(&trace.points, &again.points);
    assert!(dev < 0.02 * trace.extent(), "deviation {dev}");
}

#[test]
fn reconstructed_speed_profile_peak_count() {
    let plan = six_target_plan();
    let rec = reconstruct_plan(&trace_of(&plan), &ReconstructionConfig::default()).unwrap();
    let cfg = IntegrationConfig::default();
    let original = speed_profile(&integrate_trajectory(&plan, &cfg).unwrap());
    let rebuilt = speed_profile(&integrate_trajectory(&rec, &cfg).unwrap());
    let (a, b) = (count_peaks(&original), count_peaks(&rebuilt));
    assert!(a.abs_diff(b) <= 1, "{a} vs {b}");
}

#[test]
fn adjustment_mse_is_mostly_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let gen = RandomPlanConfig::default();
    let cfg = ReconstructionConfig {
        refine_iters: 0,
        ..Default::default()
    };
    let cases = 200;
    let monotone = (0..cases)
        .filter(|_| {
            let rec = reconstruct(&trace_of(&gen.sample(&mut rng)), &cfg).unwrap();
            rec.reports
                .iter()
                .all(|r| r.mse_history.windows(2).all(|w| w[1] <= w[0]))
        })
        .count();
    assert!(monotone as f64 >= 0.95 * cases as f64, "{monotone}/{cases}");
}

#[test]
fn similarity_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let gen = RandomPlanConfig {
        targets: 3..=5,
        ..Default::default()
    };
    let cfg = ReconstructionConfig::default();
    for case in 0..6 {
        let plan = gen.sample(&mut rng);
        let trace = trace_of(&plan);
        let base = reconstruct_plan(&trace, &cfg).unwrap();
        // quarter turns keep the bounding-box extent, and so the resampling
        // step, unchanged relative to the shape
        let quarter = case % 4;
        let scale = 0.5 + case as f64;
        let map = |p: Vec2| {
            let mut q = p;
            for _ in 0..quarter {
                q = Vec2::new(-q.y, q.x);
            }
            q * scale
        };
        let moved = RawTrace::new(trace.points.iter().map(|p| map(*p)).collect());
        let rec = reconstruct_plan(&moved, &cfg).unwrap();
        assert_eq!(rec.targets.len(), base.targets.len());
        for (a, b) in rec.dynamics.iter().zip(&base.dynamics) {
            assert!((a.theta - b.theta).abs() < 1e-3, "case {case}: {} vs {}", a.theta, b.theta);
        }
        for (a, b) in rec.targets.iter().zip(&base.targets) {
            let err = a.position.distance(map(b.position));
            assert!(err < 0.01 * moved.extent(), "case {case}: {err}");
        }
    }
}

fn corner(angle_deg: f64, per_leg: usize) -> RawTrace {
    let turn = (180.0 - angle_deg).to_radians();
    let mut pts: Vec<Vec2> = (0..=per_leg)
        .map(|k| Vec2::new(-1.0 + k as f64 / per_leg as f64, 0.0))
        .collect();
    pts.extend((1..=per_leg).map(|k| Vec2::from_polar(k as f64 / per_leg as f64, turn)));
    RawTrace::new(pts)
}

#[test]
fn sharpness_does_not_drop_as_corner_sharpens() {
    let cfg = ReconstructionConfig::default();
    for per_leg in [1, 10, 50] {
        let mut last = 0.0;
        for angle in (90..=170).rev().step_by(10) {
            let rec = reconstruct(&corner(angle as f64, per_leg), &cfg).unwrap();
            let kps = &rec.key_points[0];
            assert_eq!(kps.len(), 3, "angle {angle}");
            let lambda = kps.sharpness[0];
            assert!(lambda >= last, "angle {angle}: {lambda} < {last}");
            last = lambda;
        }
    }
}

#[test]
fn rounded_corner_is_less_sharp_than_polyline_corner() {
    let cfg = ReconstructionConfig::default();
    let sharp = reconstruct(&corner(90.0, 50), &cfg).unwrap().key_points[0].sharpness[0];
    // same legs joined by a quarter circle of radius 0.3
    let r = 0.3;
    let mut pts: Vec<Vec2> = (0..=50).map(|k| Vec2::new(-1.0 + (1.0 - r) * k as f64 / 50.0, 0.0)).collect();
    let centre = Vec2::new(-r, r);
    pts.extend((1..=40).map(|k| {
        let a = -std::f64::consts::FRAC_PI_2 + std::f64::consts::FRAC_PI_2 * k as f64 / 40.0;
        centre + Vec2::from_polar(r, a)
    }));
    pts.extend((1..=50).map(|k| Vec2::new(0.0, r + (1.0 - r) * k as f64 / 50.0)));
    let round = reconstruct(&RawTrace::new(pts), &cfg).unwrap();
    let lambda = round.key_points[0].sharpness[0];
    assert!(lambda < sharp, "{lambda} vs {sharp}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn resampled_spacing_is_uniform(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trace = trace_of(&RandomPlanConfig::default().sample(&mut rng));
        let cfg = ReconstructionConfig::default();
        let res = resample_uniform(&trace, &cfg).unwrap();
        let gaps: Vec<f64> = res.points.windows(2).map(|w| w[0].distance(w[1])).collect();
        let step = trace.extent() / cfg.resample_divisor;
        // chords of a curve are at most the arc step, and only corners
        // shorten them noticeably
        prop_assert!(gaps.iter().all(|g| *g <= step * (1.0 + 1e-9)));
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        prop_assert!(mean > 0.95 * step, "mean gap {} vs step {}", mean, step);
        prop_assert_eq!(res.points[0], trace.points[0]);
        prop_assert_eq!(*res.points.last().unwrap(), *trace.points.last().unwrap());
    }

    #[test]
    fn reconstructed_plans_respect_bounds(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trace = trace_of(&RandomPlanConfig::default().sample(&mut rng));
        let cfg = ReconstructionConfig::default();
        let rec = reconstruct(&trace, &cfg).unwrap();
        prop_assert!(rec.plan.validate().is_ok());
        for d in &rec.plan.dynamics {
            prop_assert!(d.dt >= cfg.dt_min && d.dt <= cfg.dt_max);
            prop_assert!(d.theta.abs() < std::f64::consts::PI);
        }
        for kps in &rec.key_points {
            prop_assert!(kps.sharpness.iter().all(|l| (0.0..=1.0).contains(l)));
            prop_assert!(kps.indices.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn smoothing_preserves_mass_away_from_edges(
        spikes in prop::collection::vec((60usize..140, 0.01f64..1.0), 1..5),
    ) {
        let mut s = vec![0.0; 200];
        for (i, v) in &spikes {
            s[*i] += v;
        }
        let out = smooth(&s, 40);
        let total: f64 = s.iter().sum();
        prop_assert!((out.iter().sum::<f64>() - total).abs() < 1e-12 * total.max(1.0));
    }
}
