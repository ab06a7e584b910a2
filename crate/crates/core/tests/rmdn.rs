use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sigmastyle::rmdn::*;
use sigmastyle::Vec2;

/// Denominator floor for relative errors of near-zero gradients; central
/// differences at h = 1e-5 carry about 1e-10 of rounding noise.
const REL_FLOOR: f64 = 1e-5;

fn random_config(rng: &mut ChaCha8Rng) -> NetworkConfig {
    NetworkConfig {
        input_dim: rng.gen_range(1..5),
        layers: rng.gen_range(1..=3),
        hidden_dim: rng.gen_range(3..=8),
        num_gaussians: rng.gen_range(1..=3),
        dropout_keep: if rng.gen::<bool>() { 1.0 } else { 0.8 },
        peepholes: rng.gen(),
        pen_head: rng.gen(),
        ..Default::default()
    }
}

fn random_sequence(cfg: &NetworkConfig, n: usize, rng: &mut ChaCha8Rng) -> Sequence {
    Sequence {
        inputs: (0..n)
            .map(|_| (0..cfg.input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect(),
        targets: (0..n)
            .map(|_| StepTarget {
                y: Vec2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                pen: rng.gen(),
            })
            .collect(),
    }
}

fn loss_at(net: &Network, seq: &Sequence, mask_seed: u64) -> f64 {
    let cfg = &net.config;
    let f = net
        .forward(&seq.inputs, &LstmState::zeros(cfg), Mode::Train, &mut ChaCha8Rng::seed_from_u64(mask_seed))
        .unwrap();
    nll_loss(&f.params(cfg), &seq.targets).unwrap()
}

/// Worst relative error between analytic and central-difference gradients.
fn gradient_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = random_config(&mut rng);
    let net = Network::init(cfg.clone(), seed).unwrap();
    // perturb away from the structured initialisation
    let mut net = net;
    for w in &mut net.weights {
        *w += rng.gen_range(-0.3..0.3);
    }
    let seq = random_sequence(&cfg, 5, &mut rng);
    let f = net
        .forward(&seq.inputs, &LstmState::zeros(&cfg), Mode::Train, &mut ChaCha8Rng::seed_from_u64(seed))
        .unwrap();
    let (loss, grad) = net.backward(&f.steps, &seq.targets).unwrap();
    assert!((loss - loss_at(&net, &seq, seed)).abs() < 1e-10);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..net.weights.len() {
        let mut plus = net.clone();
        plus.weights[i] += h;
        let mut minus = net.clone();
        minus.weights[i] -= h;
        let numeric = (loss_at(&plus, &seq, seed) - loss_at(&minus, &seq, seed)) / (2.0 * h);
        let rel = (numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(REL_FLOOR);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn gradients_match_central_differences() {
    for seed in 0..10 {
        let worst = gradient_check(seed);
        assert!(worst < 1e-4, "seed {seed}: relative error {worst:.3e}");
    }
}

#[test]
fn gradient_check_reference_size() {
    // hidden 8, K = 2, length 5
    let cfg = NetworkConfig {
        input_dim: 5,
        layers: 2,
        hidden_dim: 8,
        num_gaussians: 2,
        dropout_keep: 0.9,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let net = Network::init(cfg.clone(), 99).unwrap();
    let seq = random_sequence(&cfg, 5, &mut rng);
    let f = net
        .forward(&seq.inputs, &LstmState::zeros(&cfg), Mode::Train, &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    let (_, grad) = net.backward(&f.steps, &seq.targets).unwrap();
    let h = 1e-5;
    for i in 0..net.weights.len() {
        let mut p = net.clone();
        p.weights[i] += h;
        let mut m = net.clone();
        m.weights[i] -= h;
        let numeric = (loss_at(&p, &seq, 1) - loss_at(&m, &seq, 1)) / (2.0 * h);
        let rel = (numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(REL_FLOOR);
        assert!(rel < 1e-4, "weight {i}: {numeric} vs {}", grad[i]);
    }
}

#[test]
fn constant_target_is_learnt() {
    let cfg = NetworkConfig {
        input_dim: 2,
        layers: 1,
        hidden_dim: 8,
        num_gaussians: 2,
        dropout_keep: 1.0,
        seq_len: 4,
        adam: AdamConfig {
            lr: 1e-2,
            ..Default::default()
        },
        ..Default::default()
    };
    let seq = Sequence {
        inputs: vec![vec![0.1, -0.2]; 6],
        targets: vec![StepTarget::new(0.7, -0.3); 6],
    };
    let report = train(
        &cfg,
        &vec![seq.clone(); 4],
        &TrainOptions {
            epochs: 50,
            batch_size: 2,
            seed: 1,
        },
    )
    .unwrap();
    let initial = evaluate(&Network::init(cfg.clone(), 1).unwrap(), std::slice::from_ref(&seq)).unwrap();
    let trained = evaluate(&report.network, &[seq]).unwrap();
    assert!(trained < initial, "{trained} vs {initial}");
    assert!(report.final_loss() < report.epoch_losses[0]);
}

#[test]
fn training_is_deterministic() {
    let cfg = NetworkConfig {
        input_dim: 3,
        layers: 2,
        hidden_dim: 6,
        num_gaussians: 2,
        seq_len: 4,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data: Vec<Sequence> = (0..9).map(|_| random_sequence(&cfg, 11, &mut rng)).collect();
    let opts = TrainOptions {
        epochs: 3,
        batch_size: 4,
        seed: 8,
    };
    let a = train(&cfg, &data, &opts).unwrap();
    let b = train(&cfg, &data, &opts).unwrap();
    assert_eq!(a, b);
    let c = train(&cfg, &data, &TrainOptions { seed: 9, ..opts }).unwrap();
    assert_ne!(a.network.weights, c.network.weights);
}

#[test]
fn divergence_is_reported() {
    let cfg = NetworkConfig {
        input_dim: 1,
        layers: 1,
        hidden_dim: 4,
        num_gaussians: 1,
        ..Default::default()
    };
    let seq = Sequence {
        inputs: vec![vec![f64::NAN]; 3],
        targets: vec![StepTarget::new(0.0, 0.0); 3],
    };
    let err = train(&cfg, &[seq], &TrainOptions::default()).unwrap_err();
    assert!(matches!(err, sigmastyle::Error::Divergence { .. }), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn outputs_stay_in_range(seed in any::<u64>(), scale in 0.1f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = random_config(&mut rng);
        let mut net = Network::init(cfg.clone(), seed).unwrap();
        for w in &mut net.weights {
            *w *= scale;
        }
        let seq = random_sequence(&cfg, 4, &mut rng);
        let inputs: Vec<Vec<f64>> = seq.inputs.iter().map(|x| x.iter().map(|v| v * scale).collect()).collect();
        let (params, _) = net.infer(&inputs, &LstmState::zeros(&cfg)).unwrap();
        for p in params {
            prop_assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.deviations.iter().all(|s| s.x > 0.0 && s.y > 0.0));
            prop_assert!(p.correlations.iter().all(|r| r.abs() <= 1.0));
            if let Some(e) = p.pen {
                prop_assert!((0.0..=1.0).contains(&e));
            }
        }
    }

    #[test]
    fn segments_cover_every_index(n in 1usize..200, len in 2usize..40, overlap in 0.0f64..0.95) {
        let segs = make_segments(n, len, overlap);
        let mut cover = vec![0usize; n];
        for s in &segs {
            prop_assert!(s.len() <= len && !s.is_empty());
            for i in s.clone() {
                cover[i] += 1;
            }
        }
        prop_assert!(cover.iter().all(|c| *c >= 1));
    }

    #[test]
    fn half_overlap_covers_interior_twice(n in 1usize..200, half in 1usize..20) {
        let len = 2 * half;
        let segs = make_segments(n, len, 0.5);
        let mut cover = vec![0usize; n];
        for s in &segs {
            for i in s.clone() {
                cover[i] += 1;
            }
        }
        if n > len {
            for (i, c) in cover.iter().enumerate().take(n - half).skip(half) {
                prop_assert!(*c >= 2, "index {}", i);
            }
        }
    }

    #[test]
    fn sampling_is_reproducible(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..13).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let p = transform(&raw, 2, true);
        let a = sample_gmm(&p, &mut ChaCha8Rng::seed_from_u64(seed));
        let b = sample_gmm(&p, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(a, b);
    }
}
