//! One network, two styles: a primer selects which one it writes in.

use rand::SeedableRng;
use sigmastyle::augment::{augment_dataset, AugmentConfig};
use sigmastyle::pipelines::{default_seq_len, train_dpp, DppModel, PrimerExample};
use sigmastyle::rmdn::{NetworkConfig, TrainOptions};
use sigmastyle::slm::RandomPlanConfig;
use sigmastyle::{ActionPlan, DynamicParams};

fn styled(base: &ActionPlan, dt: f64, theta: f64) -> ActionPlan {
    let mut p = base.clone();
    for (i, d) in p.dynamics.iter_mut().enumerate() {
        *d = DynamicParams::new(dt, if i % 3 == 0 { -theta } else { theta });
    }
    p
}

fn main() -> sigmastyle::Result<()> {
    let base = RandomPlanConfig {
        targets: 8..=8,
        ..Default::default()
    }
    .sample(&mut rand_chacha::ChaCha8Rng::seed_from_u64(3));
    let quick = PrimerExample::new(styled(&base, 0.3, 0.5), "quick");
    let slow = PrimerExample::new(styled(&base, 0.85, -0.3), "slow");

    let net = NetworkConfig {
        hidden_dim: 64,
        num_gaussians: 5,
        seq_len: default_seq_len(2),
        ..Default::default()
    };
    let aug = AugmentConfig {
        n_p: 200,
        seed: 1,
        ..Default::default()
    };
    let ckpt = train_dpp(&[quick.clone(), slow.clone()], &aug, &net, &TrainOptions { epochs: 20, seed: 7, ..Default::default() })?;
    let model = DppModel::new(ckpt)?;

    println!("held-out NLL (rows: data style, columns: primer)");
    println!("{:>8} {:>8} {:>8} {:>8}", "", "none", "quick", "slow");
    for style in [&quick, &slow] {
        let held = augment_dataset(std::slice::from_ref(&style.plan), &AugmentConfig { n_p: 10, seed: 99, ..aug })?;
        let nll = |p: Option<&PrimerExample>| model.plans_nll(&held[1..], p);
        println!("{:>8} {:>8.2} {:>8.2} {:>8.2}", style.label, nll(None)?, nll(Some(&quick))?, nll(Some(&slow))?);
    }

    for primer in [&quick, &slow] {
        let d = model.predict(&base.targets, Some(primer), 1)?;
        let mean = d.iter().map(|p| p.dt).sum::<f64>() / d.len() as f64;
        println!("primed with {:>5}: mean dt {mean:.2}", primer.label);
    }
    Ok(())
}
