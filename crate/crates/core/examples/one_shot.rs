//! Learn a drawing style from a single example.
//!
//! The exemplar is augmented 200 times, a 2x64 recurrent mixture-density
//! network is fitted to its dynamics, and the model then writes new
//! dynamics for unseen target layouts. The checkpoint is saved to the
//! temporary directory.

use rand::SeedableRng;
use sigmastyle::augment::AugmentConfig;
use sigmastyle::io::save_checkpoint;
use sigmastyle::pipelines::{train_dpp_with_progress, DppModel, PrimerExample};
use sigmastyle::rmdn::{NetworkConfig, TrainOptions};
use sigmastyle::slm::RandomPlanConfig;
use sigmastyle::DynamicParams;

fn main() -> sigmastyle::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let mut exemplar = RandomPlanConfig {
        targets: 8..=8,
        ..Default::default()
    }
    .sample(&mut rng);
    for (i, d) in exemplar.dynamics.iter_mut().enumerate() {
        *d = DynamicParams::new(0.2 + 0.04 * (i % 3) as f64, 0.3);
    }

    let net = NetworkConfig {
        hidden_dim: 64,
        num_gaussians: 5,
        seq_len: 15,
        ..Default::default()
    };
    let aug = AugmentConfig {
        n_p: 200,
        seed: 1,
        ..Default::default()
    };
    let opts = TrainOptions {
        epochs: 20,
        seed: 7,
        ..Default::default()
    };
    let ckpt = train_dpp_with_progress(&[PrimerExample::new(exemplar.clone(), "smooth")], &aug, &net, &opts, |e, loss| {
        println!("epoch {:>2}  loss {loss:.4}", e + 1)
    })?;
    let path = std::env::temp_dir().join("one_shot.ckpt");
    save_checkpoint(&path, &ckpt)?;
    println!("saved {}", path.display());

    let model = DppModel::new(ckpt)?;
    let layout = RandomPlanConfig {
        targets: 6..=6,
        ..Default::default()
    }
    .sample(&mut rng);
    let dynamics = model.predict(&layout.targets, None, 0)?;
    let mean = |d: &[DynamicParams]| d.iter().map(|p| p.dt).sum::<f64>() / d.len() as f64;
    println!("exemplar mean dt {:.3}, predicted mean dt on a new layout {:.3}", mean(&exemplar.dynamics), mean(&dynamics));
    Ok(())
}
