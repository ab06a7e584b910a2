//! Fully generative drawing. A target model proposes where the pen goes, a
//! dynamics model decides how it gets there. Both are primed with the same
//! exemplar.

use rand::SeedableRng;
use sigmastyle::augment::AugmentConfig;
use sigmastyle::io::{export_svg, write_atomic};
use sigmastyle::pipelines::{generate_tag, train_dpp, train_vtp, PrimerExample};
use sigmastyle::rmdn::{NetworkConfig, TrainOptions};
use sigmastyle::slm::RandomPlanConfig;

fn main() -> sigmastyle::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let cfg = RandomPlanConfig {
        targets: 8..=8,
        ..Default::default()
    };
    let exemplars = [PrimerExample::new(cfg.sample(&mut rng), "a"), PrimerExample::new(cfg.sample(&mut rng), "b")];

    let net = NetworkConfig {
        hidden_dim: 64,
        num_gaussians: 5,
        seq_len: 64,
        ..Default::default()
    };
    let opts = |epochs| TrainOptions { epochs, seed: 7, ..Default::default() };
    println!("training target model...");
    // the target model needs enough epochs to learn where drawings end
    let positions_only = AugmentConfig {
        n_p: 300,
        seed: 1,
        dt_sigma: 0.0,
        theta_sigma: 0.0,
        ..Default::default()
    };
    let vtp = train_vtp(&exemplars, &positions_only, &net, &opts(80))?;
    println!("training dynamics model...");
    let dpp = train_dpp(&exemplars, &AugmentConfig { n_p: 100, seed: 1, ..Default::default() }, &net, &opts(10))?;

    for seed in 0..3 {
        let tag = generate_tag(&vtp, &dpp, Some(&exemplars[0]), Some(&exemplars[0]), seed, 40)?;
        let path = std::env::temp_dir().join(format!("sigmastyle-tag-{seed}.svg"));
        write_atomic(&path, &export_svg(&tag.trajectory, Some(&tag.plan)))?;
        println!("seed {seed}: {} targets (exemplar has {}) -> {}", tag.plan.targets.len(), exemplars[0].plan.targets.len(), path.display());
    }
    Ok(())
}
