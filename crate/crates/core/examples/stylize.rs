//! Redraw a trace in a learnt style: its virtual targets are kept and its
//! dynamics are sampled from a model trained on a different writer.

use rand::SeedableRng;
use sigmastyle::augment::AugmentConfig;
use sigmastyle::geom::hausdorff;
use sigmastyle::io::{export_svg, write_atomic};
use sigmastyle::pipelines::{stylize, train_dpp, PrimerExample};
use sigmastyle::reconstruct::{RawTrace, ReconstructionConfig};
use sigmastyle::rmdn::{NetworkConfig, TrainOptions};
use sigmastyle::slm::{integrate_trajectory, IntegrationConfig, RandomPlanConfig};
use sigmastyle::DynamicParams;

fn main() -> sigmastyle::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
    let plans = RandomPlanConfig {
        targets: 7..=7,
        ..Default::default()
    };

    // a loose, curvy writer
    let mut style = plans.sample(&mut rng);
    for d in &mut style.dynamics {
        *d = DynamicParams::new(0.7, 0.7);
    }
    let net = NetworkConfig {
        hidden_dim: 64,
        num_gaussians: 5,
        ..Default::default()
    };
    let aug = AugmentConfig {
        n_p: 100,
        seed: 2,
        ..Default::default()
    };
    let ckpt = train_dpp(&[PrimerExample::new(style, "curvy")], &aug, &net, &TrainOptions { epochs: 10, seed: 3, ..Default::default() })?;

    // a tight source trace from someone else
    let source = plans.sample(&mut rng);
    let trace = RawTrace::new(integrate_trajectory(&source, &IntegrationConfig::default())?.positions());
    let out = stylize(&ckpt, &trace, &ReconstructionConfig::default(), None, 5)?;
    println!(
        "{} targets kept, Hausdorff distance to the source {:.3} (extent {:.3})",
        out.plan.targets.len(),
        hausdorff(&out.trajectory.positions(), &trace.points),
        trace.extent()
    );
    let path = std::env::temp_dir().join("sigmastyle-stylized.svg");
    write_atomic(&path, &export_svg(&out.trajectory, Some(&out.plan)))?;
    println!("wrote {}", path.display());
    Ok(())
}
