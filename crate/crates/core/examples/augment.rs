//! Grow one plan into a small dataset of perturbed copies.

use sigmastyle::augment::{augment_dataset, AugmentConfig};
use sigmastyle::{ActionPlan, DynamicParams};

fn main() -> sigmastyle::Result<()> {
    let plan = ActionPlan::uniform(
        &[[0.0, 0.0].into(), [0.5, 0.8].into(), [1.0, 0.0].into(), [1.5, 0.8].into()],
        DynamicParams::new(0.4, 0.3),
    )?;
    let cfg = AugmentConfig {
        n_p: 5,
        seed: 11,
        ..Default::default()
    };
    let plans = augment_dataset(&[plan], &cfg)?;
    for (i, p) in plans.iter().enumerate() {
        let dts: Vec<String> = p.dynamics.iter().map(|d| format!("{:.2}", d.dt)).collect();
        let last = p.targets.last().unwrap().position;
        println!("{}{i}: end ({:.3}, {:.3}) dt [{}]", if i == 0 { "original " } else { "variation " }, last.x, last.y, dts.join(" "));
    }
    Ok(())
}
