//! Recover an action plan from nothing but the points of a trajectory, then
//! compare it with the plan that drew them.

use rand::SeedableRng;
use sigmastyle::reconstruct::{reconstruct, RawTrace, ReconstructionConfig};
use sigmastyle::slm::{integrate_trajectory, IntegrationConfig, RandomPlanConfig};

fn main() -> sigmastyle::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let truth = RandomPlanConfig::default().sample(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let traj = integrate_trajectory(&truth, &IntegrationConfig::default())?;
    // timing is discarded: reconstruction sees geometry only
    let trace = RawTrace::new(traj.positions());

    let r = reconstruct(&trace, &ReconstructionConfig::default())?;
    println!("targets: true {}, recovered {}", truth.targets.len(), r.plan.targets.len());
    println!("adjustment iterations {}", r.max_iterations());
    if r.plan.targets.len() == truth.targets.len() {
        println!("{:>3} {:>18} {:>18} {:>8} {:>8}", "i", "true", "recovered", "dt", "theta");
        for (i, (a, b)) in truth.targets.iter().zip(&r.plan.targets).enumerate() {
            let d = i.checked_sub(1).map(|k| (truth.dynamics[k], r.plan.dynamics[k]));
            print!(
                "{i:>3} ({:>7.3},{:>7.3}) ({:>7.3},{:>7.3})",
                a.position.x, a.position.y, b.position.x, b.position.y
            );
            match d {
                Some((t, e)) => println!(" {:.2}/{:.2} {:+.2}/{:+.2}", t.dt, e.dt, t.theta, e.theta),
                None => println!(),
            }
        }
    }
    Ok(())
}
