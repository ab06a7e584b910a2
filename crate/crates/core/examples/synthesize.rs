//! Integrate a hand-written action plan into a trajectory and export it.
//!
//! ```text
//! cargo run --example synthesize [out-dir]
//! ```

use sigmastyle::io::{export_svg, export_trajectory_csv, write_atomic};
use sigmastyle::slm::{integrate_trajectory, speed_profile, IntegrationConfig};
use sigmastyle::{ActionPlan, DynamicParams, VirtualTarget};

fn main() -> sigmastyle::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("sigmastyle"), Into::into);
    std::fs::create_dir_all(&out).expect("create output directory");

    // a loop, a lift, and a final tick
    let plan = ActionPlan::new(
        vec![
            VirtualTarget::new(0.0, 0.0),
            VirtualTarget::new(0.4, -0.6),
            VirtualTarget::new(0.8, 0.0),
            VirtualTarget::new(0.3, 0.1),
            VirtualTarget::lifted(1.1, 0.2),
            VirtualTarget::new(1.3, -0.3),
        ],
        vec![
            DynamicParams::new(0.0, 0.5),
            DynamicParams::new(0.4, 0.6),
            DynamicParams::new(0.3, -0.4),
            DynamicParams::new(0.8, 0.0),
            DynamicParams::new(0.5, 0.3),
        ],
    )?;
    let traj = integrate_trajectory(&plan, &IntegrationConfig::default())?;
    let speed = speed_profile(&traj);
    let peak = speed.iter().cloned().fold(0.0, f64::max);
    println!(
        "{} strokes, {} samples over {:.3} s, peak speed {peak:.2}/s",
        plan.stroke_count(),
        traj.len(),
        traj.duration()
    );

    write_atomic(&out.join("synthesize.svg"), &export_svg(&traj, Some(&plan)))?;
    write_atomic(&out.join("synthesize.csv"), &export_trajectory_csv(&traj))?;
    println!("wrote {}/synthesize.{{svg,csv}}", out.display());
    Ok(())
}
