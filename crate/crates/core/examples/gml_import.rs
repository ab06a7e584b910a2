//! Parse a Graffiti Markup Language document and render its reconstruction.

use sigmastyle::io::{export_svg, parse_gml, write_atomic};
use sigmastyle::reconstruct::{reconstruct_plan, ReconstructionConfig};
use sigmastyle::slm::{integrate_trajectory, IntegrationConfig};

const TAG: &str = r#"<gml spec="1.0">
  <tag>
    <header><environment><up><x>0</x><y>1</y><z>0</z></up></environment></header>
    <drawing>
      <stroke>
        <pt><x>0.10</x><y>0.80</y><t>0.00</t></pt>
        <pt><x>0.15</x><y>0.60</y><t>0.02</t></pt>
        <pt><x>0.20</x><y>0.40</y><t>0.04</t></pt>
        <pt><x>0.25</x><y>0.20</y><t>0.06</t></pt>
        <pt><x>0.35</x><y>0.45</y><t>0.08</t></pt>
        <pt><x>0.45</x><y>0.70</y><t>0.10</t></pt>
        <pt><x>0.55</x><y>0.45</y><t>0.12</t></pt>
        <pt><x>0.65</x><y>0.20</y><t>0.14</t></pt>
        <pt><x>0.70</x><y>0.50</y><t>0.16</t></pt>
        <pt><x>0.75</x><y>0.80</y><t>0.18</t></pt>
      </stroke>
      <stroke>
        <pt><x>0.85</x><y>0.30</y><t>0.30</t></pt>
        <pt><x>0.90</x><y>0.25</y><t>0.32</t></pt>
        <pt><x>0.95</x><y>0.20</y><t>0.34</t></pt>
      </stroke>
    </drawing>
  </tag>
</gml>"#;

fn main() -> sigmastyle::Result<()> {
    let trace = parse_gml(TAG.as_bytes())?;
    println!(
        "{} points, breaks at {:?}, y flipped: {}, raw scale {:?}",
        trace.points.len(),
        trace.pen_up_breaks,
        trace.meta.y_flipped,
        trace.meta.raw_scale
    );
    let plan = reconstruct_plan(&trace, &ReconstructionConfig::default())?;
    println!("{} virtual targets ({} lifted)", plan.targets.len(), plan.targets.iter().filter(|t| t.pen_up).count());
    let traj = integrate_trajectory(&plan, &IntegrationConfig::default())?;
    let path = std::env::temp_dir().join("sigmastyle-gml.svg");
    write_atomic(&path, &export_svg(&traj, Some(&plan)))?;
    println!("wrote {}", path.display());
    Ok(())
}
