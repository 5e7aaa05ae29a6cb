//! Integral output feedback on the middle pair when the real cable is softer
//! or stiffer than the model used for planning.

use flexcable::scenario::{simulate_scenario, ScenarioFile};
use flexcable::sim::SimMode;
use std::path::Path;

fn main() -> flexcable::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/scenarios");
    for name in ["closed_loop_soft.json", "closed_loop_stiff.json"] {
        let mut sc = ScenarioFile::load(&dir.join(name))?;
        sc.sim.duration = 40.0;
        let out = simulate_scenario(&sc, None, SimMode::ClosedLoop)?;
        let c = out.summary.comparison.expect("closed-loop runs carry a comparison");
        println!(
            "{} (stiffness x{}):",
            sc.name,
            sc.perturbation.map_or(1.0, |p| p.stiffness_scale)
        );
        for ((o, k), r) in c.open.iter().zip(&c.closed).zip(&c.reduction) {
            println!(
                "  e{}: open {:.2e} m, closed {:.2e} m, {r:.1}x smaller",
                o.index, o.mean, k.mean
            );
        }
        println!(
            "  robot reference stayed within {:.0}% of its bound",
            100.0 * c.worst_bound_ratio
        );
    }
    Ok(())
}
