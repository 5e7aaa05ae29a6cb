//! Two robots carry a six-point cable so that its middle pair flies an eight.
//! The same plan is replayed three ways: under the robot controllers, with the
//! cable ends prescribed directly, and from a tabulated plan.

use flexcable::scenario::{plan_scenario, simulate_scenario, ScenarioFile};
use flexcable::sim::SimMode;
use std::path::Path;

fn main() -> flexcable::Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/scenarios/c1_eight.json");
    let mut sc = ScenarioFile::load(&path)?;
    sc.sim.duration = 30.0;
    let (plan, summary) = plan_scenario(&sc)?;
    println!(
        "plan residual {:.1e} N, lowest segment force {:.4} N",
        summary.max_residual, summary.min_force
    );

    for (label, mode, tab) in [
        ("tracked", SimMode::Tracked, None),
        ("boundary-driven", SimMode::BoundaryDriven, Some(&plan)),
        ("tracked, tabulated plan", SimMode::Tracked, Some(&plan)),
    ] {
        let out = simulate_scenario(&sc, tab, mode)?;
        let e: Vec<String> = out
            .summary
            .metrics
            .iter()
            .map(|m| format!("e{} mean {:.2e} max {:.2e}", m.index, m.mean, m.max))
            .collect();
        println!("{label:>24}: {}", e.join(", "));
    }
    Ok(())
}
