//! Flatness-based plan for a ground-anchored cable whose free point draws a
//! circle, then a tracked simulation from the planned state and from rest.

use flexcable::scenario::{plan_scenario, simulate_scenario, ScenarioFile};
use flexcable::sim::SimMode;
use std::path::Path;

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures/scenarios")
        .join(name)
}

fn main() -> flexcable::Result<()> {
    let sc = ScenarioFile::load(&fixture("a1_circle.json"))?;
    let (plan, summary) = plan_scenario(&sc)?;
    println!(
        "{} samples, jet depth {}, max dynamics residual {:.2e} N",
        summary.samples, summary.depth, summary.max_residual
    );
    for r in &summary.robots {
        println!(
            "robot at p{}: peak thrust {:.3} N of {:.2} N",
            r.index, r.max_thrust, r.f_max
        );
    }
    let p3 = plan.position_at(3, 0.0);
    println!("robot starts at ({:.3}, {:.3}, {:.3})", p3.x, p3.y, p3.z);

    for name in ["a1_circle.json", "a1_circle_at_rest.json"] {
        let sc = ScenarioFile::load(&fixture(name))?;
        let out = simulate_scenario(&sc, Some(&plan), SimMode::Tracked)?;
        let e = &out.summary.metrics[0];
        let last = &out.summary.final_quarter[0];
        println!(
            "{}: mean |e1| {:.5} m, final quarter {:.2e} m",
            sc.name, e.mean, last.mean
        );
    }
    Ok(())
}
