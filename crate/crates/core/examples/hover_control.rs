//! Two robots hold a hanging cable still; one cable point is knocked 5 cm
//! sideways and the controllers bring the system back.

use flexcable::scenario::{simulate_scenario, ScenarioFile};
use flexcable::sim::{Disturbance, SimMode};
use std::path::Path;

fn main() -> flexcable::Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/scenarios/c1_static.json");
    let mut sc = ScenarioFile::load(&path)?;
    sc.sim.duration = 20.0;
    sc.sim.disturbance = Some(Disturbance {
        mass: 3,
        offset: [0.0, 0.05, 0.0],
    });
    let out = simulate_scenario(&sc, None, SimMode::Tracked)?;
    println!("   t    |e3| m    thrust1 N");
    for row in out.log.rows.iter().step_by(200) {
        let (_, d3) = row
            .desired
            .iter()
            .find(|(i, _)| *i == 3)
            .copied()
            .expect("p3 is an output");
        println!(
            "{:5.1}  {:.2e}  {:.4}",
            row.t,
            (row.positions[2] - d3).norm(),
            row.robots[0].input.thrust
        );
    }
    println!("saturated controller steps: {}", out.summary.saturated_steps);
    Ok(())
}
