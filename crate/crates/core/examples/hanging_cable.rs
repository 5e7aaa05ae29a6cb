//! Free-end cable carried by two robots. The second run starts from rounded
//! initial positions and shows the tracking error dying out.

use flexcable::scenario::{simulate_scenario, ScenarioFile};
use flexcable::sim::SimMode;
use std::path::Path;

fn main() -> flexcable::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/scenarios");
    let exact = simulate_scenario(
        &ScenarioFile::load(&dir.join("b_polynomial.json"))?,
        None,
        SimMode::Tracked,
    )?;
    let rough = simulate_scenario(
        &ScenarioFile::load(&dir.join("b_rounded_init.json"))?,
        None,
        SimMode::Tracked,
    )?;

    println!("   t   |p5 - p5_exact|  |p1 - p1_d|");
    for (a, b) in rough.log.rows.iter().zip(&exact.log.rows).step_by(500) {
        let e5 = (a.positions[4] - b.positions[4]).norm();
        let e1 = a
            .desired
            .iter()
            .find(|(i, _)| *i == 1)
            .map_or(0.0, |(_, d)| (a.positions[0] - d).norm());
        println!("{:6.1}  {e5:.2e}        {e1:.2e}", a.t);
    }
    for m in &exact.summary.metrics {
        println!("exact start: mean e{} = {:.2e} m", m.index, m.mean);
    }
    Ok(())
}
