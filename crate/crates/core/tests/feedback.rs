//! Integral output feedback around the class (c) recursion.

use flexcable::feedback::{ClosedLoop, GainConfig};
use flexcable::scenario::{simulate_scenario, ScenarioFile};
use flexcable::sim::{ReferenceSource, SimMode, SystemState};
use flexcable::Vec3;
use std::path::PathBuf;

fn scenario(name: &str) -> ScenarioFile {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures/scenarios")
        .join(name);
    ScenarioFile::load(&path).unwrap()
}

#[test]
fn zero_gain_reproduces_the_open_loop_plan() {
    let sc = scenario("closed_loop_soft.json");
    let planner = sc.planner().unwrap();
    let mut cl = ClosedLoop::new(planner.clone(), GainConfig::disabled()).unwrap();
    for k in 0..500 {
        let t = k as f64 * 0.01;
        let mut state = SystemState::from_plan_sample(&planner.sample(t).unwrap(), false);
        // a plant far from the plan: the error is large but the gain is zero
        for m in &mut state.masses {
            m.p += Vec3::new(0.1, -0.05, 0.02);
        }
        let refs = cl.references(t, &state).unwrap();
        let open = planner.sample(t).unwrap();
        for (slot, r) in refs.iter().enumerate() {
            assert_eq!(*r, open.tracking_reference(slot));
        }
    }
    assert_eq!(cl.worst_bound_ratio, 0.0);
}

#[test]
fn clamped_correction_respects_the_bound() {
    let mut sc = scenario("closed_loop_soft.json");
    sc.sim.duration = 20.0;
    let mut gains = sc.feedback.unwrap();
    gains.ki = [2.0; 3];
    gains.clamp = 2e-4;
    sc.feedback = Some(gains);
    let out = simulate_scenario(&sc, None, SimMode::ClosedLoop).unwrap();
    let c = out.summary.comparison.unwrap();
    assert!(c.worst_bound_ratio <= 1.0 + 1e-9, "ratio {}", c.worst_bound_ratio);
    // the clamp was actually reached
    assert!(c.worst_bound_ratio > 0.9, "ratio {}", c.worst_bound_ratio);
    assert_eq!(c.ticks, 2001);
}

#[test]
fn integral_action_removes_stiffness_mismatch() {
    for name in ["closed_loop_soft.json", "closed_loop_stiff.json"] {
        let mut sc = scenario(name);
        sc.sim.duration = 40.0;
        let c = simulate_scenario(&sc, None, SimMode::ClosedLoop)
            .unwrap()
            .summary
            .comparison
            .unwrap();
        for r in &c.reduction {
            assert!(*r >= 2.0, "{name}: reduction {:?}", c.reduction);
        }
    }
}

#[test]
fn measurement_noise_is_seeded() {
    let mut sc = scenario("closed_loop_stiff.json");
    sc.sim.duration = 5.0;
    let run = |seed: u64| {
        let mut s = sc.clone();
        let mut g = s.feedback.unwrap();
        g.noise_std = 0.003;
        g.seed = seed;
        s.feedback = Some(g);
        let out = simulate_scenario(&s, None, SimMode::ClosedLoop).unwrap();
        let mut buf = vec![];
        out.log.write_csv(&mut buf).unwrap();
        buf
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}
