//! Model invariants: force bookkeeping, spring potential, jets, energy,
//! integrator order, symmetry and determinism.

use approx::assert_relative_eq;
use flexcable::cable::{cable_forces, spring_force, spring_potential, CableParams, Segment, SystemClass, Topology};
use flexcable::jet::{Jet, Jet3};
use flexcable::planner::{next_position_jet, PlannedTrajectory, Planner, SpringBranch};
use flexcable::scenario::{simulate_scenario, ScenarioFile};
use flexcable::sim::{boundary_step, cable_energy, BoundaryTrack, SimMode, SystemState};
use flexcable::{Mat3, Vec3};
use proptest::prelude::*;
use std::path::PathBuf;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures/scenarios")
        .join(name)
}

fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn rotation() -> impl Strategy<Value = Mat3> {
    vec3(3.0).prop_map(|xi| flexcable::geometry::exp_so3(&xi))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn internal_forces_cancel(ps in prop::collection::vec(vec3(1.0), 5), anchored in any::<bool>()) {
        let n = 5;
        let params = CableParams::uniform(n, 12.0, 0.2, 0.01, 0.002, anchored).unwrap();
        prop_assume!(ps.windows(2).all(|w| (w[0] - w[1]).norm() > 1e-3) && ps[0].norm() > 1e-3);
        let f = cable_forces(&params, &ps).unwrap();
        // each segment pushes its two ends with opposite forces
        for i in 1..n {
            let on_next = spring_force(&ps[i], &ps[i - 1], 12.0, 0.2).unwrap();
            prop_assert!((f[i] + on_next).norm() <= 1e-12 * (1.0 + f[i].norm()));
        }
        // summing f_i - f_{i-1} over the masses leaves the boundary terms only
        let total: Vec3 = (1..=n).map(|i| f[i] - f[i - 1]).sum();
        let boundary = f[n] - f[0];
        let scale: f64 = f.iter().map(|v| v.norm()).sum::<f64>() + 1.0;
        prop_assert!((total - boundary).norm() <= 1e-12 * scale);
        if !anchored {
            prop_assert!(total.norm() <= 1e-12 * scale);
        }
    }

    #[test]
    fn spring_force_symmetries(a in vec3(1.0), b in vec3(1.0), shift in vec3(5.0), r in rotation(),
                               k in 1.0..50.0f64, l0 in 0.05..0.5f64) {
        prop_assume!((a - b).norm() > 1e-3);
        let f = spring_force(&a, &b, k, l0).unwrap();
        let swapped = spring_force(&b, &a, k, l0).unwrap();
        prop_assert!((f + swapped).norm() <= 1e-12 * (1.0 + f.norm()));
        let moved = spring_force(&(a + shift), &(b + shift), k, l0).unwrap();
        prop_assert!((f - moved).norm() <= 1e-10 * (1.0 + f.norm()));
        let turned = spring_force(&(r * a), &(r * b), k, l0).unwrap();
        prop_assert!((r * f - turned).norm() <= 1e-10 * (1.0 + f.norm()));
    }

    #[test]
    fn spring_force_is_minus_potential_gradient(a in vec3(1.0), b in vec3(1.0), k in 1.0..50.0f64, l0 in 0.05..0.5f64) {
        let d = (a - b).norm();
        prop_assume!(d > 1e-2 && (d - l0).abs() > 2e-2);
        let f = spring_force(&a, &b, k, l0).unwrap();
        let h = 1e-6;
        let grad = Vec3::from_fn(|r, _| {
            let mut e = Vec3::zeros();
            e[r] = h;
            (spring_potential(&(a + e), &b, k, l0) - spring_potential(&(a - e), &b, k, l0)) / (2.0 * h)
        });
        let rel = (f + grad).norm() / f.norm();
        prop_assert!(rel < 1e-6, "relative error {rel}");
    }

    #[test]
    fn next_position_inverts_spring_force(a in vec3(1.0), b in vec3(1.0), k in 1.0..50.0f64, l0 in 0.05..0.5f64) {
        let d = (a - b).norm();
        prop_assume!(d > 1e-2 && (d - l0).abs() > 1e-3);
        let params = CableParams::new(2, None, vec![Segment { k, l0 }], vec![0.01; 2], vec![0.0; 2], 9.81).unwrap();
        let f = spring_force(&a, &b, k, l0).unwrap();
        let branch = if d > l0 { SpringBranch::Tension } else { SpringBranch::Compression };
        let p = next_position_jet(&params, 1, &Jet3::constant(a, 2), &Jet3::constant(f, 2), branch).unwrap();
        prop_assert!((p.value() - b).norm() < 1e-10);
    }
}

/// Derivative `k` of a jet against a central difference of derivative `k - 1`
/// at `h = 1e-5`.
fn check_jet(name: &str, f: impl Fn(f64, usize) -> Jet, t: f64) {
    let h = 1e-5;
    let j = f(t, 6);
    let (up, down) = (f(t + h, 6), f(t - h, 6));
    for k in 1..=4 {
        let fd = (up.derivative(k - 1) - down.derivative(k - 1)) / (2.0 * h);
        let exact = j.derivative(k);
        let rel = (fd - exact).abs() / exact.abs().max(1e-3);
        assert!(rel < 1e-4, "{name}: derivative {k} at t = {t}: jet {exact}, fd {fd}");
    }
}

#[test]
fn jet_operations_match_finite_differences() {
    let t = |t: f64, d: usize| Jet::time(t, d);
    for s in [0.3, 0.9, 1.7] {
        check_jet("sin", |x, d| t(x, d).scale(1.3).sin_cos().0, s);
        check_jet("cos", |x, d| t(x, d).sin_cos().1, s);
        check_jet("exp", |x, d| t(x, d).scale(-0.7).exp(), s);
        check_jet("sqrt", |x, d| t(x, d).offset(0.5).sqrt().unwrap(), s);
        check_jet("recip", |x, d| t(x, d).offset(0.4).recip().unwrap(), s);
        check_jet("div", |x, d| t(x, d).sin_cos().0.div(&t(x, d).offset(2.0)).unwrap(), s);
        check_jet("powi", |x, d| t(x, d).offset(-0.2).powi(5), s);
        check_jet("product", |x, d| &t(x, d).powi(2) * &t(x, d).sin_cos().0, s);
        let curve = |x: f64, d: usize| {
            let tt = t(x, d);
            let (sn, cs) = tt.sin_cos();
            Jet3::new(cs.scale(0.4).offset(0.1), sn.scale(0.3), tt.scale(0.2).offset(1.0))
        };
        let other = |x: f64, d: usize| {
            let tt = t(x, d);
            Jet3::new(tt.powi(2), tt.offset(0.5), tt.scale(-1.0).exp())
        };
        check_jet("norm", |x, d| curve(x, d).norm(1e-9).unwrap(), s);
        for c in 0..3 {
            let pick = |v: Jet3| [v.x, v.y, v.z][c].clone();
            check_jet("unit", |x, d| pick(curve(x, d).unit(1e-9).unwrap()), s);
            check_jet("cross", |x, d| pick(curve(x, d).cross(&other(x, d))), s);
        }
        check_jet("dot", |x, d| curve(x, d).dot(&other(x, d)), s);
    }
}

fn three_mass_chain(c: f64) -> (Topology, CableParams) {
    let topo = Topology::new(SystemClass::B, 3, vec![3]).unwrap();
    let params = CableParams::uniform(3, 8.0, 0.25, 0.02, c, false).unwrap();
    (topo, params)
}

fn swinging_start(topo: &Topology) -> SystemState {
    let p = [
        Vec3::new(0.35, 0.1, 0.45),
        Vec3::new(0.2, 0.0, 0.75),
        Vec3::new(0.0, 0.0, 1.0),
    ];
    SystemState::at_rest(0.0, topo, &p)
}

fn integrate(params: &CableParams, start: &SystemState, dt: f64, duration: f64) -> Vec<SystemState> {
    let source = BoundaryTrack::fixed(vec![3], vec![start.masses[2].p]);
    let steps = (duration / dt).round() as usize;
    let mut out = vec![start.clone()];
    for _ in 0..steps {
        let next = boundary_step(params, &source, out.last().unwrap(), dt).unwrap();
        out.push(next);
    }
    out
}

#[test]
fn damped_energy_never_increases() {
    let (topo, params) = three_mass_chain(0.01);
    let states = integrate(&params, &swinging_start(&topo), 1e-3, 3.0);
    let e: Vec<f64> = states.iter().map(|s| cable_energy(&params, s)).collect();
    for (k, w) in e.windows(2).enumerate() {
        assert!(w[1] <= w[0] + 1e-8, "energy rose at step {k}: {} -> {}", w[0], w[1]);
    }
    assert!(e.last().unwrap() < &e[0]);
}

#[test]
fn rk4_converges_at_fourth_order() {
    let (topo, params) = three_mass_chain(0.0);
    let start = swinging_start(&topo);
    let reference = integrate(&params, &start, 1.25e-4, 1.0).pop().unwrap();
    let e0 = cable_energy(&params, &start);
    let mut errors = vec![];
    let mut drifts = vec![];
    for dt in [4e-3, 2e-3, 1e-3] {
        let end = integrate(&params, &start, dt, 1.0).pop().unwrap();
        errors.push(
            (0..2)
                .map(|i| (end.masses[i].p - reference.masses[i].p).norm())
                .fold(0.0, f64::max),
        );
        drifts.push((cable_energy(&params, &end) - e0).abs());
    }
    for w in errors.windows(2) {
        let order = (w[0] / w[1]).log2();
        assert!((3.6..4.6).contains(&order), "state error order {order} from {errors:?}");
    }
    for w in drifts.windows(2) {
        assert!(w[0] / w[1] > 10.0, "energy drift {drifts:?}");
    }
}

#[test]
fn mirrored_flat_outputs_mirror_the_plan() {
    let sc = ScenarioFile::load(&fixture("c1_eight.json")).unwrap();
    let planner = sc.planner().unwrap();
    let mirrored = Planner::new(
        planner.topology().clone(),
        planner.params().clone(),
        planner.quads().to_vec(),
        planner.flat().mirrored_y(),
    )
    .unwrap();
    let flip = |v: Vec3| Vec3::new(v.x, -v.y, v.z);
    for t in [0.0, 7.3, 21.0, 40.5] {
        let a = planner.sample(t).unwrap();
        let b = mirrored.sample(t).unwrap();
        for (p, q) in a.positions.iter().zip(&b.positions) {
            assert_relative_eq!(flip(*p), *q, epsilon = 1e-9);
        }
        for (r, s) in a.robots.iter().zip(&b.robots) {
            assert_relative_eq!(flip(r.thrust_vector[0]), s.thrust_vector[0], epsilon = 1e-9);
        }
    }
}

#[test]
fn plan_csv_round_trip_is_exact() {
    let mut sc = ScenarioFile::load(&fixture("b_polynomial.json")).unwrap();
    sc.sim.duration = 2.0;
    let planner = sc.planner().unwrap();
    let plan = planner.plan(&sc.times()).unwrap();
    let mut buf = vec![];
    plan.write_csv(&mut buf).unwrap();
    let back = PlannedTrajectory::read_csv(buf.as_slice(), planner.topology()).unwrap();
    assert_eq!(back.samples.len(), plan.samples.len());
    for (a, b) in plan.samples.iter().zip(&back.samples) {
        assert_eq!(a.t, b.t);
        assert_eq!(a.positions, b.positions);
        assert_eq!(a.velocities, b.velocities);
        assert_eq!(a.forces, b.forces);
    }
}

#[test]
fn simulation_logs_are_bit_identical() {
    for (name, mode) in [
        ("c1_eight.json", SimMode::Tracked),
        ("c1_eight.json", SimMode::BoundaryDriven),
    ] {
        let mut sc = ScenarioFile::load(&fixture(name)).unwrap();
        sc.sim.duration = 3.0;
        let run = || {
            let out = simulate_scenario(&sc, None, mode).unwrap();
            let mut buf = vec![];
            out.log.write_csv(&mut buf).unwrap();
            buf
        };
        assert_eq!(run(), run());
    }
}
