//! Spring forces and the static shape of a cable hanging between two robots.

use flexcable::cable::{cable_forces, spring_force, static_equilibrium, static_residual, SystemClass, Topology};
use flexcable::sysid::table1_params;
use flexcable::Vec3;

fn main() -> flexcable::Result<()> {
    let f = spring_force(&Vec3::zeros(), &Vec3::new(1.0, 1.0, 1.0), 20.0, 0.5)?;
    println!("spring force on p_i: {:.7} {:.7} {:.7}", f.x, f.y, f.z);

    let params = table1_params();
    let topo = Topology::new(SystemClass::C, 6, vec![1, 6])?;
    for d in [0.3, 0.5, 0.9] {
        let robots = [Vec3::new(-d / 2.0, 0.0, 1.2), Vec3::new(d / 2.0, 0.0, 1.2)];
        let p = static_equilibrium(&topo, &params, &robots)?;
        let forces = cable_forces(&params, &p)?;
        let sag = 1.2 - p.iter().map(|q| q.z).fold(f64::INFINITY, f64::min);
        println!(
            "robots {d:.1} m apart: sag {sag:.4} m, end tension {:.4} N, residual {:.1e} N",
            forces[1].norm(),
            static_residual(&topo, &params, &p)?
        );
    }
    Ok(())
}
