//! Identify stiffnesses and damping from synthetic marker data generated by a
//! known cable, starting from a guess twice the truth.

use flexcable::sysid::{identify, synthetic_dataset, table1_params, IdentifyConfig, SyntheticConfig, ThetaVector};

fn main() -> flexcable::Result<()> {
    let mut cfg = SyntheticConfig::table1(7);
    cfg.duration = 40.0;
    // markers only: velocities come from differencing, as with real capture data
    let data = synthetic_dataset(&cfg)?.positions_only();
    println!("{} frames at {} Hz, {} points", data.len(), data.rate, data.n());

    let truth = table1_params();
    let theta = ThetaVector {
        k: truth.stiffnesses(),
        c: truth.damping(1),
    };
    let mut config = IdentifyConfig::new(truth.masses().iter().sum(), theta.scaled(2.0));
    config.rest_lengths = Some(truth.segments().iter().map(|s| s.l0).collect());
    let report = identify(&data, &config)?;

    for s in &report.stages {
        println!(
            "lambda {:.2}: J {:.4e} -> {:.4e} in {} iterations",
            s.lambda, s.cost_start, s.cost_end, s.iterations
        );
    }
    for (i, (k, k_true)) in report.theta.k.iter().zip(&theta.k).enumerate() {
        println!("k{} = {k:8.4} N/m (true {k_true:.3})", i + 1);
    }
    println!("c  = {:.5} N s/m (true {:.3})", report.theta.c, theta.c);
    println!("mean coordinate error {:.2e} m", report.mean_coordinate_error);
    for s in report.sensitivities.iter().filter(|s| s.flagged) {
        println!("weakly observable: {}", s.parameter);
    }

    // The same data with rest lengths taken from the mean marker spacing.
    config.rest_lengths = None;
    let mean_spacing = identify(&data, &config)?;
    println!(
        "mean-spacing rest lengths: k1 = {:.3}, fit error {:.2e} m",
        mean_spacing.theta.k[0], mean_spacing.mean_coordinate_error
    );
    Ok(())
}
