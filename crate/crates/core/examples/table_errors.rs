//! Simulated output errors for the exponential and eight-shaped flights next
//! to the errors measured on hardware.

use flexcable::scenario::cmd_report;
use flexcable::scenario::cmd_simulate_many;
use std::path::{Path, PathBuf};

fn main() -> flexcable::Result<()> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    let names = [
        "test_a_narrow_slow",
        "test_a_narrow_fast",
        "test_a_wide_slow",
        "test_a_wide_fast",
        "test_b_narrow",
        "test_b_wide",
    ];
    let scenarios: Vec<PathBuf> = names
        .iter()
        .map(|n| root.join("scenarios").join(format!("{n}.json")))
        .collect();
    let out = std::env::temp_dir().join("flexcable_table_errors");
    cmd_simulate_many(&scenarios, None, &out, rayon::current_num_threads())?;
    let logs: Vec<PathBuf> = names.iter().map(|n| out.join(format!("{n}.csv"))).collect();
    print!("{}", cmd_report(&logs, Some(&root.join("table2.json")), None)?);
    println!("logs in {}", out.display());
    Ok(())
}
