//! Drive the JSON experiment harness from code and read back its summary.

use frmdp::experiment::{describe, example_config, run_experiment, ExperimentConfig};

fn main() -> frmdp::Result<()> {
    let cfg: ExperimentConfig = serde_json::from_value(example_config())?;
    println!("{}", serde_json::to_string_pretty(&example_config())?);
    let out = std::env::temp_dir().join("frmdp-example");
    let outcome = run_experiment(&cfg, std::path::Path::new("."), &out)?;
    println!("{}", describe(&outcome));
    for b in &outcome.summary.bounds {
        println!("  {}: {} points, min margin {:.3e}", b.name, b.n_points, b.min_margin);
    }
    for c in &outcome.summary.checks {
        println!("  {}: measured {:.3e}, threshold {:.3e}", c.name, c.measured, c.threshold);
    }
    Ok(())
}
