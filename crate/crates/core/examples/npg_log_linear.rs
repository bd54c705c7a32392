//! Natural policy gradient flow for log-linear policies with tabular and low-rank features.

use frmdp::bench::{generate_mdp, GeneratorSpec};
use frmdp::flow::{integrate_mirror_flow, FlowConfig};
use frmdp::npg::{integrate_npg_flow, FeatureMap, NpgConfig, Schedule};
use nalgebra::DVector;

fn main() -> frmdp::Result<()> {
    let mdp = generate_mdp(&GeneratorSpec::new(4, 3, 7).with_gamma_tau(0.9, 1.0))?;

    let one_hot = FeatureMap::one_hot(4, 3);
    let cfg = NpgConfig::new(5.0, Schedule::Constant { radius: 1e6, lambda: 1e-8 }).with_dt(0.01).with_snapshot_every(50);
    let npg = integrate_npg_flow(&mdp, &one_hot, &DVector::zeros(12), &cfg)?;
    let exact = integrate_mirror_flow(&mdp, &one_hot.logits(&DVector::zeros(12)), &FlowConfig::new(5.0).with_dt(0.01).with_snapshot_every(50))?;
    let dev = npg.pi_snapshots.iter().zip(&exact.pi_snapshots).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
    println!("one-hot features: max deviation from the exact flow {dev:.2e}");

    let low_rank = FeatureMap::random(4, 3, 2, 1.0, 9);
    let cfg = NpgConfig::new(5.0, Schedule::default()).with_dt(0.01).with_snapshot_every(50);
    let tr = integrate_npg_flow(&mdp, &low_rank, &DVector::zeros(2), &cfg)?;
    println!("{:>5} {:>12} {:>12} {:>12} {:>10}", "t", "gap", "L1 error", "bound", "|theta|");
    for k in 0..tr.times.len() {
        println!(
            "{:>5.1} {:>12.4e} {:>12.4e} {:>12.4e} {:>10.4}",
            tr.times[k], tr.value_gaps[k], tr.approx_error_l1[k], tr.bound_values[k], tr.norm_theta[k]
        );
    }
    Ok(())
}
