//! Unregularised flow on a bandit: closed-form trajectory and the role of the reference measure.

use frmdp::bench::{bandit, generate_unregularised_mdp, GeneratorSpec};
use frmdp::diagnostics::check_unregularised_rate;
use frmdp::experiment::bandit_value;
use frmdp::flow::{integrate_unregularised_flow, FlowConfig};
use nalgebra::DMatrix;

fn main() -> frmdp::Result<()> {
    let cfg = FlowConfig::new(5.0).with_dt(0.01).with_snapshot_every(50);
    for mu0 in [0.1, 0.5, 0.0] {
        let tr = integrate_unregularised_flow(&bandit(3, mu0)?, &DMatrix::zeros(1, 3), &cfg)?;
        let err = tr.times.iter().zip(&tr.values).map(|(&t, v)| (v[0] - bandit_value(mu0, t)).abs()).fold(0.0, f64::max);
        println!("mu(a0) = {mu0}: V at t = 5 is {:.6}, closed-form error {err:.1e}", tr.values.last().unwrap()[0]);
    }

    let mdp = generate_unregularised_mdp(&GeneratorSpec::new(5, 3, 1).with_gamma_tau(0.9, 0.0))?;
    let tr = integrate_unregularised_flow(&mdp, &DMatrix::zeros(5, 3), &FlowConfig::new(20.0).with_dt(0.01).with_snapshot_every(200))?;
    let rate = check_unregularised_rate(&tr);
    for k in 1..tr.len() {
        println!("t = {:>4.1}: gap {:.3e} <= {:.3e}", tr.times[k], rate.lhs[k], rate.rhs[k]);
    }
    println!("polynomial rate holds: {}", rate.all_hold());
    Ok(())
}
