//! Occupancy measures, policy evaluation and the performance-difference identity.

use frmdp::bench::{generate_mdp, random_logits, rng, GeneratorSpec};
use frmdp::{evaluate_policy, performance_difference, LogitPolicy};

fn main() -> frmdp::Result<()> {
    let mdp = generate_mdp(&GeneratorSpec::new(4, 3, 7).with_gamma_tau(0.9, 1.0))?;
    let mut r = rng(1);
    let pi = LogitPolicy::new(random_logits(&mut r, 4, 3, 1.0), mdp.mu())?;
    let pi_prime = LogitPolicy::new(random_logits(&mut r, 4, 3, 1.0), mdp.mu())?;

    let occ = mdp.occupancy(pi.pi());
    println!("d^pi_rho = {:.4?}", occ.d_rho.as_slice());
    println!("row sums of the occupancy kernel: {:.3?}", occ.kernel.column_sum().as_slice());

    let e = evaluate_policy(&mdp, &pi);
    println!("V^pi = {:.4?}", e.v.as_slice());
    println!("on-policy residual |V - sum pi (Q + tau ln dpi/dmu)| = {:.2e}", e.on_policy_residual(mdp.tau()));

    let (lhs, rhs) = performance_difference(&mdp, &pi, &pi_prime);
    println!("performance difference: V^pi - V^pi' = {lhs:.10}, occupancy form = {rhs:.10}");
    Ok(())
}
