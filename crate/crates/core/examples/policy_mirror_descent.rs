//! Discrete policy mirror descent steps and their continuous-time limit.

use frmdp::bench::{generate_mdp, random_logits, rng, GeneratorSpec};
use frmdp::flow::{descent_threshold, fisher_rao_flow_rhs, policy_mirror_descent_step};
use frmdp::{evaluate_policy, solve_optimal, LogitPolicy};

fn main() -> frmdp::Result<()> {
    let mdp = generate_mdp(&GeneratorSpec::new(4, 3, 16).with_gamma_tau(0.9, 1.0))?;
    let policy = LogitPolicy::new(random_logits(&mut rng(3), 4, 3, 2.0), mdp.mu())?;

    let velocity = fisher_rao_flow_rhs(&mdp, policy.distribution());
    for lambda in [1e2, 1e3, 1e4] {
        let next = policy_mirror_descent_step(&mdp, &policy, lambda)?;
        let err = ((next.pi() - policy.pi()) * lambda - &velocity).amax();
        println!("lambda = {lambda:e}: |lambda (pi+ - pi) - Fisher-Rao velocity| = {err:.3e}");
    }

    let candidates: Vec<f64> = (0..12).map(|k| 0.25 * 2f64.powi(k)).collect();
    println!("descent threshold on this instance: {:?}", descent_threshold(&mdp, &policy, &candidates)?);

    let v_star = solve_optimal(&mdp, 1e-12, 100_000)?.v_rho(mdp.rho());
    let mut current = policy;
    for k in 0..=10 {
        let v = evaluate_policy(&mdp, &current).v_rho;
        println!("iteration {k:>2}: V(rho) - V*(rho) = {:.3e}", v - v_star);
        current = policy_mirror_descent_step(&mdp, &current, 2.0)?;
    }
    Ok(())
}
