//! Solve a random entropy-regularised MDP by soft value iteration and inspect the optimal policy.

use frmdp::bench::{generate_mdp, GeneratorSpec};
use frmdp::soft_dp::evaluate_distribution;
use frmdp::{soft_bellman_operator, solve_optimal};

fn main() -> frmdp::Result<()> {
    let mdp = generate_mdp(&GeneratorSpec::new(6, 3, 42).with_gamma_tau(0.95, 0.5))?;
    let sol = solve_optimal(&mdp, 1e-12, 100_000)?;
    let residual = (soft_bellman_operator(&mdp, &sol.v_star)? - &sol.v_star).amax();
    println!("converged in {} iterations, Bellman residual {residual:.2e}", sol.iterations);
    println!("V*(rho) = {:.6}", sol.v_rho(mdp.rho()));
    for s in 0..mdp.n_states() {
        let row: Vec<String> = sol.pi_star.pi.row(s).iter().map(|p| format!("{p:.3}")).collect();
        println!("  pi*(.|{s}) = [{}]  V*({s}) = {:.4}", row.join(", "), sol.v_star[s]);
    }
    // pi* is the softmax of -(Q* - V*) / tau, so evaluating it reproduces V*.
    let check = evaluate_distribution(&mdp, &sol.pi_star);
    println!("|V^pi* - V*| = {:.2e}", (&check.v - &sol.v_star).amax());
    Ok(())
}
