//! Finite-difference validation of the policy, log-density, value and Hessian derivatives.

use frmdp::bench::{generate_mdp, random_logits, rng, GeneratorSpec};
use frmdp::diagnostics::{derivative_checks, hessian_fd_error, legendre_check};

fn main() -> frmdp::Result<()> {
    let mdp = generate_mdp(&GeneratorSpec::new(4, 3, 5).with_gamma_tau(0.9, 1.0))?;
    let mut r = rng(4);
    let z = random_logits(&mut r, 4, 3, 2.0);
    let g = random_logits(&mut r, 4, 3, 1.0);
    let report = derivative_checks(&mdp, &z, &g, &[1e-2, 5e-3, 2.5e-3, 1e-4, 1e-5]);
    for e in &report.errors {
        println!("eps = {:<7} pi {:.2e}  ln dpi/dmu {:.2e}  value {:.2e}", e.eps, e.pi, e.log_density, e.value);
    }
    println!(
        "operator-norm ratios (must be <= 1): pi {:.3}, log {:.3}, value {:.3}",
        report.pi_norm_ratio, report.log_norm_ratio, report.value_norm_ratio
    );
    let nu = mdp.rho().clone();
    println!("Hessian finite-difference error: {:.2e}", hessian_fd_error(&z, &g, &nu, &mdp, 1e-3));
    let l = legendre_check(&z, &nu, &mdp, 100, 7);
    println!("conjugate {:.6}, equality error {:.1e}, min sampled margin {:.3e}", l.conjugate, l.equality_error, l.min_margin);
    Ok(())
}
