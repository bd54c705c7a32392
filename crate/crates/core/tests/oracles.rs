//! Independent oracles for the closed-form quantities.

use nalgebra::{DMatrix, DVector};

use frmdp::bench::{self, generate_mdp, random_logits, GeneratorSpec};
use frmdp::diagnostics::{concentrability, flat_derivative_fd};
use frmdp::flow::{
    descent_threshold, fisher_rao_flow_rhs, integrate_mirror_flow, mirror_flow_rhs, policy_mirror_descent_step, FlowConfig,
};
use frmdp::npg::{fisher_operator, grad_theta_value, normal_equations, solve_ball_ridge, FeatureMap, FeaturePolicy};
use frmdp::ode::Integrator;
use frmdp::{evaluate_policy, solve_optimal, LogitPolicy, TabularMdp};

fn instance(ns: usize, na: usize, seed: u64, gamma: f64, tau: f64) -> TabularMdp {
    generate_mdp(&GeneratorSpec::new(ns, na, seed).with_gamma_tau(gamma, tau)).unwrap()
}

fn random_policy(mdp: &TabularMdp, seed: u64, scale: f64) -> LogitPolicy {
    LogitPolicy::new(random_logits(&mut bench::rng(seed), mdp.n_states(), mdp.n_actions(), scale), mdp.mu()).unwrap()
}

/// `sum_{n < terms} gamma^n P^n` applied from the left to `x`.
fn neumann(p: &DMatrix<f64>, gamma: f64, x: &DVector<f64>, terms: usize) -> DVector<f64> {
    let mut acc = x.clone();
    let mut term = x.clone();
    for _ in 1..terms {
        term = p * term * gamma;
        acc += &term;
    }
    acc
}

#[test]
fn occupancy_matches_truncated_neumann_series() {
    let mdp = instance(4, 3, 1, 0.9, 1.0);
    let policy = random_policy(&mdp, 2, 1.0);
    let p = mdp.policy_transition(policy.pi());
    let occ = mdp.occupancy(policy.pi());
    for s in 0..4 {
        let e = DVector::from_fn(4, |i, _| if i == s { 1.0 } else { 0.0 });
        let column = neumann(&p.transpose(), 0.9, &e, 10_000) * 0.1;
        assert!((occ.kernel.row(s).transpose() - column).amax() < 1e-9);
    }
}

#[test]
fn value_matches_truncated_rollout_sum() {
    let mdp = instance(5, 3, 3, 0.9, 1.0);
    let policy = random_policy(&mdp, 4, 2.0);
    let pi = policy.pi();
    let reward = DVector::from_fn(5, |s, _| {
        (0..3).map(|a| pi[(s, a)] * (mdp.cost()[(s, a)] + mdp.tau() * policy.log_density()[(s, a)])).sum()
    });
    let oracle = neumann(&mdp.policy_transition(pi), 0.9, &reward, 10_000);
    assert!((evaluate_policy(&mdp, &policy).v - oracle).amax() < 1e-8);
}

#[test]
fn value_respects_a_priori_bound() {
    for seed in 0..20 {
        let mdp = instance(4, 3, seed, 0.9, 2.0);
        let policy = LogitPolicy::new(random_logits(&mut bench::rng(seed), 4, 3, 3.0), mdp.mu()).unwrap();
        let bound = (mdp.cost_norm() + 2.0 * mdp.tau() * policy.logits().amax()) / (1.0 - mdp.gamma());
        assert!(evaluate_policy(&mdp, &policy).v.amax() <= bound);
    }
}

#[test]
fn single_state_optimum_is_softmin() {
    let cost = DMatrix::from_row_slice(1, 3, &[0.3, 1.0, -0.5]);
    let mu = DVector::from_vec(vec![0.2, 0.3, 0.5]);
    let tau = 0.7;
    let mdp = TabularMdp::new(vec![DMatrix::from_element(1, 1, 1.0); 3], cost.clone(), 0.0, tau, mu.clone(), DVector::from_element(1, 1.0)).unwrap();
    let sol = solve_optimal(&mdp, 1e-12, 10).unwrap();
    let weights: Vec<f64> = (0..3).map(|a| (-cost[(0, a)] / tau).exp() * mu[a]).collect();
    let total: f64 = weights.iter().sum();
    assert!((sol.v_star[0] + tau * total.ln()).abs() < 1e-14);
    for a in 0..3 {
        assert!((sol.pi_star.pi[(0, a)] - weights[a] / total).abs() < 1e-14);
    }
}

#[test]
fn optimum_dominates_random_policies() {
    let mdp = instance(5, 4, 8, 0.95, 0.5);
    let sol = solve_optimal(&mdp, 1e-12, 100_000).unwrap();
    for seed in 0..100 {
        let v = evaluate_policy(&mdp, &random_policy(&mdp, seed, 3.0)).v;
        assert!((&sol.v_star - v).max() <= 1e-10);
    }
}

#[test]
fn flat_derivative_matches_directional_difference() {
    let mdp = instance(4, 3, 9, 0.9, 1.0);
    let pi = random_policy(&mdp, 10, 1.0);
    let pi_prime = random_policy(&mdp, 11, 1.0);
    let errors: Vec<f64> = [1e-3, 1e-4, 1e-5]
        .iter()
        .map(|&eps| {
            let (fd, analytic) = flat_derivative_fd(&mdp, &pi, &pi_prime, eps);
            (fd - analytic).abs()
        })
        .collect();
    // One-sided differences: error shrinks linearly in eps.
    for w in errors.windows(2) {
        let ratio = w[0] / w[1];
        assert!((7.0..13.0).contains(&ratio), "ratio {ratio}");
    }
    let (fd3, _) = flat_derivative_fd(&mdp, &pi, &pi_prime, 1e-3);
    let (fd4, analytic) = flat_derivative_fd(&mdp, &pi, &pi_prime, 5e-4);
    assert!((2.0 * fd4 - fd3 - analytic).abs() < 1e-6, "Richardson estimate off");
}

#[test]
fn flat_derivative_is_zero_mean() {
    let mdp = instance(4, 3, 12, 0.9, 1.5);
    let policy = random_policy(&mdp, 13, 2.0);
    let g = evaluate_policy(&mdp, &policy).flat_derivative(mdp.tau());
    let mean = g.component_mul(policy.pi()).column_sum();
    assert!(mean.amax() < 1e-12);
}

#[test]
fn flow_map_matches_rhs_over_one_small_step() {
    let mdp = instance(4, 3, 14, 0.9, 1.0);
    let z0 = random_logits(&mut bench::rng(15), 4, 3, 1.0);
    let rhs = mirror_flow_rhs(&mdp, &z0).unwrap();
    let errors: Vec<f64> = [1e-3, 1e-4]
        .iter()
        .map(|&dt| {
            let cfg = FlowConfig::new(dt).with_dt(dt).with_integrator(Integrator::Rk4);
            let tr = integrate_mirror_flow(&mdp, &z0, &cfg).unwrap();
            ((&tr.z_snapshots[1] - &z0) / dt - &rhs).amax()
        })
        .collect();
    assert!(errors[1] < 1e-3);
    assert!((5.0..20.0).contains(&(errors[0] / errors[1])), "expected O(dt), got {errors:?}");
}

#[test]
fn mirror_descent_step_approaches_fisher_rao_velocity() {
    let mdp = instance(4, 3, 16, 0.9, 1.0);
    let policy = random_policy(&mdp, 17, 1.0);
    let velocity = fisher_rao_flow_rhs(&mdp, policy.distribution());
    let errors: Vec<f64> = [1e2, 1e3, 1e4]
        .iter()
        .map(|&lambda| {
            let next = policy_mirror_descent_step(&mdp, &policy, lambda).unwrap();
            ((next.pi() - policy.pi()) * lambda - &velocity).amax()
        })
        .collect();
    for w in errors.windows(2) {
        let ratio = w[0] / w[1];
        assert!((7.0..13.0).contains(&ratio), "expected O(1/lambda), got {errors:?}");
    }
}

#[test]
fn mirror_descent_threshold_is_found() {
    let mdp = instance(4, 3, 18, 0.9, 1.0);
    let policy = random_policy(&mdp, 19, 2.0);
    let candidates: Vec<f64> = (0..12).map(|k| 0.5 * 2f64.powi(k)).collect();
    let threshold = descent_threshold(&mdp, &policy, &candidates).unwrap().expect("large steps descend");
    let next = policy_mirror_descent_step(&mdp, &policy, threshold).unwrap();
    assert!(evaluate_policy(&mdp, &next).v_rho <= evaluate_policy(&mdp, &policy).v_rho);
}

#[test]
fn one_hot_fisher_matches_brute_force() {
    let mdp = instance(3, 3, 20, 0.8, 1.0);
    let features = FeatureMap::one_hot(3, 3);
    let theta = DVector::from_fn(9, |k, _| (k as f64 * 0.37).cos());
    let fp = FeaturePolicy::new(&features, theta, mdp.mu()).unwrap();
    let fisher = fisher_operator(&mdp, &fp);
    let e = evaluate_policy(&mdp, &fp.policy);
    let pi = fp.policy.pi();
    let mut oracle = DMatrix::zeros(9, 9);
    for s in 0..3 {
        for a in 0..3 {
            let g = |j: usize| -> f64 {
                let hit = |b: usize| if j == s * 3 + b { 1.0 } else { 0.0 };
                hit(a) - (0..3).map(|b| pi[(s, b)] * hit(b)).sum::<f64>()
            };
            for i in 0..9 {
                for j in 0..9 {
                    oracle[(i, j)] += e.d_rho[s] * pi[(s, a)] * g(i) * g(j);
                }
            }
        }
    }
    assert!((fisher - oracle).amax() < 1e-13);
}

/// Projected gradient descent on `w^T G w - 2 h^T w + lambda |w|^2` over the ball.
fn pgd(g: &DMatrix<f64>, h: &DVector<f64>, lambda: f64, radius: f64) -> DVector<f64> {
    let l = 2.0 * (g.symmetric_eigenvalues().max() + lambda);
    let mut w = DVector::zeros(h.len());
    for _ in 0..100_000 {
        w -= ((g * &w + &w * lambda - h) * 2.0) / (l + lambda);
        let n = w.norm();
        if n > radius {
            w *= radius / n;
        }
    }
    w
}

#[test]
fn ball_ridge_matches_projected_gradient() {
    let mdp = instance(4, 3, 21, 0.9, 1.0);
    let features = FeatureMap::random(4, 3, 5, 1.0, 22);
    let fp = FeaturePolicy::new(&features, DVector::from_element(5, 0.3), mdp.mu()).unwrap();
    let (g, h) = normal_equations(&mdp, &fp);
    for (lambda, radius) in [(0.1, 100.0), (0.1, 0.05), (1e-3, 0.5)] {
        let (w, nu) = solve_ball_ridge(&g, &h, lambda, radius).unwrap();
        let oracle = pgd(&g, &h, lambda, radius);
        assert!((&w - &oracle).amax() < 1e-6, "lambda {lambda} radius {radius}");
        assert!(w.norm() <= radius * (1.0 + 1e-12));
        if nu > 0.0 {
            assert!((w.norm() - radius).abs() < 1e-9);
        }
    }
}

#[test]
fn parameter_gradient_matches_finite_differences() {
    let mdp = instance(4, 3, 23, 0.9, 1.0);
    let features = FeatureMap::random(4, 3, 4, 1.0, 24);
    let theta = DVector::from_vec(vec![0.4, -0.2, 0.7, 0.1]);
    let fp = FeaturePolicy::new(&features, theta.clone(), mdp.mu()).unwrap();
    let grad = grad_theta_value(&mdp, &fp);
    let value = |t: DVector<f64>| evaluate_policy(&mdp, &FeaturePolicy::new(&features, t, mdp.mu()).unwrap().policy).v_rho;
    for h in [1e-4, 1e-5] {
        let fd = DVector::from_fn(4, |i, _| {
            let mut e = DVector::zeros(4);
            e[i] = h;
            (value(&theta + &e) - value(&theta - &e)) / (2.0 * h)
        });
        assert!((&fd - &grad).amax() / grad.amax() <= 1e-5);
    }
}

#[test]
fn gradient_satisfies_first_order_condition() {
    let mdp = instance(4, 3, 25, 0.9, 0.8);
    let features = FeatureMap::random(4, 3, 3, 1.0, 26);
    let theta = DVector::from_vec(vec![0.5, -0.3, 0.2]);
    let fp = FeaturePolicy::new(&features, theta.clone(), mdp.mu()).unwrap();
    let (f, h) = normal_equations(&mdp, &fp);
    let w = f.clone().lu().solve(&h).expect("full-rank Fisher operator");
    let predicted = &f * (w + &theta * mdp.tau()) / (1.0 - mdp.gamma());
    let grad = grad_theta_value(&mdp, &fp);
    assert!((predicted - &grad).amax() < 1e-10 * (1.0 + grad.amax()));
}

#[test]
fn concentrability_matches_enumeration_on_uniform_two_by_two() {
    let p0 = DMatrix::from_row_slice(2, 2, &[0.6, 0.4, 0.2, 0.8]);
    let p1 = DMatrix::from_row_slice(2, 2, &[0.1, 0.9, 0.5, 0.5]);
    let cost = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.5, 0.2]);
    let uniform = DVector::from_element(2, 0.5);
    let mdp = TabularMdp::new(vec![p0, p1], cost, 0.7, 1.0, uniform.clone(), uniform.clone()).unwrap();
    let sol = solve_optimal(&mdp, 1e-13, 100_000).unwrap();
    let pi_ref = DMatrix::from_element(2, 2, 0.5);
    let kappa = concentrability(&mdp, &sol.pi_star, &uniform, &pi_ref).unwrap();
    let p = mdp.policy_transition(&sol.pi_star.pi);
    let d = neumann(&p.transpose(), 0.7, &uniform, 2_000) * 0.3;
    let mut state_term: f64 = 0.0;
    let mut pair_term: f64 = 0.0;
    for s in 0..2 {
        state_term = state_term.max(d[s] / 0.5);
        for a in 0..2 {
            pair_term = pair_term.max(d[s] * sol.pi_star.pi[(s, a)] / 0.25);
        }
    }
    assert!((kappa - state_term - pair_term).abs() < 1e-12);
    assert!(kappa >= 1.0);
}
