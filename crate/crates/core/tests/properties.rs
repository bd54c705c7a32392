//! Randomised invariants.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use frmdp::bench::{generate_mdp, GeneratorSpec};
use frmdp::diagnostics::{bregman_as_kl, bregman_divergence, hessian_apply};
use frmdp::flow::{mirror_flow_rhs, PerturbationKind, PerturbationSpec, TimeProfile};
use frmdp::npg::{fisher_operator, induced_policy_velocity, npg_velocity, solve_ball_ridge, FeatureMap, FeaturePolicy, Schedule};
use frmdp::policy::{add_state_function, kl_per_state, tv_per_state};
use frmdp::{evaluate_policy, performance_difference, soft_bellman_operator, LogitPolicy, TabularMdp};

fn mdp_strategy() -> impl Strategy<Value = TabularMdp> {
    (1usize..6, 1usize..5, any::<u64>(), prop::sample::select(vec![0.0, 0.5, 0.9, 0.99]), prop::sample::select(vec![0.1, 1.0, 10.0]))
        .prop_map(|(ns, na, seed, gamma, tau)| generate_mdp(&GeneratorSpec::new(ns, na, seed).with_gamma_tau(gamma, tau)).unwrap())
}

fn logits(ns: usize, na: usize, scale: f64) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-scale..scale, ns * na).prop_map(move |v| DMatrix::from_row_slice(ns, na, &v))
}

fn mdp_and_logits(n: usize) -> impl Strategy<Value = (TabularMdp, Vec<DMatrix<f64>>)> {
    mdp_strategy().prop_flat_map(move |m| {
        let (ns, na) = (m.n_states(), m.n_actions());
        (Just(m), prop::collection::vec(logits(ns, na, 3.0), n))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions((mdp, zs) in mdp_and_logits(1)) {
        let p = LogitPolicy::new(zs[0].clone(), mdp.mu()).unwrap();
        for s in 0..mdp.n_states() {
            prop_assert!((p.pi().row(s).sum() - 1.0).abs() < 1e-12);
        }
        prop_assert!(p.pi().min() > 0.0);
    }

    #[test]
    fn softmax_ignores_state_shifts((mdp, zs) in mdp_and_logits(1), shift in prop::collection::vec(-50.0..50.0f64, 5)) {
        let b = DVector::from_fn(mdp.n_states(), |s, _| shift[s]);
        let p = LogitPolicy::new(zs[0].clone(), mdp.mu()).unwrap();
        let q = LogitPolicy::new(add_state_function(&zs[0], &b), mdp.mu()).unwrap();
        prop_assert!((p.pi() - q.pi()).amax() < 1e-12);
    }

    #[test]
    fn log_density_is_at_most_twice_logit_norm((mdp, zs) in mdp_and_logits(1)) {
        let p = LogitPolicy::new(zs[0].clone(), mdp.mu()).unwrap();
        prop_assert!(p.log_density().amax() <= 2.0 * zs[0].amax() + 1e-12);
    }

    #[test]
    fn pinsker_holds((mdp, zs) in mdp_and_logits(2)) {
        let p = LogitPolicy::new(zs[0].clone(), mdp.mu()).unwrap();
        let q = LogitPolicy::new(zs[1].clone(), mdp.mu()).unwrap();
        let kl = kl_per_state(p.distribution(), q.distribution()).unwrap();
        let tv = tv_per_state(p.pi(), q.pi());
        for s in 0..mdp.n_states() {
            prop_assert!(kl[s] + 1e-12 >= 0.5 * tv[s] * tv[s]);
        }
    }

    #[test]
    fn occupancy_solves_resolvent_identity((mdp, zs) in mdp_and_logits(1)) {
        let p = LogitPolicy::new(zs[0].clone(), mdp.mu()).unwrap();
        let occ = mdp.occupancy(p.pi());
        let pt = mdp.policy_transition(p.pi());
        let n = mdp.n_states();
        let lhs = &occ.kernel - &occ.kernel * &pt * mdp.gamma();
        prop_assert!((lhs - DMatrix::identity(n, n) * (1.0 - mdp.gamma())).amax() < 1e-10);
        prop_assert!((occ.d_rho.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn soft_bellman_is_a_contraction(mdp in mdp_strategy(), seed in any::<u64>()) {
        let n = mdp.n_states();
        let u = DVector::from_fn(n, |s, _| ((seed as f64 + s as f64) * 1.3).sin() * 5.0);
        let v = DVector::from_fn(n, |s, _| ((seed as f64 * 0.7 + s as f64) * 2.1).cos() * 5.0);
        let tu = soft_bellman_operator(&mdp, &u).unwrap();
        let tv = soft_bellman_operator(&mdp, &v).unwrap();
        prop_assert!((tu - tv).amax() <= mdp.gamma() * (u - v).amax() + 1e-12);
    }

    #[test]
    fn bregman_equals_weighted_kl((mdp, zs) in mdp_and_logits(2)) {
        let g = LogitPolicy::new(zs[1].clone(), mdp.mu()).unwrap();
        let d = mdp.occupancy(g.pi()).d_rho;
        let lhs = bregman_divergence(&zs[0], &zs[1], &d, &mdp);
        prop_assert!(lhs >= -1e-12);
        prop_assert!((lhs - bregman_as_kl(&zs[0], &zs[1], &d, &mdp)).abs() < 1e-10);
        prop_assert!(bregman_divergence(&zs[1], &zs[1], &d, &mdp).abs() < 1e-14);
    }

    #[test]
    fn hessian_rows_sum_to_zero_and_scale_by_state((mdp, zs) in mdp_and_logits(2), v in prop::collection::vec(-3.0..3.0f64, 5)) {
        let h = hessian_apply(&zs[0], &zs[1], &mdp);
        prop_assert!(h.column_sum().amax() < 1e-12);
        let vs = DVector::from_fn(mdp.n_states(), |s, _| v[s]);
        let scaled_f = DMatrix::from_fn(mdp.n_states(), mdp.n_actions(), |s, a| vs[s] * zs[1][(s, a)]);
        let scaled_h = DMatrix::from_fn(mdp.n_states(), mdp.n_actions(), |s, a| vs[s] * h[(s, a)]);
        prop_assert!((hessian_apply(&zs[0], &scaled_f, &mdp) - scaled_h).amax() < 1e-12);
    }

    #[test]
    fn performance_difference_identity_holds((mdp, zs) in mdp_and_logits(2)) {
        let p = LogitPolicy::new(zs[0].clone(), mdp.mu()).unwrap();
        let q = LogitPolicy::new(zs[1].clone(), mdp.mu()).unwrap();
        let (lhs, rhs) = performance_difference(&mdp, &p, &q);
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn mirror_rhs_is_zero_mean_under_policy((mdp, zs) in mdp_and_logits(1)) {
        let p = LogitPolicy::new(zs[0].clone(), mdp.mu()).unwrap();
        let rhs = mirror_flow_rhs(&mdp, &zs[0]).unwrap();
        // Z' = -(Q + tau Z - V); its pi-mean is -tau * Phi(Z) per state.
        let mean = rhs.component_mul(p.pi()).column_sum();
        prop_assert!((mean + p.log_partition() * mdp.tau()).amax() < 1e-9 * (1.0 + mdp.cost_norm() / (1.0 - mdp.gamma())));
    }

    #[test]
    fn ball_ridge_stays_in_ball_and_beats_neighbours(
        entries in prop::collection::vec(-2.0..2.0f64, 9),
        h in prop::collection::vec(-5.0..5.0f64, 3),
        lambda in 1e-6..1.0f64,
        radius in 1e-3..10.0f64,
    ) {
        let a = DMatrix::from_row_slice(3, 3, &entries);
        let g = a.transpose() * &a;
        let h = DVector::from_vec(h);
        let (w, _) = solve_ball_ridge(&g, &h, lambda, radius).unwrap();
        prop_assert!(w.norm() <= radius * (1.0 + 1e-10));
        let loss = |x: &DVector<f64>| (x.transpose() * &g * x)[0] - 2.0 * h.dot(x) + lambda * x.norm_squared();
        for k in 0..3 {
            for sign in [-1.0, 1.0] {
                let mut x = w.clone();
                x[k] += sign * 1e-3 * radius;
                if x.norm() > radius {
                    x *= radius / x.norm();
                }
                prop_assert!(loss(&x) >= loss(&w) - 1e-9 * (1.0 + loss(&w).abs()));
            }
        }
    }

    #[test]
    fn ball_ridge_is_stable_in_its_data(
        entries in prop::collection::vec(-2.0..2.0f64, 9),
        h in prop::collection::vec(-5.0..5.0f64, 3),
        dh in prop::collection::vec(-1e-6..1e-6f64, 3),
        radius in 1e-2..10.0f64,
    ) {
        let a = DMatrix::from_row_slice(3, 3, &entries);
        let g = a.transpose() * &a;
        let lambda = 0.1;
        let h = DVector::from_vec(h);
        let dh = DVector::from_vec(dh);
        let (w1, _) = solve_ball_ridge(&g, &h, lambda, radius).unwrap();
        let (w2, _) = solve_ball_ridge(&g, &(&h + &dh), lambda, radius).unwrap();
        // The solution map is (1 / lambda)-Lipschitz in h.
        prop_assert!((w1 - w2).norm() <= dh.norm() / lambda + 1e-9);
    }

    #[test]
    fn fisher_operator_is_positive_semidefinite((mdp, zs) in mdp_and_logits(1), seed in any::<u64>()) {
        let features = FeatureMap::random(mdp.n_states(), mdp.n_actions(), 3, 1.0, seed);
        let theta = DVector::from_fn(3, |i, _| zs[0][(0, 0)] + i as f64);
        let fp = FeaturePolicy::new(&features, theta, mdp.mu()).unwrap();
        let f = fisher_operator(&mdp, &fp);
        prop_assert!((&f - f.transpose()).amax() < 1e-14);
        prop_assert!(f.symmetric_eigenvalues().min() > -1e-12);
    }

    #[test]
    fn npg_velocity_is_approximate_flow_with_fitted_q((mdp, zs) in mdp_and_logits(1), seed in any::<u64>()) {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let features = FeatureMap::random(ns, na, 3, 1.0, seed);
        let theta = DVector::from_fn(3, |i, _| zs[0][(0, 0)] * 0.3 + i as f64 * 0.1);
        let fp = FeaturePolicy::new(&features, theta.clone(), mdp.mu()).unwrap();
        let schedule = Schedule::Constant { radius: 1e3, lambda: 1e-3 };
        let (theta_dot, w) = npg_velocity(&mdp, &features, &theta, &schedule, 0.0).unwrap();
        let z = features.logits(&theta);
        let q_hat = features.contract(&w);
        let pi = fp.policy.pi();
        let drive = &q_hat + &z * mdp.tau();
        let mean = DVector::from_fn(ns, |s, _| drive.row(s).dot(&pi.row(s)));
        let approx_rhs = DMatrix::from_fn(ns, na, |s, a| -(drive[(s, a)] - mean[s]));
        let induced = induced_policy_velocity(&features, &fp, &theta_dot);
        let expected = approx_rhs.component_mul(pi);
        prop_assert!((induced - expected).amax() < 1e-10 * (1.0 + w.amax() + theta.amax()));
    }

    #[test]
    fn state_only_perturbation_is_state_only(mdp in mdp_strategy(), seed in any::<u64>(), t in 0.0..10.0f64) {
        let spec = PerturbationSpec { amplitude: 1.0, seed, profile: TimeProfile::Rotate { frequency: 2.0 }, kind: PerturbationKind::StateOnly };
        let e = evaluate_policy(&mdp, &LogitPolicy::uniform_logits(mdp.n_states(), mdp.mu()));
        let diff = spec.supplier(mdp.n_states(), mdp.n_actions())(t, &e) - &e.q;
        for s in 0..mdp.n_states() {
            let row = diff.row(s);
            prop_assert!(row.max() - row.min() < 1e-14);
        }
    }
}
