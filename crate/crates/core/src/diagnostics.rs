//! Bound evaluators, divergence identities and finite-difference checks.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{exponential_bound, FlowTrajectory};
use crate::mdp::TabularMdp;
use crate::policy::{centre, kl_per_state, log_partition, LogitPolicy, PolicyDistribution};
use crate::soft_dp::{evaluate_distribution, evaluate_policy};
use crate::tolerances::Tolerances;

/// Per-time comparison `lhs <= rhs`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    pub name: String,
    pub times: Vec<f64>,
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub holds: Vec<bool>,
    pub margin: Vec<f64>,
}

/// Compact JSON summary of a [`BoundReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub name: String,
    pub all_hold: bool,
    pub n_points: usize,
    pub n_violations: usize,
    pub min_margin: f64,
    pub first_violation_t: Option<f64>,
}

impl BoundReport {
    pub fn new(name: impl Into<String>, times: Vec<f64>, lhs: Vec<f64>, rhs: Vec<f64>) -> Self {
        let tol = Tolerances::global();
        let holds = lhs.iter().zip(&rhs).map(|(&l, &r)| tol.bound_holds(l, r)).collect();
        let margin = lhs.iter().zip(&rhs).map(|(&l, &r)| r - l).collect();
        BoundReport { name: name.into(), times, lhs, rhs, holds, margin }
    }

    pub fn all_hold(&self) -> bool {
        self.holds.iter().all(|&h| h)
    }

    pub fn violations(&self) -> usize {
        self.holds.iter().filter(|&&h| !h).count()
    }

    pub fn first_violation(&self) -> Option<f64> {
        self.holds.iter().position(|&h| !h).map(|i| self.times[i])
    }

    pub fn min_margin(&self) -> f64 {
        self.margin.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn summary(&self) -> BoundSummary {
        BoundSummary {
            name: self.name.clone(),
            all_hold: self.all_hold(),
            n_points: self.times.len(),
            n_violations: self.violations(),
            min_margin: self.min_margin(),
            first_violation_t: self.first_violation(),
        }
    }

    /// Columns `t, lhs, rhs, margin, holds`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "lhs", "rhs", "margin", "holds"])?;
        for i in 0..self.times.len() {
            w.write_record([
                fmt_f64(self.times[i]),
                fmt_f64(self.lhs[i]),
                fmt_f64(self.rhs[i]),
                fmt_f64(self.margin[i]),
                self.holds[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shortest round-trip representation; infinities as `inf` / `-inf`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:e}")
    }
}

/// `D_nu(f, g) = sum_s nu(s) [Phi(f) - Phi(g) - sum_a (f - g) pi(g)]`.
pub fn bregman_divergence(f: &DMatrix<f64>, g: &DMatrix<f64>, nu: &DVector<f64>, mdp: &TabularMdp) -> f64 {
    let mu = mdp.mu();
    let phi_f = log_partition(f, mu);
    let phi_g = log_partition(g, mu);
    let pi_g = LogitPolicy::new(g.clone(), mu).expect("finite logits");
    let diff = f - g;
    (0..f.nrows())
        .map(|s| nu[s] * (phi_f[s] - phi_g[s] - diff.row(s).dot(&pi_g.pi().row(s))))
        .sum()
}

/// `max_s d*(s) / rho_ref(s) + max_{s,a} d*(s) pi*(a|s) / (rho_ref(s) pi_ref(a|s))`,
/// where `d*` is the occupancy of `pi_star` started from `rho`.
pub fn concentrability(
    mdp: &TabularMdp,
    pi_star: &PolicyDistribution,
    rho_ref: &DVector<f64>,
    pi_ref: &DMatrix<f64>,
) -> Result<f64> {
    let d = mdp.occupancy(&pi_star.pi).d_rho;
    let mut state_term: f64 = 0.0;
    let mut pair_term: f64 = 0.0;
    for s in 0..mdp.n_states() {
        if d[s] > 0.0 {
            if rho_ref[s] <= 0.0 {
                return Err(Error::InfiniteConcentrability { location: format!("rho_ref[{s}]") });
            }
            state_term = state_term.max(d[s] / rho_ref[s]);
        }
        for a in 0..mdp.n_actions() {
            let num = d[s] * pi_star.pi[(s, a)];
            if num > 0.0 {
                let den = rho_ref[s] * pi_ref[(s, a)];
                if den <= 0.0 {
                    return Err(Error::InfiniteConcentrability { location: format!("pi_ref[{s}][{a}]") });
                }
                pair_term = pair_term.max(num / den);
            }
        }
    }
    Ok(state_term + pair_term)
}

/// `sum_s rho_ref(s) sum_a |f(s,a)| w(s,a)`.
pub fn weighted_l1(f: &DMatrix<f64>, rho_ref: &DVector<f64>, w: &DMatrix<f64>) -> f64 {
    (0..f.nrows())
        .map(|s| rho_ref[s] * f.row(s).iter().zip(w.row(s).iter()).map(|(x, y)| x.abs() * y).sum::<f64>())
        .sum()
}

/// [`weighted_l1`] of `f - F` minimised over state-only `F`: a per-state weighted median.
pub fn weighted_l1_best_shift(f: &DMatrix<f64>, rho_ref: &DVector<f64>, w: &DMatrix<f64>) -> f64 {
    let shift = DVector::from_fn(f.nrows(), |s, _| {
        let mut pairs: Vec<(f64, f64)> = f.row(s).iter().copied().zip(w.row(s).iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let half = 0.5 * pairs.iter().map(|p| p.1).sum::<f64>();
        let mut acc = 0.0;
        for &(x, wt) in &pairs {
            acc += wt;
            if acc >= half {
                return x;
            }
        }
        pairs.last().map_or(0.0, |p| p.0)
    });
    weighted_l1(&crate::policy::add_state_function(f, &(-shift)), rho_ref, w)
}

/// Value and policy convergence reports of an exact regularised flow.
///
/// `rhs_scale` multiplies both right-hand sides; `1.0` is the theorem, other
/// values are used as negative controls.
pub fn check_linear_convergence(traj: &FlowTrajectory, rhs_scale: f64) -> (BoundReport, BoundReport) {
    let value_rhs = traj
        .times
        .iter()
        .map(|&t| rhs_scale * exponential_bound(traj.tau, traj.gamma, t, traj.kl0))
        .collect();
    let policy_rhs = traj
        .times
        .iter()
        .map(|&t| rhs_scale * 2.0 * (-traj.tau * t).exp() * traj.kl0)
        .collect();
    (
        BoundReport::new("exponential_value_convergence", traj.times.clone(), traj.value_gaps.clone(), value_rhs),
        BoundReport::new("exponential_policy_convergence", traj.times.clone(), traj.tv_sq.clone(), policy_rhs),
    )
}

/// Stability estimate of the approximate flow, using the running minimum of the gap.
///
/// With `shifted` the error integrand has the best state-only shift removed.
pub fn check_stability_bound(traj: &FlowTrajectory, kappa: f64, shifted: bool) -> BoundReport {
    let integral = if shifted { &traj.error_integral_shifted } else { &traj.error_integral };
    let rhs = traj
        .times
        .iter()
        .zip(integral)
        .map(|(&t, &i)| exponential_bound(traj.tau, traj.gamma, t, traj.kl0 + 2.0 * kappa * i))
        .collect();
    let name = if shifted { "stability_shifted" } else { "stability" };
    BoundReport::new(name, traj.times.clone(), traj.running_min_gap(), rhs)
}

/// Polynomial-rate bound `gap <= KL_0 / ((1 - gamma) t)` of the unregularised flow.
pub fn check_unregularised_rate(traj: &FlowTrajectory) -> BoundReport {
    let rhs = traj
        .times
        .iter()
        .map(|&t| if t > 0.0 { traj.kl0 / ((1.0 - traj.gamma) * t) } else { f64::INFINITY })
        .collect();
    BoundReport::new("unregularised_rate", traj.times.clone(), traj.value_gaps.clone(), rhs)
}

/// Largest per-state increase of the value between consecutive snapshots.
pub fn max_value_increase(traj: &FlowTrajectory) -> f64 {
    traj.values
        .windows(2)
        .map(|w| (&w[1] - &w[0]).max())
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Outcome of the conjugate-duality check of the integrated log-partition.
#[derive(Debug, Clone, Serialize)]
pub struct LegendreReport {
    /// `(1 - gamma)^{-1} sum_s nu(s) Phi(Z)(s)`.
    pub conjugate: f64,
    /// `|conjugate - (<Z, pi(Z)>_nu - h_nu(pi(Z)))|`.
    pub equality_error: f64,
    /// `min over samples of conjugate - (<Z, pi'>_nu - h_nu(pi'))`.
    pub min_margin: f64,
}

/// `<Z, m>_nu = (1 - gamma)^{-1} sum_s nu(s) sum_a Z m`.
pub fn pairing(z: &DMatrix<f64>, m: &DMatrix<f64>, nu: &DVector<f64>, gamma: f64) -> f64 {
    (0..z.nrows()).map(|s| nu[s] * z.row(s).dot(&m.row(s))).sum::<f64>() / (1.0 - gamma)
}

/// `h_nu(pi) = (1 - gamma)^{-1} sum_s nu(s) KL(pi(.|s) | mu)`.
pub fn integrated_entropy(pi: &PolicyDistribution, nu: &DVector<f64>, gamma: f64) -> f64 {
    let kl = DVector::from_fn(pi.pi.nrows(), |s, _| {
        (0..pi.pi.ncols())
            .filter(|&a| pi.pi[(s, a)] > 0.0)
            .map(|a| pi.pi[(s, a)] * pi.log_density[(s, a)])
            .sum::<f64>()
    });
    kl.dot(nu) / (1.0 - gamma)
}

/// Conjugate `h*_nu(Z)` of the integrated negative entropy.
pub fn entropy_conjugate(z: &DMatrix<f64>, nu: &DVector<f64>, mdp: &TabularMdp) -> f64 {
    log_partition(z, mdp.mu()).dot(nu) / (1.0 - mdp.gamma())
}

pub fn legendre_check(z: &DMatrix<f64>, nu: &DVector<f64>, mdp: &TabularMdp, n_samples: usize, seed: u64) -> LegendreReport {
    let gamma = mdp.gamma();
    let conjugate = entropy_conjugate(z, nu, mdp);
    let objective = |p: &PolicyDistribution| pairing(z, &p.pi, nu, gamma) - integrated_entropy(p, nu, gamma);
    let maximiser = mdp.policy_from_logits(z).expect("finite logits");
    let equality_error = (conjugate - objective(&maximiser)).abs();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut min_margin = f64::INFINITY;
    for _ in 0..n_samples {
        let scale = rng.random_range(0.1..5.0);
        let zp = DMatrix::from_fn(z.nrows(), z.ncols(), |_, _| scale * rng.random_range(-1.0..1.0));
        let p = mdp.policy_from_logits(&zp).expect("finite logits");
        min_margin = min_margin.min(conjugate - objective(&p));
    }
    LegendreReport { conjugate, equality_error, min_margin }
}

/// Hessian of the conjugate applied to `f`: `(f - sum_a f pi) pi` with `pi = pi(Z)`.
pub fn hessian_apply(z: &DMatrix<f64>, f: &DMatrix<f64>, mdp: &TabularMdp) -> DMatrix<f64> {
    let pi = LogitPolicy::new(z.clone(), mdp.mu()).expect("finite logits");
    centre(f, pi.pi()).component_mul(pi.pi())
}

/// Relative error between `<f, H(Z) f>_nu` and a Richardson-extrapolated second
/// difference of `eps -> h*_nu(Z + eps f)`.
pub fn hessian_fd_error(z: &DMatrix<f64>, f: &DMatrix<f64>, nu: &DVector<f64>, mdp: &TabularMdp, eps: f64) -> f64 {
    let analytic = pairing(f, &hessian_apply(z, f, mdp), nu, mdp.gamma());
    let h = |e: f64| entropy_conjugate(&(z + f * e), nu, mdp);
    let h0 = h(0.0);
    let second = |e: f64| (h(e) - 2.0 * h0 + h(-e)) / (e * e);
    let fd = (4.0 * second(eps / 2.0) - second(eps)) / 3.0;
    (fd - analytic).abs() / analytic.abs().max(f64::MIN_POSITIVE)
}

/// Closed-form directional derivatives of `Z -> pi(Z)`, `Z -> ln dpi/dmu` and `Z -> V^{pi(Z)}`.
pub struct Directional {
    pub d_pi: DMatrix<f64>,
    pub d_log: DMatrix<f64>,
    pub d_value: DVector<f64>,
}

pub fn directional_derivatives(mdp: &TabularMdp, z: &DMatrix<f64>, g: &DMatrix<f64>) -> Directional {
    let policy = LogitPolicy::new(z.clone(), mdp.mu()).expect("finite logits");
    let d_log = centre(g, policy.pi());
    let d_pi = d_log.component_mul(policy.pi());
    let e = evaluate_policy(mdp, &policy);
    let weight = &e.q + &e.log_density * mdp.tau();
    let inner = DVector::from_fn(mdp.n_states(), |s, _| weight.row(s).dot(&d_pi.row(s)));
    let d_value = &e.occupancy * inner / (1.0 - mdp.gamma());
    Directional { d_pi, d_log, d_value }
}

/// Relative errors of central differences at one step size.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FdErrors {
    pub eps: f64,
    pub pi: f64,
    pub log_density: f64,
    pub value: f64,
}

impl FdErrors {
    pub fn max(&self) -> f64 {
        self.pi.max(self.log_density).max(self.value)
    }
}

/// Finite-difference comparison plus operator-norm ratios (each must be at most 1).
#[derive(Debug, Clone, Serialize)]
pub struct DerivativeReport {
    pub errors: Vec<FdErrors>,
    /// `sup_s sum_a |d pi g| / (2 |g|)`.
    pub pi_norm_ratio: f64,
    /// `|d ln g| / (2 |g|)`.
    pub log_norm_ratio: f64,
    /// `|dJ g| / (2 (|c| + 2 tau |Z|) / (1 - gamma)^2 |g|)`.
    pub value_norm_ratio: f64,
}

fn rel(fd: f64, exact: f64) -> f64 {
    if exact == 0.0 { fd } else { fd / exact }
}

pub fn derivative_checks(mdp: &TabularMdp, z: &DMatrix<f64>, g: &DMatrix<f64>, eps: &[f64]) -> DerivativeReport {
    let exact = directional_derivatives(mdp, z, g);
    let at = |e: f64| {
        let p = LogitPolicy::new(z + g * e, mdp.mu()).expect("finite logits");
        let v = evaluate_policy(mdp, &p).v;
        (p.pi().clone(), p.log_density().clone(), v)
    };
    let errors = eps
        .iter()
        .map(|&e| {
            let (pp, lp, vp) = at(e);
            let (pm, lm, vm) = at(-e);
            let fd_pi = (pp - pm) / (2.0 * e);
            let fd_log = (lp - lm) / (2.0 * e);
            let fd_v = (vp - vm) / (2.0 * e);
            FdErrors {
                eps: e,
                pi: rel((fd_pi - &exact.d_pi).amax(), exact.d_pi.amax()),
                log_density: rel((fd_log - &exact.d_log).amax(), exact.d_log.amax()),
                value: rel((fd_v - &exact.d_value).amax(), exact.d_value.amax()),
            }
        })
        .collect();
    let gn = g.amax();
    let tv = (0..z.nrows()).map(|s| exact.d_pi.row(s).abs().sum()).fold(0.0, f64::max);
    let j_bound = 2.0 * (mdp.cost_norm() + 2.0 * mdp.tau() * z.amax()) / (1.0 - mdp.gamma()).powi(2);
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else if num == 0.0 { 0.0 } else { f64::INFINITY };
    DerivativeReport {
        errors,
        pi_norm_ratio: ratio(tv, 2.0 * gn),
        log_norm_ratio: ratio(exact.d_log.amax(), 2.0 * gn),
        value_norm_ratio: ratio(exact.d_value.amax(), j_bound * gn),
    }
}

/// One-sided difference of `eps -> V^{(1-eps) pi + eps pi'}(rho)` and its closed form
/// `<G, pi' - pi>` under `d^pi_rho / (1 - gamma)`.
pub fn flat_derivative_fd(mdp: &TabularMdp, pi: &LogitPolicy, pi_prime: &LogitPolicy, eps: f64) -> (f64, f64) {
    let e = evaluate_policy(mdp, pi);
    let g = e.flat_derivative(mdp.tau());
    let analytic = pairing(&g, &(pi_prime.pi() - pi.pi()), &e.d_rho, mdp.gamma());
    let mix = pi.pi() * (1.0 - eps) + pi_prime.pi() * eps;
    let mixed = PolicyDistribution::from_probabilities(mix, mdp.mu(), false).expect("mixture of positive policies");
    let fd = (evaluate_distribution(mdp, &mixed).v_rho - e.v_rho) / eps;
    (fd, analytic)
}

/// `sum_s nu(s) KL(pi(g)(.|s) | pi(f)(.|s))`, the right side of the Bregman identity.
pub fn bregman_as_kl(f: &DMatrix<f64>, g: &DMatrix<f64>, nu: &DVector<f64>, mdp: &TabularMdp) -> f64 {
    let pf = mdp.policy_from_logits(f).expect("finite logits");
    let pg = mdp.policy_from_logits(g).expect("finite logits");
    kl_per_state(&pg, &pf).expect("softmax policies share support").dot(nu)
}
