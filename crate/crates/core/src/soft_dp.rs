//! Soft dynamic programming: the optimal solution and exact policy evaluation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
use crate::policy::{centre, kl_per_state, log_partition, LogitPolicy, PolicyDistribution};

/// Optimal value, Q-function and policy of a regularised model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimalSolution {
    pub v_star: DVector<f64>,
    pub q_star: DMatrix<f64>,
    pub pi_star: PolicyDistribution,
    /// `Z* = -(Q* - V*) / tau`.
    pub z_star: DMatrix<f64>,
    pub iterations: usize,
    /// Final sup-norm residual `|T V - V|`.
    pub residual: f64,
}

impl OptimalSolution {
    pub fn v_rho(&self, rho: &DVector<f64>) -> f64 {
        self.v_star.dot(rho)
    }
}

/// Values of a fixed policy and its occupancy.
#[derive(Debug, Clone)]
pub struct PolicyEvaluation {
    pub v: DVector<f64>,
    pub q: DMatrix<f64>,
    /// `Q - sum_a Q pi`.
    pub advantage: DMatrix<f64>,
    pub v_rho: f64,
    pub d_rho: DVector<f64>,
    /// Row `s` is `d(. | s)`.
    pub occupancy: DMatrix<f64>,
    pub pi: DMatrix<f64>,
    pub log_density: DMatrix<f64>,
}

/// `(T V)(s) = -tau ln sum_a exp(-(c + gamma P V)(s,a) / tau) mu(a)`.
pub fn soft_bellman_operator(mdp: &TabularMdp, v: &DVector<f64>) -> Result<DVector<f64>> {
    if v.len() != mdp.n_states() || v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("value vector must be finite with one entry per state".into()));
    }
    let tau = mdp.tau();
    if tau <= 0.0 {
        return Err(Error::InvalidInput("the soft Bellman operator needs tau > 0".into()));
    }
    let q = mdp.q_from_values(v);
    Ok(softmin(&q, mdp.mu(), tau))
}

/// `-tau ln sum_a exp(-q / tau) mu`.
fn softmin(q: &DMatrix<f64>, mu: &DVector<f64>, tau: f64) -> DVector<f64> {
    log_partition(&(q * (-1.0 / tau)), mu) * (-tau)
}

/// Value iteration from `V = 0`.
pub fn solve_optimal(mdp: &TabularMdp, tol: f64, max_iter: usize) -> Result<OptimalSolution> {
    solve_optimal_from(mdp, &DVector::zeros(mdp.n_states()), tol, max_iter)
}

/// Value iteration from `v0`, stopping once `|T V - V| <= tol (1 - gamma) / gamma`,
/// which guarantees `|V - V*| <= tol`.
pub fn solve_optimal_from(
    mdp: &TabularMdp,
    v0: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<OptimalSolution> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::InvalidInput("tolerance must be positive".into()));
    }
    let gamma = mdp.gamma();
    let threshold = if gamma == 0.0 { f64::INFINITY } else { tol * (1.0 - gamma) / gamma };
    let mut v = v0.clone();
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        let next = soft_bellman_operator(mdp, &v)?;
        residual = (&next - &v).amax();
        v = next;
        if residual <= threshold {
            return Ok(assemble(mdp, v, it));
        }
    }
    Err(Error::ConvergenceFailure { iterations: max_iter, residual })
}

fn assemble(mdp: &TabularMdp, v: DVector<f64>, iterations: usize) -> OptimalSolution {
    let tau = mdp.tau();
    let q = mdp.q_from_values(&v);
    let residual = (softmin(&q, mdp.mu(), tau) - &v).amax();
    let mut z = q.clone();
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            z[(s, a)] = -(q[(s, a)] - v[s]) / tau;
        }
    }
    let pi_star = LogitPolicy::new(z.clone(), mdp.mu())
        .expect("finite logits")
        .into_distribution();
    OptimalSolution { v_star: v, q_star: q, pi_star, z_star: z, iterations, residual }
}

/// Exact evaluation of a softmax policy.
pub fn evaluate_policy(mdp: &TabularMdp, policy: &LogitPolicy) -> PolicyEvaluation {
    evaluate_distribution(mdp, policy.distribution())
}

/// Exact evaluation of any policy absolutely continuous w.r.t. `mu`.
///
/// Solves `V = r_pi + gamma P_pi V` with `r_pi = sum_a (c + tau ln dpi/dmu) pi`.
pub fn evaluate_distribution(mdp: &TabularMdp, dist: &PolicyDistribution) -> PolicyEvaluation {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let tau = mdp.tau();
    let pi = &dist.pi;
    let r = DVector::from_fn(ns, |s, _| {
        (0..na)
            .filter(|&a| pi[(s, a)] > 0.0)
            .map(|a| pi[(s, a)] * (mdp.cost()[(s, a)] + tau * dist.log_density[(s, a)]))
            .sum::<f64>()
    });
    let lu = mdp.resolvent_lu(pi);
    let v = lu.solve(&r).expect("I - gamma P is invertible for gamma < 1");
    let occ = mdp.occupancy_from_lu(&lu);
    let q = mdp.q_from_values(&v);
    let advantage = centre(&q, pi);
    PolicyEvaluation {
        v_rho: v.dot(mdp.rho()),
        v,
        q,
        advantage,
        d_rho: occ.d_rho,
        occupancy: occ.kernel,
        pi: pi.clone(),
        log_density: dist.log_density.clone(),
    }
}

impl PolicyEvaluation {
    /// `G = Q + tau ln dpi/dmu - V`.
    pub fn flat_derivative(&self, tau: f64) -> DMatrix<f64> {
        let mut g = &self.q + &self.log_density * tau;
        for (s, mut row) in g.row_iter_mut().enumerate() {
            row.add_scalar_mut(-self.v[s]);
        }
        g
    }

    /// Sup norm of `V - sum_a (Q + tau ln dpi/dmu) pi`.
    pub fn on_policy_residual(&self, tau: f64) -> f64 {
        let g = self.flat_derivative(tau);
        (0..g.nrows())
            .map(|s| g.row(s).dot(&self.pi.row(s)).abs())
            .fold(0.0, f64::max)
    }
}

/// Flat derivative `Q^pi + tau ln dpi/dmu - V^pi`.
pub fn flat_derivative(mdp: &TabularMdp, policy: &LogitPolicy) -> DMatrix<f64> {
    evaluate_policy(mdp, policy).flat_derivative(mdp.tau())
}

/// Both sides of the performance difference identity for `V^pi(rho) - V^pi'(rho)`.
///
/// The left side comes from two linear solves; the right side is the
/// occupancy-weighted first-order term plus the KL term under `d^pi_rho`.
pub fn performance_difference(
    mdp: &TabularMdp,
    pi: &LogitPolicy,
    pi_prime: &LogitPolicy,
) -> (f64, f64) {
    let e = evaluate_policy(mdp, pi);
    let e_prime = evaluate_policy(mdp, pi_prime);
    let lhs = e.v_rho - e_prime.v_rho;
    let tau = mdp.tau();
    let kl = kl_per_state(pi.distribution(), pi_prime.distribution())
        .expect("softmax policies share support");
    let integrand = DVector::from_fn(mdp.n_states(), |s, _| {
        let first: f64 = (0..mdp.n_actions())
            .map(|a| {
                (e_prime.q[(s, a)] + tau * pi_prime.log_density()[(s, a)])
                    * (pi.pi()[(s, a)] - pi_prime.pi()[(s, a)])
            })
            .sum();
        first + tau * kl[s]
    });
    let rhs = integrand.dot(&e.d_rho) / (1.0 - mdp.gamma());
    (lhs, rhs)
}

/// Optimum of an unregularised model by exact policy iteration.
///
/// Ties are broken towards actions charged by `mu`, then the lowest index.
#[derive(Debug, Clone)]
pub struct HardOptimum {
    pub v_star: DVector<f64>,
    pub q_star: DMatrix<f64>,
    /// Deterministic optimal policy.
    pub pi_star: PolicyDistribution,
    pub actions: Vec<usize>,
    pub iterations: usize,
}

pub fn solve_unregularised_optimal(mdp: &TabularMdp, max_iter: usize) -> Result<HardOptimum> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let choose = |q: &DMatrix<f64>, s: usize, current: Option<usize>| -> usize {
        let best = (0..na).map(|a| q[(s, a)]).fold(f64::INFINITY, f64::min);
        let slack = 1e-12 * (1.0 + best.abs());
        if let Some(c) = current {
            if q[(s, c)] <= best + slack {
                return c;
            }
        }
        let ties: Vec<usize> = (0..na).filter(|&a| q[(s, a)] <= best + slack).collect();
        ties.iter().copied().find(|&a| mdp.mu()[a] > 0.0).unwrap_or(ties[0])
    };
    let q0 = mdp.cost().clone();
    let mut actions: Vec<usize> = (0..ns).map(|s| choose(&q0, s, None)).collect();
    for it in 1..=max_iter {
        let pi = DMatrix::from_fn(ns, na, |s, a| if actions[s] == a { 1.0 } else { 0.0 });
        let dist = PolicyDistribution { log_density: DMatrix::zeros(ns, na), pi };
        let eval = evaluate_unweighted(mdp, &dist);
        let next: Vec<usize> = (0..ns).map(|s| choose(&eval.q, s, Some(actions[s]))).collect();
        if next == actions {
            // ln(pi / mu) with the conventions ln(0/x) = -inf and ln(1/0) = +inf.
            let log_density = DMatrix::from_fn(ns, na, |s, a| {
                if actions[s] != a {
                    f64::NEG_INFINITY
                } else {
                    -mdp.mu()[a].ln()
                }
            });
            let pi_star = PolicyDistribution { pi: dist.pi, log_density };
            return Ok(HardOptimum { v_star: eval.v, q_star: eval.q, pi_star, actions, iterations: it });
        }
        actions = next;
    }
    Err(Error::ConvergenceFailure { iterations: max_iter, residual: f64::NAN })
}

/// Policy evaluation ignoring the entropy term (used with `tau = 0`).
fn evaluate_unweighted(mdp: &TabularMdp, dist: &PolicyDistribution) -> PolicyEvaluation {
    let ns = mdp.n_states();
    let r = DVector::from_fn(ns, |s, _| dist.pi.row(s).dot(&mdp.cost().row(s)));
    let lu = mdp.resolvent_lu(&dist.pi);
    let v = lu.solve(&r).expect("invertible");
    let occ = mdp.occupancy_from_lu(&lu);
    let q = mdp.q_from_values(&v);
    PolicyEvaluation {
        v_rho: v.dot(mdp.rho()),
        advantage: centre(&q, &dist.pi),
        v,
        q,
        d_rho: occ.d_rho,
        occupancy: occ.kernel,
        pi: dist.pi.clone(),
        log_density: dist.log_density.clone(),
    }
}
