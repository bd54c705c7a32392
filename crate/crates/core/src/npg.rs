//! Log-linear policies and the approximate natural policy gradient flow.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{concentrability, weighted_l1};
use crate::error::{Error, Result};
use crate::flow::{exponential_bound, reference_optimum, ReferenceMeasures};
use crate::mdp::TabularMdp;
use crate::ode::{Integrator, TimeGrid};
use crate::policy::{kl_per_state, LogitPolicy};
use crate::soft_dp::{evaluate_policy, OptimalSolution, PolicyEvaluation};
use crate::tolerances::Tolerances;

/// Features `g(s, a) in R^N`, stored row-wise at index `s * n_actions + a`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    n_states: usize,
    n_actions: usize,
    rows: DMatrix<f64>,
    g_max: f64,
}

impl FeatureMap {
    pub fn new(n_states: usize, n_actions: usize, rows: DMatrix<f64>) -> Result<Self> {
        if rows.nrows() != n_states * n_actions || rows.ncols() == 0 {
            return Err(Error::InvalidInput(format!(
                "feature matrix must have {} rows and at least one column",
                n_states * n_actions
            )));
        }
        if rows.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("features must be finite".into()));
        }
        let g_max = (0..rows.nrows()).map(|i| rows.row(i).norm()).fold(0.0, f64::max);
        Ok(FeatureMap { n_states, n_actions, rows, g_max })
    }

    /// Tabular features, `N = |S| |A|`.
    pub fn one_hot(n_states: usize, n_actions: usize) -> Self {
        let n = n_states * n_actions;
        Self::new(n_states, n_actions, DMatrix::identity(n, n)).expect("valid")
    }

    /// The same vector at every `(s, a)`.
    pub fn constant(n_states: usize, n_actions: usize, v: &[f64]) -> Result<Self> {
        let rows = DMatrix::from_fn(n_states * n_actions, v.len(), |_, j| v[j]);
        Self::new(n_states, n_actions, rows)
    }

    /// I.i.d. standard normal entries scaled by `scale`.
    pub fn random(n_states: usize, n_actions: usize, dim: usize, scale: f64, seed: u64) -> Self {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let normal = rand_distr::StandardNormal;
        let rows = DMatrix::from_fn(n_states * n_actions, dim, |_, _| {
            scale * rng.sample::<f64, _>(normal)
        });
        Self::new(n_states, n_actions, rows).expect("finite")
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }
    pub fn g_max(&self) -> f64 {
        self.g_max
    }
    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }
    pub fn n_states(&self) -> usize {
        self.n_states
    }
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// `Z(s, a) = <theta, g(s, a)>`.
    pub fn logits(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let flat = &self.rows * theta;
        DMatrix::from_fn(self.n_states, self.n_actions, |s, a| flat[s * self.n_actions + a])
    }

    /// `<w, g(s, a)>` as an `S x A` matrix.
    pub fn contract(&self, w: &DVector<f64>) -> DMatrix<f64> {
        self.logits(w)
    }

    /// `g(s, a) - sum_a' g(s, a') pi(a'|s)`, row-wise as in [`FeatureMap::rows`].
    pub fn centred(&self, pi: &DMatrix<f64>) -> DMatrix<f64> {
        let na = self.n_actions;
        let mut out = self.rows.clone();
        for s in 0..self.n_states {
            let mut mean = nalgebra::RowDVector::zeros(self.dim());
            for a in 0..na {
                mean += self.rows.row(s * na + a) * pi[(s, a)];
            }
            for a in 0..na {
                let mut row = out.row_mut(s * na + a);
                row -= &mean;
            }
        }
        out
    }
}

/// Log-linear policy `pi_theta = pi(<theta, g>)` with its centred features.
#[derive(Debug, Clone)]
pub struct FeaturePolicy {
    pub theta: DVector<f64>,
    pub policy: LogitPolicy,
    pub centred: DMatrix<f64>,
}

impl FeaturePolicy {
    pub fn new(features: &FeatureMap, theta: DVector<f64>, mu: &DVector<f64>) -> Result<Self> {
        if theta.len() != features.dim() {
            return Err(Error::InvalidInput("parameter and feature dimensions differ".into()));
        }
        let policy = LogitPolicy::new(features.logits(&theta), mu)?;
        let centred = features.centred(policy.pi());
        Ok(FeaturePolicy { theta, policy, centred })
    }
}

/// Weighted second moment `sum_{s,a} weight(s,a) x(s,a) y(s,a)^T` of row-stacked features.
fn weighted_moment(x: &DMatrix<f64>, weight: &DMatrix<f64>, n_actions: usize) -> DMatrix<f64> {
    let mut scaled = x.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= weight[(i / n_actions, i % n_actions)];
    }
    x.tr_mul(&scaled)
}

fn occupancy_policy_weight(e: &PolicyEvaluation) -> DMatrix<f64> {
    DMatrix::from_fn(e.pi.nrows(), e.pi.ncols(), |s, a| e.d_rho[s] * e.pi[(s, a)])
}

/// `F(theta) = sum_s d(s) sum_a pi g_pi g_pi^T`.
pub fn fisher_operator(mdp: &TabularMdp, fp: &FeaturePolicy) -> DMatrix<f64> {
    let e = evaluate_policy(mdp, &fp.policy);
    fisher_from_eval(&e, fp, mdp.n_actions())
}

fn fisher_from_eval(e: &PolicyEvaluation, fp: &FeaturePolicy, n_actions: usize) -> DMatrix<f64> {
    let f = weighted_moment(&fp.centred, &occupancy_policy_weight(e), n_actions);
    (&f + f.transpose()) * 0.5
}

/// `h = sum_s d(s) sum_a pi A g_pi`.
fn advantage_moment(e: &PolicyEvaluation, fp: &FeaturePolicy, n_actions: usize) -> DVector<f64> {
    let mut h = DVector::zeros(fp.centred.ncols());
    for i in 0..fp.centred.nrows() {
        let (s, a) = (i / n_actions, i % n_actions);
        let w = e.d_rho[s] * e.pi[(s, a)] * e.advantage[(s, a)];
        if w != 0.0 {
            h += fp.centred.row(i).transpose() * w;
        }
    }
    h
}

/// Minimiser of `w^T G w - 2 h^T w + lambda |w|^2` over `|w| <= radius`.
///
/// Returns the minimiser and the KKT multiplier of the ball constraint.
pub fn solve_ball_ridge(g: &DMatrix<f64>, h: &DVector<f64>, lambda: f64, radius: f64) -> Result<(DVector<f64>, f64)> {
    if lambda.is_nan() || lambda <= 0.0 || radius.is_nan() || radius <= 0.0 {
        return Err(Error::InvalidInput("ridge weight and radius must be positive".into()));
    }
    let eig = SymmetricEigen::new(g.clone());
    let b = eig.eigenvectors.tr_mul(h);
    let sigma = eig.eigenvalues.map(|x| x.max(0.0));
    let solve = |nu: f64| {
        let coeff = DVector::from_fn(b.len(), |i, _| b[i] / (sigma[i] + lambda + nu));
        &eig.eigenvectors * coeff
    };
    let w0 = solve(0.0);
    if w0.norm() <= radius {
        return Ok((w0, 0.0));
    }
    // |w(nu)| is strictly decreasing and |w(nu_hi)| < |h| / nu_hi = radius.
    let (mut lo, mut hi) = (0.0, h.norm() / radius);
    if solve(hi).norm() > radius {
        return Err(Error::Internal("could not bracket the ball-constraint multiplier".into()));
    }
    let tol = Tolerances::global().radius;
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let n = solve(mid).norm();
        if n > radius {
            lo = mid;
        } else {
            hi = mid;
            if radius - n <= tol * radius.max(1.0) {
                break;
            }
        }
    }
    Ok((solve(hi), hi))
}

/// Compatible-function-approximation weights from the regularised, clipped loss.
pub fn solve_regularized_loss(mdp: &TabularMdp, fp: &FeaturePolicy, radius: f64, lambda: f64) -> Result<DVector<f64>> {
    let e = evaluate_policy(mdp, &fp.policy);
    weights_from_eval(&e, fp, mdp.n_actions(), radius, lambda)
}

fn weights_from_eval(e: &PolicyEvaluation, fp: &FeaturePolicy, n_actions: usize, radius: f64, lambda: f64) -> Result<DVector<f64>> {
    let f = fisher_from_eval(e, fp, n_actions);
    let h = advantage_moment(e, fp, n_actions);
    Ok(solve_ball_ridge(&f, &h, lambda, radius)?.0)
}

/// Value of the regularised loss at `w`, for oracle comparisons.
pub fn regularized_loss(mdp: &TabularMdp, fp: &FeaturePolicy, w: &DVector<f64>, lambda: f64) -> f64 {
    let e = evaluate_policy(mdp, &fp.policy);
    let fitted = &fp.centred * w;
    let na = mdp.n_actions();
    let mut loss = 0.0;
    for i in 0..fitted.len() {
        let (s, a) = (i / na, i % na);
        loss += e.d_rho[s] * e.pi[(s, a)] * (e.advantage[(s, a)] - fitted[i]).powi(2);
    }
    loss + lambda * w.norm_squared()
}

/// Fisher operator and advantage moment at `fp`.
pub fn normal_equations(mdp: &TabularMdp, fp: &FeaturePolicy) -> (DMatrix<f64>, DVector<f64>) {
    let e = evaluate_policy(mdp, &fp.policy);
    (fisher_from_eval(&e, fp, mdp.n_actions()), advantage_moment(&e, fp, mdp.n_actions()))
}

/// `grad_theta V(rho) = (1 - gamma)^{-1} sum_s d(s) sum_a (Q + tau ln dpi/dmu) g_pi pi`.
pub fn grad_theta_value(mdp: &TabularMdp, fp: &FeaturePolicy) -> DVector<f64> {
    let e = evaluate_policy(mdp, &fp.policy);
    let na = mdp.n_actions();
    let mut grad = DVector::zeros(fp.centred.ncols());
    for i in 0..fp.centred.nrows() {
        let (s, a) = (i / na, i % na);
        let w = e.d_rho[s] * e.pi[(s, a)] * (e.q[(s, a)] + mdp.tau() * e.log_density[(s, a)]);
        grad += fp.centred.row(i).transpose() * w;
    }
    grad / (1.0 - mdp.gamma())
}

/// Time-dependent clipping radius and ridge weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Schedule {
    /// `R_t = r0 (1 + t)`, `lambda_t = lambda0 / (1 + t)`.
    Growing { r0: f64, lambda0: f64 },
    Constant { radius: f64, lambda: f64 },
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Growing { r0: 10.0, lambda0: 1e-3 }
    }
}

impl Schedule {
    pub fn radius(&self, t: f64) -> f64 {
        match *self {
            Schedule::Growing { r0, .. } => r0 * (1.0 + t),
            Schedule::Constant { radius, .. } => radius,
        }
    }

    pub fn lambda(&self, t: f64) -> f64 {
        match *self {
            Schedule::Growing { lambda0, .. } => lambda0 / (1.0 + t),
            Schedule::Constant { lambda, .. } => lambda,
        }
    }

    /// `sup_{[0, t]} R`.
    pub fn max_radius(&self, t: f64) -> f64 {
        self.radius(t).max(self.radius(0.0))
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Schedule::Growing { r0, lambda0 } => r0 > 0.0 && lambda0 > 0.0 && r0.is_finite() && lambda0.is_finite(),
            Schedule::Constant { radius, lambda } => radius > 0.0 && lambda > 0.0 && radius.is_finite() && lambda.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput("schedule constants must be positive and finite".into()))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NpgConfig {
    pub t_end: f64,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub integrator: Integrator,
    #[serde(default = "one")]
    pub snapshot_every: usize,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(skip)]
    pub reference: Option<ReferenceMeasures>,
}

fn one() -> usize {
    1
}

impl NpgConfig {
    pub fn new(t_end: f64, schedule: Schedule) -> Self {
        NpgConfig { t_end, dt: None, integrator: Integrator::Rk4, snapshot_every: 1, schedule, reference: None }
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = Some(dt);
        self
    }

    pub fn with_snapshot_every(mut self, k: usize) -> Self {
        self.snapshot_every = k;
        self
    }
}

/// Snapshots and diagnostics of an NPG run.
#[derive(Debug, Clone, Default, Serialize)]
pub struct NpgTrajectory {
    pub tau: f64,
    pub gamma: f64,
    pub times: Vec<f64>,
    pub thetas: Vec<DVector<f64>>,
    pub pi_snapshots: Vec<DMatrix<f64>>,
    pub value_gaps: Vec<f64>,
    /// `|A - <w, g_pi>|` in `L1(rho x (pi_t + pi_ref) / 2)`.
    pub approx_error_l1: Vec<f64>,
    /// `int_0^t e^{tau r} approx_error_l1(r) dr`.
    pub error_integral: Vec<f64>,
    pub bound_values: Vec<f64>,
    pub norm_theta: Vec<f64>,
    pub norm_w: Vec<f64>,
    pub kl0: f64,
    pub kappa: f64,
}

impl NpgTrajectory {
    pub fn running_min_gap(&self) -> Vec<f64> {
        let mut m = f64::INFINITY;
        self.value_gaps.iter().map(|&g| { m = m.min(g); m }).collect()
    }
}

/// Right-hand side `-(w_t(theta) + tau theta)` together with the evaluation and weights.
fn npg_rhs(
    mdp: &TabularMdp,
    features: &FeatureMap,
    theta: &DVector<f64>,
    schedule: &Schedule,
    t: f64,
) -> Result<(DVector<f64>, DVector<f64>, FeaturePolicy, PolicyEvaluation)> {
    if theta.iter().any(|x| !x.is_finite()) {
        return Err(Error::IntegratorInstability { t, detail: "non-finite parameter".into() });
    }
    let fp = FeaturePolicy::new(features, theta.clone(), mdp.mu())?;
    let e = evaluate_policy(mdp, &fp.policy);
    let w = weights_from_eval(&e, &fp, mdp.n_actions(), schedule.radius(t), schedule.lambda(t))?;
    let rhs = -(&w + theta * mdp.tau());
    Ok((rhs, w, fp, e))
}

/// `d/dt pi_theta` implied by the parameter velocity, for comparison with the approximate flow.
pub fn induced_policy_velocity(features: &FeatureMap, fp: &FeaturePolicy, theta_dot: &DVector<f64>) -> DMatrix<f64> {
    let z_dot = features.logits(theta_dot);
    crate::policy::centre(&z_dot, fp.policy.pi()).component_mul(fp.policy.pi())
}

/// Parameter velocity of the NPG flow at `theta` and time `t`.
pub fn npg_velocity(mdp: &TabularMdp, features: &FeatureMap, theta: &DVector<f64>, schedule: &Schedule, t: f64) -> Result<(DVector<f64>, DVector<f64>)> {
    let (rhs, w, _, _) = npg_rhs(mdp, features, theta, schedule, t)?;
    Ok((rhs, w))
}

pub fn integrate_npg_flow(mdp: &TabularMdp, features: &FeatureMap, theta0: &DVector<f64>, cfg: &NpgConfig) -> Result<NpgTrajectory> {
    let opt = reference_optimum(mdp)?;
    integrate_npg_flow_with(mdp, features, theta0, cfg, &opt)
}

pub fn integrate_npg_flow_with(
    mdp: &TabularMdp,
    features: &FeatureMap,
    theta0: &DVector<f64>,
    cfg: &NpgConfig,
    opt: &OptimalSolution,
) -> Result<NpgTrajectory> {
    if mdp.is_unregularised() || mdp.tau() <= 0.0 {
        return Err(Error::InvalidInput("the NPG flow needs a regularised model".into()));
    }
    if features.n_states() != mdp.n_states() || features.n_actions() != mdp.n_actions() {
        return Err(Error::InvalidInput("feature map does not match the model".into()));
    }
    cfg.schedule.validate()?;
    if cfg.snapshot_every == 0 {
        return Err(Error::InvalidInput("snapshot_every must be at least 1".into()));
    }
    let tau = mdp.tau();
    let gamma = mdp.gamma();
    let grid = TimeGrid::new(cfg.t_end, cfg.dt.unwrap_or_else(|| 0.01f64.min(0.1 / tau)))?;
    // The theorem fixes rho_ref = rho; pi_ref is free.
    let reference = cfg.reference.clone().unwrap_or_else(|| ReferenceMeasures::default_for(mdp));
    let rho = mdp.rho().clone();
    let kappa = concentrability(mdp, &opt.pi_star, &rho, &reference.pi_ref)?;
    let d_star = mdp.occupancy(&opt.pi_star.pi).d_rho;
    let v_star_rho = opt.v_star.dot(&rho);
    let slack = Tolerances::global().apriori_slack;

    let mut tr = NpgTrajectory { tau, gamma, kappa, ..Default::default() };
    let mut integral = 0.0;
    let mut prev: Option<(f64, f64)> = None;
    let theta0_norm = theta0.norm();
    let mut f = |t: f64, y: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let theta = y.column(0).into_owned();
        let (rhs, ..) = npg_rhs(mdp, features, &theta, &cfg.schedule, t)?;
        Ok(DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice()))
    };
    let mut y = DMatrix::from_column_slice(theta0.len(), 1, theta0.as_slice());
    for k in 0..=grid.n_steps {
        let t = grid.time(k);
        let theta = y.column(0).into_owned();
        let (_, w, fp, e) = npg_rhs(mdp, features, &theta, &cfg.schedule, t)?;
        let fitted = features.centred(&e.pi) * &w;
        let residual = DMatrix::from_fn(mdp.n_states(), mdp.n_actions(), |s, a| {
            e.advantage[(s, a)] - fitted[s * mdp.n_actions() + a]
        });
        let weights = (&e.pi + &reference.pi_ref) * 0.5;
        let err = weighted_l1(&residual, &rho, &weights);
        if let Some((tp, ep)) = prev {
            integral += 0.5 * (t - tp) * ((tau * tp).exp() * ep + (tau * t).exp() * err);
        }
        prev = Some((t, err));
        if t == 0.0 {
            tr.kl0 = kl_per_state(&opt.pi_star, fp.policy.distribution())?.dot(&d_star);
        }
        let bound = theta0_norm + cfg.schedule.max_radius(t) * (-(-tau * t).exp_m1()) / tau;
        if theta.norm() > bound + slack {
            return Err(Error::IntegratorInstability {
                t,
                detail: format!("|theta_t| = {:e} exceeds the a-priori bound {bound:e}", theta.norm()),
            });
        }
        if k % cfg.snapshot_every == 0 || k == grid.n_steps {
            tr.times.push(t);
            tr.value_gaps.push(e.v_rho - v_star_rho);
            tr.approx_error_l1.push(err);
            tr.error_integral.push(integral);
            tr.bound_values.push(exponential_bound(tau, gamma, t, tr.kl0 + 2.0 * kappa * integral));
            tr.norm_theta.push(theta.norm());
            tr.norm_w.push(w.norm());
            tr.pi_snapshots.push(e.pi.clone());
            tr.thetas.push(theta);
        }
        if k < grid.n_steps {
            y = cfg.integrator.step(&mut f, t, &y, grid.h)?;
        }
    }
    Ok(tr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::test_support::two_by_two;

    #[test]
    fn constant_features_have_zero_fisher() {
        let m = two_by_two(0.9, 1.0);
        let g = FeatureMap::constant(2, 2, &[1.5]).unwrap();
        let fp = FeaturePolicy::new(&g, DVector::from_element(1, 0.7), m.mu()).unwrap();
        assert!(fisher_operator(&m, &fp).amax() < 1e-15);
        assert!(solve_regularized_loss(&m, &fp, 1.0, 1e-3).unwrap().amax() < 1e-15);
    }

    #[test]
    fn centred_features_have_zero_mean() {
        let m = two_by_two(0.9, 1.0);
        let g = FeatureMap::random(2, 2, 3, 1.0, 5);
        let fp = FeaturePolicy::new(&g, DVector::from_vec(vec![0.3, -1.0, 2.0]), m.mu()).unwrap();
        for s in 0..2 {
            let mean = fp.centred.row(2 * s) * fp.policy.pi()[(s, 0)] + fp.centred.row(2 * s + 1) * fp.policy.pi()[(s, 1)];
            assert!(mean.amax() < 1e-12);
        }
    }

    #[test]
    fn inactive_constraint_returns_ridge_solution() {
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let h = DVector::from_vec(vec![0.1, -0.2]);
        let (w, nu) = solve_ball_ridge(&g, &h, 0.1, 10.0).unwrap();
        let direct = (g + DMatrix::identity(2, 2) * 0.1).lu().solve(&h).unwrap();
        assert_eq!(nu, 0.0);
        assert!((w - direct).amax() < 1e-14);
    }

    #[test]
    fn active_constraint_lands_on_sphere() {
        let g = DMatrix::from_row_slice(2, 2, &[1e-3, 0.0, 0.0, 2e-3]);
        let h = DVector::from_vec(vec![1.0, 1.0]);
        let (w, nu) = solve_ball_ridge(&g, &h, 1e-6, 0.5).unwrap();
        assert!(nu > 0.0);
        assert!(w.norm() <= 0.5 && w.norm() > 0.5 - 1e-11);
    }

    #[test]
    fn schedules() {
        let s = Schedule::Growing { r0: 2.0, lambda0: 1.0 };
        assert_eq!(s.radius(1.0), 4.0);
        assert_eq!(s.lambda(1.0), 0.5);
    }
}
