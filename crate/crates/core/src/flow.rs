//! Mirror-descent, Fisher-Rao, approximate and unregularised policy flows.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{concentrability, weighted_l1, weighted_l1_best_shift};
use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
use crate::ode::{Integrator, TimeGrid};
use crate::policy::{
    kl_per_state, log_partition, policy_mean, tv_per_state, LogitPolicy, PolicyDistribution,
};
use crate::soft_dp::{
    evaluate_distribution, evaluate_policy, solve_optimal, solve_unregularised_optimal,
    OptimalSolution, PolicyEvaluation,
};
use crate::tolerances::Tolerances;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowMode {
    #[default]
    Regularised,
    Unregularised,
    Approximate,
}

/// Scalar time profile multiplying a fixed perturbation pattern.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TimeProfile {
    #[default]
    Constant,
    Decay { rate: f64 },
    /// `cos(w t) E1 + sin(w t) E2` with two independent patterns.
    Rotate { frequency: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    /// Independent uniform entries in `[-1, 1]` for every `(s, a)`.
    #[default]
    Dense,
    /// A function of the state only, broadcast over actions.
    StateOnly,
}

/// `Q_t = Q^{pi_t} + amplitude * profile(t) * E`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub amplitude: f64,
    pub seed: u64,
    #[serde(default)]
    pub profile: TimeProfile,
    #[serde(default)]
    pub kind: PerturbationKind,
}

impl PerturbationSpec {
    /// Perturbed Q supplier for the approximate flow.
    pub fn supplier(&self, n_states: usize, n_actions: usize) -> impl Fn(f64, &PolicyEvaluation) -> DMatrix<f64> {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(self.seed);
        let pattern = |rng: &mut Xoshiro256PlusPlus| match self.kind {
            PerturbationKind::Dense => DMatrix::from_fn(n_states, n_actions, |_, _| rng.random_range(-1.0..=1.0)),
            PerturbationKind::StateOnly => {
                let b: Vec<f64> = (0..n_states).map(|_| rng.random_range(-1.0..=1.0)).collect();
                DMatrix::from_fn(n_states, n_actions, |s, _| b[s])
            }
        };
        let e1 = pattern(&mut rng);
        let e2 = pattern(&mut rng);
        let spec = *self;
        move |t, eval| {
            let noise = match spec.profile {
                TimeProfile::Constant => e1.clone(),
                TimeProfile::Decay { rate } => &e1 * (-rate * t).exp(),
                TimeProfile::Rotate { frequency } => &e1 * (frequency * t).cos() + &e2 * (frequency * t).sin(),
            };
            &eval.q + noise * spec.amplitude
        }
    }
}

/// Reference measures of the stability estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceMeasures {
    pub rho_ref: DVector<f64>,
    /// Kernel `pi_ref(a | s)`.
    pub pi_ref: DMatrix<f64>,
}

impl ReferenceMeasures {
    /// `rho_ref = rho`, `pi_ref = mu`.
    pub fn default_for(mdp: &TabularMdp) -> Self {
        ReferenceMeasures {
            rho_ref: mdp.rho().clone(),
            pi_ref: DMatrix::from_fn(mdp.n_states(), mdp.n_actions(), |_, a| mdp.mu()[a]),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub t_end: f64,
    /// Defaults to `min(0.01, 0.1 / tau)`.
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub integrator: Integrator,
    #[serde(default = "one")]
    pub snapshot_every: usize,
    #[serde(default)]
    pub mode: FlowMode,
    #[serde(default)]
    pub perturbation: Option<PerturbationSpec>,
    #[serde(skip)]
    pub reference: Option<ReferenceMeasures>,
}

fn one() -> usize {
    1
}

impl FlowConfig {
    pub fn new(t_end: f64) -> Self {
        FlowConfig {
            t_end,
            dt: None,
            integrator: Integrator::Rk4,
            snapshot_every: 1,
            mode: FlowMode::Regularised,
            perturbation: None,
            reference: None,
        }
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = Some(dt);
        self
    }

    pub fn with_snapshot_every(mut self, k: usize) -> Self {
        self.snapshot_every = k;
        self
    }

    pub fn with_integrator(mut self, integrator: Integrator) -> Self {
        self.integrator = integrator;
        self
    }

    pub fn step_size(&self, tau: f64) -> f64 {
        self.dt.unwrap_or_else(|| if tau > 0.0 { 0.01f64.min(0.1 / tau) } else { 0.01 })
    }

    pub fn grid(&self, tau: f64) -> Result<TimeGrid> {
        if self.snapshot_every == 0 {
            return Err(Error::InvalidInput("snapshot_every must be at least 1".into()));
        }
        TimeGrid::new(self.t_end, self.step_size(tau))
    }
}

/// Snapshot record of a dual-space flow together with its diagnostics.
#[derive(Debug, Clone, Default, Serialize)]
pub struct FlowTrajectory {
    pub mode: FlowMode,
    pub tau: f64,
    pub gamma: f64,
    pub times: Vec<f64>,
    pub z_snapshots: Vec<DMatrix<f64>>,
    pub pi_snapshots: Vec<DMatrix<f64>>,
    /// Per-state values `V^{pi_t}`.
    pub values: Vec<DVector<f64>>,
    /// `V^{pi_t}(rho) - V^{pi*}(rho)`.
    pub value_gaps: Vec<f64>,
    /// `sum_s d*(s) KL(pi*(.|s) | pi_t(.|s))`; infinite when `pi*` is not dominated.
    pub kl_to_opt: Vec<f64>,
    /// `sum_s d*(s) (sum_a |pi_t - pi*|)^2`.
    pub tv_sq: Vec<f64>,
    /// Theoretical upper bound on the value gap at each snapshot.
    pub bound_values: Vec<f64>,
    pub norm_z: Vec<f64>,
    /// Error integrand of the approximate flow (zero for exact flows).
    pub error_l1: Vec<f64>,
    /// Same with the best state-only shift removed.
    pub error_l1_shifted: Vec<f64>,
    /// `int_0^t e^{tau r} error_l1(r) dr`.
    pub error_integral: Vec<f64>,
    pub error_integral_shifted: Vec<f64>,
    /// `KL_0` at `t = 0`.
    pub kl0: f64,
    pub kappa: f64,
    pub v_star_rho: f64,
    pub step: f64,
}

impl FlowTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Running minimum of the value gap.
    pub fn running_min_gap(&self) -> Vec<f64> {
        let mut m = f64::INFINITY;
        self.value_gaps.iter().map(|&g| { m = m.min(g); m }).collect()
    }

    /// `|y' + tau y + (1 - gamma) gap|` with `y = kl_to_opt`, using central
    /// differences inside the snapshot grid and second-order one-sided ones at the ends.
    pub fn kl_ode_residual(&self) -> Vec<f64> {
        let n = self.times.len();
        if n < 3 {
            return vec![f64::NAN; n];
        }
        let y = &self.kl_to_opt;
        (0..n)
            .map(|k| {
                let dy = if k == 0 {
                    let h = self.times[1] - self.times[0];
                    (-3.0 * y[0] + 4.0 * y[1] - y[2]) / (2.0 * h)
                } else if k == n - 1 {
                    let h = self.times[n - 1] - self.times[n - 2];
                    (3.0 * y[n - 1] - 4.0 * y[n - 2] + y[n - 3]) / (2.0 * h)
                } else {
                    (y[k + 1] - y[k - 1]) / (self.times[k + 1] - self.times[k - 1])
                };
                (dy + self.tau * y[k] + (1.0 - self.gamma) * self.value_gaps[k]).abs()
            })
            .collect()
    }
}

/// `tau / ((1 - gamma)(e^{tau t} - 1)) * scale`, infinite at `t = 0`.
pub fn exponential_bound(tau: f64, gamma: f64, t: f64, scale: f64) -> f64 {
    if t <= 0.0 {
        return f64::INFINITY;
    }
    tau / ((1.0 - gamma) * (tau * t).exp_m1()) * scale
}

/// Optimum used by flow diagnostics, refined by soft policy iteration.
///
/// Value iteration is run to `optimal_solve` accuracy; a few Newton steps
/// (evaluate, then take the softmax of `-Q / tau`) then make the reference
/// value that of an actual policy, accurate to roundoff.
pub fn reference_optimum(mdp: &TabularMdp) -> Result<OptimalSolution> {
    let tol = Tolerances::global().optimal_solve;
    let mut sol = solve_optimal(mdp, tol, 10_000_000)?;
    let tau = mdp.tau();
    let mut policy = LogitPolicy::new(sol.z_star.clone(), mdp.mu())?;
    for _ in 0..8 {
        let e = evaluate_policy(mdp, &policy);
        let z = &e.q * (-1.0 / tau);
        let next = LogitPolicy::new(z, mdp.mu())?;
        let change = (next.pi() - policy.pi()).amax();
        policy = next;
        if change < 1e-15 {
            break;
        }
    }
    let e = evaluate_policy(mdp, &policy);
    sol.v_star = e.v.clone();
    sol.q_star = e.q.clone();
    sol.z_star = sol.q_star.clone();
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            sol.z_star[(s, a)] = -(e.q[(s, a)] - e.v[s]) / tau;
        }
    }
    sol.pi_star = LogitPolicy::new(sol.z_star.clone(), mdp.mu())?.into_distribution();
    sol.residual = (crate::soft_dp::soft_bellman_operator(mdp, &sol.v_star)? - &sol.v_star).amax();
    Ok(sol)
}

struct Target {
    v_star_rho: f64,
    v_star: DVector<f64>,
    pi_star: PolicyDistribution,
    d_star: DVector<f64>,
}

impl Target {
    fn regularised(mdp: &TabularMdp, opt: &OptimalSolution) -> Self {
        let d_star = mdp.occupancy(&opt.pi_star.pi).d_rho;
        Target {
            v_star_rho: opt.v_star.dot(mdp.rho()),
            v_star: opt.v_star.clone(),
            pi_star: opt.pi_star.clone(),
            d_star,
        }
    }

    fn kl_to(&self, pi: &PolicyDistribution) -> f64 {
        match kl_per_state(&self.pi_star, pi) {
            Ok(kl) => kl.dot(&self.d_star),
            Err(_) => f64::INFINITY,
        }
    }

    fn tv_sq(&self, pi: &DMatrix<f64>) -> f64 {
        tv_per_state(pi, &self.pi_star.pi).map(|x| x * x).dot(&self.d_star)
    }
}

/// `-(Q + tau Z - V)` for the policy induced by `z`.
pub fn mirror_flow_rhs(mdp: &TabularMdp, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let policy = LogitPolicy::new(z.clone(), mdp.mu())?;
    let e = evaluate_policy(mdp, &policy);
    Ok(mirror_rhs_from_eval(&e, z, mdp.tau()))
}

fn mirror_rhs_from_eval(e: &PolicyEvaluation, z: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let mut out = &e.q + z * tau;
    for (s, mut row) in out.row_iter_mut().enumerate() {
        row.add_scalar_mut(-e.v[s]);
    }
    -out
}

/// `-(Q_hat + tau Z - <Q_hat + tau Z, pi>)`.
fn approximate_rhs(q_hat: &DMatrix<f64>, z: &DMatrix<f64>, pi: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let target = q_hat + z * tau;
    let mean = policy_mean(&target, pi);
    let mut out = target;
    for (s, mut row) in out.row_iter_mut().enumerate() {
        row.add_scalar_mut(-mean[s]);
    }
    -out
}

/// Sup-norm a-priori bound on `Z_t` along the exact flow.
pub fn apriori_logit_bound(mdp: &TabularMdp, z0_norm: f64, v0_norm: f64, v_star_norm: f64, t: f64) -> f64 {
    let tau = mdp.tau();
    let drive = mdp.cost_norm() + (1.0 + mdp.gamma()) * v0_norm.max(v_star_norm);
    let growth = if tau > 0.0 { -(-tau * t).exp_m1() / tau } else { t };
    (-tau * t).exp() * z0_norm + growth * drive
}

struct Recorder<'a> {
    mdp: &'a TabularMdp,
    target: Target,
    traj: FlowTrajectory,
    reference: ReferenceMeasures,
    apriori: Option<(f64, f64, f64)>,
    prev_t: f64,
    prev_err: f64,
    prev_err_shift: f64,
    integral: f64,
    integral_shift: f64,
}

impl<'a> Recorder<'a> {
    fn new(mdp: &'a TabularMdp, target: Target, mode: FlowMode, reference: ReferenceMeasures, step: f64) -> Self {
        let traj = FlowTrajectory {
            mode,
            tau: mdp.tau(),
            gamma: mdp.gamma(),
            v_star_rho: target.v_star_rho,
            step,
            kappa: f64::NAN,
            ..Default::default()
        };
        Recorder {
            mdp,
            target,
            traj,
            reference,
            apriori: None,
            prev_t: 0.0,
            prev_err: 0.0,
            prev_err_shift: 0.0,
            integral: 0.0,
            integral_shift: 0.0,
        }
    }

    /// Accumulate the error integrals with the trapezoid rule on the step grid.
    fn accumulate(&mut self, t: f64, err: f64, err_shift: f64) {
        let tau = self.mdp.tau();
        if t > 0.0 {
            let h = t - self.prev_t;
            self.integral += 0.5 * h * ((tau * self.prev_t).exp() * self.prev_err + (tau * t).exp() * err);
            self.integral_shift +=
                0.5 * h * ((tau * self.prev_t).exp() * self.prev_err_shift + (tau * t).exp() * err_shift);
        }
        self.prev_t = t;
        self.prev_err = err;
        self.prev_err_shift = err_shift;
    }

    fn snapshot(&mut self, t: f64, z: &DMatrix<f64>, e: &PolicyEvaluation, err: f64, err_shift: f64) -> Result<()> {
        let dist = PolicyDistribution { pi: e.pi.clone(), log_density: e.log_density.clone() };
        let kl = self.target.kl_to(&dist);
        let norm_z = z.amax();
        if t == 0.0 {
            self.traj.kl0 = kl;
            if self.traj.mode != FlowMode::Approximate {
                self.apriori = Some((norm_z, e.v.amax(), self.target.v_star.amax()));
            }
        }
        if let Some((z0, v0, vs)) = self.apriori {
            let bound = apriori_logit_bound(self.mdp, z0, v0, vs, t);
            if norm_z > bound + Tolerances::global().apriori_slack {
                return Err(Error::IntegratorInstability {
                    t,
                    detail: format!("|Z_t| = {norm_z:e} exceeds the a-priori bound {bound:e}"),
                });
            }
        }
        let tau = self.mdp.tau();
        let gamma = self.mdp.gamma();
        let bound = match self.traj.mode {
            FlowMode::Regularised => exponential_bound(tau, gamma, t, self.traj.kl0),
            FlowMode::Approximate => {
                exponential_bound(tau, gamma, t, self.traj.kl0 + 2.0 * self.traj.kappa * self.integral)
            }
            FlowMode::Unregularised => {
                if t > 0.0 {
                    self.traj.kl0 / ((1.0 - gamma) * t)
                } else {
                    f64::INFINITY
                }
            }
        };
        let tr = &mut self.traj;
        tr.times.push(t);
        tr.z_snapshots.push(z.clone());
        tr.pi_snapshots.push(e.pi.clone());
        tr.values.push(e.v.clone());
        tr.value_gaps.push(e.v_rho - self.target.v_star_rho);
        tr.kl_to_opt.push(kl);
        tr.tv_sq.push(self.target.tv_sq(&e.pi));
        tr.bound_values.push(bound);
        tr.norm_z.push(norm_z);
        tr.error_l1.push(err);
        tr.error_l1_shifted.push(err_shift);
        tr.error_integral.push(self.integral);
        tr.error_integral_shifted.push(self.integral_shift);
        Ok(())
    }
}

fn check_finite(t: f64, z: &DMatrix<f64>) -> Result<()> {
    if z.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::IntegratorInstability { t, detail: "non-finite logits".into() })
    }
}

fn evaluate_logits(mdp: &TabularMdp, z: &DMatrix<f64>, t: f64) -> Result<PolicyEvaluation> {
    check_finite(t, z)?;
    Ok(evaluate_policy(mdp, &LogitPolicy::new(z.clone(), mdp.mu())?))
}

/// Exact mirror-descent flow `dZ/dt = -(Q^{pi_t} + tau Z - V^{pi_t})`.
pub fn integrate_mirror_flow(mdp: &TabularMdp, z0: &DMatrix<f64>, cfg: &FlowConfig) -> Result<FlowTrajectory> {
    let opt = reference_optimum(mdp)?;
    integrate_mirror_flow_with(mdp, z0, cfg, &opt)
}

/// As [`integrate_mirror_flow`] with a precomputed optimum.
pub fn integrate_mirror_flow_with(
    mdp: &TabularMdp,
    z0: &DMatrix<f64>,
    cfg: &FlowConfig,
    opt: &OptimalSolution,
) -> Result<FlowTrajectory> {
    require_regularised(mdp)?;
    let grid = cfg.grid(mdp.tau())?;
    let reference = cfg.reference.clone().unwrap_or_else(|| ReferenceMeasures::default_for(mdp));
    let mut rec = Recorder::new(mdp, Target::regularised(mdp, opt), FlowMode::Regularised, reference, grid.h);
    let tau = mdp.tau();
    let mut rhs = |t: f64, z: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        Ok(mirror_rhs_from_eval(&evaluate_logits(mdp, z, t)?, z, tau))
    };
    let mut z = z0.clone();
    for k in 0..=grid.n_steps {
        let t = grid.time(k);
        if k % cfg.snapshot_every == 0 || k == grid.n_steps {
            let e = evaluate_logits(mdp, &z, t)?;
            rec.snapshot(t, &z, &e, 0.0, 0.0)?;
        }
        if k < grid.n_steps {
            z = cfg.integrator.step(&mut rhs, t, &z, grid.h)?;
        }
    }
    Ok(rec.traj)
}

fn require_regularised(mdp: &TabularMdp) -> Result<()> {
    if mdp.is_unregularised() || mdp.tau() <= 0.0 {
        return Err(Error::InvalidInput("this flow needs a regularised model (tau > 0)".into()));
    }
    Ok(())
}

/// Approximate flow `dZ/dt = -(Q_t + tau Z - <Q_t + tau Z, pi_t>)` driven by `q_hat`.
///
/// `q_hat` receives the current time and the exact evaluation of `pi_t`, and
/// returns the Q-estimate `Q_t`. The recorded error integrand is
/// `|Q^{pi_t} - Q_t|` in `L1(rho_ref x (pi_t + pi_ref) / 2)`.
pub fn integrate_approximate_flow<F>(
    mdp: &TabularMdp,
    z0: &DMatrix<f64>,
    cfg: &FlowConfig,
    q_hat: F,
) -> Result<FlowTrajectory>
where
    F: Fn(f64, &PolicyEvaluation) -> DMatrix<f64>,
{
    let opt = reference_optimum(mdp)?;
    integrate_approximate_flow_with(mdp, z0, cfg, &opt, q_hat)
}

pub fn integrate_approximate_flow_with<F>(
    mdp: &TabularMdp,
    z0: &DMatrix<f64>,
    cfg: &FlowConfig,
    opt: &OptimalSolution,
    q_hat: F,
) -> Result<FlowTrajectory>
where
    F: Fn(f64, &PolicyEvaluation) -> DMatrix<f64>,
{
    require_regularised(mdp)?;
    let grid = cfg.grid(mdp.tau())?;
    let reference = cfg.reference.clone().unwrap_or_else(|| ReferenceMeasures::default_for(mdp));
    let target = Target::regularised(mdp, opt);
    let kappa = concentrability(mdp, &opt.pi_star, &reference.rho_ref, &reference.pi_ref)?;
    let mut rec = Recorder::new(mdp, target, FlowMode::Approximate, reference, grid.h);
    rec.traj.kappa = kappa;
    let tau = mdp.tau();
    let mut rhs = |t: f64, z: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let e = evaluate_logits(mdp, z, t)?;
        let q = q_hat(t, &e);
        if q.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!("Q estimate is not finite at t = {t}")));
        }
        Ok(approximate_rhs(&q, z, &e.pi, tau))
    };
    let mut z = z0.clone();
    for k in 0..=grid.n_steps {
        let t = grid.time(k);
        let e = evaluate_logits(mdp, &z, t)?;
        let diff = &e.q - q_hat(t, &e);
        let weights = (&e.pi + &rec.reference.pi_ref) * 0.5;
        let err = weighted_l1(&diff, &rec.reference.rho_ref, &weights);
        let err_shift = weighted_l1_best_shift(&diff, &rec.reference.rho_ref, &weights);
        rec.accumulate(t, err, err_shift);
        if k % cfg.snapshot_every == 0 || k == grid.n_steps {
            rec.snapshot(t, &z, &e, err, err_shift)?;
        }
        if k < grid.n_steps {
            z = cfg.integrator.step(&mut rhs, t, &z, grid.h)?;
        }
    }
    Ok(rec.traj)
}

/// Approximate flow driven by a seeded perturbation of the exact Q-function.
pub fn integrate_perturbed_flow(
    mdp: &TabularMdp,
    z0: &DMatrix<f64>,
    cfg: &FlowConfig,
    opt: &OptimalSolution,
    spec: &PerturbationSpec,
) -> Result<FlowTrajectory> {
    let supplier = spec.supplier(mdp.n_states(), mdp.n_actions());
    integrate_approximate_flow_with(mdp, z0, cfg, opt, supplier)
}

/// Unregularised flow `dZ/dt = -(Q^{pi_t} - V^{pi_t})` with a deterministic optimum for diagnostics.
pub fn integrate_unregularised_flow(
    mdp: &TabularMdp,
    z0: &DMatrix<f64>,
    cfg: &FlowConfig,
) -> Result<FlowTrajectory> {
    if mdp.tau() != 0.0 {
        return Err(Error::InvalidInput("the unregularised flow needs tau = 0".into()));
    }
    let grid = cfg.grid(0.0)?;
    let hard = solve_unregularised_optimal(mdp, 10_000)?;
    let target = Target {
        v_star_rho: hard.v_star.dot(mdp.rho()),
        v_star: hard.v_star.clone(),
        d_star: mdp.occupancy(&hard.pi_star.pi).d_rho,
        pi_star: hard.pi_star,
    };
    let reference = ReferenceMeasures::default_for(mdp);
    let mut rec = Recorder::new(mdp, target, FlowMode::Unregularised, reference, grid.h);
    let mut rhs = |t: f64, z: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        Ok(mirror_rhs_from_eval(&evaluate_logits(mdp, z, t)?, z, 0.0))
    };
    let mut z = z0.clone();
    for k in 0..=grid.n_steps {
        let t = grid.time(k);
        if k % cfg.snapshot_every == 0 || k == grid.n_steps {
            let e = evaluate_logits(mdp, &z, t)?;
            rec.snapshot(t, &z, &e, 0.0, 0.0)?;
        }
        if k < grid.n_steps {
            z = cfg.integrator.step(&mut rhs, t, &z, grid.h)?;
        }
    }
    Ok(rec.traj)
}

/// Primal policy from an integrator state, requiring strictly positive entries.
///
/// Rows are renormalised: the simplex is invariant for the exact flow but
/// transversally unstable (a row-mass error grows at rate `V(s)`), so roundoff
/// would otherwise be amplified exponentially.
fn primal_distribution(mdp: &TabularMdp, raw: &DMatrix<f64>, t: f64) -> Result<PolicyDistribution> {
    let mut pi = raw.clone();
    for mut row in pi.row_iter_mut() {
        let total = row.sum();
        row.unscale_mut(total);
    }
    let mut log_density = DMatrix::zeros(pi.nrows(), pi.ncols());
    for s in 0..pi.nrows() {
        for a in 0..pi.ncols() {
            let p = pi[(s, a)];
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::IntegratorInstability {
                    t,
                    detail: format!("policy mass left the open simplex at pi[{s}][{a}] = {p:e}"),
                });
            }
            log_density[(s, a)] = (p / mdp.mu()[a]).ln();
        }
    }
    Ok(PolicyDistribution { pi, log_density })
}

/// Fisher-Rao right-hand side `-(Q + tau ln dpi/dmu - V) pi`.
pub fn fisher_rao_flow_rhs(mdp: &TabularMdp, pi: &PolicyDistribution) -> DMatrix<f64> {
    let e = evaluate_distribution(mdp, pi);
    let g = e.flat_derivative(mdp.tau());
    -g.component_mul(&pi.pi)
}

/// Policy snapshots of a primal integration.
#[derive(Debug, Clone, Default, Serialize)]
pub struct PrimalTrajectory {
    pub times: Vec<f64>,
    pub pi_snapshots: Vec<DMatrix<f64>>,
}

/// Integrate the Fisher-Rao flow directly on the conditional probabilities.
pub fn integrate_fisher_rao_flow(
    mdp: &TabularMdp,
    pi0: &PolicyDistribution,
    cfg: &FlowConfig,
) -> Result<PrimalTrajectory> {
    require_regularised(mdp)?;
    let grid = cfg.grid(mdp.tau())?;
    let mut rhs = |t: f64, pi: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let normalised = primal_distribution(mdp, pi, t)?;
        let g = evaluate_distribution(mdp, &normalised).flat_derivative(mdp.tau());
        Ok(-g.component_mul(pi))
    };
    let mut out = PrimalTrajectory::default();
    let mut pi = pi0.pi.clone();
    for k in 0..=grid.n_steps {
        let t = grid.time(k);
        if k % cfg.snapshot_every == 0 || k == grid.n_steps {
            out.times.push(t);
            out.pi_snapshots.push(pi.clone());
        }
        if k < grid.n_steps {
            pi = cfg.integrator.step(&mut rhs, t, &pi, grid.h)?;
        }
    }
    Ok(out)
}

/// One policy mirror descent step `Z+ = Z - G / lambda`, renormalised so `Phi(Z+) = 0`.
pub fn policy_mirror_descent_step(mdp: &TabularMdp, policy: &LogitPolicy, lambda: f64) -> Result<LogitPolicy> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidInput(format!("step parameter must be positive, got {lambda}")));
    }
    let g = evaluate_policy(mdp, policy).flat_derivative(mdp.tau());
    let z = policy.logits() - g / lambda;
    let phi = log_partition(&z, mdp.mu());
    LogitPolicy::new(crate::policy::add_state_function(&z, &(-phi)), mdp.mu())
}

/// Smallest `lambda` in `candidates` (sorted ascending) from which every larger
/// candidate yields a step that does not increase `V(rho)`.
pub fn descent_threshold(mdp: &TabularMdp, policy: &LogitPolicy, candidates: &[f64]) -> Result<Option<f64>> {
    let v0 = evaluate_policy(mdp, policy).v_rho;
    let mut threshold = None;
    for &lambda in candidates.iter().rev() {
        let next = policy_mirror_descent_step(mdp, policy, lambda)?;
        if evaluate_policy(mdp, &next).v_rho <= v0 + 1e-14 * (1.0 + v0.abs()) {
            threshold = Some(lambda);
        } else {
            break;
        }
    }
    Ok(threshold)
}
