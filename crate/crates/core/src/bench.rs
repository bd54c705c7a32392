//! Seeded random instance generators.
//!
//! The generator is `Xoshiro256PlusPlus` seeded through SplitMix64
//! (`SeedableRng::seed_from_u64`), so instances are bit-identical across
//! runs and platforms for a given seed.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Gamma};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;

pub type InstanceRng = Xoshiro256PlusPlus;

pub fn rng(seed: u64) -> InstanceRng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub n_states: usize,
    pub n_actions: usize,
    #[serde(default = "default_cost_scale")]
    pub cost_scale: f64,
    /// Symmetric Dirichlet concentration of each transition row.
    #[serde(default = "default_concentration")]
    pub transition_concentration: f64,
    pub seed: u64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Reference measure; uniform if absent.
    #[serde(default)]
    pub mu: Option<Vec<f64>>,
    /// Initial distribution; uniform if absent.
    #[serde(default)]
    pub rho: Option<Vec<f64>>,
}

fn default_cost_scale() -> f64 {
    1.0
}
fn default_concentration() -> f64 {
    1.0
}
fn default_gamma() -> f64 {
    0.9
}
fn default_tau() -> f64 {
    1.0
}

impl GeneratorSpec {
    pub fn new(n_states: usize, n_actions: usize, seed: u64) -> Self {
        GeneratorSpec {
            n_states,
            n_actions,
            cost_scale: default_cost_scale(),
            transition_concentration: default_concentration(),
            seed,
            gamma: default_gamma(),
            tau: default_tau(),
            mu: None,
            rho: None,
        }
    }

    pub fn with_gamma_tau(mut self, gamma: f64, tau: f64) -> Self {
        self.gamma = gamma;
        self.tau = tau;
        self
    }
}

/// Symmetric Dirichlet sample by normalising independent Gamma draws.
pub fn dirichlet_row<R: Rng>(rng: &mut R, n: usize, alpha: f64) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive concentration");
    loop {
        let draw: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draw.iter().sum();
        if total > 0.0 && total.is_finite() {
            let mut row: Vec<f64> = draw.iter().map(|x| x / total).collect();
            // Put the rounding residue on the largest entry so the row sums to 1.
            let residue = 1.0 - row.iter().sum::<f64>();
            let imax = (0..n).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap_or(0);
            row[imax] += residue;
            return row;
        }
    }
}

fn uniform(n: usize) -> DVector<f64> {
    DVector::from_element(n, 1.0 / n as f64)
}

/// Random model: Dirichlet transitions, costs uniform in `[0, cost_scale]`.
pub fn generate_mdp(spec: &GeneratorSpec) -> Result<TabularMdp> {
    let (ns, na) = (spec.n_states, spec.n_actions);
    if ns == 0 || na == 0 {
        return Err(Error::InvalidInput("generator needs at least one state and one action".into()));
    }
    if !(spec.transition_concentration > 0.0 && spec.transition_concentration.is_finite()) {
        return Err(Error::InvalidInput("transition concentration must be positive".into()));
    }
    if !(spec.cost_scale >= 0.0 && spec.cost_scale.is_finite()) {
        return Err(Error::InvalidInput("cost scale must be finite and nonnegative".into()));
    }
    let mut rng = rng(spec.seed);
    let mut transitions = vec![DMatrix::zeros(ns, ns); na];
    for s in 0..ns {
        for p in transitions.iter_mut() {
            let row = dirichlet_row(&mut rng, ns, spec.transition_concentration);
            for (j, x) in row.into_iter().enumerate() {
                p[(s, j)] = x;
            }
        }
    }
    let cost = DMatrix::from_fn(ns, na, |_, _| spec.cost_scale * rng.random::<f64>());
    let mu = spec.mu.clone().map(DVector::from_vec).unwrap_or_else(|| uniform(na));
    let rho = spec.rho.clone().map(DVector::from_vec).unwrap_or_else(|| uniform(ns));
    TabularMdp::new(transitions, cost, spec.gamma, spec.tau, mu, rho)
}

/// Instance where each state has a single good action (cost 0) among `n_actions`
/// otherwise identical ones (cost 1); transitions do not depend on the action.
pub fn generate_hard_mdp(n_states: usize, n_actions: usize, gamma: f64, tau: f64, seed: u64) -> Result<TabularMdp> {
    let mut rng = rng(seed);
    let mut kernel = DMatrix::zeros(n_states, n_states);
    for s in 0..n_states {
        for (j, x) in dirichlet_row(&mut rng, n_states, 1.0).into_iter().enumerate() {
            kernel[(s, j)] = x;
        }
    }
    let good: Vec<usize> = (0..n_states).map(|_| rng.random_range(0..n_actions)).collect();
    let cost = DMatrix::from_fn(n_states, n_actions, |s, a| if a == good[s] { 0.0 } else { 1.0 });
    TabularMdp::new(vec![kernel; n_actions], cost, gamma, tau, uniform(n_actions), uniform(n_states))
}

/// Single-state bandit with `c(a_0) = -1`, `c = 0` otherwise, `gamma = 0`, `tau = 0`.
///
/// `mu(a_0) = mu_a0` and the remaining mass is spread evenly.
pub fn bandit(n_actions: usize, mu_a0: f64) -> Result<TabularMdp> {
    if n_actions < 2 || !(0.0..1.0).contains(&mu_a0) {
        return Err(Error::InvalidInput("bandit needs at least two actions and mu(a0) in [0, 1)".into()));
    }
    let rest = (1.0 - mu_a0) / (n_actions - 1) as f64;
    let mu = DVector::from_fn(n_actions, |a, _| if a == 0 { mu_a0 } else { rest });
    let cost = DMatrix::from_fn(1, n_actions, |_, a| if a == 0 { -1.0 } else { 0.0 });
    TabularMdp::new_unregularised(
        vec![DMatrix::from_element(1, 1, 1.0); n_actions],
        cost,
        0.0,
        mu,
        DVector::from_element(1, 1.0),
    )
}

/// Unregularised copy of a generated instance (`tau = 0`).
pub fn generate_unregularised_mdp(spec: &GeneratorSpec) -> Result<TabularMdp> {
    let regular = generate_mdp(&GeneratorSpec { tau: 1.0, ..spec.clone() })?;
    TabularMdp::new_unregularised(
        regular.transitions().to_vec(),
        regular.cost().clone(),
        spec.gamma,
        regular.mu().clone(),
        regular.rho().clone(),
    )
}

/// Logits with i.i.d. entries uniform in `[-scale, scale]`.
pub fn random_logits<R: Rng>(rng: &mut R, n_states: usize, n_actions: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n_states, n_actions, |_, _| rng.random_range(-scale..=scale))
}
