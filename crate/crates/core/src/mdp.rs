//! Finite entropy-regularised MDP model and occupancy measures.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{LogitPolicy, PolicyDistribution};
use crate::tolerances::Tolerances;

/// Finite MDP `(S, A, P, c, gamma, tau, mu, rho)`.
///
/// Transitions are stored per action: `transitions[a][(s, s')] = P(s' | s, a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpFile", into = "MdpFile")]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    transitions: Vec<DMatrix<f64>>,
    cost: DMatrix<f64>,
    gamma: f64,
    tau: f64,
    mu: DVector<f64>,
    rho: DVector<f64>,
    unregularised: bool,
}

/// On-disk layout, `P[s][a][s']` and `c[s][a]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpFile {
    pub n_states: usize,
    pub n_actions: usize,
    #[serde(rename = "P")]
    pub p: Vec<Vec<Vec<f64>>>,
    pub c: Vec<Vec<f64>>,
    pub gamma: f64,
    pub tau: f64,
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unregularised: bool,
}

impl TryFrom<MdpFile> for TabularMdp {
    type Error = Error;

    fn try_from(f: MdpFile) -> Result<Self> {
        let (s, a) = (f.n_states, f.n_actions);
        if s == 0 || a == 0 {
            return Err(Error::invariant("n_states and n_actions must be positive", "header"));
        }
        if f.p.len() != s {
            return Err(Error::invariant(format!("P must have {s} state rows, found {}", f.p.len()), "P"));
        }
        let mut transitions = vec![DMatrix::zeros(s, s); a];
        for (si, row) in f.p.iter().enumerate() {
            if row.len() != a {
                return Err(Error::invariant(format!("expected {a} actions, found {}", row.len()), format!("P[{si}]")));
            }
            for (ai, next) in row.iter().enumerate() {
                if next.len() != s {
                    return Err(Error::invariant(format!("expected {s} next states, found {}", next.len()), format!("P[{si}][{ai}]")));
                }
                for (sj, &v) in next.iter().enumerate() {
                    transitions[ai][(si, sj)] = v;
                }
            }
        }
        if f.c.len() != s || f.c.iter().any(|r| r.len() != a) {
            return Err(Error::invariant(format!("c must be {s}x{a}"), "c"));
        }
        let cost = DMatrix::from_fn(s, a, |i, j| f.c[i][j]);
        let mdp = TabularMdp {
            n_states: s,
            n_actions: a,
            transitions,
            cost,
            gamma: f.gamma,
            tau: f.tau,
            mu: DVector::from_vec(f.mu),
            rho: DVector::from_vec(f.rho),
            unregularised: f.unregularised,
        };
        mdp.validate()?;
        Ok(mdp)
    }
}

impl From<TabularMdp> for MdpFile {
    fn from(m: TabularMdp) -> Self {
        MdpFile {
            n_states: m.n_states,
            n_actions: m.n_actions,
            p: (0..m.n_states)
                .map(|s| {
                    (0..m.n_actions)
                        .map(|a| m.transitions[a].row(s).iter().copied().collect())
                        .collect()
                })
                .collect(),
            c: (0..m.n_states).map(|s| m.cost.row(s).iter().copied().collect()).collect(),
            gamma: m.gamma,
            tau: m.tau,
            mu: m.mu.iter().copied().collect(),
            rho: m.rho.iter().copied().collect(),
            unregularised: m.unregularised,
        }
    }
}

/// Occupancy kernel `d(s' | s)` (row `s`) and the rho-weighted occupancy.
#[derive(Debug, Clone)]
pub struct Occupancy {
    pub kernel: DMatrix<f64>,
    pub d_rho: DVector<f64>,
}

fn check_distribution(v: &DVector<f64>, name: &str, strict: bool, tol: f64) -> Result<()> {
    for (i, &x) in v.iter().enumerate() {
        if !x.is_finite() || x < 0.0 {
            return Err(Error::invariant("entries must be finite and nonnegative", format!("{name}[{i}]")));
        }
        if strict && x <= 0.0 {
            return Err(Error::invariant("entries must be strictly positive", format!("{name}[{i}]")));
        }
    }
    let sum = v.sum();
    if (sum - 1.0).abs() > tol {
        return Err(Error::invariant(format!("must sum to 1 (sum = {sum:.17})"), name.to_string()));
    }
    Ok(())
}

impl TabularMdp {
    /// Regularised model; `transitions[a]` is the `S x S` kernel of action `a`.
    pub fn new(
        transitions: Vec<DMatrix<f64>>,
        cost: DMatrix<f64>,
        gamma: f64,
        tau: f64,
        mu: DVector<f64>,
        rho: DVector<f64>,
    ) -> Result<Self> {
        Self::build(transitions, cost, gamma, tau, mu, rho, false)
    }

    /// Model for the unregularised flow: `tau = 0` and zeros in `mu` are allowed.
    pub fn new_unregularised(
        transitions: Vec<DMatrix<f64>>,
        cost: DMatrix<f64>,
        gamma: f64,
        mu: DVector<f64>,
        rho: DVector<f64>,
    ) -> Result<Self> {
        Self::build(transitions, cost, gamma, 0.0, mu, rho, true)
    }

    fn build(
        transitions: Vec<DMatrix<f64>>,
        cost: DMatrix<f64>,
        gamma: f64,
        tau: f64,
        mu: DVector<f64>,
        rho: DVector<f64>,
        unregularised: bool,
    ) -> Result<Self> {
        let mdp = TabularMdp {
            n_states: cost.nrows(),
            n_actions: cost.ncols(),
            transitions,
            cost,
            gamma,
            tau,
            mu,
            rho,
            unregularised,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    /// Check every model invariant, reporting the first violation with its index.
    pub fn validate(&self) -> Result<()> {
        let tol = Tolerances::global().construction;
        let (s, a) = (self.n_states, self.n_actions);
        if s == 0 || a == 0 {
            return Err(Error::invariant("n_states and n_actions must be positive", "header"));
        }
        if self.transitions.len() != a {
            return Err(Error::invariant(format!("expected {a} transition matrices"), "P"));
        }
        for (ai, p) in self.transitions.iter().enumerate() {
            if p.shape() != (s, s) {
                return Err(Error::invariant(format!("kernel must be {s}x{s}"), format!("P[*][{ai}]")));
            }
            for si in 0..s {
                let row = p.row(si);
                if let Some(sj) = row.iter().position(|x| !x.is_finite() || *x < 0.0) {
                    return Err(Error::invariant(
                        "transition probabilities must be finite and nonnegative",
                        format!("P[{si}][{ai}][{sj}]"),
                    ));
                }
                let sum = row.sum();
                if (sum - 1.0).abs() > tol {
                    return Err(Error::invariant(
                        format!("row must sum to 1 (sum = {sum:.17})"),
                        format!("P[{si}][{ai}]"),
                    ));
                }
            }
        }
        if let Some(idx) = self.cost.iter().position(|x| !x.is_finite()) {
            // column-major storage
            return Err(Error::invariant("costs must be finite", format!("c[{}][{}]", idx % s, idx / s)));
        }
        if !(self.gamma.is_finite() && (0.0..1.0).contains(&self.gamma)) {
            return Err(Error::invariant(format!("gamma must lie in [0, 1), got {}", self.gamma), "gamma"));
        }
        if self.unregularised {
            if self.tau != 0.0 {
                return Err(Error::invariant("tau must be 0 for an unregularised model", "tau"));
            }
        } else if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::invariant(format!("tau must be positive, got {}", self.tau), "tau"));
        }
        if self.mu.len() != a {
            return Err(Error::invariant(format!("mu must have {a} entries"), "mu"));
        }
        check_distribution(&self.mu, "mu", !self.unregularised, tol)?;
        if self.rho.len() != s {
            return Err(Error::invariant(format!("rho must have {s} entries"), "rho"));
        }
        check_distribution(&self.rho, "rho", false, tol)?;
        Ok(())
    }

    pub fn from_json_str(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn tau(&self) -> f64 {
        self.tau
    }
    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }
    pub fn rho(&self) -> &DVector<f64> {
        &self.rho
    }
    pub fn cost(&self) -> &DMatrix<f64> {
        &self.cost
    }
    pub fn transitions(&self) -> &[DMatrix<f64>] {
        &self.transitions
    }
    pub fn is_unregularised(&self) -> bool {
        self.unregularised
    }

    /// Sup norm of the cost.
    pub fn cost_norm(&self) -> f64 {
        self.cost.amax()
    }

    /// Same model with a different initial distribution.
    pub fn with_rho(&self, rho: DVector<f64>) -> Result<Self> {
        let mut m = self.clone();
        m.rho = rho;
        m.validate()?;
        Ok(m)
    }

    /// Same model with a different discount and regularisation.
    pub fn with_gamma_tau(&self, gamma: f64, tau: f64) -> Result<Self> {
        let mut m = self.clone();
        m.gamma = gamma;
        m.tau = tau;
        m.validate()?;
        Ok(m)
    }

    /// `(s, a) -> sum_{s'} v(s') P(s' | s, a)`.
    pub fn expected_next(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_states, self.n_actions);
        for (a, p) in self.transitions.iter().enumerate() {
            out.set_column(a, &(p * v));
        }
        out
    }

    /// `c + gamma P v`.
    pub fn q_from_values(&self, v: &DVector<f64>) -> DMatrix<f64> {
        &self.cost + self.expected_next(v) * self.gamma
    }

    /// State kernel `P_pi(s, s') = sum_a pi(a|s) P(s'|s,a)`.
    pub fn policy_transition(&self, pi: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_states, self.n_states);
        for (a, p) in self.transitions.iter().enumerate() {
            for s in 0..self.n_states {
                let w = pi[(s, a)];
                if w != 0.0 {
                    let mut row = out.row_mut(s);
                    row += p.row(s) * w;
                }
            }
        }
        out
    }

    /// Softmax image of `z` relative to `mu`.
    pub fn policy_from_logits(&self, z: &DMatrix<f64>) -> Result<PolicyDistribution> {
        Ok(LogitPolicy::new(z.clone(), &self.mu)?.into_distribution())
    }

    /// Exact occupancy `d = (1 - gamma)(I - gamma P_pi)^{-1}` by a dense LU solve.
    pub fn occupancy(&self, pi: &DMatrix<f64>) -> Occupancy {
        let lu = self.resolvent_lu(pi);
        self.occupancy_from_lu(&lu)
    }

    pub(crate) fn resolvent_lu(&self, pi: &DMatrix<f64>) -> nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn> {
        let n = self.n_states;
        let m = DMatrix::identity(n, n) - self.policy_transition(pi) * self.gamma;
        m.lu()
    }

    pub(crate) fn occupancy_from_lu(&self, lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>) -> Occupancy {
        let n = self.n_states;
        let mut kernel = lu
            .solve(&(DMatrix::identity(n, n) * (1.0 - self.gamma)))
            .expect("I - gamma P is invertible for gamma < 1");
        // Clean tiny negative roundoff so the rows are genuine distributions.
        kernel.iter_mut().for_each(|x| {
            if *x < 0.0 && *x > -1e-14 {
                *x = 0.0
            }
        });
        let d_rho = kernel.tr_mul(&self.rho);
        Occupancy { kernel, d_rho }
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// Small two-state, two-action model used by several unit tests.
    pub fn two_by_two(gamma: f64, tau: f64) -> TabularMdp {
        let p0 = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.2, 0.8]);
        let p1 = DMatrix::from_row_slice(2, 2, &[0.3, 0.7, 0.6, 0.4]);
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 2.0]);
        TabularMdp::new(
            vec![p0, p1],
            c,
            gamma,
            tau,
            DVector::from_vec(vec![0.5, 0.5]),
            DVector::from_vec(vec![0.3, 0.7]),
        )
        .unwrap()
    }
}
