//! Softmax policies relative to a reference measure, log-densities and KL.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Conditional action distribution together with `ln(d pi / d mu)`.
///
/// For softmax-generated policies `log_density = Z - Phi(Z)` and is finite
/// everywhere, including actions where `mu` vanishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDistribution {
    pub pi: DMatrix<f64>,
    pub log_density: DMatrix<f64>,
}

/// Policy stored through its dual variable `Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitPolicy {
    logits: DMatrix<f64>,
    log_partition: DVector<f64>,
    dist: PolicyDistribution,
}

/// Per-state `Phi(Z)(s) = ln sum_a exp(Z(s,a)) mu(a)`, max-shifted.
pub fn log_partition(z: &DMatrix<f64>, mu: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(z.nrows(), |s, _| {
        let m = (0..z.ncols())
            .filter(|&a| mu[a] > 0.0)
            .map(|a| z[(s, a)])
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..z.ncols())
            .filter(|&a| mu[a] > 0.0)
            .map(|a| (z[(s, a)] - m).exp() * mu[a])
            .sum();
        m + sum.ln()
    })
}

impl LogitPolicy {
    pub fn new(logits: DMatrix<f64>, mu: &DVector<f64>) -> Result<Self> {
        if logits.ncols() != mu.len() {
            return Err(Error::InvalidInput(format!(
                "logits have {} columns but mu has {} entries",
                logits.ncols(),
                mu.len()
            )));
        }
        if let Some(idx) = logits.iter().position(|x| !x.is_finite()) {
            let s = logits.nrows();
            return Err(Error::InvalidInput(format!(
                "non-finite logit at Z[{}][{}]",
                idx % s,
                idx / s
            )));
        }
        let phi = log_partition(&logits, mu);
        let mut log_density = logits.clone();
        for (s, mut row) in log_density.row_iter_mut().enumerate() {
            row.add_scalar_mut(-phi[s]);
        }
        // Normalise the shifted weights directly: `Z - Phi` loses absolute
        // precision when |Z| is large, the ratio below does not.
        let mut pi = DMatrix::zeros(logits.nrows(), logits.ncols());
        for s in 0..logits.nrows() {
            let m = (0..logits.ncols())
                .filter(|&a| mu[a] > 0.0)
                .map(|a| logits[(s, a)])
                .fold(f64::NEG_INFINITY, f64::max);
            for a in 0..logits.ncols() {
                pi[(s, a)] = (logits[(s, a)] - m).exp() * mu[a];
            }
            let total = pi.row(s).sum();
            pi.row_mut(s).unscale_mut(total);
        }
        Ok(LogitPolicy {
            logits,
            log_partition: phi,
            dist: PolicyDistribution { pi, log_density },
        })
    }

    /// The reference policy `mu` itself (`Z = 0`).
    pub fn uniform_logits(n_states: usize, mu: &DVector<f64>) -> Self {
        Self::new(DMatrix::zeros(n_states, mu.len()), mu).expect("zero logits are finite")
    }

    pub fn logits(&self) -> &DMatrix<f64> {
        &self.logits
    }
    pub fn log_partition(&self) -> &DVector<f64> {
        &self.log_partition
    }
    pub fn distribution(&self) -> &PolicyDistribution {
        &self.dist
    }
    pub fn pi(&self) -> &DMatrix<f64> {
        &self.dist.pi
    }
    pub fn log_density(&self) -> &DMatrix<f64> {
        &self.dist.log_density
    }
    pub fn into_distribution(self) -> PolicyDistribution {
        self.dist
    }

    /// Logits with each row shifted so that `Phi = 0`; induces the same policy.
    pub fn normalised(&self) -> DMatrix<f64> {
        self.dist.log_density.clone()
    }
}

impl PolicyDistribution {
    /// Build from a raw probability matrix.
    ///
    /// In regularised mode every action charged by `mu` must carry positive
    /// mass. With `allow_zeros` (unregularised diagnostics only) zero entries
    /// get `log_density = -inf`, which KL computations never dereference.
    pub fn from_probabilities(pi: DMatrix<f64>, mu: &DVector<f64>, allow_zeros: bool) -> Result<Self> {
        let tol = crate::tolerances::Tolerances::global().construction;
        if pi.ncols() != mu.len() {
            return Err(Error::InvalidInput("policy and mu dimensions differ".into()));
        }
        for s in 0..pi.nrows() {
            let row = pi.row(s);
            if row.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::invariant("policy entries must be finite and nonnegative", format!("pi[{s}]")));
            }
            if (row.sum() - 1.0).abs() > tol {
                return Err(Error::invariant("policy row must sum to 1", format!("pi[{s}]")));
            }
        }
        let mut log_density = DMatrix::zeros(pi.nrows(), pi.ncols());
        for s in 0..pi.nrows() {
            for a in 0..pi.ncols() {
                let p = pi[(s, a)];
                if p > 0.0 {
                    if mu[a] == 0.0 {
                        return Err(Error::invariant("policy not absolutely continuous w.r.t. mu", format!("pi[{s}][{a}]")));
                    }
                    log_density[(s, a)] = (p / mu[a]).ln();
                } else if mu[a] > 0.0 && !allow_zeros {
                    return Err(Error::Domain { state: s, action: a });
                } else {
                    log_density[(s, a)] = f64::NEG_INFINITY;
                }
            }
        }
        Ok(PolicyDistribution { pi, log_density })
    }

    /// Logits representing this policy, `Z = ln(d pi / d mu)`; requires finite log-density.
    pub fn to_logits(&self, mu: &DVector<f64>) -> Result<LogitPolicy> {
        LogitPolicy::new(self.log_density.clone(), mu)
    }

    pub fn n_states(&self) -> usize {
        self.pi.nrows()
    }
}

/// `sum_s w(s) KL(p(.|s) | q(.|s))`.
pub fn kl_policies(p: &PolicyDistribution, q: &PolicyDistribution, weights: &DVector<f64>) -> Result<f64> {
    let per_state = kl_per_state(p, q)?;
    Ok(per_state.dot(weights))
}

/// Per-state `KL(p(.|s) | q(.|s))`.
pub fn kl_per_state(p: &PolicyDistribution, q: &PolicyDistribution) -> Result<DVector<f64>> {
    let (ns, na) = p.pi.shape();
    let mut out = DVector::zeros(ns);
    for s in 0..ns {
        let mut kl = 0.0;
        for a in 0..na {
            let pa = p.pi[(s, a)];
            if pa <= 0.0 {
                continue;
            }
            if q.pi[(s, a)] <= 0.0 {
                return Err(Error::InfiniteDivergence { state: s, action: a });
            }
            kl += pa * (p.log_density[(s, a)] - q.log_density[(s, a)]);
        }
        // Exact KL is nonnegative; clamp roundoff.
        out[s] = kl.max(0.0);
    }
    Ok(out)
}

/// Per-state total variation `sum_a |p - q|`.
pub fn tv_per_state(p: &DMatrix<f64>, q: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(p.nrows(), |s, _| (p.row(s) - q.row(s)).abs().sum())
}

/// Per-state `pi`-average of `f`.
pub fn policy_mean(f: &DMatrix<f64>, pi: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(f.nrows(), |s, _| f.row(s).dot(&pi.row(s)))
}

/// `f - (sum_a f pi)` per state.
pub fn centre(f: &DMatrix<f64>, pi: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = policy_mean(f, pi);
    let mut out = f.clone();
    for (s, mut row) in out.row_iter_mut().enumerate() {
        row.add_scalar_mut(-mean[s]);
    }
    out
}

/// Add a state-only function to every action column.
pub fn add_state_function(z: &DMatrix<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    let mut out = z.clone();
    for (s, mut row) in out.row_iter_mut().enumerate() {
        row.add_scalar_mut(b[s]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(n: usize) -> DVector<f64> {
        DVector::from_element(n, 1.0 / n as f64)
    }

    #[test]
    fn zero_logits_give_mu() {
        let p = LogitPolicy::new(DMatrix::zeros(3, 2), &uniform(2)).unwrap();
        assert!(p.pi().iter().all(|&x| (x - 0.5).abs() < 1e-15));
        assert!(p.log_density().amax() < 1e-15);
    }

    #[test]
    fn two_to_one_ratio() {
        let z = DMatrix::from_row_slice(1, 2, &[2f64.ln(), 0.0]);
        let p = LogitPolicy::new(z, &uniform(2)).unwrap();
        assert!((p.pi()[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.pi()[(0, 1)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p.log_density()[(0, 0)] - (4.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!((p.log_density()[(0, 1)] - (2.0f64 / 3.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let z = DMatrix::from_row_slice(2, 3, &[700.0, -700.0, 0.0, 699.0, 700.0, 700.0]);
        let p = LogitPolicy::new(z, &uniform(3)).unwrap();
        assert!(p.pi().iter().all(|x| x.is_finite()));
        assert!((p.pi()[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((p.pi().row(1).sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_logit_rejected() {
        let z = DMatrix::from_row_slice(1, 2, &[f64::NAN, 0.0]);
        assert!(matches!(LogitPolicy::new(z, &uniform(2)), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn kl_two_point() {
        let mu = uniform(2);
        let p = PolicyDistribution::from_probabilities(DMatrix::from_row_slice(1, 2, &[0.75, 0.25]), &mu, false).unwrap();
        let q = PolicyDistribution::from_probabilities(DMatrix::from_row_slice(1, 2, &[0.5, 0.5]), &mu, false).unwrap();
        let kl = kl_policies(&p, &q, &DVector::from_element(1, 1.0)).unwrap();
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((kl - expected).abs() < 1e-15);
        assert_eq!(kl_policies(&p, &p, &DVector::from_element(1, 1.0)).unwrap(), 0.0);
    }

    #[test]
    fn zero_mass_where_mu_positive_is_domain_error() {
        let mu = uniform(2);
        let pi = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        assert!(matches!(
            PolicyDistribution::from_probabilities(pi.clone(), &mu, false),
            Err(Error::Domain { state: 0, action: 1 })
        ));
        let det = PolicyDistribution::from_probabilities(pi, &mu, true).unwrap();
        let soft = LogitPolicy::uniform_logits(1, &mu).into_distribution();
        assert!(matches!(
            kl_policies(&soft, &det, &DVector::from_element(1, 1.0)),
            Err(Error::InfiniteDivergence { state: 0, action: 1 })
        ));
        assert!((kl_policies(&det, &soft, &DVector::from_element(1, 1.0)).unwrap() - 2f64.ln()).abs() < 1e-15);
    }
}
