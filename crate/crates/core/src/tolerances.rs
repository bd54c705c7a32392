//! Numerical tolerances shared across the crate.
//!
//! Defaults can be overridden at process start through the `FRMDP_TOL_OVERRIDE`
//! environment variable, which holds a JSON object mapping field names to
//! values, e.g. `{"bound_rel": 1e-7}`. Unknown keys are rejected.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ENV_VAR: &str = "FRMDP_TOL_OVERRIDE";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Row sums of P, mu, rho and constructed policies.
    pub construction: f64,
    /// Round trips such as `exp(log_density) * mu == pi`.
    pub roundtrip: f64,
    /// Relative slack in `lhs <= rhs + bound_rel * (1 + |rhs|)`.
    pub bound_rel: f64,
    /// Per-state slack when checking that values decrease along a flow.
    pub monotonicity: f64,
    /// Slack on the a-priori growth bound of the dual variable.
    pub apriori_slack: f64,
    /// Radius accuracy of the ball-constrained ridge solve.
    pub radius: f64,
    /// Target accuracy of the optimal value used by flow diagnostics.
    pub optimal_solve: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            construction: 1e-12,
            roundtrip: 1e-10,
            bound_rel: 1e-8,
            monotonicity: 1e-8,
            apriori_slack: 1e-6,
            radius: 1e-12,
            optimal_solve: 1e-10,
        }
    }
}

impl Tolerances {
    /// Parse an override map on top of the defaults.
    pub fn from_override_json(json: &str) -> Result<Self> {
        let tol: Tolerances =
            serde_json::from_str(json).map_err(|e| Error::Tolerance(e.to_string()))?;
        let fields = [
            tol.construction,
            tol.roundtrip,
            tol.bound_rel,
            tol.monotonicity,
            tol.apriori_slack,
            tol.radius,
            tol.optimal_solve,
        ];
        if fields.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::Tolerance("all tolerances must be finite and positive".into()));
        }
        Ok(tol)
    }

    /// Defaults with `FRMDP_TOL_OVERRIDE` applied, if set.
    pub fn from_env() -> Result<Self> {
        match std::env::var(ENV_VAR) {
            Ok(json) if !json.trim().is_empty() => Self::from_override_json(&json),
            _ => Ok(Self::default()),
        }
    }

    /// Process-wide tolerances, read from the environment once.
    ///
    /// A malformed override falls back to the defaults; the CLI validates the
    /// variable eagerly with [`Tolerances::from_env`] so the user sees the error.
    pub fn global() -> &'static Tolerances {
        static GLOBAL: OnceLock<Tolerances> = OnceLock::new();
        GLOBAL.get_or_init(|| Self::from_env().unwrap_or_default())
    }

    /// `lhs <= rhs` up to the relative bound slack.
    pub fn bound_holds(&self, lhs: f64, rhs: f64) -> bool {
        if rhs.is_infinite() && rhs > 0.0 {
            return true;
        }
        lhs <= rhs + self.bound_rel * (1.0 + rhs.abs())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_replaces_only_named_fields() {
        let tol = Tolerances::from_override_json(r#"{"bound_rel": 1e-6}"#).unwrap();
        assert_eq!(tol.bound_rel, 1e-6);
        assert_eq!(tol.construction, Tolerances::default().construction);
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(Tolerances::from_override_json(r#"{"nope": 1.0}"#).is_err());
        assert!(Tolerances::from_override_json(r#"{"radius": -1.0}"#).is_err());
    }

    #[test]
    fn infinite_rhs_always_holds() {
        let tol = Tolerances::default();
        assert!(tol.bound_holds(1e300, f64::INFINITY));
        assert!(tol.bound_holds(1.0 + 1e-9, 1.0));
        assert!(!tol.bound_holds(1.0 + 1e-6, 1.0));
    }
}
