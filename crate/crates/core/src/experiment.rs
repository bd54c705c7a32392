//! JSON-configured experiments: run a flow, evaluate its bounds, write artifacts.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bench::{self, GeneratorSpec};
use crate::diagnostics::{self, fmt_f64, BoundReport, BoundSummary};
use crate::error::{Error, Result};
use crate::flow::{self, FlowConfig, FlowMode, FlowTrajectory, ReferenceMeasures};
use crate::mdp::TabularMdp;
use crate::npg::{self, FeatureMap, NpgConfig, NpgTrajectory, Schedule};
use crate::ode::Integrator;
use crate::plot::{log_chart, Series};
use crate::tolerances::Tolerances;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MdpSource {
    /// Path to an MDP JSON file, relative to the config file.
    File(PathBuf),
    Generate(GeneratorSpec),
    /// Unregularised model built from a generator spec (its `tau` is ignored).
    GenerateUnregularised(GeneratorSpec),
    Bandit { n_actions: usize, mu_a0: f64 },
    Hard { n_states: usize, n_actions: usize, gamma: f64, tau: f64, seed: u64 },
}

impl MdpSource {
    pub fn build(&self, base_dir: &Path) -> Result<TabularMdp> {
        match self {
            MdpSource::File(p) => TabularMdp::load(base_dir.join(p)),
            MdpSource::Generate(spec) => bench::generate_mdp(spec),
            MdpSource::GenerateUnregularised(spec) => bench::generate_unregularised_mdp(spec),
            MdpSource::Bandit { n_actions, mu_a0 } => bench::bandit(*n_actions, *mu_a0),
            MdpSource::Hard { n_states, n_actions, gamma, tau, seed } => {
                bench::generate_hard_mdp(*n_states, *n_actions, *gamma, *tau, *seed)
            }
        }
    }
}

/// Initial logits (flows) or parameters (NPG).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    #[default]
    Zero,
    /// Entries uniform in `[-scale, scale]`.
    Random { scale: f64, seed: u64 },
    /// `-magnitude` on the cheapest action of each state, zero elsewhere (flows only).
    Adversarial { magnitude: f64 },
    /// Explicit logits `[s][a]`, or a single row holding the parameter vector for NPG.
    Values { values: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureSpec {
    OneHot,
    Constant { value: Vec<f64> },
    Random { dim: usize, scale: f64, seed: u64 },
}

impl FeatureSpec {
    pub fn build(&self, n_states: usize, n_actions: usize) -> Result<FeatureMap> {
        match self {
            FeatureSpec::OneHot => Ok(FeatureMap::one_hot(n_states, n_actions)),
            FeatureSpec::Constant { value } => FeatureMap::constant(n_states, n_actions, value),
            FeatureSpec::Random { dim, scale, seed } => Ok(FeatureMap::random(n_states, n_actions, *dim, *scale, *seed)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NpgSpec {
    pub t_end: f64,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub integrator: Integrator,
    #[serde(default = "one")]
    pub snapshot_every: usize,
    #[serde(default)]
    pub schedule: Schedule,
    pub features: FeatureSpec,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlowSpec {
    Flow(FlowConfig),
    Npg(NpgSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diagnostic {
    ExponentialConvergence,
    Monotonicity,
    KlOde,
    Stability,
    UnregularisedRate,
    BanditClosedForm,
    PrimalEquivalence,
    NpgBound,
    NpgExactTracking,
}

impl Diagnostic {
    /// Plain-language name of the mathematical result the check certifies.
    pub fn result(&self) -> &'static str {
        match self {
            Diagnostic::ExponentialConvergence => "exponential convergence of the regularised flow (value and policy)",
            Diagnostic::Monotonicity => "values decrease along the exact flow",
            Diagnostic::KlOde => "evolution equation of the KL divergence to the optimum",
            Diagnostic::Stability => "stability of the flow under Q-function errors",
            Diagnostic::UnregularisedRate => "polynomial rate of the unregularised flow",
            Diagnostic::BanditClosedForm => "closed-form bandit trajectory of the unregularised flow",
            Diagnostic::PrimalEquivalence => "equivalence of the mirror-descent and Fisher-Rao flows",
            Diagnostic::NpgBound => "performance bound of the approximate natural policy gradient flow",
            Diagnostic::NpgExactTracking => "log-linear NPG with tabular features reproduces the exact flow",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OutputFormat {
    #[default]
    #[serde(rename = "csv")]
    Csv,
    #[serde(rename = "csv+plot")]
    CsvPlot,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub mdp_source: MdpSource,
    pub flow: FlowSpec,
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default)]
    pub diagnostics: Vec<Diagnostic>,
    /// Multiplies every bound's right-hand side; anything but 1 is a negative control.
    #[serde(default = "unit")]
    pub bound_scale: f64,
    /// Output directory relative to the run directory; defaults to `name`.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub output_format: OutputFormat,
    /// Report whether `e^{-tau t_end} KL_0` fell below this value.
    #[serde(default)]
    pub target_kl_envelope: Option<f64>,
    /// Reference state distribution for the stability estimate (default `rho`).
    #[serde(default)]
    pub rho_ref: Option<Vec<f64>>,
    /// Reference policy `[s][a]` for the stability estimate (default `mu`).
    #[serde(default)]
    pub pi_ref: Option<Vec<Vec<f64>>>,
}

fn unit() -> f64 {
    1.0
}

/// A config file holds one experiment or `{"experiments": [...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ConfigFile {
    Batch { experiments: Vec<ExperimentConfig> },
    Single(Box<ExperimentConfig>),
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Vec<ExperimentConfig>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let parsed: ConfigFile = serde_json::from_str(&text).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let list = match parsed {
            ConfigFile::Batch { experiments } => experiments,
            ConfigFile::Single(c) => vec![*c],
        };
        let mut names = std::collections::HashSet::new();
        for c in &list {
            if !names.insert(c.output_dir.clone().unwrap_or_else(|| PathBuf::from(&c.name))) {
                return Err(Error::Config {
                    path: path.to_path_buf(),
                    detail: format!("experiment output '{}' is used twice", c.name),
                });
            }
        }
        Ok(list)
    }
}

/// Scalar pass/fail check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
}

impl CheckOutcome {
    fn at_most(name: &str, measured: f64, threshold: f64) -> Self {
        CheckOutcome { name: name.into(), passed: measured <= threshold, measured, threshold }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEntry {
    pub result: String,
    pub checks: Vec<String>,
}

/// Everything written to `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub name: String,
    pub passed: bool,
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub tau: f64,
    pub bound_scale: f64,
    pub bounds: Vec<BoundSummary>,
    pub checks: Vec<CheckOutcome>,
    pub traceability: Vec<TraceEntry>,
    pub kl0: f64,
    pub kappa: Option<f64>,
    pub kl_envelope_at_t_end: Option<f64>,
    pub target_kl_envelope: Option<f64>,
    pub target_reached: Option<bool>,
    pub runtime_seconds: f64,
    pub tolerances: Tolerances,
}

pub struct ExperimentOutcome {
    pub summary: ExperimentSummary,
    pub dir: PathBuf,
}

fn initial_logits(init: &InitSpec, mdp: &TabularMdp) -> Result<DMatrix<f64>> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    match init {
        InitSpec::Zero => Ok(DMatrix::zeros(ns, na)),
        InitSpec::Random { scale, seed } => Ok(bench::random_logits(&mut bench::rng(*seed), ns, na, *scale)),
        InitSpec::Adversarial { magnitude } => {
            let mut z = DMatrix::zeros(ns, na);
            for s in 0..ns {
                let best = (0..na).min_by(|&a, &b| mdp.cost()[(s, a)].total_cmp(&mdp.cost()[(s, b)])).unwrap_or(0);
                z[(s, best)] = -magnitude;
            }
            Ok(z)
        }
        InitSpec::Values { values } => {
            if values.len() != ns || values.iter().any(|r| r.len() != na) {
                return Err(Error::InvalidInput(format!("initial logits must be {ns}x{na}")));
            }
            Ok(DMatrix::from_fn(ns, na, |s, a| values[s][a]))
        }
    }
}

fn initial_theta(init: &InitSpec, dim: usize) -> Result<DVector<f64>> {
    match init {
        InitSpec::Zero => Ok(DVector::zeros(dim)),
        InitSpec::Random { scale, seed } => {
            let mut rng = bench::rng(*seed);
            Ok(DVector::from_fn(dim, |_, _| rng.random_range(-*scale..=*scale)))
        }
        InitSpec::Values { values } if values.len() == 1 && values[0].len() == dim => {
            Ok(DVector::from_vec(values[0].clone()))
        }
        _ => Err(Error::InvalidInput(format!("NPG initialisation must be zero, random or one row of {dim} values"))),
    }
}

fn reference(cfg: &ExperimentConfig, mdp: &TabularMdp) -> Result<ReferenceMeasures> {
    let mut r = ReferenceMeasures::default_for(mdp);
    if let Some(rho) = &cfg.rho_ref {
        if rho.len() != mdp.n_states() {
            return Err(Error::InvalidInput("rho_ref has the wrong length".into()));
        }
        r.rho_ref = DVector::from_vec(rho.clone());
    }
    if let Some(p) = &cfg.pi_ref {
        if p.len() != mdp.n_states() || p.iter().any(|row| row.len() != mdp.n_actions()) {
            return Err(Error::InvalidInput("pi_ref has the wrong shape".into()));
        }
        r.pi_ref = DMatrix::from_fn(mdp.n_states(), mdp.n_actions(), |s, a| p[s][a]);
    }
    Ok(r)
}

fn scaled(report: BoundReport, scale: f64) -> BoundReport {
    if scale == 1.0 {
        return report;
    }
    let rhs = report.rhs.iter().map(|r| r * scale).collect();
    BoundReport::new(report.name, report.times, report.lhs, rhs)
}

struct Collected {
    bounds: Vec<BoundReport>,
    checks: Vec<CheckOutcome>,
    trace: Vec<TraceEntry>,
}

impl Collected {
    fn new() -> Self {
        Collected { bounds: vec![], checks: vec![], trace: vec![] }
    }

    fn trace(&mut self, d: Diagnostic, names: Vec<String>) {
        self.trace.push(TraceEntry { result: d.result().into(), checks: names });
    }
}

/// Run one experiment and write its artifacts under `out_root`.
pub fn run_experiment(cfg: &ExperimentConfig, base_dir: &Path, out_root: &Path) -> Result<ExperimentOutcome> {
    let start = Instant::now();
    let mdp = cfg.mdp_source.build(base_dir)?;
    let dir = out_root.join(cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from(&cfg.name)));
    std::fs::create_dir_all(&dir)?;
    let mut col = Collected::new();
    let (kl0, kappa, envelope, t_end) = match &cfg.flow {
        FlowSpec::Flow(fc) => {
            let mut fc = fc.clone();
            fc.reference = Some(reference(cfg, &mdp)?);
            let tr = run_flow(cfg, &fc, &mdp, &mut col)?;
            write_flow_csv(&tr, &dir.join("trajectory.csv"), cfg.bound_scale)?;
            if cfg.output_format == OutputFormat::CsvPlot {
                let rhs: Vec<f64> = tr.bound_values.iter().map(|b| b * cfg.bound_scale).collect();
                let svg = log_chart(
                    &format!("{}: value gap and KL", cfg.name),
                    "t",
                    &[
                        Series { label: "value gap", colour: "#1f77b4", dashed: false, x: &tr.times, y: &tr.value_gaps },
                        Series { label: "KL to optimum", colour: "#2ca02c", dashed: false, x: &tr.times, y: &tr.kl_to_opt },
                        Series { label: "bound", colour: "#d62728", dashed: true, x: &tr.times, y: &rhs },
                    ],
                );
                std::fs::write(dir.join("trajectory.svg"), svg)?;
            }
            let kappa = tr.kappa.is_finite().then_some(tr.kappa);
            (tr.kl0, kappa, (fc.mode == FlowMode::Regularised).then(|| (-mdp.tau() * fc.t_end).exp() * tr.kl0), fc.t_end)
        }
        FlowSpec::Npg(spec) => {
            let tr = run_npg(cfg, spec, &mdp, &mut col)?;
            write_npg_csv(&tr, &dir.join("trajectory.csv"), cfg.bound_scale)?;
            if cfg.output_format == OutputFormat::CsvPlot {
                let rhs: Vec<f64> = tr.bound_values.iter().map(|b| b * cfg.bound_scale).collect();
                let svg = log_chart(
                    &format!("{}: NPG value gap", cfg.name),
                    "t",
                    &[
                        Series { label: "value gap", colour: "#1f77b4", dashed: false, x: &tr.times, y: &tr.value_gaps },
                        Series { label: "approximation error", colour: "#9467bd", dashed: false, x: &tr.times, y: &tr.approx_error_l1 },
                        Series { label: "bound", colour: "#d62728", dashed: true, x: &tr.times, y: &rhs },
                    ],
                );
                std::fs::write(dir.join("trajectory.svg"), svg)?;
            }
            (tr.kl0, Some(tr.kappa), None, spec.t_end)
        }
    };
    let _ = t_end;
    for b in &col.bounds {
        b.write_csv(dir.join(format!("bound_{}.csv", b.name)))?;
    }
    let passed = col.bounds.iter().all(BoundReport::all_hold) && col.checks.iter().all(|c| c.passed);
    let summary = ExperimentSummary {
        name: cfg.name.clone(),
        passed,
        n_states: mdp.n_states(),
        n_actions: mdp.n_actions(),
        gamma: mdp.gamma(),
        tau: mdp.tau(),
        bound_scale: cfg.bound_scale,
        bounds: col.bounds.iter().map(BoundReport::summary).collect(),
        checks: col.checks,
        traceability: col.trace,
        kl0,
        kappa,
        kl_envelope_at_t_end: envelope,
        target_kl_envelope: cfg.target_kl_envelope,
        target_reached: match (envelope, cfg.target_kl_envelope) {
            (Some(e), Some(t)) => Some(e <= t),
            _ => None,
        },
        runtime_seconds: start.elapsed().as_secs_f64(),
        tolerances: *Tolerances::global(),
    };
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(ExperimentOutcome { summary, dir })
}

fn run_flow(cfg: &ExperimentConfig, fc: &FlowConfig, mdp: &TabularMdp, col: &mut Collected) -> Result<FlowTrajectory> {
    let z0 = initial_logits(&cfg.init, mdp)?;
    let scale = cfg.bound_scale;
    let tr = match fc.mode {
        FlowMode::Regularised => flow::integrate_mirror_flow(mdp, &z0, fc)?,
        FlowMode::Unregularised => flow::integrate_unregularised_flow(mdp, &z0, fc)?,
        FlowMode::Approximate => {
            let spec = fc.perturbation.ok_or_else(|| {
                Error::InvalidInput("approximate mode needs a perturbation spec".into())
            })?;
            let opt = flow::reference_optimum(mdp)?;
            flow::integrate_perturbed_flow(mdp, &z0, fc, &opt, &spec)?
        }
    };
    for &d in &cfg.diagnostics {
        match d {
            Diagnostic::ExponentialConvergence => {
                require(fc.mode == FlowMode::Regularised, d)?;
                let (v, p) = diagnostics::check_linear_convergence(&tr, scale);
                col.trace(d, vec![v.name.clone(), p.name.clone()]);
                col.bounds.push(v);
                col.bounds.push(p);
            }
            Diagnostic::Monotonicity => {
                require(fc.mode != FlowMode::Approximate, d)?;
                let c = CheckOutcome::at_most("monotonicity", diagnostics::max_value_increase(&tr), Tolerances::global().monotonicity);
                col.trace(d, vec![c.name.clone()]);
                col.checks.push(c);
            }
            Diagnostic::KlOde => {
                require(fc.mode == FlowMode::Regularised, d)?;
                let res = tr.kl_ode_residual();
                let h = tr.times.get(1).map_or(0.0, |t| t - tr.times[0]);
                let c = CheckOutcome::at_most("kl_ode_residual", res.iter().copied().fold(0.0, f64::max), 1e-6 + kl_ode_allowance(&tr, h));
                col.trace(d, vec![c.name.clone()]);
                col.checks.push(c);
            }
            Diagnostic::Stability => {
                require(fc.mode == FlowMode::Approximate, d)?;
                let a = scaled(diagnostics::check_stability_bound(&tr, tr.kappa, false), scale);
                let b = scaled(diagnostics::check_stability_bound(&tr, tr.kappa, true), scale);
                col.trace(d, vec![a.name.clone(), b.name.clone()]);
                col.bounds.push(a);
                col.bounds.push(b);
            }
            Diagnostic::UnregularisedRate => {
                require(fc.mode == FlowMode::Unregularised, d)?;
                let r = scaled(diagnostics::check_unregularised_rate(&tr), scale);
                col.trace(d, vec![r.name.clone()]);
                col.bounds.push(r);
            }
            Diagnostic::BanditClosedForm => {
                let MdpSource::Bandit { mu_a0, .. } = cfg.mdp_source else {
                    return Err(Error::InvalidInput("bandit_closed_form needs a bandit source".into()));
                };
                let err = tr
                    .times
                    .iter()
                    .zip(&tr.values)
                    .map(|(&t, v)| (v[0] - bandit_value(mu_a0, t)).abs())
                    .fold(0.0, f64::max);
                let mut names = vec!["bandit_closed_form".to_string()];
                col.checks.push(CheckOutcome::at_most("bandit_closed_form", err, 1e-6));
                if mu_a0 == 0.0 {
                    let lowest = tr.values.iter().map(|v| v[0]).fold(f64::INFINITY, f64::min);
                    col.checks.push(CheckOutcome::at_most("bandit_no_convergence", -lowest, 1e-6));
                    names.push("bandit_no_convergence".into());
                }
                col.trace(d, names);
            }
            Diagnostic::PrimalEquivalence => {
                require(fc.mode == FlowMode::Regularised, d)?;
                let pi0 = mdp.policy_from_logits(&z0)?;
                let primal = flow::integrate_fisher_rao_flow(mdp, &pi0, fc)?;
                let dev = tr
                    .pi_snapshots
                    .iter()
                    .zip(&primal.pi_snapshots)
                    .map(|(a, b)| (a - b).amax())
                    .fold(0.0, f64::max);
                let c = CheckOutcome::at_most("primal_equivalence", dev, 1e-6);
                col.trace(d, vec![c.name.clone()]);
                col.checks.push(c);
            }
            Diagnostic::NpgBound | Diagnostic::NpgExactTracking => {
                return Err(Error::InvalidInput(format!("{d:?} needs an NPG flow")));
            }
        }
    }
    Ok(tr)
}

/// Allowance for the central-difference error in the KL evolution residual:
/// `h^2 / 6 * max |y'''|`, with `y'''` estimated from third differences.
pub fn kl_ode_allowance(tr: &FlowTrajectory, h: f64) -> f64 {
    let y = &tr.kl_to_opt;
    if y.len() < 4 || h <= 0.0 {
        return 0.0;
    }
    let third = y
        .windows(4)
        .map(|w| ((w[3] - 3.0 * w[2] + 3.0 * w[1] - w[0]) / h.powi(3)).abs())
        .fold(0.0, f64::max);
    // One-sided end-point formulas carry h^2 / 3; use the larger constant throughout.
    2.0 * h * h / 3.0 * third
}

/// Value of the unregularised bandit flow started at `mu`.
pub fn bandit_value(mu_a0: f64, t: f64) -> f64 {
    if mu_a0 == 0.0 {
        return 0.0;
    }
    -mu_a0 / (mu_a0 + (-t).exp() * (1.0 - mu_a0))
}

fn require(ok: bool, d: Diagnostic) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("diagnostic {d:?} does not apply to this flow mode")))
    }
}

fn run_npg(cfg: &ExperimentConfig, spec: &NpgSpec, mdp: &TabularMdp, col: &mut Collected) -> Result<NpgTrajectory> {
    let features = spec.features.build(mdp.n_states(), mdp.n_actions())?;
    let theta0 = initial_theta(&cfg.init, features.dim())?;
    let mut nc = NpgConfig::new(spec.t_end, spec.schedule);
    nc.dt = spec.dt;
    nc.integrator = spec.integrator;
    nc.snapshot_every = spec.snapshot_every;
    let mut reference = reference(cfg, mdp)?;
    // The NPG estimate is stated for rho_ref = rho.
    reference.rho_ref = mdp.rho().clone();
    nc.reference = Some(reference);
    let opt = flow::reference_optimum(mdp)?;
    let tr = npg::integrate_npg_flow_with(mdp, &features, &theta0, &nc, &opt)?;
    for &d in &cfg.diagnostics {
        match d {
            Diagnostic::NpgBound => {
                let r = BoundReport::new(
                    "npg_bound",
                    tr.times.clone(),
                    tr.running_min_gap(),
                    tr.bound_values.iter().map(|b| b * cfg.bound_scale).collect(),
                );
                col.trace(d, vec![r.name.clone()]);
                col.bounds.push(r);
            }
            Diagnostic::NpgExactTracking => {
                if !matches!(spec.features, FeatureSpec::OneHot) {
                    return Err(Error::InvalidInput("exact tracking needs one-hot features".into()));
                }
                let mut fc = FlowConfig::new(spec.t_end).with_snapshot_every(spec.snapshot_every).with_integrator(spec.integrator);
                fc.dt = Some(nc.dt.unwrap_or_else(|| 0.01f64.min(0.1 / mdp.tau())));
                let exact = flow::integrate_mirror_flow_with(mdp, &features.logits(&theta0), &fc, &opt)?;
                let dev = tr
                    .pi_snapshots
                    .iter()
                    .zip(&exact.pi_snapshots)
                    .map(|(a, b)| (a - b).amax())
                    .fold(0.0, f64::max);
                let c = CheckOutcome::at_most("npg_exact_tracking", dev, 1e-5);
                col.trace(d, vec![c.name.clone()]);
                col.checks.push(c);
            }
            other => return Err(Error::InvalidInput(format!("{other:?} does not apply to an NPG flow"))),
        }
    }
    Ok(tr)
}

/// Columns `t, value_gap, kl_to_opt, bound_rhs, bound_holds, norm_Z, residual_kl_ode`.
pub fn write_flow_csv(tr: &FlowTrajectory, path: &Path, scale: f64) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "value_gap", "kl_to_opt", "bound_rhs", "bound_holds", "norm_Z", "residual_kl_ode"])?;
    let residual = if tr.mode == FlowMode::Regularised { tr.kl_ode_residual() } else { vec![f64::NAN; tr.len()] };
    let lhs = if tr.mode == FlowMode::Approximate { tr.running_min_gap() } else { tr.value_gaps.clone() };
    let tol = Tolerances::global();
    for k in 0..tr.len() {
        let rhs = tr.bound_values[k] * scale;
        w.write_record([
            fmt_f64(tr.times[k]),
            fmt_f64(tr.value_gaps[k]),
            fmt_f64(tr.kl_to_opt[k]),
            fmt_f64(rhs),
            tol.bound_holds(lhs[k], rhs).to_string(),
            fmt_f64(tr.norm_z[k]),
            fmt_f64(residual[k]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Columns `t, value_gap, approx_error_L1, bound_rhs, bound_holds, norm_theta, norm_w`.
pub fn write_npg_csv(tr: &NpgTrajectory, path: &Path, scale: f64) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "value_gap", "approx_error_L1", "bound_rhs", "bound_holds", "norm_theta", "norm_w"])?;
    let lhs = tr.running_min_gap();
    let tol = Tolerances::global();
    for k in 0..tr.times.len() {
        let rhs = tr.bound_values[k] * scale;
        w.write_record([
            fmt_f64(tr.times[k]),
            fmt_f64(tr.value_gaps[k]),
            fmt_f64(tr.approx_error_l1[k]),
            fmt_f64(rhs),
            tol.bound_holds(lhs[k], rhs).to_string(),
            fmt_f64(tr.norm_theta[k]),
            fmt_f64(tr.norm_w[k]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Run a batch on a pool of `jobs` threads; results keep the config order.
pub fn run_batch(
    configs: &[ExperimentConfig],
    base_dir: &Path,
    out_root: &Path,
    jobs: usize,
) -> Result<Vec<Result<ExperimentOutcome>>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Internal(e.to_string()))?;
    Ok(pool.install(|| configs.par_iter().map(|c| run_experiment(c, base_dir, out_root)).collect()))
}

/// Summary line per experiment for terminal output.
pub fn describe(outcome: &ExperimentOutcome) -> String {
    let s = &outcome.summary;
    let failed: Vec<String> = s
        .bounds
        .iter()
        .filter(|b| !b.all_hold)
        .map(|b| format!("{} ({} violations)", b.name, b.n_violations))
        .chain(s.checks.iter().filter(|c| !c.passed).map(|c| format!("{} ({:e} > {:e})", c.name, c.measured, c.threshold)))
        .collect();
    let status = if s.passed { "PASS".to_string() } else { format!("FAIL: {}", failed.join(", ")) };
    let mut line = format!("{:<32} {status}  [{:.2}s] -> {}", s.name, s.runtime_seconds, outcome.dir.display());
    if let Some(reached) = s.target_reached {
        line.push_str(&format!("  target envelope {}", if reached { "reached" } else { "not reached" }));
    }
    line
}

/// Minimal config for documentation and tests.
pub fn example_config() -> serde_json::Value {
    json!({
        "name": "mirror_flow",
        "mdp_source": {"generate": {"n_states": 4, "n_actions": 3, "seed": 1, "gamma": 0.9, "tau": 1.0}},
        "flow": {"kind": "flow", "t_end": 5.0, "dt": 0.01, "snapshot_every": 10},
        "diagnostics": ["exponential_convergence", "monotonicity", "kl_ode"],
        "output_format": "csv+plot"
    })
}
