//! Configuration-driven runs that write reproducible artifact directories.
//!
//! Every run writes `manifest.json`, also when it fails. Exit codes: 0 for
//! success, 2 when the mathematics flags a problem (non-convergence, a failed
//! assumption, a violated bound), 1 for invalid input or internal errors.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{error, info};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha1::{Digest, Sha1};

use crate::asymptotics::{
    epsilon_gap, gaps_monotone, rate_applicability, rate_sweep, truncation_profile, SweepConfig,
};
use crate::bsde::{BsdeSolver, TruncationCertificate};
use crate::equilibrium::{EquilibriumProblem, EquilibriumReport, PicardConfig};
use crate::error::{MfgError, Result};
use crate::exec;
use crate::game::assumptions::{check_standing_assumptions, SamplerBudget, Status};
use crate::game::inline::GameDescription;
use crate::game::{ActionKind, GameSpec};
use crate::oracle::{stationary_density_quadrature, DiscreteOracle};
use crate::paths::{NoiseKind, PathEnsemble};
use crate::stationary::{
    check_drift_condition, solve_invariant_mfg, solve_stationary_mfg, DriftProbe, InvariantConfig,
    StationaryMfgConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Solve,
    FiniteSolve,
    Sweep,
    Stationary,
    Invariant,
    Check,
    Oracle,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::Solve,
        Mode::FiniteSolve,
        Mode::Sweep,
        Mode::Stationary,
        Mode::Invariant,
        Mode::Check,
        Mode::Oracle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Solve => "solve",
            Mode::FiniteSolve => "finite-solve",
            Mode::Sweep => "sweep",
            Mode::Stationary => "stationary",
            Mode::Invariant => "invariant",
            Mode::Check => "check",
            Mode::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = MfgError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| MfgError::Config {
                path: "mode".into(),
                message: format!("unknown mode `{s}`"),
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub steps: usize,
    pub dt: f64,
    /// Quadrature half-width for the stationary density table.
    pub radius: f64,
    pub cells: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            steps: 2,
            dt: 0.5,
            radius: 8.0,
            cells: 4000,
        }
    }
}

/// One experiment. Only `game` and `seed` are mandatory.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Option<Mode>,
    /// Registry name, `{"preset": name, ...overrides}`, or a full description.
    pub game: Value,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Ensemble size `N`.
    pub paths: usize,
    pub dt: f64,
    /// Steps `K` of a finite-horizon solve; defaults to `t_max/dt`.
    pub steps: Option<usize>,
    pub t_max: f64,
    pub noise: NoiseKind,
    /// Truncation tolerance of the infinite-horizon solves.
    pub tol: f64,
    pub tol_fp: f64,
    pub theta: f64,
    pub max_iter: usize,
    pub adaptive: bool,
    /// Overrides the per-coordinate resolution of a box action set.
    pub n_actions: Option<usize>,
    pub bins: usize,
    pub horizons: Vec<f64>,
    pub slices: Vec<f64>,
    pub reference_horizon: f64,
    pub warm_start: bool,
    pub check_samples: usize,
    pub bootstrap: usize,
    pub stationary: StationaryMfgConfig,
    pub invariant: InvariantSettings,
    pub oracle: OracleConfig,
}

/// Invariance check settings on top of [`ExperimentConfig::stationary`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvariantSettings {
    pub t_check: f64,
    pub record_dt: f64,
    pub tol: f64,
}

impl Default for InvariantSettings {
    fn default() -> Self {
        let d = InvariantConfig::default();
        Self {
            t_check: d.t_check,
            record_dt: d.record_dt,
            tol: d.tol,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let picard = PicardConfig::default();
        Self {
            mode: None,
            game: Value::Null,
            seed: None,
            out: None,
            paths: 10_000,
            dt: 0.05,
            steps: None,
            t_max: 10.0,
            noise: NoiseKind::Gaussian,
            tol: 1e-3,
            tol_fp: picard.tol,
            theta: picard.theta,
            max_iter: picard.max_iter,
            adaptive: picard.adaptive,
            n_actions: None,
            bins: crate::metrics::DEFAULT_BINS,
            horizons: vec![4.0, 6.0, 8.0, 10.0],
            slices: vec![1.0, 2.0],
            reference_horizon: 16.0,
            warm_start: false,
            check_samples: 500,
            bootstrap: 32,
            stationary: StationaryMfgConfig::default(),
            invariant: InvariantSettings::default(),
            oracle: OracleConfig::default(),
        }
    }
}

fn config_error(path: &str, message: impl Into<String>) -> MfgError {
    MfgError::Config {
        path: path.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// Parses JSON; errors carry the offending field path.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_error(&path, e.into_inner().to_string())
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn picard(&self) -> PicardConfig {
        PicardConfig {
            theta: self.theta,
            max_iter: self.max_iter,
            tol: self.tol_fp,
            adaptive: self.adaptive,
            min_theta: PicardConfig::default().min_theta.min(self.theta),
        }
    }

    /// Checks the fields the given mode needs.
    pub fn validate(&self, mode: Mode) -> Result<()> {
        if self.game.is_null() {
            return Err(config_error("game", "missing game"));
        }
        if self.seed.is_none() {
            return Err(config_error("seed", "missing seed"));
        }
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(config_error(name, "must be positive"))
            }
        };
        positive("dt", self.dt)?;
        positive("tol", self.tol)?;
        positive("tol_fp", self.tol_fp)?;
        if self.paths < 2 {
            return Err(config_error("paths", "need at least 2 paths"));
        }
        if self.bins == 0 {
            return Err(config_error("bins", "must be positive"));
        }
        match mode {
            Mode::FiniteSolve if self.steps.is_none() => positive("t_max", self.t_max)?,
            Mode::Sweep => {
                if self.horizons.len() < 2 {
                    return Err(config_error("horizons", "need at least two horizons"));
                }
                for (i, h) in self.horizons.iter().enumerate() {
                    positive(&format!("horizons[{i}]"), *h)?;
                }
                if self.slices.is_empty() {
                    return Err(config_error("slices", "need at least one slice"));
                }
                positive("reference_horizon", self.reference_horizon)?;
            }
            Mode::Invariant => {
                positive("invariant.t_check", self.invariant.t_check)?;
                positive("invariant.record_dt", self.invariant.record_dt)?;
            }
            _ => {}
        }
        Ok(())
    }

    /// Resolves the game entry, applying `n_actions`.
    pub fn game_description(&self) -> Result<GameDescription> {
        let mut desc = GameDescription::from_json(&self.game)?;
        if let Some(n) = self.n_actions {
            match &mut desc.actions {
                ActionKind::Box { resolution, .. } => *resolution = n,
                ActionKind::Atoms { .. } => {
                    return Err(config_error("n_actions", "the game has an explicit action list"))
                }
            }
        }
        Ok(desc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Flagged,
    Error,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Ok => 0,
            RunStatus::Flagged => 2,
            RunStatus::Error => 1,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub mode: String,
    pub game: Option<String>,
    pub seed: Option<u64>,
    pub status: RunStatus,
    pub exit_code: i32,
    pub flags: Vec<String>,
    pub error: Option<String>,
    pub config: Value,
    /// Git blob hash of the canonical config echo.
    pub config_hash: String,
    /// Output file name to git blob hash.
    pub outputs: BTreeMap<String, String>,
    pub wall_time_s: f64,
    pub workers: usize,
    pub summary: Value,
}

/// `sha1("blob <len>\0" ‖ bytes)`, as `git hash-object` computes it.
pub fn git_blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

struct Artifacts<'a> {
    dir: &'a Path,
    outputs: BTreeMap<String, String>,
}

impl Artifacts<'_> {
    fn write(&mut self, name: &str, bytes: Vec<u8>) -> Result<()> {
        fs::write(self.dir.join(name), &bytes)?;
        self.outputs.insert(name.to_string(), git_blob_hash(&bytes));
        Ok(())
    }

    fn csv(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, buf)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, bytes)
    }
}

struct ModeOutput {
    flags: Vec<String>,
    summary: Value,
}

/// Runs `mode` and writes artifacts plus `manifest.json` into `out`.
pub fn run(mode: Mode, config: &ExperimentConfig, out: &Path) -> Manifest {
    let start = Instant::now();
    let mut artifacts = Artifacts {
        dir: out,
        outputs: BTreeMap::new(),
    };
    let echo = serde_json::to_value(config).unwrap_or(Value::Null);
    let echo_bytes = serde_json::to_vec(&echo).unwrap_or_default();
    let mut game_name = None;
    let result = fs::create_dir_all(out)
        .map_err(MfgError::from)
        .and_then(|_| config.validate(mode))
        .and_then(|_| config.game_description())
        .and_then(|desc| {
            game_name = Some(desc.name.clone());
            let spec = desc.build()?;
            dispatch(mode, config, &spec, &mut artifacts)
        });
    let (status, flags, err, summary) = match result {
        Ok(o) if o.flags.is_empty() => (RunStatus::Ok, o.flags, None, o.summary),
        Ok(o) => (RunStatus::Flagged, o.flags, None, o.summary),
        Err(e) => {
            error!("{e}");
            (RunStatus::Error, Vec::new(), Some(e.to_string()), Value::Null)
        }
    };
    let manifest = Manifest {
        tool: "mfg-horizon",
        version: env!("CARGO_PKG_VERSION"),
        mode: mode.to_string(),
        game: game_name,
        seed: config.seed,
        status,
        exit_code: status.exit_code(),
        flags,
        error: err,
        config: echo,
        config_hash: git_blob_hash(&echo_bytes),
        outputs: artifacts.outputs,
        wall_time_s: start.elapsed().as_secs_f64(),
        workers: exec::workers(),
        summary,
    };
    if fs::create_dir_all(out).is_ok() {
        if let Ok(mut bytes) = serde_json::to_vec_pretty(&manifest) {
            bytes.push(b'\n');
            if let Err(e) = fs::write(out.join("manifest.json"), bytes) {
                error!("cannot write manifest: {e}");
            }
        }
    }
    manifest
}

/// Manifest for a run that failed before a config existed.
pub fn write_error_manifest(mode: &str, out: &Path, error: &MfgError) -> Manifest {
    let manifest = Manifest {
        tool: "mfg-horizon",
        version: env!("CARGO_PKG_VERSION"),
        mode: mode.to_string(),
        game: None,
        seed: None,
        status: RunStatus::Error,
        exit_code: 1,
        flags: Vec::new(),
        error: Some(error.to_string()),
        config: Value::Null,
        config_hash: git_blob_hash(b"null"),
        outputs: BTreeMap::new(),
        wall_time_s: 0.0,
        workers: exec::workers(),
        summary: Value::Null,
    };
    if fs::create_dir_all(out).is_ok() {
        if let Ok(bytes) = serde_json::to_vec_pretty(&manifest) {
            let _ = fs::write(out.join("manifest.json"), bytes);
        }
    }
    manifest
}

fn dispatch(mode: Mode, config: &ExperimentConfig, spec: &GameSpec, art: &mut Artifacts<'_>) -> Result<ModeOutput> {
    info!("{mode} on `{}`", spec.name);
    match mode {
        Mode::Solve => run_solve(config, spec, art),
        Mode::FiniteSolve => run_finite(config, spec, art),
        Mode::Sweep => run_sweep(config, spec, art),
        Mode::Stationary => run_stationary(config, spec, art),
        Mode::Invariant => run_invariant(config, spec, art),
        Mode::Check => run_check(config, spec, art),
        Mode::Oracle => run_oracle(config, spec, art),
    }
}

fn seed(config: &ExperimentConfig) -> u64 {
    config.seed.expect("validated")
}

fn steps_for(dt: f64, t: f64) -> usize {
    (t / dt).round().max(1.0) as usize
}

/// Certificate whose horizon reaches `need`, tightening `tol` if necessary.
fn certificate_reaching(spec: &GameSpec, tol: f64, dt: f64, need: f64) -> Result<TruncationCertificate> {
    let mut tol = tol;
    loop {
        let cert = TruncationCertificate::new(spec.bounds.reward, spec.discount, tol, dt)?;
        if cert.t_required + 1e-9 >= need || tol < 1e-12 {
            return Ok(cert);
        }
        tol *= 0.5;
    }
}

fn ensemble(config: &ExperimentConfig, spec: &GameSpec, steps: usize) -> Result<PathEnsemble> {
    match config.noise {
        NoiseKind::Gaussian => PathEnsemble::simulate(spec, config.paths, steps, steps as f64 * config.dt, seed(config)),
        NoiseKind::Binomial => PathEnsemble::binomial_tree(spec, steps, config.dt),
    }
}

fn equilibrium_summary(report: &EquilibriumReport) -> Value {
    json!({
        "converged": report.converged,
        "iterations": report.iterations,
        "final_residual": report.final_residual,
        "best_residual": report.best_residual,
        "value": report.value,
        "value_std_error": report.value_std_error,
        "certificate": report.certificate,
        "warnings": report.solution.warnings,
    })
}

fn write_equilibrium(report: &EquilibriumReport, ens: &PathEnsemble, art: &mut Artifacts<'_>) -> Result<()> {
    art.csv("equilibrium.csv", |b| report.write_equilibrium_csv(ens, b))?;
    art.csv("residuals.csv", |b| report.write_residuals_csv(b))
}

fn convergence_flag(report: &EquilibriumReport, what: &str) -> Option<String> {
    (!report.converged).then(|| {
        format!(
            "{what} did not converge: residual {:.3e} after {} iterations",
            report.final_residual, report.iterations
        )
    })
}

fn run_solve(config: &ExperimentConfig, spec: &GameSpec, art: &mut Artifacts<'_>) -> Result<ModeOutput> {
    let cert = TruncationCertificate::new(spec.bounds.reward, spec.discount, config.tol, config.dt)?;
    let ens = ensemble(config, spec, cert.steps)?;
    let solver = BsdeSolver::for_ensemble(&ens)?;
    let problem = EquilibriumProblem::infinite(spec, &solver, &cert)?;
    let report = problem.solve(&config.picard())?;
    write_equilibrium(&report, &ens, art)?;
    Ok(ModeOutput {
        flags: convergence_flag(&report, "equilibrium").into_iter().collect(),
        summary: equilibrium_summary(&report),
    })
}

fn run_finite(config: &ExperimentConfig, spec: &GameSpec, art: &mut Artifacts<'_>) -> Result<ModeOutput> {
    let steps = config.steps.unwrap_or_else(|| steps_for(config.dt, config.t_max));
    let ens = ensemble(config, spec, steps)?;
    let solver = BsdeSolver::for_ensemble(&ens)?;
    let problem = EquilibriumProblem::finite(spec, &solver, steps)?;
    let report = problem.solve(&config.picard())?;
    write_equilibrium(&report, &ens, art)?;
    let mut summary = equilibrium_summary(&report);
    summary["horizon"] = json!(steps as f64 * config.dt);
    Ok(ModeOutput {
        flags: convergence_flag(&report, "equilibrium").into_iter().collect(),
        summary,
    })
}

fn run_sweep(config: &ExperimentConfig, spec: &GameSpec, art: &mut Artifacts<'_>) -> Result<ModeOutput> {
    let longest = config.horizons.iter().copied().fold(config.reference_horizon, f64::max);
    let cert = certificate_reaching(spec, config.tol, config.dt, longest)?;
    let steps = cert.steps.max(steps_for(config.dt, longest));
    let ens = ensemble(config, spec, steps)?;
    let solver = BsdeSolver::for_ensemble(&ens)?;
    let picard = config.picard();
    let infinite = EquilibriumProblem::infinite(spec, &solver, &cert)?.solve(&picard)?;
    write_equilibrium(&infinite, &ens, art)?;
    let mut flags: Vec<String> = convergence_flag(&infinite, "infinite-horizon equilibrium").into_iter().collect();

    let sweep_cfg = SweepConfig {
        horizons: config.horizons.clone(),
        slices: config.slices.clone(),
        picard: picard.clone(),
        warm_start: config.warm_start,
        check_samples: config.check_samples,
        seed: seed(config),
        bootstrap: config.bootstrap,
    };
    let sweep = rate_sweep(spec, &solver, &infinite, &sweep_cfg)?;
    art.csv("sweep.csv", |b| sweep.write_csv(b))?;
    for s in sweep.solves.iter().filter(|s| !s.converged) {
        flags.push(format!("finite equilibrium at T={} did not converge", s.horizon));
    }
    if sweep.applicability.applicable && !sweep.all_within() {
        flags.push("a measured distance exceeds its bound".into());
    }

    let field = infinite.response.field();
    let truncation = truncation_profile(spec, &solver, &field, &config.horizons, config.reference_horizon)?;
    let gaps = config
        .horizons
        .iter()
        .map(|&h| epsilon_gap(spec, &solver, &infinite.response, &infinite.control, h, seed(config) ^ 0xe95))
        .collect::<Result<Vec<_>>>()?;
    if gaps.iter().any(|g| !g.within_bound) {
        flags.push("an ε-gap exceeds its bound".into());
    }
    Ok(ModeOutput {
        flags,
        summary: json!({
            "equilibrium": equilibrium_summary(&infinite),
            "slopes": {
                "tv": sweep.tv_slope,
                "entropy": sweep.entropy_slope,
                "tv_slices": sweep.tv_slice_slopes,
                "truncation": truncation.slope,
            },
            "bounds_applicable": sweep.applicability.applicable,
            "applicability_reasons": sweep.applicability.reasons,
            "all_within": sweep.all_within(),
            "bounds": sweep.bounds,
            "horizon_solves": sweep.solves,
            "truncation": truncation,
            "epsilon_gaps": gaps,
            "epsilon_gaps_monotone": gaps_monotone(&gaps, 0.0),
        }),
    })
}

fn drift_flags(report: &crate::stationary::DriftConditionReport) -> Vec<String> {
    let mut flags = Vec::new();
    if report.status == Status::Fail {
        flags.push(format!(
            "drift condition margin {:.3} below required {:.3}",
            report.min_margin, report.required
        ));
    }
    if report.local_status == Status::Fail {
        flags.push(format!(
            "local bound {:.3} exceeds declared {:.3}",
            report.local_measured, report.local_declared
        ));
    }
    flags
}

fn stationary_config(config: &ExperimentConfig) -> StationaryMfgConfig {
    let mut s = config.stationary.clone();
    s.estimate.seed = seed(config);
    s
}

/// A failed drift condition is a flagged outcome, not a hard error.
fn drift_gate(spec: &GameSpec, art: &mut Artifacts<'_>) -> Result<Option<ModeOutput>> {
    let drift = check_drift_condition(spec, &DriftProbe::default())?;
    art.json("assumptions.json", &json!({ "drift_condition": drift }))?;
    let flags = drift_flags(&drift);
    Ok((!flags.is_empty()).then(|| ModeOutput {
        flags,
        summary: json!({ "drift_condition": drift }),
    }))
}

fn run_stationary(config: &ExperimentConfig, spec: &GameSpec, art: &mut Artifacts<'_>) -> Result<ModeOutput> {
    if let Some(out) = drift_gate(spec, art)? {
        return Ok(out);
    }
    let report = solve_stationary_mfg(spec, &stationary_config(config), None)?;
    art.csv("stationary.csv", |b| report.law.write_csv(b))?;
    art.csv("residuals.csv", |b| report.write_history_csv(b))?;
    art.csv("policy.csv", |b| report.policy.write_csv(b))?;
    let mut flags = Vec::new();
    if !report.converged {
        flags.push("stationary iteration did not converge".into());
    }
    Ok(ModeOutput {
        flags,
        summary: json!({
            "converged": report.converged,
            "iterations": report.iterations,
            "mean": report.estimate.mean,
            "second_moment": report.estimate.second_moment,
            "gamma_hat": report.estimate.gamma_hat,
            "cesaro_residuals": report.estimate.cesaro_residuals,
            "value": report.value,
            "history": report.history,
        }),
    })
}

fn run_invariant(config: &ExperimentConfig, spec: &GameSpec, art: &mut Artifacts<'_>) -> Result<ModeOutput> {
    if let Some(out) = drift_gate(spec, art)? {
        return Ok(out);
    }
    let inv = InvariantConfig {
        stationary: stationary_config(config),
        t_check: config.invariant.t_check,
        record_dt: config.invariant.record_dt,
        tol: config.invariant.tol,
    };
    let report = solve_invariant_mfg(spec, &inv)?;
    art.csv("stationary.csv", |b| report.stationary.law.write_csv(b))?;
    art.csv("residuals.csv", |b| report.stationary.write_history_csv(b))?;
    art.csv("invariance.csv", |b| report.trace.write_csv(b))?;
    art.csv("policy.csv", |b| report.stationary.policy.write_csv(b))?;
    let mut flags = Vec::new();
    if !report.stationary.converged {
        flags.push("stationary iteration did not converge".into());
    }
    if !report.verified {
        flags.push(format!(
            "marginals leave μ: max TV {:.3e} ≥ {:.3e} + band {:.3e}",
            report.trace.max_tv, report.tol, report.trace.band
        ));
    }
    Ok(ModeOutput {
        flags,
        summary: json!({
            "converged": report.stationary.converged,
            "iterations": report.stationary.iterations,
            "verified": report.verified,
            "max_tv": report.trace.max_tv,
            "band": report.trace.band,
            "tol": report.tol,
            "mirror_tv": report.mirror_tv,
            "mean": report.stationary.estimate.mean,
            "second_moment": report.stationary.estimate.second_moment,
            "value": report.stationary.value,
        }),
    })
}

fn run_check(config: &ExperimentConfig, spec: &GameSpec, art: &mut Artifacts<'_>) -> Result<ModeOutput> {
    let budget = SamplerBudget {
        samples: config.check_samples,
        seed: seed(config),
        ..Default::default()
    };
    let standing = check_standing_assumptions(spec, &budget);
    let applicability = rate_applicability(spec, config.check_samples, seed(config));
    let drift = match spec.stationary {
        Some(_) if spec.coefficients.is_time_homogeneous() => Some(check_drift_condition(spec, &DriftProbe::default())?),
        _ => None,
    };
    let mut flags: Vec<String> = standing
        .entries
        .iter()
        .filter(|e| e.status == Status::Fail)
        .map(|e| format!("assumption `{}` failed", e.name))
        .collect();
    if applicability.concavity.status == Status::Fail {
        flags.push("Hamiltonian concavity failed".into());
    }
    if applicability.monotonicity.status == Status::Fail {
        flags.push("monotonicity failed".into());
    }
    if let Some(d) = &drift {
        flags.extend(drift_flags(d));
    }
    let report = json!({
        "game": spec.name,
        "standing": standing,
        "concavity": applicability.concavity,
        "monotonicity": applicability.monotonicity,
        "rate_bounds_applicable": applicability.applicable,
        "rate_bound_reasons": applicability.reasons,
        "drift_condition": drift,
    });
    art.json("assumptions.json", &report)?;
    Ok(ModeOutput {
        flags,
        summary: json!({
            "all_pass": standing.all_pass(),
            "rate_bounds_applicable": applicability.applicable,
        }),
    })
}

fn run_oracle(config: &ExperimentConfig, spec: &GameSpec, art: &mut Artifacts<'_>) -> Result<ModeOutput> {
    let o = &config.oracle;
    let w = -(-spec.discount * o.dt).exp_m1() / spec.discount;
    let oracle = DiscreteOracle::new(spec, o.steps, o.dt, w)?;
    let eq = oracle.enumerate()?;
    art.csv("oracle_equilibrium.csv", |b| eq.write_csv(b))?;
    let mut summary = json!({
        "equilibria": eq.equilibria,
        "value": eq.value,
        "policy": eq.policy,
    });
    if spec.stationary.is_some() && spec.dim() == 1 && spec.coefficients.is_time_homogeneous() {
        let law = crate::law::MarginalLaw::dirac(&[0.0]);
        let a = spec.actions.point(spec.actions.nearest_index(&vec![0.0; spec.actions.dim()])).to_vec();
        let coef = &spec.coefficients;
        let drift = |x: f64| {
            let mut b = [0.0];
            coef.drift(0.0, &crate::law::PathView::from_prefix(&[x], 1), &law, &a, &mut b);
            b[0]
        };
        let vol = |x: f64| {
            let mut s = [0.0];
            coef.volatility(0.0, &crate::law::PathView::from_prefix(&[x], 1), &mut s);
            s[0]
        };
        let density = stationary_density_quadrature(drift, vol, -o.radius, o.radius, o.cells)?;
        art.csv("oracle_density.csv", |b| density.write_csv(b))?;
        summary["stationary_second_moment"] = json!(density.second_moment());
    }
    Ok(ModeOutput {
        flags: Vec::new(),
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("mfg-exp-{}-{name}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn git_hash_matches_git() {
        // `printf 'hello\n' | git hash-object --stdin`
        assert_eq!(git_blob_hash(b"hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
        assert_eq!(git_blob_hash(b""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
    }

    #[test]
    fn schema_errors_name_the_field() {
        let err = ExperimentConfig::from_json_str(r#"{"game": "constant-reward", "seed": 1, "paths": "many"}"#).unwrap_err();
        match err {
            MfgError::Config { path, .. } => assert_eq!(path, "paths"),
            e => panic!("{e}"),
        }
        let err = ExperimentConfig::from_json_str(r#"{"game": "x", "seed": 1, "stationary": {"estimate": {"dtt": 1}}}"#).unwrap_err();
        match err {
            MfgError::Config { path, .. } => assert_eq!(path, "stationary.estimate.dtt"),
            e => panic!("{e}"),
        }
        let cfg = ExperimentConfig::from_json_str(r#"{"game": "constant-reward"}"#).unwrap();
        assert!(matches!(cfg.validate(Mode::Solve), Err(MfgError::Config { path, .. }) if path == "seed"));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
            assert_eq!(serde_json::to_value(m).unwrap(), json!(m.as_str()));
        }
        assert!("bogus".parse::<Mode>().is_err());
    }

    #[test]
    fn check_mode_passes_on_monotone_game() {
        let cfg = ExperimentConfig::from_json_str(r#"{"game": "gaussian-repulsion", "seed": 3, "check_samples": 200}"#).unwrap();
        let dir = tmp("check");
        let m = run(Mode::Check, &cfg, &dir);
        assert_eq!(m.status, RunStatus::Ok, "{:?} {:?}", m.flags, m.error);
        let report: Value = serde_json::from_str(&fs::read_to_string(dir.join("assumptions.json")).unwrap()).unwrap();
        assert_eq!(report["monotonicity"]["status"], "pass");
        assert!(dir.join("manifest.json").exists());
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn oracle_mode_is_byte_identical() {
        let cfg = ExperimentConfig::from_json_str(r#"{"game": "discrete-oracle", "seed": 0}"#).unwrap();
        let (a, b) = (tmp("oracle-a"), tmp("oracle-b"));
        let ma = run(Mode::Oracle, &cfg, &a);
        let mb = run(Mode::Oracle, &cfg, &b);
        assert_eq!(ma.status, RunStatus::Ok, "{:?}", ma.error);
        assert_eq!(ma.outputs, mb.outputs);
        assert_eq!(
            fs::read(a.join("oracle_equilibrium.csv")).unwrap(),
            fs::read(b.join("oracle_equilibrium.csv")).unwrap()
        );
        fs::remove_dir_all(a).unwrap();
        fs::remove_dir_all(b).unwrap();
    }

    #[test]
    fn errors_still_write_a_manifest() {
        let cfg = ExperimentConfig::from_json_str(r#"{"game": "no-such-game", "seed": 0}"#).unwrap();
        let dir = tmp("error");
        let m = run(Mode::Solve, &cfg, &dir);
        assert_eq!(m.exit_code, 1);
        let text = fs::read_to_string(dir.join("manifest.json")).unwrap();
        assert!(text.contains("\"status\": \"error\""));
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn drift_failure_is_flagged() {
        let cfg = ExperimentConfig::from_json_str(
            r#"{"game": {"preset": "clipped-ou-invariant", "coefficients": {"drift_x": 0.0}}, "seed": 0}"#,
        )
        .unwrap();
        let dir = tmp("drift");
        let m = run(Mode::Stationary, &cfg, &dir);
        assert_eq!(m.exit_code, 2, "{:?}", m.error);
        assert!(m.flags[0].contains("drift condition"));
        assert!(dir.join("assumptions.json").exists());
        fs::remove_dir_all(dir).unwrap();
    }
}
