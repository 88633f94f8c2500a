//! Browser bindings: an infinite-horizon equilibrium solve, a Cesàro
//! stationary estimate against quadrature, and the horizon rate bounds.
//! Every entry point returns a JSON string.

use mfg_core::asymptotics::RateBounds;
use mfg_core::bsde::{BsdeSolver, TruncationCertificate};
use mfg_core::equilibrium::{EquilibriumProblem, PicardConfig};
use mfg_core::game::inline::{GameDescription, InlineCoefficients};
use mfg_core::game::{ActionKind, StationaryParams};
use mfg_core::oracle::stationary_density_quadrature;
use mfg_core::stationary::{estimate_stationary, Grid, Histogram, StartLaw, StationaryConfig};
use mfg_core::{registry, InitialLaw, MarginalLaw, PathEnsemble, Result};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn to_js(r: Result<serde_json::Value>) -> std::result::Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

/// Infinite-horizon equilibrium of a registry game; the value, the residual
/// trace and the mean state along the certified horizon.
pub fn equilibrium_json(game: &str, paths: usize, dt: f64, tol: f64, seed: u64) -> Result<serde_json::Value> {
    let spec = registry(game)?;
    let cert = TruncationCertificate::new(spec.bounds.reward, spec.discount, tol, dt)?;
    let ens = PathEnsemble::simulate(&spec, paths, cert.steps, cert.steps as f64 * dt, seed)?;
    let solver = BsdeSolver::for_ensemble(&ens)?;
    let problem = EquilibriumProblem::infinite(&spec, &solver, &cert)?;
    let report = problem.solve(&PicardConfig {
        tol: 1e-2,
        max_iter: 30,
        ..Default::default()
    })?;
    let stride = (cert.steps / 60).max(1);
    let mut times = Vec::new();
    let mut means = Vec::new();
    for k in (0..=cert.steps).step_by(stride) {
        times.push(k as f64 * dt);
        means.push(report.response.weights.marginal(&ens, k)?.mean()[0]);
    }
    Ok(json!({
        "game": game,
        "converged": report.converged,
        "iterations": report.iterations,
        "value": report.value,
        "value_std_error": report.value_std_error,
        "horizon": cert.t_required,
        "residuals": report.history.iter().map(|r| r.tv_residual + r.w1_residual).collect::<Vec<_>>(),
        "times": times,
        "mean_state": means,
    }))
}

/// Cesàro estimate `D^T` of the clipped Ornstein-Uhlenbeck process started
/// at `x0`, with the quadrature stationary law binned on the same grid.
pub fn stationary_json(horizon: f64, paths: usize, x0: f64, seed: u64) -> Result<serde_json::Value> {
    let mut desc = GameDescription::custom(
        InlineCoefficients {
            drift_x: -1.0,
            drift_x_clip: Some(3.0),
            ..Default::default()
        },
        ActionKind::Atoms { atoms: vec![vec![0.0]] },
    );
    desc.bounds.drift = 5.0;
    desc.stationary = Some(StationaryParams {
        inner_radius: 2.0,
        outer_radius: 3.0,
        margin: 3.0,
        local_bound: 3.0,
    });
    desc.initial = InitialLaw::Dirac { point: vec![x0] };
    let spec = desc.build()?;
    let grid = Grid {
        lo: -4.0,
        hi: 4.0,
        bins: 32,
    };
    let oracle = stationary_density_quadrature(|x: f64| (-x).clamp(-3.0, 3.0), |_| 1.0, -8.0, 8.0, 2000)?;
    let target = Histogram::new(grid.clone(), oracle.bin_masses(&grid.edges()))?;
    let cfg = StationaryConfig {
        horizon,
        dt: 0.01,
        paths,
        seed,
        grid: grid.clone(),
        doublings: 3,
    };
    let est = estimate_stationary(&spec, &MarginalLaw::dirac(&[0.0]), None, StartLaw::Initial(&spec.initial), &cfg)?;
    Ok(json!({
        "centers": grid.centers(),
        "masses": est.law.masses,
        "oracle": target.masses,
        "second_moment": est.second_moment,
        "oracle_second_moment": oracle.second_moment(),
        "snapshots": est.snapshots.iter().map(|s| json!({"T": s.horizon, "tv": s.law.tv(&target)})).collect::<Vec<_>>(),
        "gamma_hat": est.gamma_hat,
    }))
}

/// Entropy and TV bounds over `t ∈ [0, T]` with the control and W1 bounds.
pub fn bounds_json(game: &str, horizon: f64) -> Result<serde_json::Value> {
    let spec = registry(game)?;
    let b = RateBounds::for_spec(&spec).ok_or_else(|| {
        mfg_core::MfgError::InvalidArgument(format!("game `{game}` declares no concavity modulus"))
    })?;
    let ts: Vec<f64> = (0..=50).map(|j| horizon * j as f64 / 50.0).collect();
    Ok(json!({
        "t": ts,
        "entropy": ts.iter().map(|&t| b.entropy(horizon, t)).collect::<Vec<_>>(),
        "tv": ts.iter().map(|&t| b.tv(horizon, t)).collect::<Vec<_>>(),
        "control": b.control(horizon),
        "w1": b.w1(horizon),
        "gamma": b.gamma,
    }))
}

#[wasm_bindgen]
pub fn solve_equilibrium(game: &str, paths: u32, dt: f64, tol: f64, seed: u32) -> std::result::Result<String, JsError> {
    to_js(equilibrium_json(game, paths as usize, dt, tol, seed as u64))
}

#[wasm_bindgen]
pub fn stationary_law(horizon: f64, paths: u32, x0: f64, seed: u32) -> std::result::Result<String, JsError> {
    to_js(stationary_json(horizon, paths as usize, x0, seed as u64))
}

#[wasm_bindgen]
pub fn rate_bounds(game: &str, horizon: f64) -> std::result::Result<String, JsError> {
    to_js(bounds_json(game, horizon))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equilibrium_op_runs() {
        let v = equilibrium_json("constant-reward", 500, 0.1, 0.05, 1).unwrap();
        assert!((v["value"].as_f64().unwrap() - 2.0).abs() < 0.06);
        assert_eq!(v["times"].as_array().unwrap().len(), v["mean_state"].as_array().unwrap().len());
    }

    #[test]
    fn stationary_op_matches_oracle_roughly() {
        let v = stationary_json(8.0, 2000, 0.0, 2).unwrap();
        let m2 = v["second_moment"].as_f64().unwrap();
        assert!((m2 - v["oracle_second_moment"].as_f64().unwrap()).abs() < 0.1);
    }

    #[test]
    fn bounds_op_decreases_towards_zero() {
        let v = bounds_json("gaussian-repulsion", 10.0).unwrap();
        let tv: Vec<f64> = serde_json::from_value(v["tv"].clone()).unwrap();
        assert!(tv.windows(2).all(|w| w[1] >= w[0]));
        assert!(bounds_json("constant-reward", 10.0).is_err());
    }
}
