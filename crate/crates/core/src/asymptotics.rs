//! Long-horizon behaviour: truncation rates, ε-equilibria from restricted
//! infinite-horizon equilibria, and convergence of finite-horizon
//! equilibria to the infinite-horizon one.

use std::io::Write;

use log::{info, warn};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bsde::{BsdeSolver, MeanField};
use crate::control::{evaluate_reward, ControlField, RewardEstimate};
use crate::equilibrium::{EquilibriumProblem, EquilibriumReport, MeanFieldState, PicardConfig};
use crate::error::{invalid, Result};
use crate::game::assumptions::{
    check_monotonicity, check_standing_assumptions, random_law_pairs, MonotonicityReport, SamplerBudget, Status,
};
use crate::game::hamiltonian::grid_argmax;
use crate::game::{ActionSet, GameSpec};
use crate::law::{ActionLaw, MarginalLaw, PathView};
use crate::metrics::{relative_entropy_paths, tv_paths, w1_actions};
use crate::paths::MeasureWeights;

/// Least-squares line through `(x, y)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub points: usize,
}

pub fn least_squares(xs: &[f64], ys: &[f64]) -> Option<SlopeFit> {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return None;
    }
    let mx = xs[..n].iter().sum::<f64>() / n as f64;
    let my = ys[..n].iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs[..n].iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = xs[..n].iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Some(SlopeFit {
        slope,
        intercept: my - slope * mx,
        points: n,
    })
}

/// Fit of `ln y` against `x`, skipping non-positive `y`.
pub fn fit_log_slope(xs: &[f64], ys: &[f64]) -> Option<SlopeFit> {
    let (x, y): (Vec<f64>, Vec<f64>) = xs
        .iter()
        .zip(ys)
        .filter(|(_, y)| **y > 0.0 && y.is_finite())
        .map(|(x, y)| (*x, y.ln()))
        .unzip();
    least_squares(&x, &y)
}

/// Finite-horizon game on `[0, horizon]` with zero terminal reward.
pub fn solve_finite_mfg(
    spec: &GameSpec,
    solver: &BsdeSolver<'_>,
    horizon: f64,
    config: &PicardConfig,
) -> Result<EquilibriumReport> {
    let steps = solver.ensemble().step_of(horizon)?;
    EquilibriumProblem::finite(spec, solver, steps)?.solve(config)
}

#[derive(Clone, Debug, Serialize)]
pub struct TruncationRow {
    pub horizon: f64,
    pub y0: f64,
    /// `|Ỹ_0(T) − Ỹ_0(T_ref)|`.
    pub difference: f64,
    /// `(M/λ)e^{−λT}`.
    pub bound: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TruncationProfile {
    pub reference_horizon: f64,
    pub reference_y0: f64,
    pub rows: Vec<TruncationRow>,
    pub slope: Option<SlopeFit>,
}

/// `E Ỹ_0` against a fixed mean field for several horizons, compared with a
/// reference horizon; the log-differences are fitted against `T`.
pub fn truncation_profile(
    spec: &GameSpec,
    solver: &BsdeSolver<'_>,
    field: &MeanField<'_>,
    horizons: &[f64],
    reference: f64,
) -> Result<TruncationProfile> {
    let ens = solver.ensemble();
    let reference_y0 = solver
        .solve_finite_horizon(spec, field, ens.step_of(reference)?)?
        .y0_mean();
    let (m, lambda) = (spec.bounds.reward, spec.discount);
    let mut rows = Vec::with_capacity(horizons.len());
    for &t in horizons {
        let y0 = solver.solve_finite_horizon(spec, field, ens.step_of(t)?)?.y0_mean();
        rows.push(TruncationRow {
            horizon: t,
            y0,
            difference: (y0 - reference_y0).abs(),
            bound: m / lambda * (-lambda * t).exp(),
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.horizon).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.difference).collect();
    Ok(TruncationProfile {
        reference_horizon: reference,
        reference_y0,
        slope: fit_log_slope(&xs, &ys),
        rows,
    })
}

/// `2M/λ·e^{−λT}`.
pub fn epsilon_bound(reward_bound: f64, discount: f64, horizon: f64) -> f64 {
    2.0 * reward_bound / discount * (-discount * horizon).exp()
}

#[derive(Clone, Debug, Serialize)]
pub struct EpsilonGap {
    pub horizon: f64,
    pub steps: usize,
    /// `V^{μ^T, q^T, T}`.
    pub value: f64,
    pub value_std_error: f64,
    /// `J^{μ^T, q^T, T}(α^T)` from the linear BSDE of the restricted control.
    pub reward: f64,
    /// The same reward by direct Monte Carlo.
    pub reward_mc: RewardEstimate,
    pub gap: f64,
    pub bound: f64,
    /// `sqrt(se_V² + se_J²)`.
    pub mc_error: f64,
    /// Disagreement of the two reward estimators.
    pub regression_error: f64,
    /// `bound + 3·(mc_error + regression_error)`.
    pub allowance: f64,
    pub within_bound: bool,
}

/// Restricts an infinite-horizon equilibrium `(μ, q, α)` to `[0, T]` and
/// measures how far `α|_{[0,T]}` is from optimal in the finite game against
/// the restricted flow.
pub fn epsilon_gap(
    spec: &GameSpec,
    solver: &BsdeSolver<'_>,
    state: &MeanFieldState,
    control: &ControlField,
    horizon: f64,
    seed: u64,
) -> Result<EpsilonGap> {
    let ens = solver.ensemble();
    let steps = ens.step_of(horizon)?;
    if steps == 0 {
        return Err(invalid("ε-gap needs a positive horizon"));
    }
    let restricted = state.restrict(steps)?;
    let alpha = control.restrict(steps)?;
    let field = restricted.field();
    let best = solver.solve_finite_horizon(spec, &field, steps)?;
    let policy = solver.solve_policy(spec, &field, &alpha.actions, steps)?;
    let reward_mc = evaluate_reward(spec, &field, &alpha, ens, seed)?;
    let value = best.y0_mean();
    let reward = policy.y0_mean();
    let gap = value - reward;
    let bound = epsilon_bound(spec.bounds.reward, spec.discount, steps as f64 * ens.dt());
    let mc_error = best.y0_std_error().hypot(reward_mc.std_error);
    let regression_error = (reward - reward_mc.value).abs();
    let allowance = bound + 3.0 * (mc_error + regression_error);
    Ok(EpsilonGap {
        horizon: steps as f64 * ens.dt(),
        steps,
        value,
        value_std_error: best.y0_std_error(),
        reward,
        reward_mc,
        gap,
        bound,
        mc_error,
        regression_error,
        allowance,
        within_bound: gap <= allowance,
    })
}

/// Whether the gaps decrease along increasing horizons, up to `slack`.
pub fn gaps_monotone(gaps: &[EpsilonGap], slack: f64) -> bool {
    gaps.windows(2).all(|w| w[1].gap <= w[0].gap + slack)
}

/// Outcome of a strong-concavity secant check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConcavityCheck {
    pub status: Status,
    /// Largest `‖a − a*‖² − (4/m)(h(a*) − h(a))`.
    pub worst_violation: f64,
    pub slack: f64,
    /// `(sample, grid index)` of the worst violation.
    pub witness: Option<(usize, usize)>,
    pub checked: usize,
}

impl ConcavityCheck {
    fn skipped() -> Self {
        Self {
            status: Status::Skipped,
            worst_violation: f64::NEG_INFINITY,
            slack: 0.0,
            witness: None,
            checked: 0,
        }
    }

    fn absorb(&mut self, other: &ConcavityCheck, sample: usize) {
        self.checked += other.checked;
        if other.worst_violation > self.worst_violation {
            self.worst_violation = other.worst_violation;
            self.witness = other.witness.map(|(_, j)| (sample, j));
        }
        if other.status == Status::Fail {
            self.status = Status::Fail;
        } else if self.status == Status::Skipped {
            self.status = other.status;
        }
    }
}

/// Checks `‖a − a*‖² ≤ (4/m)(h(a*) − h(a))` over grid values `h` of a
/// function with maximiser index `star`. Violations up to `slack` pass.
pub fn strong_concavity_gap_check(
    actions: &ActionSet,
    h: &[f64],
    m: Option<f64>,
    star: usize,
    slack: f64,
) -> ConcavityCheck {
    let Some(m) = m else {
        return ConcavityCheck::skipped();
    };
    let a_star = actions.point(star);
    let mut worst = f64::NEG_INFINITY;
    let mut witness = None;
    for (j, a) in actions.points().enumerate() {
        let dist = ActionSet::distance(a, a_star);
        let v = dist * dist - 4.0 / m * (h[star] - h[j]);
        if v > worst {
            worst = v;
            witness = Some((0, j));
        }
    }
    ConcavityCheck {
        status: if worst <= slack + 1e-12 { Status::Pass } else { Status::Fail },
        worst_violation: worst,
        slack,
        witness,
        checked: actions.len(),
    }
}

/// Secant check of `h = f3 + z·σ⁻¹b` on random `(t, x, z)` with the grid
/// argmax as `a*`. The slack is the squared grid spacing.
pub fn scan_hamiltonian_concavity(spec: &GameSpec, samples: usize, seed: u64) -> ConcavityCheck {
    let Some(m) = spec.bounds.concavity else {
        return ConcavityCheck::skipped();
    };
    let d = spec.dim();
    let na = spec.actions.len();
    let slack = spec.actions.spacing().powi(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = ConcavityCheck::skipped();
    let mut beta = vec![0.0; na * d];
    let mut f3 = vec![0.0; na];
    for s in 0..samples {
        let t = 20.0 * rng.random::<f64>();
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let y: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let law = MarginalLaw::dirac(&y);
        let view = PathView::from_prefix(&x, d);
        if spec
            .coefficients
            .action_terms(t, &view, &law, &spec.actions, &mut beta, &mut f3)
            .is_err()
        {
            continue;
        }
        let h: Vec<f64> = (0..na)
            .map(|j| f3[j] + beta[j * d..(j + 1) * d].iter().zip(&z).map(|(b, z)| b * z).sum::<f64>())
            .collect();
        let (star, _) = grid_argmax(&beta, &f3, &z);
        let one = strong_concavity_gap_check(&spec.actions, &h, Some(m), star, slack);
        total.absorb(&one, s);
    }
    total.slack = slack;
    total
}

/// The right-hand sides of the convergence-rate inequalities.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateBounds {
    pub reward_bound: f64,
    pub concavity: f64,
    pub discount: f64,
    pub lipschitz: f64,
    pub slack: f64,
    pub action_bound: f64,
    /// `γ = mλ/(2L²) − δ`.
    pub gamma: f64,
}

impl RateBounds {
    /// `None` without a concavity modulus or with `γ ≤ 0`.
    pub fn for_spec(spec: &GameSpec) -> Option<Self> {
        let b = &spec.bounds;
        let gamma = b.rate_gap(spec.discount)?;
        (gamma > 0.0).then(|| Self {
            reward_bound: b.reward,
            concavity: b.concavity.expect("rate gap implies a modulus"),
            discount: spec.discount,
            lipschitz: b.lipschitz,
            slack: b.monotonicity_slack,
            action_bound: spec.actions.norm_bound(),
            gamma,
        })
    }

    /// Symmetrised path entropy on `[0, t]`: `2M e^{−λ(T−t)}/γ`.
    pub fn entropy(&self, horizon: f64, t: f64) -> f64 {
        2.0 * self.reward_bound * (-self.discount * (horizon - t)).exp() / self.gamma
    }

    /// `sqrt(M/(2γ)) e^{−λ(T−t)/2}`.
    pub fn tv(&self, horizon: f64, t: f64) -> f64 {
        (self.reward_bound / (2.0 * self.gamma)).sqrt() * (-0.5 * self.discount * (horizon - t)).exp()
    }

    /// `(1 + δ/γ)·8M e^{−λT}/(λm)`.
    pub fn control(&self, horizon: f64) -> f64 {
        (1.0 + self.slack / self.gamma) * 8.0 * self.reward_bound * (-self.discount * horizon).exp()
            / (self.discount * self.concavity)
    }

    /// `(8/m + (C_A² + 8δ/m)/γ)·M e^{−λT}/λ`.
    pub fn w1(&self, horizon: f64) -> f64 {
        let m = self.concavity;
        (8.0 / m + (self.action_bound.powi(2) + 8.0 * self.slack / m) / self.gamma) * self.reward_bound
            * (-self.discount * horizon).exp()
            / self.discount
    }
}

#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub horizons: Vec<f64>,
    /// Times `t` at which the restricted laws are compared; slices with
    /// `t > T` are skipped for that `T`.
    pub slices: Vec<f64>,
    pub picard: PicardConfig,
    /// Start each finite solve from the restricted infinite equilibrium
    /// instead of the driftless state.
    pub warm_start: bool,
    pub check_samples: usize,
    pub seed: u64,
    pub bootstrap: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            horizons: vec![4.0, 6.0, 8.0, 10.0],
            slices: vec![1.0, 2.0],
            picard: PicardConfig::default(),
            warm_start: false,
            check_samples: 500,
            seed: 0,
            bootstrap: 32,
        }
    }
}

/// Which preconditions of the rate theorem hold.
#[derive(Clone, Debug, Serialize)]
pub struct Applicability {
    pub applicable: bool,
    pub reasons: Vec<String>,
    pub concavity: ConcavityCheck,
    pub monotonicity: MonotonicityReport,
}

pub fn rate_applicability(spec: &GameSpec, samples: usize, seed: u64) -> Applicability {
    let mut reasons = Vec::new();
    if spec.bounds.concavity.is_none() {
        reasons.push("no concavity modulus declared".to_string());
    }
    match spec.bounds.rate_gap(spec.discount) {
        Some(g) if g <= 0.0 => reasons.push(format!("δ too large: mλ/(2L²) − δ = {g}")),
        _ => {}
    }
    if spec.coefficients.drift_depends_on_law() {
        reasons.push("drift depends on the state law".to_string());
    }
    let budget = SamplerBudget {
        samples,
        seed,
        ..Default::default()
    };
    let standing = check_standing_assumptions(spec, &budget);
    for e in standing.entries.iter().filter(|e| e.status == Status::Fail) {
        reasons.push(format!("standing assumption `{}` failed", e.name));
    }
    let concavity = scan_hamiltonian_concavity(spec, samples, seed ^ 0x5eed);
    if concavity.status == Status::Fail {
        reasons.push(format!("secant concavity violated by {:.3e}", concavity.worst_violation));
    }
    let pairs = random_law_pairs(spec.dim(), 20, 40, seed ^ 0xface);
    let monotonicity = check_monotonicity(spec, &pairs, &[0.0, 1.0, 5.0]);
    if monotonicity.status == Status::Fail {
        reasons.push(format!("monotonicity margin {:.3e}", monotonicity.worst_margin));
    }
    Applicability {
        applicable: reasons.is_empty(),
        reasons,
        concavity,
        monotonicity,
    }
}

/// A measured distance with a three-standard-error band.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Measured {
    pub value: f64,
    pub band: f64,
    pub bound: f64,
}

impl Measured {
    pub fn within(&self) -> bool {
        self.value <= self.bound + self.band
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub horizon: f64,
    pub t: f64,
    pub entropy: Measured,
    /// Direct estimator `E[ℓ_A − ℓ_B]`, both directions summed.
    pub entropy_direct: f64,
    pub tv: Measured,
    pub control: Measured,
    pub w1q: Measured,
    /// The finite-horizon equilibrium converged.
    pub converged: bool,
}

impl SweepRow {
    pub fn within(&self) -> bool {
        self.entropy.within() && self.tv.within() && self.control.within() && self.w1q.within()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct HorizonSolve {
    pub horizon: f64,
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
    pub value: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RateSweep {
    pub rows: Vec<SweepRow>,
    pub solves: Vec<HorizonSolve>,
    pub bounds: Option<RateBounds>,
    pub applicability: Applicability,
    /// Log-slope of TV in `T − t`, pooled over slices with a separate
    /// intercept per slice.
    pub tv_slope: Option<SlopeFit>,
    pub entropy_slope: Option<SlopeFit>,
    pub tv_slice_slopes: Vec<(f64, Option<SlopeFit>)>,
}

impl RateSweep {
    /// Every converged row lies under its bounds, and the bounds apply.
    pub fn all_within(&self) -> bool {
        self.applicability.applicable && self.rows.iter().filter(|r| r.converged).all(SweepRow::within)
    }

    /// Columns `T, t, entropy_sym, entropy_bound, tv, tv_bound, ctrl_dist,
    /// ctrl_bound, w1q, w1q_bound`, then bands and flags.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "T,t,entropy_sym,entropy_bound,tv,tv_bound,ctrl_dist,ctrl_bound,w1q,w1q_bound,\
             entropy_band,tv_band,ctrl_band,w1q_band,converged,bounds_applicable"
        )?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{},{}",
                r.horizon,
                r.t,
                r.entropy.value,
                r.entropy.bound,
                r.tv.value,
                r.tv.bound,
                r.control.value,
                r.control.bound,
                r.w1q.value,
                r.w1q.bound,
                r.entropy.band,
                r.tv.band,
                r.control.band,
                r.w1q.band,
                r.converged,
                self.applicability.applicable
            )?;
        }
        Ok(())
    }
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Per-step squared action distances weighted by both measures, as
/// per-path contributions scaled so that their mean is the sum.
fn control_contributions(
    spec: &GameSpec,
    a: &MeasureWeights,
    b: &MeasureWeights,
    ca: &ControlField,
    cb: &ControlField,
    k: usize,
) -> Vec<f64> {
    let n = ca.n;
    let pa = a.masses_at(k);
    let pb = b.masses_at(k);
    let (xa, xb) = (ca.at(k), cb.at(k));
    (0..n)
        .map(|i| {
            let d = ActionSet::distance(spec.actions.point(xa[i] as usize), spec.actions.point(xb[i] as usize));
            n as f64 * (pa[i] + pb[i]) * d * d
        })
        .collect()
}

/// Bootstrap standard deviation of `Σ_k c_k W1(q_k, r_k)²` over resampled
/// paths, cumulated per step.
fn w1_bootstrap(
    spec: &GameSpec,
    a: (&MeasureWeights, &ControlField),
    b: (&MeasureWeights, &ControlField),
    coef: &[f64],
    resamples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let steps = coef.len();
    let n = a.1.n;
    if resamples < 2 {
        return Ok(vec![0.0; steps + 1]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cum = vec![vec![0.0; steps + 1]; resamples];
    for row in cum.iter_mut() {
        let mut counts = vec![0.0; n];
        for _ in 0..n {
            counts[rng.random_range(0..n)] += 1.0;
        }
        for k in 0..steps {
            let law = |w: &MeasureWeights, c: &ControlField| -> Result<ActionLaw> {
                let m: Vec<f64> = w.masses_at(k).iter().zip(&counts).map(|(p, c)| p * c).collect();
                let idx: Vec<u32> = c.at(k).iter().map(|&j| j as u32).collect();
                ActionLaw::from_indices(&spec.actions, &idx, &m)
            };
            let w1 = w1_actions(&law(a.0, a.1)?, &law(b.0, b.1)?);
            row[k + 1] = row[k] + coef[k] * w1 * w1;
        }
    }
    Ok((0..=steps)
        .map(|k| {
            let v: Vec<f64> = cum.iter().map(|r| r[k]).collect();
            let (_, se) = mean_se(&v);
            se * (resamples as f64).sqrt()
        })
        .collect())
}

/// Compares the infinite-horizon equilibrium `(μ, q, α)` with finite-horizon
/// equilibria at each horizon, on `[0, t]` for each slice `t`.
pub fn rate_sweep(
    spec: &GameSpec,
    solver: &BsdeSolver<'_>,
    infinite: &EquilibriumReport,
    config: &SweepConfig,
) -> Result<RateSweep> {
    let ens = solver.ensemble();
    let dt = ens.dt();
    let n = ens.len();
    let lambda = spec.discount;
    let applicability = rate_applicability(spec, config.check_samples, config.seed);
    if !applicability.applicable {
        warn!("rate bounds inapplicable: {}", applicability.reasons.join("; "));
    }
    let bounds = RateBounds::for_spec(spec);
    let mu = &infinite.response;
    let alpha = &infinite.control;
    let mut rows = Vec::new();
    let mut solves = Vec::new();
    for (h_idx, &horizon) in config.horizons.iter().enumerate() {
        let steps = ens.step_of(horizon)?;
        if steps > mu.horizon() {
            return Err(crate::MfgError::HorizonExceeded {
                requested: steps,
                available: mu.horizon(),
            });
        }
        let problem = EquilibriumProblem::finite(spec, solver, steps)?;
        let initial = if config.warm_start {
            let mut s = mu.restrict(steps)?;
            s.iteration = 0;
            s
        } else {
            problem.driftless_state()?
        };
        let report = problem.solve_from(initial, &config.picard)?;
        info!(
            "finite horizon T={horizon}: converged {} after {} iterations, residual {:.3e}",
            report.converged, report.iterations, report.final_residual
        );
        solves.push(HorizonSolve {
            horizon,
            converged: report.converged,
            iterations: report.iterations,
            residual: report.final_residual,
            value: report.value,
        });
        let mu_t = &report.response;
        let alpha_t = &report.control;

        let coef: Vec<f64> = (0..steps).map(|k| (-lambda * k as f64 * dt).exp() * dt).collect();
        // cumulative control and W1 integrands, indexed by the slice step
        let mut ctrl_path = vec![0.0; n];
        let mut ctrl_cum = vec![(0.0, 0.0); steps + 1];
        let mut w1_cum = vec![0.0; steps + 1];
        for k in 0..steps {
            let c = control_contributions(spec, &mu_t.weights, &mu.weights, alpha_t, alpha, k);
            for (acc, v) in ctrl_path.iter_mut().zip(&c) {
                *acc += coef[k] * v;
            }
            ctrl_cum[k + 1] = mean_se(&ctrl_path);
            let w1 = w1_actions(&mu_t.q[k], &mu.q[k]);
            w1_cum[k + 1] = w1_cum[k] + coef[k] * w1 * w1;
        }
        let w1_sd = w1_bootstrap(
            spec,
            (&mu_t.weights, alpha_t),
            (&mu.weights, alpha),
            &coef,
            config.bootstrap,
            config.seed.wrapping_add(h_idx as u64),
        )?;

        for &t in config.slices.iter().filter(|&&t| t <= horizon + 1e-9) {
            let k = ens.step_of(t)?;
            let t = k as f64 * dt;
            let fwd = relative_entropy_paths(&mu_t.weights, &mu.weights, k, dt)?;
            let bwd = relative_entropy_paths(&mu.weights, &mu_t.weights, k, dt)?;
            let pa = mu_t.weights.masses_at(k);
            let pb = mu.weights.masses_at(k);
            let tv_terms: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| 0.5 * n as f64 * (x - y).abs()).collect();
            let (_, tv_se) = mean_se(&tv_terms);
            let (ctrl, ctrl_se) = ctrl_cum[k];
            let bound = |f: &dyn Fn(&RateBounds) -> f64| bounds.as_ref().map_or(f64::NAN, f);
            rows.push(SweepRow {
                horizon,
                t,
                entropy: Measured {
                    value: fwd.girsanov + bwd.girsanov,
                    band: 3.0 * (fwd.girsanov_se + bwd.girsanov_se),
                    bound: bound(&|b| b.entropy(horizon, t)),
                },
                entropy_direct: fwd.direct + bwd.direct,
                tv: Measured {
                    value: tv_paths(&mu_t.weights, &mu.weights, k),
                    band: 3.0 * tv_se,
                    bound: bound(&|b| b.tv(horizon, t)),
                },
                control: Measured {
                    value: ctrl,
                    band: 3.0 * ctrl_se,
                    bound: bound(&|b| b.control(horizon)),
                },
                w1q: Measured {
                    value: w1_cum[k],
                    band: 3.0 * w1_sd[k],
                    bound: bound(&|b| b.w1(horizon)),
                },
                converged: report.converged,
            });
        }
    }

    let fit = |pick: &dyn Fn(&SweepRow) -> f64| -> (Option<SlopeFit>, Vec<(f64, Option<SlopeFit>)>) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut per_slice = Vec::new();
        for &t in &config.slices {
            let sel: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| r.converged && (r.t - t).abs() < 0.5 * dt && pick(r) > 0.0)
                .collect();
            let x: Vec<f64> = sel.iter().map(|r| r.horizon - r.t).collect();
            let y: Vec<f64> = sel.iter().map(|r| pick(r).ln()).collect();
            per_slice.push((t, least_squares(&x, &y)));
            if sel.len() >= 2 {
                let (mx, my) = (x.iter().sum::<f64>() / x.len() as f64, y.iter().sum::<f64>() / y.len() as f64);
                xs.extend(x.iter().map(|v| v - mx));
                ys.extend(y.iter().map(|v| v - my));
            }
        }
        (least_squares(&xs, &ys), per_slice)
    };
    let (tv_slope, tv_slice_slopes) = fit(&|r| r.tv.value);
    let (entropy_slope, _) = fit(&|r| r.entropy.value);
    Ok(RateSweep {
        rows,
        solves,
        bounds,
        applicability,
        tv_slope,
        entropy_slope,
        tv_slice_slopes,
    })
}
