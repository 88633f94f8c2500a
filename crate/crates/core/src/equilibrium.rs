//! Damped fixed-point iteration on `(μ, q)`.
//!
//! A state is a measure on the shared ensemble (as weights) and an action
//! law per grid step. The map `Φ` solves the control problem against the
//! state, reweights the ensemble with the optimal drift, and reads off the
//! action laws under the new weights. All iterates share one ensemble.

use std::io::Write;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::bsde::{ActionFlow, BsdeSolution, BsdeSolver, LawFlow, MeanField, TruncationCertificate};
use crate::control::{control_terms, reward_from_terms, ControlField, RewardEstimate};
use crate::error::{invalid, Result};
use crate::game::GameSpec;
use crate::law::ActionLaw;
use crate::metrics::{tv_binned, w1_actions, DEFAULT_BINS};
use crate::paths::{MeasureWeights, PathEnsemble};

#[derive(Clone, Debug)]
pub struct MeanFieldState {
    pub weights: MeasureWeights,
    /// One law per step `k < horizon`.
    pub q: Vec<ActionLaw>,
    pub iteration: usize,
}

impl MeanFieldState {
    pub fn horizon(&self) -> usize {
        self.weights.horizon()
    }

    pub fn field(&self) -> MeanField<'_> {
        MeanField::new(LawFlow::Weighted(&self.weights), ActionFlow::PerStep(&self.q))
    }

    /// Componentwise `(1 − θ)·self + θ·other`.
    pub fn mix(&self, other: &MeanFieldState, theta: f64) -> Result<MeanFieldState> {
        if self.q.len() != other.q.len() {
            return Err(invalid("mixing states of different horizons"));
        }
        Ok(MeanFieldState {
            weights: self.weights.mix(&other.weights, theta)?,
            q: self.q.iter().zip(&other.q).map(|(a, b)| a.mix(b, theta)).collect(),
            iteration: self.iteration + 1,
        })
    }

    /// Restriction to `[0, t_steps]`.
    pub fn restrict(&self, steps: usize) -> Result<MeanFieldState> {
        Ok(MeanFieldState {
            weights: self.weights.project(steps)?,
            q: self.q[..steps.min(self.q.len())].to_vec(),
            iteration: self.iteration,
        })
    }
}

/// A game, an ensemble solver and the horizon on which states live.
#[derive(Clone, Copy, Debug)]
pub struct EquilibriumProblem<'a, 'e> {
    pub spec: &'a GameSpec,
    pub solver: &'a BsdeSolver<'e>,
    pub steps: usize,
    pub certificate: Option<&'a TruncationCertificate>,
    pub bins: usize,
}

impl<'a, 'e> EquilibriumProblem<'a, 'e> {
    /// Finite-horizon game on `[0, t_steps]` with zero terminal reward.
    pub fn finite(spec: &'a GameSpec, solver: &'a BsdeSolver<'e>, steps: usize) -> Result<Self> {
        if steps == 0 || steps > solver.ensemble().steps() {
            return Err(crate::MfgError::HorizonExceeded {
                requested: steps,
                available: solver.ensemble().steps(),
            });
        }
        Ok(Self {
            spec,
            solver,
            steps,
            certificate: None,
            bins: DEFAULT_BINS,
        })
    }

    /// Infinite-horizon game truncated at the certified horizon.
    pub fn infinite(spec: &'a GameSpec, solver: &'a BsdeSolver<'e>, certificate: &'a TruncationCertificate) -> Result<Self> {
        let mut p = Self::finite(spec, solver, certificate.steps)?;
        p.certificate = Some(certificate);
        Ok(p)
    }

    pub fn ensemble(&self) -> &'e PathEnsemble {
        self.solver.ensemble()
    }

    /// The documented default start: driftless law and uniform action laws.
    pub fn driftless_state(&self) -> Result<MeanFieldState> {
        Ok(MeanFieldState {
            weights: MeasureWeights::identity(self.ensemble(), self.steps)?,
            q: vec![ActionLaw::uniform(&self.spec.actions); self.steps],
            iteration: 0,
        })
    }

    /// The flow generated by playing grid action `index` everywhere against
    /// the driftless state.
    pub fn constant_action_state(&self, index: usize) -> Result<MeanFieldState> {
        let base = self.driftless_state()?;
        let control = ControlField::constant(self.ensemble().len(), self.steps, index as u16);
        let terms = control_terms(self.spec, &base.field(), &control, self.ensemble())?;
        let weights = MeasureWeights::girsanov(self.ensemble(), terms.drift, self.steps, self.spec.bounds.drift)?;
        Ok(MeanFieldState {
            weights,
            q: vec![ActionLaw::dirac(&self.spec.actions, index); self.steps],
            iteration: 0,
        })
    }

    /// Best response to `state` and the state it induces.
    pub fn fixed_point_map(&self, state: &MeanFieldState) -> Result<Response> {
        if state.horizon() != self.steps || state.q.len() != self.steps {
            return Err(invalid("state horizon differs from the problem horizon"));
        }
        let ens = self.ensemble();
        let solution = self
            .solver
            .solve_finite_horizon(self.spec, &state.field(), self.steps)?;
        let weights = solution.weights(ens, self.spec.bounds.drift)?;
        let q = (0..self.steps)
            .map(|k| {
                let masses = weights.masses_at(k);
                let idx: Vec<u32> = solution.actions_at(k).iter().map(|&a| a as u32).collect();
                ActionLaw::from_indices(&self.spec.actions, &idx, &masses)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Response {
            state: MeanFieldState {
                weights,
                q,
                iteration: state.iteration + 1,
            },
            control: ControlField::from_solution(&solution),
            solution,
        })
    }

    /// `max_k d_TV(μ_k, ν_k)` over binned marginals and `max_k W1(q_k, r_k)`.
    pub fn residual(&self, a: &MeanFieldState, b: &MeanFieldState) -> Result<Residual> {
        let ens = self.ensemble();
        let mut tv = 0.0f64;
        for k in 0..=self.steps.min(a.horizon()).min(b.horizon()) {
            let ma = a.weights.marginal(ens, k)?;
            let mb = b.weights.marginal(ens, k)?;
            tv = tv.max(tv_binned(&ma, &mb, self.bins));
        }
        let w1 = a
            .q
            .iter()
            .zip(&b.q)
            .map(|(x, y)| w1_actions(x, y))
            .fold(0.0, f64::max);
        Ok(Residual { tv, w1 })
    }

    pub fn solve(&self, config: &PicardConfig) -> Result<EquilibriumReport> {
        self.solve_from(self.driftless_state()?, config)
    }

    /// Iterates `s ← (1 − θ)s + θΦ(s)` until `residual(Φ(s), s) < tol`.
    pub fn solve_from(&self, initial: MeanFieldState, config: &PicardConfig) -> Result<EquilibriumReport> {
        config.validate()?;
        let mut state = initial;
        let mut theta = config.theta;
        let mut history = Vec::new();
        let mut previous = f64::INFINITY;
        let mut best = f64::INFINITY;
        for iter in 0..config.max_iter {
            let response = self.fixed_point_map(&state)?;
            let r = self.residual(&response.state, &state)?;
            let total = r.total();
            history.push(ResidualRecord {
                iter,
                tv_residual: r.tv,
                w1_residual: r.w1,
                value: response.solution.y0_mean(),
                theta,
            });
            debug!("iteration {iter}: tv {:.3e} w1 {:.3e} theta {theta}", r.tv, r.w1);
            best = best.min(total);
            if total < config.tol {
                info!("equilibrium after {} map evaluation(s), residual {total:.3e}", iter + 1);
                return Ok(self.report(state, response, history, true, best));
            }
            if iter + 1 == config.max_iter {
                return Ok(self.report(state, response, history, false, best));
            }
            if config.adaptive && total > previous {
                theta = (theta * 0.5).max(config.min_theta);
            }
            previous = total;
            state = state.mix(&response.state, theta)?;
        }
        unreachable!("max_iter is positive")
    }

    fn report(
        &self,
        state: MeanFieldState,
        response: Response,
        history: Vec<ResidualRecord>,
        converged: bool,
        best: f64,
    ) -> EquilibriumReport {
        let last = history.last().expect("one iteration");
        EquilibriumReport {
            converged,
            iterations: history.len(),
            final_residual: last.tv_residual + last.w1_residual,
            best_residual: best,
            value: response.solution.y0_mean(),
            value_std_error: response.solution.y0_std_error(),
            certificate: self.certificate.cloned(),
            history,
            state,
            response: response.state,
            control: response.control,
            solution: response.solution,
        }
    }

    /// Fixed-point residual of `state` and the optimality gap `V − J(α)` of
    /// `control` against it. Without a control the best response is used.
    pub fn equilibrium_gap(&self, state: &MeanFieldState, control: Option<&ControlField>, seed: u64) -> Result<EquilibriumGap> {
        let response = self.fixed_point_map(state)?;
        let residual = self.residual(&response.state, state)?;
        let control = control.unwrap_or(&response.control);
        let ens = self.ensemble();
        let field = state.field();
        let terms = control_terms(self.spec, &field, control, ens)?;
        let weights = MeasureWeights::girsanov(ens, terms.drift, control.horizon, self.spec.bounds.drift)?;
        let reward = reward_from_terms(self.spec, &terms.reward, &weights, ens, seed)?;
        let value = response.solution.y0_mean();
        Ok(EquilibriumGap {
            residual,
            value,
            value_std_error: response.solution.y0_std_error(),
            optimality_gap: value - reward.value,
            reward,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Response {
    pub state: MeanFieldState,
    pub control: ControlField,
    pub solution: BsdeSolution,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Residual {
    pub tv: f64,
    pub w1: f64,
}

impl Residual {
    pub fn total(&self) -> f64 {
        self.tv + self.w1
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PicardConfig {
    pub theta: f64,
    pub max_iter: usize,
    pub tol: f64,
    /// Halve `θ` whenever the residual increases.
    pub adaptive: bool,
    pub min_theta: f64,
}

impl Default for PicardConfig {
    fn default() -> Self {
        Self {
            theta: 0.5,
            max_iter: 50,
            tol: 5e-3,
            adaptive: true,
            min_theta: 1.0 / 64.0,
        }
    }
}

impl PicardConfig {
    fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(invalid("damping θ must lie in (0, 1]"));
        }
        if self.max_iter == 0 || !(self.tol > 0.0) {
            return Err(invalid("need max_iter > 0 and tol > 0"));
        }
        if !(self.min_theta > 0.0 && self.min_theta <= self.theta) {
            return Err(invalid("min_theta must lie in (0, θ]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResidualRecord {
    pub iter: usize,
    pub tv_residual: f64,
    pub w1_residual: f64,
    pub value: f64,
    pub theta: f64,
}

#[derive(Clone, Debug)]
pub struct EquilibriumReport {
    pub converged: bool,
    pub iterations: usize,
    pub final_residual: f64,
    pub best_residual: f64,
    /// `E Ỹ_0` of the best response to the final state.
    pub value: f64,
    pub value_std_error: f64,
    pub certificate: Option<TruncationCertificate>,
    pub history: Vec<ResidualRecord>,
    /// Last iterate `s_n`.
    pub state: MeanFieldState,
    /// `Φ(s_n)`: the law induced by the best response, with its drift.
    pub response: MeanFieldState,
    pub control: ControlField,
    pub solution: BsdeSolution,
}

impl EquilibriumReport {
    /// Columns: `iter, tv_residual, w1_residual, V`.
    pub fn write_residuals_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "iter,tv_residual,w1_residual,V")?;
        for r in &self.history {
            writeln!(out, "{},{:.12e},{:.12e},{:.12e}", r.iter, r.tv_residual, r.w1_residual, r.value)?;
        }
        Ok(())
    }

    /// Columns: `t, mean_x, var_x, mean_action, var_action, mean_y`, using
    /// the response measure.
    pub fn write_equilibrium_csv<W: Write>(&self, ens: &PathEnsemble, mut out: W) -> Result<()> {
        writeln!(out, "t,mean_x,var_x,mean_action,var_action,mean_y")?;
        for k in 0..self.response.horizon() {
            let law = self.response.weights.marginal(ens, k)?;
            let mx = law.mean()[0];
            let q = &self.response.q[k];
            let my = self.solution.y_at(k).iter().sum::<f64>() / self.solution.n as f64;
            writeln!(
                out,
                "{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
                k as f64 * ens.dt(),
                mx,
                law.variance(),
                q.mean()[0],
                q.variance(),
                my
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EquilibriumGap {
    pub residual: Residual,
    pub value: f64,
    pub value_std_error: f64,
    pub reward: RewardEstimate,
    pub optimality_gap: f64,
}
