//! Backward solver for the transformed BSDE
//! `dỸ = −(H̃(t, X, μ, q, Z̃) − λỸ) dt + Z̃ dW`.
//!
//! The linear part is integrated exactly over each step: with
//! `ρ = e^{−λΔt}` and `c = (1 − ρ)/λ`,
//!
//! ```text
//! m_k   = E_k[Ỹ_{k+1}]
//! Z̃_k   = ρ · E_k[(Ỹ_{k+1} − m_k) ΔW_k] / c
//! Ỹ_k   = clamp(ρ·m_k + c·H̃(t_k, X, μ_k, q_k, Z̃_k), ±M/λ)
//! ```
//!
//! On a binomial tree with exact conditioning this is the dynamic program
//! of the controlled random walk with transition weights `1 + β·ΔW`. The
//! reward functional consistent with the scheme is `Σ_k ρ^k c f_k`.

use std::io::Write;

use serde::Serialize;

use crate::error::{MfgError, Result};
use crate::exec;
use crate::game::hamiltonian::grid_argmax;
use crate::game::GameSpec;
use crate::law::{ActionLaw, MarginalLaw};
use crate::paths::{MeasureWeights, PathEnsemble};
use crate::regression::{Basis, Regressor};

/// State-law flow fed to the coefficients.
#[derive(Clone, Copy, Debug)]
pub enum LawFlow<'a> {
    /// `μ_t` is the reweighted ensemble marginal.
    Weighted(&'a MeasureWeights),
    /// The same law at every time.
    Constant(&'a MarginalLaw<'a>),
}

/// Action-law flow fed to the coefficients.
#[derive(Clone, Copy, Debug)]
pub enum ActionFlow<'a> {
    PerStep(&'a [ActionLaw]),
    Constant(&'a ActionLaw),
}

/// The pair `(μ, q)` seen by a single player.
#[derive(Clone, Copy, Debug)]
pub struct MeanField<'a> {
    pub mu: LawFlow<'a>,
    pub q: ActionFlow<'a>,
}

impl<'a> MeanField<'a> {
    pub fn new(mu: LawFlow<'a>, q: ActionFlow<'a>) -> Self {
        Self { mu, q }
    }

    /// Last step at which both flows are defined, if finite.
    pub fn horizon(&self) -> Option<usize> {
        let a = match self.mu {
            LawFlow::Weighted(w) => Some(w.horizon()),
            LawFlow::Constant(_) => None,
        };
        let b = match self.q {
            ActionFlow::PerStep(q) => Some(q.len().saturating_sub(1)),
            ActionFlow::Constant(_) => None,
        };
        match (a, b) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    pub fn law<'s>(&self, ens: &'s PathEnsemble, k: usize) -> Result<MarginalLaw<'s>>
    where
        'a: 's,
    {
        match self.mu {
            LawFlow::Weighted(w) => w.marginal(ens, k),
            LawFlow::Constant(law) => Ok(law.clone()),
        }
    }

    pub fn action(&self, k: usize) -> &'a ActionLaw {
        match self.q {
            ActionFlow::PerStep(q) => &q[k],
            ActionFlow::Constant(q) => q,
        }
    }
}

/// Horizon certificate for the infinite-horizon value.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TruncationCertificate {
    pub tol: f64,
    pub t_required: f64,
    pub steps: usize,
    pub reward_bound: f64,
    pub discount: f64,
    /// `(M/λ)e^{−λT}`.
    pub y_bound: f64,
    /// `(1 + T)e^{−2λT}`; the constant in front is fitted, not certified.
    pub z_shape: f64,
}

impl TruncationCertificate {
    /// Certified horizon for accuracy `tol` on `Ỹ_0`, rounded up to the grid.
    pub fn new(reward_bound: f64, discount: f64, tol: f64, dt: f64) -> Result<Self> {
        if !(tol > 0.0) || !(dt > 0.0) {
            return Err(crate::error::invalid("truncation needs tol > 0 and dt > 0"));
        }
        let raw = (reward_bound / (discount * 0.5 * tol)).ln() / discount;
        let steps = ((raw / dt) - 1e-9).ceil().max(1.0) as usize;
        let t = steps as f64 * dt;
        Ok(Self {
            tol,
            t_required: t,
            steps,
            reward_bound,
            discount,
            y_bound: reward_bound / discount * (-discount * t).exp(),
            z_shape: (1.0 + t) * (-2.0 * discount * t).exp(),
        })
    }
}

/// Output of a backward solve over steps `0..=horizon`.
#[derive(Clone, Debug)]
pub struct BsdeSolution {
    pub n: usize,
    pub dim: usize,
    pub horizon: usize,
    pub dt: f64,
    pub discount: f64,
    pub rho: f64,
    pub step_weight: f64,
    /// `(horizon + 1) × N`, step-major.
    pub y: Vec<f64>,
    /// `horizon × N × d`.
    pub z: Vec<f64>,
    /// Grid index of the action used at each `(k, i)`.
    pub actions: Vec<u16>,
    /// `σ⁻¹b` at the action used, `horizon × N × d`.
    pub drift: Vec<f64>,
    pub certificate: Option<TruncationCertificate>,
    /// Largest `|Ỹ|` before clamping.
    pub max_abs_pre_clamp: f64,
    pub clamped: usize,
    pub basis: String,
    pub warnings: Vec<String>,
}

impl BsdeSolution {
    pub fn y_at(&self, k: usize) -> &[f64] {
        &self.y[k * self.n..(k + 1) * self.n]
    }

    pub fn z_at(&self, k: usize) -> &[f64] {
        let w = self.n * self.dim;
        &self.z[k * w..(k + 1) * w]
    }

    pub fn actions_at(&self, k: usize) -> &[u16] {
        &self.actions[k * self.n..(k + 1) * self.n]
    }

    pub fn drift_at(&self, k: usize) -> &[f64] {
        let w = self.n * self.dim;
        &self.drift[k * w..(k + 1) * w]
    }

    /// Cross-sectional mean of `Ỹ_0`, the value `V = E[Ỹ_0]`.
    pub fn y0_mean(&self) -> f64 {
        self.y_at(0).iter().sum::<f64>() / self.n as f64
    }

    /// Standard error of the cross-sectional mean of `Ỹ_0`.
    pub fn y0_std_error(&self) -> f64 {
        let m = self.y0_mean();
        let v = self.y_at(0).iter().map(|y| (y - m) * (y - m)).sum::<f64>() / (self.n.max(2) - 1) as f64;
        (v / self.n as f64).sqrt()
    }

    /// `(1/N) Σ_i Σ_k e^{−2λt_k} ‖Z̃_k‖² Δt`.
    pub fn z_energy(&self) -> f64 {
        let mut total = 0.0;
        for k in 0..self.horizon {
            let disc = (-2.0 * self.discount * k as f64 * self.dt).exp();
            total += disc * self.z_at(k).iter().map(|v| v * v).sum::<f64>();
        }
        total * self.dt / self.n as f64
    }

    /// Girsanov weights of the measure induced by the stored drift.
    pub fn weights(&self, ens: &PathEnsemble, bound: f64) -> Result<MeasureWeights> {
        MeasureWeights::girsanov(ens, self.drift.clone(), self.horizon, bound)
    }

    /// Columns: `t, mean_y, mean_z_sq`.
    pub fn write_profile_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,mean_y,mean_z_sq")?;
        for k in 0..=self.horizon {
            let my = self.y_at(k).iter().sum::<f64>() / self.n as f64;
            let mz = if k < self.horizon {
                self.z_at(k).iter().map(|v| v * v).sum::<f64>() / self.n as f64
            } else {
                0.0
            };
            writeln!(out, "{},{my:.12e},{mz:.12e}", k as f64 * self.dt)?;
        }
        Ok(())
    }
}

/// Gaps reported by [`BsdeSolver::stability_probe`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityGap {
    /// `|E Ỹ_0^{(n)} − E Ỹ_0|`.
    pub y0_gap: f64,
    /// `max_k (1/N) Σ_i |Ỹ^{(n)}_k − Ỹ_k|`.
    pub y_gap: f64,
    /// Discounted energy of `Z̃^{(n)} − Z̃`.
    pub z_gap: f64,
}

#[derive(Clone, Copy)]
enum Driver<'x> {
    Optimal,
    Policy(&'x [u16]),
}

struct ChunkOut {
    y: Vec<f64>,
    actions: Vec<u16>,
    drift: Vec<f64>,
    max_abs: f64,
    clamped: usize,
}

/// Backward solver bound to one ensemble and regression plan.
#[derive(Debug)]
pub struct BsdeSolver<'e> {
    ens: &'e PathEnsemble,
    regressor: Regressor,
}

impl<'e> BsdeSolver<'e> {
    pub fn new(ens: &'e PathEnsemble, basis: Basis) -> Result<Self> {
        Ok(Self {
            ens,
            regressor: Regressor::new(ens, basis, ens.steps())?,
        })
    }

    /// Exact conditioning on binomial ensembles, the default polynomial
    /// basis otherwise.
    pub fn for_ensemble(ens: &'e PathEnsemble) -> Result<Self> {
        let basis = match ens.noise() {
            crate::paths::NoiseKind::Binomial => Basis::Exact,
            crate::paths::NoiseKind::Gaussian => Basis::default(),
        };
        Self::new(ens, basis)
    }

    pub fn ensemble(&self) -> &'e PathEnsemble {
        self.ens
    }

    pub fn regressor(&self) -> &Regressor {
        &self.regressor
    }

    /// Solves on `[0, t_K]` with `Ỹ_K = 0`.
    pub fn solve_finite_horizon(&self, spec: &GameSpec, field: &MeanField<'_>, steps: usize) -> Result<BsdeSolution> {
        self.solve(spec, field, steps, Driver::Optimal)
    }

    /// As [`Self::solve_finite_horizon`] with the horizon given as a time.
    pub fn solve_until(&self, spec: &GameSpec, field: &MeanField<'_>, t: f64) -> Result<BsdeSolution> {
        let steps = self.ens.step_of(t)?;
        self.solve_finite_horizon(spec, field, steps)
    }

    /// Solves at the certified horizon for accuracy `tol` on `Ỹ_0`.
    pub fn solve_infinite_horizon(&self, spec: &GameSpec, field: &MeanField<'_>, tol: f64) -> Result<BsdeSolution> {
        let cert = self.certificate(spec, tol)?;
        let mut sol = self.solve_finite_horizon(spec, field, cert.steps)?;
        sol.certificate = Some(cert);
        Ok(sol)
    }

    /// The truncation certificate for `tol`, checked against the ensemble.
    pub fn certificate(&self, spec: &GameSpec, tol: f64) -> Result<TruncationCertificate> {
        let cert = TruncationCertificate::new(spec.bounds.reward, spec.discount, tol, self.ens.dt())?;
        if cert.steps > self.ens.steps() {
            return Err(MfgError::EnsembleTooShort {
                required: cert.t_required,
                available: self.ens.horizon(),
            });
        }
        Ok(cert)
    }

    /// Linear BSDE of a fixed control: `Ỹ_k = ρm + c(f(α_k) + Z̃·β(α_k))`,
    /// so that `E Ỹ_0` is the reward of `α` over `[0, t_K]`. `actions` is
    /// `K × N` grid indices, step-major.
    pub fn solve_policy(
        &self,
        spec: &GameSpec,
        field: &MeanField<'_>,
        actions: &[u16],
        steps: usize,
    ) -> Result<BsdeSolution> {
        if actions.len() < steps * self.ens.len() {
            return Err(MfgError::Shape(format!(
                "control has {} entries, need {}",
                actions.len(),
                steps * self.ens.len()
            )));
        }
        let na = spec.actions.len();
        if let Some(&bad) = actions.iter().find(|&&a| a as usize >= na) {
            return Err(MfgError::ActionOutsideSet {
                action: vec![bad as f64],
            });
        }
        self.solve(spec, field, steps, Driver::Policy(actions))
    }

    fn solve(&self, spec: &GameSpec, field: &MeanField<'_>, steps: usize, driver: Driver<'_>) -> Result<BsdeSolution> {
        let ens = self.ens;
        if steps > ens.steps() || steps > self.regressor.steps() {
            return Err(MfgError::HorizonExceeded {
                requested: steps,
                available: ens.steps().min(self.regressor.steps()),
            });
        }
        if let Some(h) = field.horizon() {
            if h < steps.saturating_sub(1) {
                return Err(MfgError::HorizonExceeded {
                    requested: steps,
                    available: h,
                });
            }
        }
        if spec.dim() != ens.dim() {
            return Err(MfgError::Shape("game and ensemble dimensions differ".into()));
        }
        let n = ens.len();
        let d = ens.dim();
        let dt = ens.dt();
        let lambda = spec.discount;
        let rho = (-lambda * dt).exp();
        let w = -(-lambda * dt).exp_m1() / lambda;
        let bound = spec.bounds.reward / lambda;
        let na = spec.actions.len();

        let mut y = vec![0.0; (steps + 1) * n];
        let mut z = vec![0.0; steps * n * d];
        let mut actions = vec![0u16; steps * n];
        let mut drift = vec![0.0; steps * n * d];
        let mut m = vec![0.0; n];
        let mut centered = vec![0.0; n];
        let mut g = vec![0.0; n];
        let mut max_abs = 0.0f64;
        let mut clamped = 0usize;

        for k in (0..steps).rev() {
            let (head, tail) = y.split_at_mut((k + 1) * n);
            let next = &tail[..n];
            let cur = &mut head[k * n..];
            self.regressor.fit(ens, k, next, &mut m);
            let dw = ens.increments_at(k);
            let zk = &mut z[k * n * d..(k + 1) * n * d];
            for j in 0..d {
                for i in 0..n {
                    centered[i] = (next[i] - m[i]) * dw[i * d + j];
                }
                self.regressor.fit(ens, k, &centered, &mut g);
                for i in 0..n {
                    zk[i * d + j] = rho * g[i] / w;
                }
            }
            let t = k as f64 * dt;
            let law = field.law(ens, k)?;
            let q = field.action(k);
            let coeffs = &spec.coefficients;
            let f2 = coeffs.reward_interaction(t, &law, q);
            let zk = &*zk;
            let m = &m;
            let chunks = exec::map_ranges(n, exec::PATH_CHUNK, |r| -> Result<ChunkOut> {
                let len = r.len();
                let mut out = ChunkOut {
                    y: Vec::with_capacity(len),
                    actions: Vec::with_capacity(len),
                    drift: Vec::with_capacity(len * d),
                    max_abs: 0.0,
                    clamped: 0,
                };
                let mut beta = vec![0.0; na * d];
                let mut f3 = vec![0.0; na];
                for i in r {
                    let view = ens.path_view(k, i);
                    coeffs.action_terms(t, &view, &law, &spec.actions, &mut beta, &mut f3)?;
                    let zi = &zk[i * d..(i + 1) * d];
                    let (j, v) = match driver {
                        Driver::Optimal => grid_argmax(&beta, &f3, zi),
                        Driver::Policy(a) => {
                            let j = a[k * n + i] as usize;
                            let b = &beta[j * d..(j + 1) * d];
                            (j, f3[j] + b.iter().zip(zi).map(|(b, z)| b * z).sum::<f64>())
                        }
                    };
                    let h = coeffs.reward_state(t, &view, &law) + v + f2;
                    let pre = rho * m[i] + w * h;
                    if !pre.is_finite() {
                        return Err(MfgError::NonFinite("BSDE value"));
                    }
                    out.max_abs = out.max_abs.max(pre.abs());
                    let val = if pre.abs() > bound {
                        out.clamped += 1;
                        pre.clamp(-bound, bound)
                    } else {
                        pre
                    };
                    out.y.push(val);
                    out.actions.push(j as u16);
                    out.drift.extend_from_slice(&beta[j * d..(j + 1) * d]);
                }
                Ok(out)
            });
            let mut pos = 0;
            for chunk in chunks {
                let chunk = chunk?;
                let len = chunk.y.len();
                cur[pos..pos + len].copy_from_slice(&chunk.y);
                actions[k * n + pos..k * n + pos + len].copy_from_slice(&chunk.actions);
                drift[(k * n + pos) * d..(k * n + pos + len) * d].copy_from_slice(&chunk.drift);
                max_abs = max_abs.max(chunk.max_abs);
                clamped += chunk.clamped;
                pos += len;
            }
        }
        Ok(BsdeSolution {
            n,
            dim: d,
            horizon: steps,
            dt,
            discount: lambda,
            rho,
            step_weight: w,
            y,
            z,
            actions,
            drift,
            certificate: None,
            max_abs_pre_clamp: max_abs,
            clamped,
            basis: self.regressor.descriptor(),
            warnings: self.regressor.warnings().to_vec(),
        })
    }

    /// Re-solves for each perturbed problem and compares with the base
    /// solution on `[0, t_K]`.
    pub fn stability_probe(
        &self,
        base: (&GameSpec, &MeanField<'_>),
        sequence: &[(&GameSpec, MeanField<'_>)],
        steps: usize,
    ) -> Result<Vec<StabilityGap>> {
        let reference = self.solve_finite_horizon(base.0, base.1, steps)?;
        let n = reference.n as f64;
        sequence
            .iter()
            .map(|(spec, field)| {
                let sol = self.solve_finite_horizon(spec, field, steps)?;
                let mut y_gap = 0.0f64;
                for k in 0..=steps {
                    let g = sol
                        .y_at(k)
                        .iter()
                        .zip(reference.y_at(k))
                        .map(|(a, b)| (a - b).abs())
                        .sum::<f64>()
                        / n;
                    y_gap = y_gap.max(g);
                }
                let mut z_gap = 0.0;
                for k in 0..steps {
                    let disc = (-2.0 * sol.discount * k as f64 * sol.dt).exp();
                    z_gap += disc
                        * sol
                            .z_at(k)
                            .iter()
                            .zip(reference.z_at(k))
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>();
                }
                Ok(StabilityGap {
                    y0_gap: (sol.y0_mean() - reference.y0_mean()).abs(),
                    y_gap,
                    z_gap: z_gap * sol.dt / n,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::inline::{registry, GameDescription, InlineCoefficients};
    use crate::game::ActionKind;

    fn identity_field<'a>(w: &'a MeasureWeights, q: &'a ActionLaw) -> MeanField<'a> {
        MeanField::new(LawFlow::Weighted(w), ActionFlow::Constant(q))
    }

    #[test]
    fn certificate_horizon() {
        let c = TruncationCertificate::new(1.0, 0.5, 1e-3, 0.05).unwrap();
        let raw = 2.0 * 4000f64.ln();
        assert!(c.t_required >= raw && c.t_required < raw + 0.05 + 1e-9);
        assert!((raw - 16.588).abs() < 1e-3);
        assert!(c.y_bound <= 5e-4 + 1e-15);
    }

    #[test]
    fn constant_reward_is_exact() {
        let spec = registry("constant-reward").unwrap();
        let ens = PathEnsemble::simulate(&spec, 200, 400, 20.0, 1).unwrap();
        let solver = BsdeSolver::for_ensemble(&ens).unwrap();
        let w = MeasureWeights::identity(&ens, 400).unwrap();
        let q = ActionLaw::uniform(&spec.actions);
        let sol = solver.solve_finite_horizon(&spec, &identity_field(&w, &q), 400).unwrap();
        let want = 2.0 * (1.0 - (-10.0f64).exp());
        assert!((sol.y0_mean() - want).abs() < 1e-12);
        assert!(sol.z.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(sol.clamped, 0);
        // Ties resolve to the first action.
        assert!(sol.actions.iter().all(|&a| a == 0));
    }

    #[test]
    fn zero_game_is_zero() {
        let spec = GameDescription::custom(InlineCoefficients::default(), ActionKind::interval(-1.0, 1.0, 5))
            .build()
            .unwrap();
        let ens = PathEnsemble::simulate(&spec, 100, 20, 2.0, 2).unwrap();
        let solver = BsdeSolver::for_ensemble(&ens).unwrap();
        let w = MeasureWeights::identity(&ens, 20).unwrap();
        let q = ActionLaw::uniform(&spec.actions);
        let sol = solver.solve_finite_horizon(&spec, &identity_field(&w, &q), 20).unwrap();
        assert!(sol.y.iter().all(|&v| v == 0.0));
        assert!(sol.z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reward_shift_is_linear() {
        let spec = registry("gaussian-repulsion").unwrap();
        let ens = PathEnsemble::simulate(&spec, 500, 40, 4.0, 5).unwrap();
        let solver = BsdeSolver::for_ensemble(&ens).unwrap();
        let w = MeasureWeights::identity(&ens, 40).unwrap();
        let q = ActionLaw::uniform(&spec.actions);
        let field = identity_field(&w, &q);
        let shifted = spec.with_reward_shift(0.1);
        let gaps = solver.stability_probe((&spec, &field), &[(&shifted, field)], 40).unwrap();
        let want = 0.1 * (1.0 - (-2.0f64).exp()) / 0.5;
        assert!((gaps[0].y0_gap - want).abs() < 1e-10, "{}", gaps[0].y0_gap);
        assert!(gaps[0].z_gap < 1e-20);
    }

    #[test]
    fn too_short_ensemble_names_horizon() {
        let spec = registry("constant-reward").unwrap();
        let ens = PathEnsemble::simulate(&spec, 10, 10, 1.0, 1).unwrap();
        let solver = BsdeSolver::for_ensemble(&ens).unwrap();
        let w = MeasureWeights::identity(&ens, 10).unwrap();
        let q = ActionLaw::uniform(&spec.actions);
        match solver.solve_infinite_horizon(&spec, &identity_field(&w, &q), 1e-3) {
            Err(MfgError::EnsembleTooShort { required, .. }) => assert!(required > 16.5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn policy_bsde_of_optimal_control_reproduces_value() {
        let spec = registry("gaussian-repulsion").unwrap();
        let ens = PathEnsemble::simulate(&spec, 400, 30, 3.0, 9).unwrap();
        let solver = BsdeSolver::for_ensemble(&ens).unwrap();
        let w = MeasureWeights::identity(&ens, 30).unwrap();
        let q = ActionLaw::uniform(&spec.actions);
        let field = identity_field(&w, &q);
        let opt = solver.solve_finite_horizon(&spec, &field, 30).unwrap();
        let pol = solver.solve_policy(&spec, &field, &opt.actions, 30).unwrap();
        // Same Z̃ and the same maximiser at every node: identical solutions.
        assert!((pol.y0_mean() - opt.y0_mean()).abs() < 1e-12);
        let zero = vec![20u16; 30 * 400];
        let other = solver.solve_policy(&spec, &field, &zero, 30).unwrap();
        assert!(other.y0_mean() <= opt.y0_mean() + 1e-12);
    }
}
