//! Game data: coefficient callables, action set, initial law and the
//! declared constants that the analysis relies on.

mod action;
pub mod assumptions;
pub mod hamiltonian;
pub mod inline;

use std::fmt::Debug;
use std::sync::Arc;

use rand::{Rng, RngExt};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, MfgError, Result};
use crate::law::{ActionLaw, MarginalLaw, PathView};

pub use action::{ActionKind, ActionSet};

/// Coefficients `b`, `σ` and the separated running reward `f = f1 + f2 + f3`.
///
/// All functions must be non-anticipative: evaluation at step `k` may only
/// read `path.at(j)` for `j <= k`, which [`PathView`] enforces.
pub trait Coefficients: Send + Sync + Debug {
    fn dim(&self) -> usize;

    /// Drift `b(t, x, μ, a)` written into `out` (length `d`).
    fn drift(&self, t: f64, path: &PathView<'_>, law: &MarginalLaw<'_>, a: &[f64], out: &mut [f64]);

    /// Volatility `σ(t, x)` written row-major into `out` (length `d * d`).
    fn volatility(&self, t: f64, path: &PathView<'_>, out: &mut [f64]);

    /// `f1(t, x, μ)`.
    fn reward_state(&self, t: f64, path: &PathView<'_>, law: &MarginalLaw<'_>) -> f64;

    /// `f2(t, μ, q)`.
    fn reward_interaction(&self, t: f64, law: &MarginalLaw<'_>, q: &ActionLaw) -> f64;

    /// `f3(t, x, a)`.
    fn reward_action(&self, t: f64, path: &PathView<'_>, a: &[f64]) -> f64;

    fn is_time_homogeneous(&self) -> bool {
        false
    }

    fn drift_depends_on_law(&self) -> bool {
        true
    }

    /// Whether `f1` or `f2` read the laws at all.
    fn reward_depends_on_law(&self) -> bool {
        true
    }

    /// Fills `beta[j*d..]` with `σ⁻¹b(t, x, μ, a_j)` and `f3[j]` with
    /// `f3(t, x, a_j)` for every grid action `a_j`.
    fn action_terms(
        &self,
        t: f64,
        path: &PathView<'_>,
        law: &MarginalLaw<'_>,
        actions: &ActionSet,
        beta: &mut [f64],
        f3: &mut [f64],
    ) -> Result<()> {
        let d = self.dim();
        let mut sigma = vec![0.0; d * d];
        self.volatility(t, path, &mut sigma);
        let lu = Lu::factor(sigma, d).map_err(|pivot| MfgError::SingularVolatility { t, pivot })?;
        let mut b = vec![0.0; d];
        for (j, a) in actions.points().enumerate() {
            self.drift(t, path, law, a, &mut b);
            let out = &mut beta[j * d..(j + 1) * d];
            out.copy_from_slice(&b);
            lu.solve(out);
            f3[j] = self.reward_action(t, path, a);
        }
        Ok(())
    }
}

/// Dense LU factorisation with partial pivoting for the small `d × d`
/// volatility matrices.
#[derive(Clone, Debug)]
pub struct Lu {
    d: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    /// Factorises `a` (row-major). On failure returns the offending pivot.
    pub fn factor(mut a: Vec<f64>, d: usize) -> std::result::Result<Self, f64> {
        assert_eq!(a.len(), d * d);
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !scale.is_finite() || scale == 0.0 {
            return Err(0.0);
        }
        let mut perm: Vec<usize> = (0..d).collect();
        for col in 0..d {
            let (piv, pval) = (col..d)
                .map(|r| (r, a[r * d + col].abs()))
                .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pval <= 1e-13 * scale {
                return Err(a[piv * d + col]);
            }
            if piv != col {
                for c in 0..d {
                    a.swap(col * d + c, piv * d + c);
                }
                perm.swap(col, piv);
            }
            let p = a[col * d + col];
            for r in col + 1..d {
                let factor = a[r * d + col] / p;
                a[r * d + col] = factor;
                for c in col + 1..d {
                    a[r * d + c] -= factor * a[col * d + c];
                }
            }
        }
        Ok(Self { d, lu: a, perm })
    }

    /// Overwrites `b` with `A⁻¹ b`.
    pub fn solve(&self, b: &mut [f64]) {
        let d = self.d;
        if d == 1 {
            b[0] /= self.lu[0];
            return;
        }
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for r in 0..d {
            for c in 0..r {
                x[r] -= self.lu[r * d + c] * x[c];
            }
        }
        for r in (0..d).rev() {
            for c in r + 1..d {
                x[r] -= self.lu[r * d + c] * x[c];
            }
            x[r] /= self.lu[r * d + r];
        }
        b.copy_from_slice(&x);
    }
}

/// Initial law `υ` of the state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitialLaw {
    Dirac { point: Vec<f64> },
    /// Independent normal coordinates.
    Normal { mean: Vec<f64>, std: Vec<f64> },
    /// Weighted atoms, sampled by inversion of the cumulative masses.
    Atoms { points: Vec<Vec<f64>>, weights: Vec<f64> },
}

impl InitialLaw {
    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Dirac { point } => point.len(),
            InitialLaw::Normal { mean, .. } => mean.len(),
            InitialLaw::Atoms { points, .. } => points.first().map_or(0, Vec::len),
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.dim() != d {
            return Err(MfgError::Shape(format!("initial law has dimension {}, game {d}", self.dim())));
        }
        match self {
            InitialLaw::Dirac { point } if point.iter().all(|v| v.is_finite()) => Ok(()),
            InitialLaw::Normal { mean, std }
                if std.len() == d && std.iter().all(|s| *s >= 0.0 && s.is_finite()) && mean.iter().all(|v| v.is_finite()) =>
            {
                Ok(())
            }
            InitialLaw::Atoms { points, weights }
                if !points.is_empty()
                    && points.len() == weights.len()
                    && points.iter().all(|p| p.len() == d)
                    && weights.iter().all(|w| *w >= 0.0 && w.is_finite())
                    && weights.iter().sum::<f64>() > 0.0 =>
            {
                Ok(())
            }
            _ => Err(invalid("malformed initial law")),
        }
    }

    pub fn is_dirac(&self) -> bool {
        matches!(self, InitialLaw::Dirac { .. })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match self {
            InitialLaw::Dirac { point } => out.copy_from_slice(point),
            InitialLaw::Normal { mean, std } => {
                for ((o, m), s) in out.iter_mut().zip(mean).zip(std) {
                    let g: f64 = StandardNormal.sample(rng);
                    *o = m + s * g;
                }
            }
            InitialLaw::Atoms { points, weights } => {
                let total: f64 = weights.iter().sum();
                let u: f64 = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut pick = points.len() - 1;
                for (j, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        pick = j;
                        break;
                    }
                }
                out.copy_from_slice(&points[pick]);
            }
        }
    }
}

/// Constants declared by the user and checked by sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeclaredBounds {
    /// `C`: bound on `‖σ⁻¹b‖`.
    pub drift: f64,
    /// `M`: bound on `|f|`.
    pub reward: f64,
    /// `L`: Lipschitz constant of `σ⁻¹b` in the action.
    pub lipschitz: f64,
    /// `m`: strong concavity modulus of the Hamiltonian in the action.
    #[serde(default)]
    pub concavity: Option<f64>,
    /// `δ`: slack in the weak monotonicity condition.
    #[serde(default)]
    pub monotonicity_slack: f64,
    /// `C_A`: bound on the action norm.
    pub action: f64,
}

impl DeclaredBounds {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !(pos(self.drift) && pos(self.reward) && pos(self.lipschitz) && pos(self.action)) {
            return Err(invalid("declared bounds C, M, L, C_A must be finite and positive"));
        }
        if !(self.monotonicity_slack >= 0.0 && self.monotonicity_slack.is_finite()) {
            return Err(invalid("monotonicity slack must be finite and nonnegative"));
        }
        if let Some(m) = self.concavity {
            if !pos(m) {
                return Err(invalid("concavity modulus must be positive"));
            }
        }
        Ok(())
    }

    /// `γ = mλ/(2L²) − δ`, when a concavity modulus is declared.
    pub fn rate_gap(&self, discount: f64) -> Option<f64> {
        self.concavity
            .map(|m| m * discount / (2.0 * self.lipschitz * self.lipschitz) - self.monotonicity_slack)
    }
}

/// Radii and constants of the recurrence condition for time-homogeneous games.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationaryParams {
    /// `R′`: radius outside of which the drift condition must hold.
    pub inner_radius: f64,
    /// `R > R′`.
    pub outer_radius: f64,
    /// `k > 0`: required margin in `xᵀb + ½ tr Σ ≤ −k`.
    pub margin: f64,
    /// `Λ`: bound of `‖b‖`, `‖σ‖`, `‖σ⁻¹‖` on the ball of radius `R`.
    pub local_bound: f64,
}

impl StationaryParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_radius > 0.0 && self.inner_radius < self.outer_radius && self.outer_radius.is_finite()) {
            return Err(invalid("stationary radii must satisfy 0 < R' < R"));
        }
        if !(self.margin > 0.0 && self.local_bound > 0.0) {
            return Err(invalid("drift margin k and local bound must be positive"));
        }
        Ok(())
    }
}

/// A complete game description.
#[derive(Clone, Debug)]
pub struct GameSpec {
    pub name: String,
    pub coefficients: Arc<dyn Coefficients>,
    /// Discount rate `λ > 0`.
    pub discount: f64,
    pub actions: ActionSet,
    pub initial: InitialLaw,
    pub bounds: DeclaredBounds,
    pub stationary: Option<StationaryParams>,
}

impl GameSpec {
    pub fn dim(&self) -> usize {
        self.coefficients.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.discount > 0.0 && self.discount.is_finite()) {
            return Err(invalid("discount must be positive"));
        }
        if self.actions.is_empty() {
            return Err(MfgError::EmptyActionGrid);
        }
        if self.actions.len() > u16::MAX as usize {
            return Err(invalid("action grid exceeds 65535 points"));
        }
        self.initial.validate(self.dim())?;
        self.bounds.validate()?;
        if let Some(s) = &self.stationary {
            s.validate()?;
        }
        Ok(())
    }

    /// Total reward `f1 + f2 + f3` at one point.
    pub fn reward(
        &self,
        t: f64,
        path: &PathView<'_>,
        law: &MarginalLaw<'_>,
        q: &ActionLaw,
        a: &[f64],
    ) -> f64 {
        let c = &self.coefficients;
        c.reward_state(t, path, law) + c.reward_interaction(t, law, q) + c.reward_action(t, path, a)
    }

    /// `σ⁻¹b(t, x, μ, a)`.
    pub fn scaled_drift(
        &self,
        t: f64,
        path: &PathView<'_>,
        law: &MarginalLaw<'_>,
        a: &[f64],
    ) -> Result<Vec<f64>> {
        let d = self.dim();
        let mut sigma = vec![0.0; d * d];
        self.coefficients.volatility(t, path, &mut sigma);
        let lu = Lu::factor(sigma, d).map_err(|pivot| MfgError::SingularVolatility { t, pivot })?;
        let mut b = vec![0.0; d];
        self.coefficients.drift(t, path, law, a, &mut b);
        lu.solve(&mut b);
        Ok(b)
    }
}

/// Wraps coefficients and adds a constant to `f1`.
#[derive(Debug)]
pub struct RewardShift {
    pub inner: Arc<dyn Coefficients>,
    pub shift: f64,
}

impl Coefficients for RewardShift {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn drift(&self, t: f64, path: &PathView<'_>, law: &MarginalLaw<'_>, a: &[f64], out: &mut [f64]) {
        self.inner.drift(t, path, law, a, out)
    }

    fn volatility(&self, t: f64, path: &PathView<'_>, out: &mut [f64]) {
        self.inner.volatility(t, path, out)
    }

    fn reward_state(&self, t: f64, path: &PathView<'_>, law: &MarginalLaw<'_>) -> f64 {
        self.inner.reward_state(t, path, law) + self.shift
    }

    fn reward_interaction(&self, t: f64, law: &MarginalLaw<'_>, q: &ActionLaw) -> f64 {
        self.inner.reward_interaction(t, law, q)
    }

    fn reward_action(&self, t: f64, path: &PathView<'_>, a: &[f64]) -> f64 {
        self.inner.reward_action(t, path, a)
    }

    fn is_time_homogeneous(&self) -> bool {
        self.inner.is_time_homogeneous()
    }

    fn drift_depends_on_law(&self) -> bool {
        self.inner.drift_depends_on_law()
    }

    fn reward_depends_on_law(&self) -> bool {
        self.inner.reward_depends_on_law()
    }

    fn action_terms(
        &self,
        t: f64,
        path: &PathView<'_>,
        law: &MarginalLaw<'_>,
        actions: &ActionSet,
        beta: &mut [f64],
        f3: &mut [f64],
    ) -> Result<()> {
        self.inner.action_terms(t, path, law, actions, beta, f3)
    }
}

impl GameSpec {
    /// The same game with `f1` raised by `shift`; the declared reward bound
    /// grows by `|shift|`.
    pub fn with_reward_shift(&self, shift: f64) -> GameSpec {
        let mut out = self.clone();
        out.coefficients = Arc::new(RewardShift {
            inner: self.coefficients.clone(),
            shift,
        });
        out.bounds.reward += shift.abs();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn lu_solves_small_system() {
        let lu = Lu::factor(vec![0.0, 2.0, 1.0, 1.0], 2).unwrap();
        let mut b = [4.0, 3.0];
        lu.solve(&mut b);
        assert!((b[0] - 1.0).abs() < 1e-14 && (b[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn lu_rejects_singular() {
        assert!(Lu::factor(vec![1.0, 2.0, 2.0, 4.0], 2).is_err());
        assert!(Lu::factor(vec![0.0], 1).is_err());
    }

    #[test]
    fn atom_sampling_respects_weights() {
        let law = InitialLaw::Atoms {
            points: vec![vec![-1.0], vec![1.0]],
            weights: vec![1.0, 3.0],
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut x = [0.0];
        let mut hits = 0;
        for _ in 0..20_000 {
            law.sample(&mut rng, &mut x);
            hits += (x[0] > 0.0) as usize;
        }
        let p = hits as f64 / 20_000.0;
        assert!((p - 0.75).abs() < 0.02, "{p}");
    }

    #[test]
    fn rate_gap_matches_formula() {
        let b = DeclaredBounds {
            drift: 1.0,
            reward: 4.0,
            lipschitz: 1.0,
            concavity: Some(1.0),
            monotonicity_slack: 0.0,
            action: 1.0,
        };
        assert_eq!(b.rate_gap(0.5), Some(0.25));
    }
}
