//! The Hamiltonian `h̃ = f + zᵀσ⁻¹b` and its grid maximiser.

use crate::error::{MfgError, Result};
use crate::game::GameSpec;
use crate::law::{ActionLaw, MarginalLaw, PathView};

/// Result of [`maximize_hamiltonian`].
#[derive(Clone, Debug, PartialEq)]
pub struct Maximizer {
    /// Grid index of the maximiser.
    pub index: usize,
    pub action: Vec<f64>,
    /// `f1 + f3 + zᵀσ⁻¹b` at the maximiser (`f2` is excluded since it does
    /// not depend on the action).
    pub value: f64,
}

/// `f1 + f2 + f3 + zᵀσ⁻¹b` at a single action.
pub fn hamiltonian_tilde(
    spec: &GameSpec,
    t: f64,
    path: &PathView<'_>,
    law: &MarginalLaw<'_>,
    q: &ActionLaw,
    z: &[f64],
    a: &[f64],
) -> Result<f64> {
    if !spec.actions.contains(a) {
        return Err(MfgError::ActionOutsideSet { action: a.to_vec() });
    }
    let beta = spec.scaled_drift(t, path, law, a)?;
    let linear: f64 = beta.iter().zip(z).map(|(b, z)| b * z).sum();
    Ok(spec.reward(t, path, law, q, a) + linear)
}

/// Exhaustive maximisation of `h̃` over the action grid; ties go to the
/// smallest grid index.
pub fn maximize_hamiltonian(
    spec: &GameSpec,
    t: f64,
    path: &PathView<'_>,
    law: &MarginalLaw<'_>,
    z: &[f64],
) -> Result<Maximizer> {
    let n = spec.actions.len();
    if n == 0 {
        return Err(MfgError::EmptyActionGrid);
    }
    let d = spec.dim();
    let mut beta = vec![0.0; n * d];
    let mut f3 = vec![0.0; n];
    spec.coefficients
        .action_terms(t, path, law, &spec.actions, &mut beta, &mut f3)?;
    let (index, value) = grid_argmax(&beta, &f3, z);
    let f1 = spec.coefficients.reward_state(t, path, law);
    Ok(Maximizer {
        index,
        action: spec.actions.point(index).to_vec(),
        value: value + f1,
    })
}

/// Argmax of `f3[j] + z·beta[j]` with first-index tie-breaking.
#[inline]
pub fn grid_argmax(beta: &[f64], f3: &[f64], z: &[f64]) -> (usize, f64) {
    let d = z.len();
    let mut best = (0, f64::NEG_INFINITY);
    if d == 1 {
        let z0 = z[0];
        for (j, (&f, &b)) in f3.iter().zip(beta).enumerate() {
            let v = f + z0 * b;
            if v > best.1 {
                best = (j, v);
            }
        }
    } else {
        for (j, &f) in f3.iter().enumerate() {
            let b = &beta[j * d..(j + 1) * d];
            let v = f + b.iter().zip(z).map(|(b, z)| b * z).sum::<f64>();
            if v > best.1 {
                best = (j, v);
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::inline::{GameDescription, InlineCoefficients};
    use crate::game::ActionKind;

    fn game(coeffs: InlineCoefficients, actions: ActionKind) -> GameSpec {
        GameDescription::custom(coeffs, actions).build().unwrap()
    }

    fn origin() -> (Vec<f64>, MarginalLaw<'static>) {
        (vec![0.0], MarginalLaw::dirac(&[0.0]))
    }

    #[test]
    fn linear_term_only() {
        let spec = game(
            InlineCoefficients {
                drift_a: 1.0,
                ..Default::default()
            },
            ActionKind::interval(-1.0, 1.0, 41),
        );
        let (x, law) = origin();
        let q = ActionLaw::uniform(&spec.actions);
        let h = hamiltonian_tilde(&spec, 0.0, &PathView::from_prefix(&x, 1), &law, &q, &[0.3], &[1.0]).unwrap();
        assert!((h - 0.3).abs() < 1e-15);
    }

    #[test]
    fn quadratic_cost_evaluation() {
        let spec = game(
            InlineCoefficients {
                drift_a: 1.0,
                action_cost: 1.0,
                ..Default::default()
            },
            ActionKind::interval(-1.0, 1.0, 41),
        );
        let (x, law) = origin();
        let q = ActionLaw::uniform(&spec.actions);
        let h = hamiltonian_tilde(&spec, 0.0, &PathView::from_prefix(&x, 1), &law, &q, &[0.0], &[0.4]).unwrap();
        assert!((h + 0.08).abs() < 1e-15);
        assert!(matches!(
            hamiltonian_tilde(&spec, 0.0, &PathView::from_prefix(&x, 1), &law, &q, &[0.0], &[1.5]),
            Err(MfgError::ActionOutsideSet { .. })
        ));
    }

    #[test]
    fn interior_and_boundary_maximisers() {
        let spec = game(
            InlineCoefficients {
                drift_a: 1.0,
                action_cost: 1.0,
                ..Default::default()
            },
            ActionKind::interval(-1.0, 1.0, 41),
        );
        let (x, law) = origin();
        let view = PathView::from_prefix(&x, 1);
        let m = maximize_hamiltonian(&spec, 0.0, &view, &law, &[0.3]).unwrap();
        assert!((m.action[0] - 0.3).abs() < 1e-12);
        assert!((m.value - 0.045).abs() < 1e-12);
        let m = maximize_hamiltonian(&spec, 0.0, &view, &law, &[2.0]).unwrap();
        assert_eq!(m.action, vec![1.0]);
        assert!((m.value - 1.5).abs() < 1e-12);
    }

    #[test]
    fn flat_hamiltonian_picks_first_action() {
        let spec = game(InlineCoefficients::default(), ActionKind::atoms_1d(&[-1.0, 0.0, 1.0]));
        let (x, law) = origin();
        let m = maximize_hamiltonian(&spec, 0.0, &PathView::from_prefix(&x, 1), &law, &[0.0]).unwrap();
        assert_eq!(m.index, 0);
        assert_eq!(m.action, vec![-1.0]);
    }
}
