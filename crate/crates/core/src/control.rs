//! Optimal controls from BSDE solutions, reward evaluation under the
//! controlled measure, and feedback projection.

use std::io::Write;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bsde::{BsdeSolution, BsdeSolver, MeanField, TruncationCertificate};
use crate::error::{invalid, MfgError, Result};
use crate::exec;
use crate::game::hamiltonian::grid_argmax;
use crate::game::GameSpec;
use crate::paths::{MeasureWeights, PathEnsemble};

pub const BOOTSTRAP_RESAMPLES: usize = 200;

/// Grid indices `α[k][i]` for `k < horizon`, step-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlField {
    pub n: usize,
    pub horizon: usize,
    pub actions: Vec<u16>,
}

impl ControlField {
    pub fn new(n: usize, horizon: usize, actions: Vec<u16>) -> Result<Self> {
        if actions.len() != n * horizon {
            return Err(MfgError::Shape(format!(
                "control has {} entries, expected {}",
                actions.len(),
                n * horizon
            )));
        }
        Ok(Self { n, horizon, actions })
    }

    /// The control stored in a solution.
    pub fn from_solution(sol: &BsdeSolution) -> Self {
        Self {
            n: sol.n,
            horizon: sol.horizon,
            actions: sol.actions.clone(),
        }
    }

    /// The same action everywhere.
    pub fn constant(n: usize, horizon: usize, index: u16) -> Self {
        Self {
            n,
            horizon,
            actions: vec![index; n * horizon],
        }
    }

    pub fn at(&self, k: usize) -> &[u16] {
        &self.actions[k * self.n..(k + 1) * self.n]
    }

    /// Restriction to the first `steps` steps.
    pub fn restrict(&self, steps: usize) -> Result<Self> {
        if steps > self.horizon {
            return Err(MfgError::HorizonExceeded {
                requested: steps,
                available: self.horizon,
            });
        }
        Ok(Self {
            n: self.n,
            horizon: steps,
            actions: self.actions[..steps * self.n].to_vec(),
        })
    }
}

/// Re-maximises the Hamiltonian at every `(k, i)` with the stored `Z̃`.
pub fn extract_optimal_control(
    spec: &GameSpec,
    field: &MeanField<'_>,
    sol: &BsdeSolution,
    ens: &PathEnsemble,
) -> Result<ControlField> {
    if sol.n != ens.len() || sol.horizon > ens.steps() || sol.dim != ens.dim() {
        return Err(MfgError::Shape("solution grid does not match the ensemble".into()));
    }
    let n = sol.n;
    let d = sol.dim;
    let na = spec.actions.len();
    let mut actions = Vec::with_capacity(n * sol.horizon);
    for k in 0..sol.horizon {
        let t = k as f64 * ens.dt();
        let law = field.law(ens, k)?;
        let z = sol.z_at(k);
        let chunks = exec::map_ranges(n, exec::PATH_CHUNK, |r| -> Result<Vec<u16>> {
            let mut beta = vec![0.0; na * d];
            let mut f3 = vec![0.0; na];
            let mut out = Vec::with_capacity(r.len());
            for i in r {
                let view = ens.path_view(k, i);
                spec.coefficients
                    .action_terms(t, &view, &law, &spec.actions, &mut beta, &mut f3)?;
                out.push(grid_argmax(&beta, &f3, &z[i * d..(i + 1) * d]).0 as u16);
            }
            Ok(out)
        });
        for c in chunks {
            actions.extend(c?);
        }
    }
    ControlField::new(n, sol.horizon, actions)
}

/// Per-step drift `σ⁻¹b(α)` and running reward `f(α)` of a control.
#[derive(Clone, Debug)]
pub struct ControlTerms {
    pub drift: Vec<f64>,
    pub reward: Vec<f64>,
}

pub fn control_terms(
    spec: &GameSpec,
    field: &MeanField<'_>,
    control: &ControlField,
    ens: &PathEnsemble,
) -> Result<ControlTerms> {
    if control.n != ens.len() || control.horizon > ens.steps() {
        return Err(MfgError::Shape("control does not match the ensemble".into()));
    }
    let n = control.n;
    let d = ens.dim();
    let na = spec.actions.len();
    let mut drift = Vec::with_capacity(n * control.horizon * d);
    let mut reward = Vec::with_capacity(n * control.horizon);
    for k in 0..control.horizon {
        let t = k as f64 * ens.dt();
        let law = field.law(ens, k)?;
        let f2 = spec.coefficients.reward_interaction(t, &law, field.action(k));
        let a = control.at(k);
        let chunks = exec::map_ranges(n, exec::PATH_CHUNK, |r| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut beta = vec![0.0; na * d];
            let mut f3 = vec![0.0; na];
            let mut b = Vec::with_capacity(r.len() * d);
            let mut f = Vec::with_capacity(r.len());
            for i in r {
                let j = a[i] as usize;
                if j >= na {
                    return Err(MfgError::ActionOutsideSet { action: vec![j as f64] });
                }
                let view = ens.path_view(k, i);
                spec.coefficients
                    .action_terms(t, &view, &law, &spec.actions, &mut beta, &mut f3)?;
                b.extend_from_slice(&beta[j * d..(j + 1) * d]);
                f.push(spec.coefficients.reward_state(t, &view, &law) + f2 + f3[j]);
            }
            Ok((b, f))
        });
        for c in chunks {
            let (b, f) = c?;
            drift.extend(b);
            reward.extend(f);
        }
    }
    Ok(ControlTerms { drift, reward })
}

/// Girsanov weights of the measure `P^{μ,α}`.
pub fn control_weights(
    spec: &GameSpec,
    field: &MeanField<'_>,
    control: &ControlField,
    ens: &PathEnsemble,
) -> Result<MeasureWeights> {
    let terms = control_terms(spec, field, control, ens)?;
    MeasureWeights::girsanov(ens, terms.drift, control.horizon, spec.bounds.drift)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RewardEstimate {
    pub value: f64,
    pub std_error: f64,
    /// Three bootstrap standard deviations.
    pub band: f64,
}

/// `J = (1/N) Σ_i Σ_k e^{−λt_k} c w_k[i] f_k[i]` with `c = (1 − e^{−λΔt})/λ`
/// and `w_k` the density restricted to `F_{t_k}`.
pub fn evaluate_reward(
    spec: &GameSpec,
    field: &MeanField<'_>,
    control: &ControlField,
    ens: &PathEnsemble,
    seed: u64,
) -> Result<RewardEstimate> {
    let terms = control_terms(spec, field, control, ens)?;
    let weights = MeasureWeights::girsanov(ens, terms.drift, control.horizon, spec.bounds.drift)?;
    reward_from_terms(spec, &terms.reward, &weights, ens, seed)
}

/// As [`evaluate_reward`] with precomputed weights and rewards.
pub fn reward_from_terms(
    spec: &GameSpec,
    reward: &[f64],
    weights: &MeasureWeights,
    ens: &PathEnsemble,
    seed: u64,
) -> Result<RewardEstimate> {
    let n = ens.len();
    let steps = reward.len() / n;
    if weights.horizon() < steps || weights.len() != n {
        return Err(MfgError::Shape("weight horizon does not cover the control".into()));
    }
    let lambda = spec.discount;
    let dt = ens.dt();
    let rho = (-lambda * dt).exp();
    let c = -(-lambda * dt).exp_m1() / lambda;
    let mut per_path = vec![0.0; n];
    let mut disc = c;
    for k in 0..steps {
        let l = weights.log_weights_at(k);
        let f = &reward[k * n..(k + 1) * n];
        for i in 0..n {
            per_path[i] += disc * l[i].exp() * f[i];
        }
        disc *= rho;
    }
    if per_path.iter().any(|v| !v.is_finite()) {
        return Err(MfgError::NonFinite("reward estimate"));
    }
    Ok(bootstrap_mean(&per_path, seed))
}

/// Sample mean with a seeded bootstrap band.
pub fn bootstrap_mean(values: &[f64], seed: u64) -> RewardEstimate {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n.max(2) - 1) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        let mut s = 0.0;
        for _ in 0..n {
            s += values[rng.random_range(0..n)];
        }
        means.push(s / n as f64);
    }
    let bm = means.iter().sum::<f64>() / means.len() as f64;
    let bvar = means.iter().map(|m| (m - bm) * (m - bm)).sum::<f64>() / (means.len() - 1) as f64;
    RewardEstimate {
        value: mean,
        std_error: (var / n as f64).sqrt(),
        band: 3.0 * bvar.sqrt(),
    }
}

#[derive(Clone, Debug)]
pub struct ValueEstimate {
    pub value: f64,
    pub std_error: f64,
    pub certificate: TruncationCertificate,
    pub solution: BsdeSolution,
}

/// `V = E[Ỹ_0]` at the certified horizon for `tol`.
pub fn value(solver: &BsdeSolver<'_>, spec: &GameSpec, field: &MeanField<'_>, tol: f64) -> Result<ValueEstimate> {
    let solution = solver.solve_infinite_horizon(spec, field, tol)?;
    Ok(ValueEstimate {
        value: solution.y0_mean(),
        std_error: solution.y0_std_error(),
        certificate: solution.certificate.clone().expect("certified solve"),
        solution,
    })
}

/// A state-feedback map on equal-mass bins of the first coordinate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FeedbackPolicy {
    /// `bins + 1` increasing edges; the outer cells extend to infinity.
    pub edges: Vec<f64>,
    pub action_index: Vec<u16>,
    pub actions: Vec<f64>,
    /// Fraction of fitted points where the control differs from the policy.
    pub disagreement: f64,
    /// `Σ_j |a_{j+1} − a_j|`.
    pub total_variation: f64,
    pub iteration: Option<usize>,
}

impl FeedbackPolicy {
    pub fn bins(&self) -> usize {
        self.action_index.len()
    }

    pub fn bin_of(&self, x: f64) -> usize {
        let inner = &self.edges[1..self.edges.len() - 1];
        inner.partition_point(|&e| e <= x)
    }

    pub fn index_at(&self, x: f64) -> u16 {
        self.action_index[self.bin_of(x)]
    }

    pub fn action_at(&self, x: f64) -> f64 {
        self.actions[self.bin_of(x)]
    }

    /// The policy applied along every path of an ensemble.
    pub fn control_on(&self, ens: &PathEnsemble, steps: usize) -> Result<ControlField> {
        if ens.dim() != 1 {
            return Err(invalid("feedback policies are fitted on one-dimensional states"));
        }
        let n = ens.len();
        let mut actions = Vec::with_capacity(n * steps);
        for k in 0..steps {
            actions.extend(ens.states_at(k).iter().map(|&x| self.index_at(x)));
        }
        ControlField::new(n, steps, actions)
    }

    /// Columns: `bin_low, bin_high, action`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "bin_low,bin_high,action")?;
        for (j, a) in self.actions.iter().enumerate() {
            let lo = if j == 0 { f64::NEG_INFINITY } else { self.edges[j] };
            let hi = if j + 1 == self.actions.len() {
                f64::INFINITY
            } else {
                self.edges[j + 1]
            };
            writeln!(out, "{lo},{hi},{a}")?;
        }
        Ok(())
    }
}

/// Bins the pooled states `X[k][i]`, `k < horizon`, into `bins` equal-mass
/// cells and assigns each cell the grid action nearest to the weighted mean
/// of the control there. Weights default to uniform.
pub fn fit_feedback(
    spec: &GameSpec,
    control: &ControlField,
    ens: &PathEnsemble,
    weights: Option<&MeasureWeights>,
    bins: usize,
) -> Result<FeedbackPolicy> {
    if !spec.coefficients.is_time_homogeneous() {
        return Err(MfgError::NotTimeHomogeneous("fit_feedback"));
    }
    if ens.dim() != 1 || spec.actions.dim() != 1 {
        return Err(invalid("feedback fitting needs one-dimensional states and actions"));
    }
    if bins == 0 || control.horizon == 0 {
        return Err(invalid("feedback fitting needs bins > 0 and a nonempty control"));
    }
    if control.n != ens.len() || control.horizon > ens.steps() {
        return Err(MfgError::Shape("control does not match the ensemble".into()));
    }
    if let Some(w) = weights {
        if w.horizon() + 1 < control.horizon {
            return Err(MfgError::Shape("weights do not cover the control".into()));
        }
    }
    let n = control.n;
    let total = n * control.horizon;
    let mut pts: Vec<(f64, u16, f64)> = Vec::with_capacity(total);
    for k in 0..control.horizon {
        let x = ens.states_at(k);
        let a = control.at(k);
        let w = weights.map(|w| w.masses_at(k));
        for i in 0..n {
            let m = w.as_ref().map_or(1.0 / n as f64, |w| w[i]);
            pts.push((x[i], a[i], m));
        }
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let bins = bins.min(total);
    // Cut points at equal counts, moved forward past ties.
    let mut starts = vec![0usize];
    for j in 1..bins {
        let mut s = j * total / bins;
        while s < total && s > 0 && pts[s].0 == pts[s - 1].0 {
            s += 1;
        }
        if s < total && s > *starts.last().unwrap() {
            starts.push(s);
        }
    }
    let grid = spec.actions.grid();
    let mut edges = vec![pts[0].0];
    let mut action_index = Vec::with_capacity(starts.len());
    for (b, &s) in starts.iter().enumerate() {
        let e = starts.get(b + 1).copied().unwrap_or(total);
        let (mut num, mut den) = (0.0, 0.0);
        for p in &pts[s..e] {
            num += p.2 * grid[p.1 as usize];
            den += p.2;
        }
        let avg = if den > 0.0 {
            num / den
        } else {
            pts[s..e].iter().map(|p| grid[p.1 as usize]).sum::<f64>() / (e - s) as f64
        };
        action_index.push(spec.actions.nearest_index(&[avg]) as u16);
        if b > 0 {
            edges.push(pts[s].0);
        }
    }
    edges.push(pts[total - 1].0);
    let actions: Vec<f64> = action_index.iter().map(|&j| grid[j as usize]).collect();
    let mut policy = FeedbackPolicy {
        edges,
        action_index,
        actions,
        disagreement: 0.0,
        total_variation: 0.0,
        iteration: None,
    };
    let mismatched = pts.iter().filter(|p| policy.index_at(p.0) != p.1).count();
    policy.disagreement = mismatched as f64 / total as f64;
    policy.total_variation = policy.actions.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    Ok(policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::{ActionFlow, LawFlow};
    use crate::game::inline::{registry, GameDescription, InlineCoefficients};
    use crate::game::ActionKind;
    use crate::law::ActionLaw;

    fn setup(name: &str, n: usize, steps: usize, t: f64) -> (GameSpec, PathEnsemble) {
        let spec = registry(name).unwrap();
        let ens = PathEnsemble::simulate(&spec, n, steps, t, 4).unwrap();
        (spec, ens)
    }

    #[test]
    fn constant_reward_integral() {
        let (spec, ens) = setup("constant-reward", 100, 400, 20.0);
        let w = MeasureWeights::identity(&ens, 400).unwrap();
        let q = ActionLaw::uniform(&spec.actions);
        let field = MeanField::new(LawFlow::Weighted(&w), ActionFlow::Constant(&q));
        let control = ControlField::constant(100, 400, 20);
        let j = evaluate_reward(&spec, &field, &control, &ens, 1).unwrap();
        let want = 2.0 * (1.0 - (-10.0f64).exp());
        assert!((j.value - want).abs() < 1e-12, "{}", j.value);
        assert!(j.band < 1e-12);
    }

    #[test]
    fn zero_reward_is_zero() {
        let spec = GameDescription::custom(
            InlineCoefficients {
                drift_a: 1.0,
                ..Default::default()
            },
            ActionKind::interval(-1.0, 1.0, 5),
        )
        .build()
        .unwrap();
        let ens = PathEnsemble::simulate(&spec, 50, 10, 1.0, 2).unwrap();
        let w = MeasureWeights::identity(&ens, 10).unwrap();
        let q = ActionLaw::uniform(&spec.actions);
        let field = MeanField::new(LawFlow::Weighted(&w), ActionFlow::Constant(&q));
        let j = evaluate_reward(&spec, &field, &ControlField::constant(50, 10, 4), &ens, 0).unwrap();
        assert_eq!(j.value, 0.0);
    }

    #[test]
    fn quadratic_cost_prefers_zero() {
        // f3 = −a²/2, b = a, Z̃ = 0 everywhere → α ≡ 0.
        let spec = GameDescription::custom(
            InlineCoefficients {
                drift_a: 1.0,
                action_cost: 1.0,
                ..Default::default()
            },
            ActionKind::interval(-1.0, 1.0, 41),
        )
        .build()
        .unwrap();
        let ens = PathEnsemble::simulate(&spec, 200, 20, 2.0, 3).unwrap();
        let solver = BsdeSolver::for_ensemble(&ens).unwrap();
        let w = MeasureWeights::identity(&ens, 20).unwrap();
        let q = ActionLaw::uniform(&spec.actions);
        let field = MeanField::new(LawFlow::Weighted(&w), ActionFlow::Constant(&q));
        let sol = solver.solve_finite_horizon(&spec, &field, 20).unwrap();
        let control = extract_optimal_control(&spec, &field, &sol, &ens).unwrap();
        assert!(control.actions.iter().all(|&a| a == 20));
        assert_eq!(control.actions, sol.actions);
        assert!(sol.y0_mean().abs() < 1e-12);
    }

    #[test]
    fn feedback_of_constant_control() {
        let (spec, ens) = setup("clipped-ou-invariant", 300, 10, 1.0);
        let control = ControlField::constant(300, 10, 7);
        let p = fit_feedback(&spec, &control, &ens, None, 16).unwrap();
        assert!(p.action_index.iter().all(|&a| a == 7));
        assert_eq!(p.disagreement, 0.0);
        assert_eq!(p.total_variation, 0.0);
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("bin_low,bin_high,action\n-inf,"));
    }

    #[test]
    fn feedback_of_sign_control() {
        let (spec, ens) = setup("gaussian-repulsion", 2000, 20, 2.0);
        let mut actions = Vec::new();
        for k in 0..20 {
            actions.extend(ens.states_at(k).iter().map(|&x| if x >= 0.0 { 40u16 } else { 0 }));
        }
        let control = ControlField::new(2000, 20, actions).unwrap();
        let p = fit_feedback(&spec, &control, &ens, None, 64).unwrap();
        assert!(p.disagreement < 0.02, "{}", p.disagreement);
        assert_eq!(p.index_at(-1.0), 0);
        assert_eq!(p.index_at(1.0), 40);
    }

    #[test]
    fn feedback_needs_homogeneous_game() {
        #[derive(Debug)]
        struct Clock;
        impl crate::game::Coefficients for Clock {
            fn dim(&self) -> usize {
                1
            }
            fn drift(&self, t: f64, _: &crate::PathView<'_>, _: &crate::MarginalLaw<'_>, _: &[f64], out: &mut [f64]) {
                out[0] = t.sin();
            }
            fn volatility(&self, _: f64, _: &crate::PathView<'_>, out: &mut [f64]) {
                out[0] = 1.0;
            }
            fn reward_state(&self, _: f64, _: &crate::PathView<'_>, _: &crate::MarginalLaw<'_>) -> f64 {
                0.0
            }
            fn reward_interaction(&self, _: f64, _: &crate::MarginalLaw<'_>, _: &ActionLaw) -> f64 {
                0.0
            }
            fn reward_action(&self, _: f64, _: &crate::PathView<'_>, _: &[f64]) -> f64 {
                0.0
            }
        }
        let (mut spec, ens) = setup("constant-reward", 10, 2, 0.2);
        spec.coefficients = std::sync::Arc::new(Clock);
        let control = ControlField::constant(10, 2, 0);
        assert!(matches!(
            fit_feedback(&spec, &control, &ens, None, 4),
            Err(MfgError::NotTimeHomogeneous(_))
        ));
    }

    #[test]
    fn bootstrap_band_scales_with_spread() {
        let v: Vec<f64> = (0..1000).map(|i| (i % 10) as f64).collect();
        let e = bootstrap_mean(&v, 3);
        assert!((e.value - 4.5).abs() < 1e-12);
        assert!((e.band / 3.0 / e.std_error - 1.0).abs() < 0.25);
    }
}
