//! The driftless reference ensemble and Doléans-Dade weights over it.

use std::io::{BufRead, Write};
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, MfgError, Result};
use crate::exec;
use crate::game::GameSpec;
use crate::law::{MarginalLaw, PathHistory, PathView};

/// Distribution of the stored Brownian increments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    Gaussian,
    /// `±√Δt` with probability ½ each.
    Binomial,
}

/// How increments enter the density.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum WeightScheme {
    /// `exp(β·ΔW − ½‖β‖²Δt)` per step.
    Exponential,
    /// `1 + β·ΔW` per step, the exact stochastic exponential of a random walk.
    Discrete,
}

impl NoiseKind {
    pub fn weight_scheme(self) -> WeightScheme {
        match self {
            NoiseKind::Gaussian => WeightScheme::Exponential,
            NoiseKind::Binomial => WeightScheme::Discrete,
        }
    }
}

/// `N` driftless paths on a uniform grid, stored step-major.
#[derive(Debug)]
pub struct PathEnsemble {
    n: usize,
    d: usize,
    steps: usize,
    dt: f64,
    seed: u64,
    noise: NoiseKind,
    states: Vec<f64>,
    increments: Vec<f64>,
    order: Vec<OnceLock<Vec<u32>>>,
}

// Words reserved per step in a path's ChaCha stream.
const STEP_WORDS: u128 = 1 << 16;

impl PathEnsemble {
    /// Euler scheme for `dX = σ(t, X) dW` with `X_0 ~ υ`. Path `i` draws from
    /// its own ChaCha stream and every step starts at a fixed word offset,
    /// so the ensemble does not depend on the worker count.
    pub fn simulate(spec: &GameSpec, n: usize, steps: usize, t_max: f64, seed: u64) -> Result<Self> {
        if n < 2 || steps == 0 || !(t_max > 0.0) {
            return Err(invalid("ensemble needs N >= 2, K >= 1 and T_max > 0"));
        }
        let d = spec.dim();
        let dt = t_max / steps as f64;
        let sqdt = dt.sqrt();
        let width = (steps + 1) * d;
        let per_path: Vec<Result<(Vec<f64>, Vec<f64>)>> = exec::map(n, |i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut x = vec![0.0; width];
            let mut dw = vec![0.0; steps * d];
            spec.initial.sample(&mut rng, &mut x[..d]);
            let mut sigma = vec![0.0; d * d];
            for k in 0..steps {
                rng.set_word_pos((k as u128 + 1) * STEP_WORDS);
                for j in 0..d {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    dw[k * d + j] = sqdt * g;
                }
                let view = PathView::new(&x, d, 0, d, k);
                spec.coefficients.volatility(k as f64 * dt, &view, &mut sigma);
                if sigma.iter().any(|v| !v.is_finite()) {
                    return Err(MfgError::NonFinite("volatility"));
                }
                for r in 0..d {
                    let mut acc = x[k * d + r];
                    for c in 0..d {
                        acc += sigma[r * d + c] * dw[k * d + c];
                    }
                    x[(k + 1) * d + r] = acc;
                }
            }
            Ok((x, dw))
        });
        let mut states = vec![0.0; width * n];
        let mut increments = vec![0.0; steps * d * n];
        for (i, res) in per_path.into_iter().enumerate() {
            let (x, dw) = res?;
            for k in 0..=steps {
                states[(k * n + i) * d..(k * n + i + 1) * d].copy_from_slice(&x[k * d..(k + 1) * d]);
            }
            for k in 0..steps {
                increments[(k * n + i) * d..(k * n + i + 1) * d].copy_from_slice(&dw[k * d..(k + 1) * d]);
            }
        }
        Ok(Self::assemble(n, d, steps, dt, seed, NoiseKind::Gaussian, states, increments))
    }

    /// All `2^K` sign paths of a random walk with steps `±√Δt`, each one a
    /// path of the ensemble (equal probability). Path `i` takes `+√Δt` at
    /// step `k` when bit `K-1-k` of `i` is clear. Requires a Dirac initial law.
    pub fn binomial_tree(spec: &GameSpec, steps: usize, dt: f64) -> Result<Self> {
        let point = match &spec.initial {
            crate::game::InitialLaw::Dirac { point } => point.clone(),
            _ => return Err(invalid("binomial tree needs a Dirac initial law")),
        };
        if spec.dim() != 1 {
            return Err(invalid("binomial tree is one-dimensional"));
        }
        if steps == 0 || steps > 20 || !(dt > 0.0) {
            return Err(invalid("binomial tree needs 1 <= K <= 20 and dt > 0"));
        }
        let n = 1usize << steps;
        let sqdt = dt.sqrt();
        let mut states = vec![0.0; (steps + 1) * n];
        let mut increments = vec![0.0; steps * n];
        let mut sigma = [0.0];
        for i in 0..n {
            let mut path = vec![point[0]; steps + 1];
            for k in 0..steps {
                let up = (i >> (steps - 1 - k)) & 1 == 0;
                let dw = if up { sqdt } else { -sqdt };
                let view = PathView::new(&path, 1, 0, 1, k);
                spec.coefficients.volatility(k as f64 * dt, &view, &mut sigma);
                path[k + 1] = path[k] + sigma[0] * dw;
                increments[k * n + i] = dw;
            }
            for k in 0..=steps {
                states[k * n + i] = path[k];
            }
        }
        Ok(Self::assemble(n, 1, steps, dt, 0, NoiseKind::Binomial, states, increments))
    }

    /// Builds an ensemble from step-major arrays.
    pub fn from_parts(
        n: usize,
        d: usize,
        dt: f64,
        noise: NoiseKind,
        states: Vec<f64>,
        increments: Vec<f64>,
    ) -> Result<Self> {
        if n == 0 || d == 0 || !(dt > 0.0) || !increments.len().is_multiple_of(n * d) {
            return Err(MfgError::Shape("ensemble arrays do not match N and d".into()));
        }
        let steps = increments.len() / (n * d);
        if states.len() != (steps + 1) * n * d {
            return Err(MfgError::Shape("state array does not match the increments".into()));
        }
        Ok(Self::assemble(n, d, steps, dt, 0, noise, states, increments))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        n: usize,
        d: usize,
        steps: usize,
        dt: f64,
        seed: u64,
        noise: NoiseKind,
        states: Vec<f64>,
        increments: Vec<f64>,
    ) -> Self {
        Self {
            n,
            d,
            steps,
            dt,
            seed,
            noise,
            states,
            increments,
            order: (0..=steps).map(|_| OnceLock::new()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Number of steps `K`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn noise(&self) -> NoiseKind {
        self.noise
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.time(self.steps)
    }

    /// Grid index of `t`; errors when `t` is off the grid or beyond it.
    pub fn step_of(&self, t: f64) -> Result<usize> {
        let r = t / self.dt;
        let k = r.round();
        if !(k >= 0.0) || (r - k).abs() > 1e-9 * r.abs().max(1.0) {
            return Err(MfgError::OffGrid { t, dt: self.dt });
        }
        let k = k as usize;
        if k > self.steps {
            return Err(MfgError::HorizonExceeded {
                requested: k,
                available: self.steps,
            });
        }
        Ok(k)
    }

    /// Smallest grid index whose time is at least `t`.
    pub fn ceil_step(&self, t: f64) -> usize {
        let r = t / self.dt;
        let k = r.round();
        if (r - k).abs() <= 1e-9 * r.abs().max(1.0) {
            k as usize
        } else {
            r.ceil() as usize
        }
    }

    pub fn states_at(&self, k: usize) -> &[f64] {
        let w = self.n * self.d;
        &self.states[k * w..(k + 1) * w]
    }

    pub fn state(&self, k: usize, i: usize) -> &[f64] {
        &self.states[(k * self.n + i) * self.d..(k * self.n + i + 1) * self.d]
    }

    pub fn increments_at(&self, k: usize) -> &[f64] {
        let w = self.n * self.d;
        &self.increments[k * w..(k + 1) * w]
    }

    pub fn increment(&self, k: usize, i: usize) -> &[f64] {
        &self.increments[(k * self.n + i) * self.d..(k * self.n + i + 1) * self.d]
    }

    pub fn path_view(&self, k: usize, i: usize) -> PathView<'_> {
        PathView::new(&self.states, self.n * self.d, i * self.d, self.d, k)
    }

    /// Path indices sorted by the first state coordinate at step `k`
    /// (ties by index).
    pub fn sorted_order(&self, k: usize) -> &[u32] {
        self.order[k].get_or_init(|| {
            let x = self.states_at(k);
            let d = self.d;
            let mut idx: Vec<u32> = (0..self.n as u32).collect();
            idx.sort_by(|&a, &b| x[a as usize * d].total_cmp(&x[b as usize * d]).then(a.cmp(&b)));
            idx
        })
    }

    /// Unweighted marginal at step `k`.
    pub fn marginal(&self, k: usize) -> MarginalLaw<'_> {
        let atoms = self.states_at(k);
        MarginalLaw::uniform(self.d, atoms)
            .expect("ensemble marginal")
            .with_order(self.sorted_order(k))
            .with_history(self.history(k))
    }

    pub(crate) fn history(&self, k: usize) -> PathHistory<'_> {
        PathHistory {
            data: &self.states,
            stride: self.n * self.d,
            k,
        }
    }

    /// Writes `path,step,t,x_0..,dw_0..` rows; increments of the last step
    /// are empty.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let d = self.d;
        let mut header = String::from("path,step,t");
        for j in 0..d {
            header.push_str(&format!(",x_{j}"));
        }
        for j in 0..d {
            header.push_str(&format!(",dw_{j}"));
        }
        writeln!(out, "{header}")?;
        for i in 0..self.n {
            for k in 0..=self.steps {
                let mut row = format!("{i},{k},{:e}", self.time(k));
                for v in self.state(k, i) {
                    row.push_str(&format!(",{v:e}"));
                }
                for j in 0..d {
                    if k < self.steps {
                        row.push_str(&format!(",{:e}", self.increment(k, i)[j]));
                    } else {
                        row.push(',');
                    }
                }
                writeln!(out, "{row}")?;
            }
        }
        Ok(())
    }

    /// Reads the format of [`write_csv`](Self::write_csv).
    pub fn read_csv<R: BufRead>(input: R, noise: NoiseKind) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| invalid("empty ensemble file"))??;
        let cols: Vec<&str> = header.split(',').collect();
        let d = cols.iter().filter(|c| c.starts_with("x_")).count();
        if d == 0 || cols.len() != 3 + 2 * d {
            return Err(invalid("unexpected ensemble header"));
        }
        // (path, step, t, state, increment)
        type Row = (usize, usize, f64, Vec<f64>, Vec<f64>);
        let mut rows: Vec<Row> = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 + 2 * d {
                return Err(invalid(format!("bad ensemble row `{line}`")));
            }
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| invalid(format!("bad number `{s}`")));
            let i: usize = f[0].parse().map_err(|_| invalid("bad path index"))?;
            let k: usize = f[1].parse().map_err(|_| invalid("bad step index"))?;
            let t = parse(f[2])?;
            let x = f[3..3 + d].iter().map(|s| parse(s)).collect::<Result<Vec<_>>>()?;
            let dw = if f[3 + d].is_empty() {
                vec![]
            } else {
                f[3 + d..].iter().map(|s| parse(s)).collect::<Result<Vec<_>>>()?
            };
            rows.push((i, k, t, x, dw));
        }
        let n = rows.iter().map(|r| r.0).max().map_or(0, |m| m + 1);
        let steps = rows.iter().map(|r| r.1).max().unwrap_or(0);
        if n == 0 || steps == 0 || rows.len() != n * (steps + 1) {
            return Err(invalid("ensemble file is not a full path × step table"));
        }
        let dt = rows
            .iter()
            .find(|r| r.1 == 1)
            .map(|r| r.2)
            .ok_or_else(|| invalid("missing step 1"))?;
        let mut states = vec![0.0; (steps + 1) * n * d];
        let mut increments = vec![0.0; steps * n * d];
        for (i, k, _, x, dw) in rows {
            states[(k * n + i) * d..(k * n + i + 1) * d].copy_from_slice(&x);
            if k < steps {
                if dw.len() != d {
                    return Err(invalid("missing increments"));
                }
                increments[(k * n + i) * d..(k * n + i + 1) * d].copy_from_slice(&dw);
            }
        }
        Self::from_parts(n, d, dt, noise, states, increments)
    }
}

/// Per-path log-densities of a measure with respect to the reference
/// measure, restricted to each `F_{t_k}` for `k <= horizon`.
#[derive(Clone, Debug)]
pub struct MeasureWeights {
    n: usize,
    d: usize,
    horizon: usize,
    scheme: WeightScheme,
    /// `(horizon + 1) × N`, step-major; row `k` is `ℓ_k`.
    log_w: Vec<f64>,
    /// `horizon × N × d` drift field `β = σ⁻¹b` when the weights are a
    /// single Doléans-Dade exponential.
    drift: Option<Vec<f64>>,
}

impl MeasureWeights {
    /// The reference measure itself on `[0, t_horizon]`.
    pub fn identity(ens: &PathEnsemble, horizon: usize) -> Result<Self> {
        if horizon > ens.steps() {
            return Err(MfgError::HorizonExceeded {
                requested: horizon,
                available: ens.steps(),
            });
        }
        Ok(Self {
            n: ens.len(),
            d: ens.dim(),
            horizon,
            scheme: ens.noise().weight_scheme(),
            log_w: vec![0.0; (horizon + 1) * ens.len()],
            drift: Some(vec![0.0; horizon * ens.len() * ens.dim()]),
        })
    }

    /// `ℓ_k = Σ_{j<k} (β_j·ΔW_j − ½‖β_j‖²Δt)`, or `Σ ln(1 + β_j·ΔW_j)` on a
    /// binomial ensemble. `drift` is `horizon × N × d`, step-major. Errors
    /// when some `‖β‖` exceeds `bound`.
    pub fn girsanov(ens: &PathEnsemble, drift: Vec<f64>, horizon: usize, bound: f64) -> Result<Self> {
        let n = ens.len();
        let d = ens.dim();
        if horizon > ens.steps() {
            return Err(MfgError::HorizonExceeded {
                requested: horizon,
                available: ens.steps(),
            });
        }
        if drift.len() != horizon * n * d {
            return Err(MfgError::Shape(format!(
                "drift field has {} entries, expected {}",
                drift.len(),
                horizon * n * d
            )));
        }
        let tol = bound * (1.0 + 1e-12);
        for k in 0..horizon {
            for i in 0..n {
                let b = &drift[(k * n + i) * d..(k * n + i + 1) * d];
                let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(norm <= tol) {
                    if !norm.is_finite() {
                        return Err(MfgError::NonFinite("drift field"));
                    }
                    return Err(MfgError::DriftBound {
                        bound,
                        value: norm,
                        path: i,
                        step: k,
                    });
                }
            }
        }
        let scheme = ens.noise().weight_scheme();
        let dt = ens.dt();
        let mut log_w = vec![0.0; (horizon + 1) * n];
        for k in 0..horizon {
            let dw = ens.increments_at(k);
            let (prev, next) = log_w.split_at_mut((k + 1) * n);
            let prev = &prev[k * n..];
            let next = &mut next[..n];
            for i in 0..n {
                let b = &drift[(k * n + i) * d..(k * n + i + 1) * d];
                let w = &dw[i * d..(i + 1) * d];
                let dot: f64 = b.iter().zip(w).map(|(b, w)| b * w).sum();
                let inc = match scheme {
                    WeightScheme::Exponential => dot - 0.5 * b.iter().map(|v| v * v).sum::<f64>() * dt,
                    WeightScheme::Discrete => {
                        if !(1.0 + dot > 0.0) {
                            return Err(invalid(format!(
                                "discrete density 1 + β·ΔW = {} is not positive (path {i}, step {k})",
                                1.0 + dot
                            )));
                        }
                        (1.0 + dot).ln()
                    }
                };
                next[i] = prev[i] + inc;
            }
        }
        Ok(Self {
            n,
            d,
            horizon,
            scheme,
            log_w,
            drift: Some(drift),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn scheme(&self) -> WeightScheme {
        self.scheme
    }

    pub fn log_weights_at(&self, k: usize) -> &[f64] {
        assert!(k <= self.horizon, "step {k} beyond weight horizon {}", self.horizon);
        &self.log_w[k * self.n..(k + 1) * self.n]
    }

    pub fn final_log_weights(&self) -> &[f64] {
        self.log_weights_at(self.horizon)
    }

    pub fn weights_at(&self, k: usize) -> Vec<f64> {
        self.log_weights_at(k).iter().map(|l| l.exp()).collect()
    }

    pub fn drift(&self) -> Option<&[f64]> {
        self.drift.as_deref()
    }

    pub fn drift_at(&self, k: usize) -> Option<&[f64]> {
        let w = self.n * self.d;
        self.drift.as_deref().map(|b| &b[k * w..(k + 1) * w])
    }

    /// `(1/N) Σ w_i` at step `k`.
    pub fn mean_weight(&self, k: usize) -> f64 {
        self.log_weights_at(k).iter().map(|l| l.exp()).sum::<f64>() / self.n as f64
    }

    /// `(1/N) Σ w_i²` at step `k`.
    pub fn second_moment(&self, k: usize) -> f64 {
        self.log_weights_at(k).iter().map(|l| (2.0 * l).exp()).sum::<f64>() / self.n as f64
    }

    /// Normalised masses at step `k`, computed with a max shift.
    pub fn masses_at(&self, k: usize) -> Vec<f64> {
        let l = self.log_weights_at(k);
        let top = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut m: Vec<f64> = l.iter().map(|v| (v - top).exp()).collect();
        let s: f64 = m.iter().sum();
        m.iter_mut().for_each(|v| *v /= s);
        m
    }

    /// The reweighted marginal at step `k`: atoms are the ensemble states,
    /// masses `w_i / Σ w`.
    pub fn marginal<'a>(&self, ens: &'a PathEnsemble, k: usize) -> Result<MarginalLaw<'a>> {
        if k > self.horizon {
            return Err(MfgError::HorizonExceeded {
                requested: k,
                available: self.horizon,
            });
        }
        self.check_ensemble(ens)?;
        Ok(MarginalLaw::new(self.d, ens.states_at(k), self.masses_at(k))?
            .with_order(ens.sorted_order(k))
            .with_history(ens.history(k)))
    }

    /// Restriction to `F_{t_k}`: the first `k + 1` log-weight rows.
    pub fn project(&self, k: usize) -> Result<Self> {
        if k > self.horizon {
            return Err(MfgError::HorizonExceeded {
                requested: k,
                available: self.horizon,
            });
        }
        Ok(Self {
            n: self.n,
            d: self.d,
            horizon: k,
            scheme: self.scheme,
            log_w: self.log_w[..(k + 1) * self.n].to_vec(),
            drift: self.drift.as_ref().map(|b| b[..k * self.n * self.d].to_vec()),
        })
    }

    /// Density of `(1 − θ)·self + θ·other`, step by step. The mixture is not
    /// a single exponential, so the drift field is dropped.
    pub fn mix(&self, other: &MeasureWeights, theta: f64) -> Result<Self> {
        if self.n != other.n || self.horizon != other.horizon {
            return Err(MfgError::Shape("mixing weights of different shape".into()));
        }
        if !(0.0..=1.0).contains(&theta) {
            return Err(invalid("mixing weight must lie in [0, 1]"));
        }
        if theta == 0.0 {
            return Ok(self.clone());
        }
        if theta == 1.0 {
            return Ok(other.clone());
        }
        let (la, lb) = ((1.0 - theta).ln(), theta.ln());
        let log_w = self
            .log_w
            .iter()
            .zip(&other.log_w)
            .map(|(a, b)| {
                let (x, y) = (a + la, b + lb);
                let m = x.max(y);
                m + ((x - m).exp() + (y - m).exp()).ln()
            })
            .collect();
        Ok(Self {
            n: self.n,
            d: self.d,
            horizon: self.horizon,
            scheme: self.scheme,
            log_w,
            drift: None,
        })
    }

    fn check_ensemble(&self, ens: &PathEnsemble) -> Result<()> {
        if ens.len() != self.n || ens.dim() != self.d || ens.steps() < self.horizon {
            return Err(MfgError::Shape("weights do not belong to this ensemble".into()));
        }
        Ok(())
    }
}
