//! Time-homogeneous games: recurrence check, Cesàro averages, stationary
//! laws, and the stationary and invariant mean field games.
//!
//! Laws on the state space are histograms of the first coordinate on a fixed
//! uniform grid, with the tails folded into the end cells.

use std::io::Write;

use log::{info, warn};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bsde::{ActionFlow, BsdeSolver, LawFlow, MeanField, TruncationCertificate};
use crate::control::{fit_feedback, ControlField, FeedbackPolicy};
use crate::error::{invalid, MfgError, Result};
use crate::exec;
use crate::game::assumptions::Status;
use crate::game::{GameSpec, InitialLaw, Lu, StationaryParams};
use crate::law::{ActionLaw, MarginalLaw, PathView};
use crate::paths::PathEnsemble;

fn params(spec: &GameSpec) -> Result<&StationaryParams> {
    if !spec.coefficients.is_time_homogeneous() {
        return Err(MfgError::NotTimeHomogeneous("the stationary solver"));
    }
    spec.stationary
        .as_ref()
        .ok_or_else(|| invalid(format!("game `{}` declares no stationary parameters", spec.name)))
}

/// Uniform binning of the first coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            lo: -5.0,
            hi: 5.0,
            bins: 40,
        }
    }
}

impl Grid {
    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi && self.lo.is_finite() && self.hi.is_finite()) || self.bins == 0 {
            return Err(invalid("histogram grid needs lo < hi and bins > 0"));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.bins as f64
    }

    /// Cell of `x`; values outside `[lo, hi)` go to the end cells.
    #[inline]
    pub fn index(&self, x: f64) -> usize {
        let j = ((x - self.lo) / self.width()).floor();
        if j < 0.0 || j.is_nan() {
            0
        } else {
            (j as usize).min(self.bins - 1)
        }
    }

    pub fn edges(&self) -> Vec<f64> {
        (0..=self.bins).map(|j| self.lo + j as f64 * self.width()).collect()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.bins).map(|j| self.lo + (j as f64 + 0.5) * self.width()).collect()
    }

    /// Whether mirroring `x ↦ −x` maps cells onto cells.
    pub fn is_symmetric(&self) -> bool {
        (self.lo + self.hi).abs() < 1e-12 * self.width()
    }
}

/// A probability vector on a [`Grid`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    pub grid: Grid,
    pub masses: Vec<f64>,
}

impl Histogram {
    pub fn new(grid: Grid, mut masses: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if masses.len() != grid.bins || masses.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err(invalid("histogram masses must be finite, nonnegative and one per cell"));
        }
        let s: f64 = masses.iter().sum();
        if !(s > 0.0) {
            return Err(invalid("histogram has no mass"));
        }
        masses.iter_mut().for_each(|m| *m /= s);
        Ok(Self { grid, masses })
    }

    /// Binned law of weighted atoms (first coordinate).
    pub fn from_law(grid: &Grid, law: &MarginalLaw<'_>) -> Result<Self> {
        let mut masses = vec![0.0; grid.bins];
        for (i, m) in law.masses().iter().enumerate() {
            masses[grid.index(law.atom(i)[0])] += m;
        }
        Self::new(grid.clone(), masses)
    }

    /// Histogram of `n` draws from `law`.
    pub fn sampled(grid: &Grid, law: &InitialLaw, n: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = vec![0.0; law.dim()];
        let mut masses = vec![0.0; grid.bins];
        for _ in 0..n.max(1) {
            law.sample(&mut rng, &mut x);
            masses[grid.index(x[0])] += 1.0;
        }
        Self::new(grid.clone(), masses)
    }

    pub fn tv(&self, other: &Histogram) -> f64 {
        0.5 * self.masses.iter().zip(&other.masses).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    /// Image under `x ↦ −x`; needs a symmetric grid.
    pub fn mirrored(&self) -> Result<Histogram> {
        if !self.grid.is_symmetric() {
            return Err(invalid("mirroring needs a grid symmetric about 0"));
        }
        let mut masses = self.masses.clone();
        masses.reverse();
        Ok(Histogram {
            grid: self.grid.clone(),
            masses,
        })
    }

    pub fn mean(&self) -> f64 {
        self.grid.centers().iter().zip(&self.masses).map(|(c, m)| c * m).sum()
    }

    pub fn second_moment(&self) -> f64 {
        self.grid.centers().iter().zip(&self.masses).map(|(c, m)| c * c * m).sum()
    }

    /// `(1 − θ)·self + θ·other`.
    pub fn mix(&self, other: &Histogram, theta: f64) -> Histogram {
        Histogram {
            grid: self.grid.clone(),
            masses: self
                .masses
                .iter()
                .zip(&other.masses)
                .map(|(a, b)| (1.0 - theta) * a + theta * b)
                .collect(),
        }
    }

    /// Atoms at the cell centers (one-dimensional), empty cells dropped.
    pub fn law(&self) -> MarginalLaw<'static> {
        let (atoms, masses): (Vec<f64>, Vec<f64>) = self
            .grid
            .centers()
            .into_iter()
            .zip(self.masses.iter().copied())
            .filter(|(_, m)| *m > 0.0)
            .unzip();
        MarginalLaw::new(1, atoms, masses).expect("histogram has mass")
    }

    /// The same atoms as an initial law.
    pub fn initial_law(&self) -> InitialLaw {
        let (points, weights): (Vec<Vec<f64>>, Vec<f64>) = self
            .grid
            .centers()
            .into_iter()
            .zip(self.masses.iter().copied())
            .filter(|(_, m)| *m > 0.0)
            .map(|(c, m)| (vec![c], m))
            .unzip();
        InitialLaw::Atoms { points, weights }
    }

    /// Draws a cell by inversion, then a uniform point inside it.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random::<f64>();
        let mut acc = 0.0;
        let mut pick = self.masses.len() - 1;
        for (j, m) in self.masses.iter().enumerate() {
            acc += m;
            if u < acc {
                pick = j;
                break;
            }
        }
        self.grid.lo + (pick as f64 + rng.random::<f64>()) * self.grid.width()
    }

    /// Expected binned TV of an `n`-sample histogram from its law,
    /// bounded by `½ Σ sqrt(p(1 − p)/n)`.
    pub fn sampling_floor(&self, n: usize) -> f64 {
        0.5 * self.masses.iter().map(|p| (p * (1.0 - p) / n as f64).sqrt()).sum::<f64>()
    }

    /// Columns: `bin_center, mass`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "bin_center,mass")?;
        for (c, m) in self.grid.centers().iter().zip(&self.masses) {
            writeln!(out, "{c},{m:.12e}")?;
        }
        Ok(())
    }
}

/// Trapezoidal time average `(1/T)∫₀^T μ_t dt` of a flow of histograms
/// sampled every `dt`, up to step `steps`.
pub fn cesaro_operator(flow: &[Vec<f64>], dt: f64, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 || steps >= flow.len() || !(dt > 0.0) {
        return Err(invalid("Cesàro average needs 0 < steps < flow length and dt > 0"));
    }
    let bins = flow[0].len();
    if flow.iter().any(|m| m.len() != bins) {
        return Err(MfgError::Shape("flow histograms differ in size".into()));
    }
    let mut out = vec![0.0; bins];
    for (k, m) in flow[..=steps].iter().enumerate() {
        let w = if k == 0 || k == steps { 0.5 } else { 1.0 };
        for (o, v) in out.iter_mut().zip(m) {
            *o += w * v;
        }
    }
    let t = steps as f64 * dt;
    out.iter_mut().for_each(|v| *v *= dt / t);
    Ok(out)
}

/// Sampling options for [`check_drift_condition`].
#[derive(Clone, Debug)]
pub struct DriftProbe {
    /// The probe shell extends to `factor·R`.
    pub factor: f64,
    pub radial_points: usize,
    /// Random directions in dimension `d > 1`.
    pub directions: usize,
    /// Dirac laws placed along the first axis.
    pub laws: usize,
    pub seed: u64,
}

impl Default for DriftProbe {
    fn default() -> Self {
        Self {
            factor: 2.0,
            radial_points: 64,
            directions: 32,
            laws: 9,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DriftWitness {
    pub x: Vec<f64>,
    pub action: Vec<f64>,
    pub law_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DriftConditionReport {
    pub status: Status,
    /// `min −(xᵀb + ½ tr Σ)` over the probe shell.
    pub min_margin: f64,
    pub required: f64,
    pub inner_radius: f64,
    pub probe_radius: f64,
    pub witness: Option<DriftWitness>,
    /// Largest of `‖b‖`, `‖σ‖_F`, `‖σ⁻¹‖_F` sampled on the ball of radius `R`.
    pub local_measured: f64,
    pub local_declared: f64,
    pub local_status: Status,
}

impl DriftConditionReport {
    pub fn passed(&self) -> bool {
        self.status == Status::Pass && self.local_status == Status::Pass
    }
}

fn unit_directions(d: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    if d == 1 {
        return vec![vec![1.0], vec![-1.0]];
    }
    let mut dirs: Vec<Vec<f64>> = (0..d)
        .flat_map(|j| {
            [1.0, -1.0].map(|s| {
                let mut e = vec![0.0; d];
                e[j] = s;
                e
            })
        })
        .collect();
    for _ in 0..count {
        let g: Vec<f64> = (0..d).map(|_| -> f64 { StandardNormal.sample(rng) }).collect();
        let n = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        dirs.push(g.iter().map(|v| v / n).collect());
    }
    dirs
}

/// `min −(xᵀb(x, μ, a) + ½ tr σσᵀ)` over `R′ ≤ ‖x‖ ≤ factor·R`, all grid
/// actions and Dirac laws; passes iff the minimum is at least `k`. Also
/// samples the local bound `Λ` on the ball of radius `R`.
pub fn check_drift_condition(spec: &GameSpec, probe: &DriftProbe) -> Result<DriftConditionReport> {
    let p = params(spec)?;
    let d = spec.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
    let dirs = unit_directions(d, probe.directions, &mut rng);
    let r_probe = probe.factor.max(2.0) * p.outer_radius;
    let laws: Vec<MarginalLaw<'static>> = (0..probe.laws.max(1))
        .map(|j| {
            let s = if probe.laws <= 1 {
                0.0
            } else {
                -r_probe + 2.0 * r_probe * j as f64 / (probe.laws - 1) as f64
            };
            let mut y = vec![0.0; d];
            y[0] = s;
            MarginalLaw::dirac(&y)
        })
        .collect();
    let radial = probe.radial_points.max(2);
    let mut b = vec![0.0; d];
    let mut sigma = vec![0.0; d * d];
    let mut min_margin = f64::INFINITY;
    let mut witness = None;
    for dir in &dirs {
        for j in 0..radial {
            let r = p.inner_radius + (r_probe - p.inner_radius) * j as f64 / (radial - 1) as f64;
            let x: Vec<f64> = dir.iter().map(|u| r * u).collect();
            let view = PathView::from_prefix(&x, d);
            spec.coefficients.volatility(0.0, &view, &mut sigma);
            let half_trace = 0.5 * sigma.iter().map(|s| s * s).sum::<f64>();
            for law in &laws {
                for a in spec.actions.points() {
                    spec.coefficients.drift(0.0, &view, law, a, &mut b);
                    let margin = -(x.iter().zip(&b).map(|(x, b)| x * b).sum::<f64>() + half_trace);
                    if margin < min_margin {
                        min_margin = margin;
                        witness = Some(DriftWitness {
                            x: x.clone(),
                            action: a.to_vec(),
                            law_mean: law.mean()[0],
                        });
                    }
                }
            }
        }
    }
    // local bound on the ball of radius R
    let mut local: f64 = 0.0;
    let mut inv = vec![0.0; d];
    for dir in &dirs {
        for j in 0..radial {
            let r = p.outer_radius * j as f64 / (radial - 1) as f64;
            let x: Vec<f64> = dir.iter().map(|u| r * u).collect();
            let view = PathView::from_prefix(&x, d);
            spec.coefficients.volatility(0.0, &view, &mut sigma);
            local = local.max(sigma.iter().map(|s| s * s).sum::<f64>().sqrt());
            match Lu::factor(sigma.clone(), d) {
                Ok(lu) => {
                    let mut fro = 0.0;
                    for c in 0..d {
                        inv.iter_mut().for_each(|v| *v = 0.0);
                        inv[c] = 1.0;
                        lu.solve(&mut inv);
                        fro += inv.iter().map(|v| v * v).sum::<f64>();
                    }
                    local = local.max(fro.sqrt());
                }
                Err(_) => local = f64::INFINITY,
            }
            for law in &laws {
                for a in spec.actions.points() {
                    spec.coefficients.drift(0.0, &view, law, a, &mut b);
                    local = local.max(b.iter().map(|v| v * v).sum::<f64>().sqrt());
                }
            }
        }
    }
    let pass = |ok: bool| if ok { Status::Pass } else { Status::Fail };
    Ok(DriftConditionReport {
        status: pass(min_margin >= p.margin),
        min_margin,
        required: p.margin,
        inner_radius: p.inner_radius,
        probe_radius: r_probe,
        witness: (min_margin < p.margin).then_some(witness).flatten(),
        local_measured: local,
        local_declared: p.local_bound,
        local_status: pass(local <= p.local_bound * (1.0 + 1e-9)),
    })
}

/// Where simulated paths start.
#[derive(Clone, Copy, Debug)]
pub enum StartLaw<'a> {
    Initial(&'a InitialLaw),
    Histogram(&'a Histogram),
}

/// Euler–Maruyama with interaction law `law` frozen in time and the state
/// feedback `policy` (the action nearest the origin when absent).
struct Dynamics<'a> {
    spec: &'a GameSpec,
    law: &'a MarginalLaw<'a>,
    policy: Option<&'a FeedbackPolicy>,
    default_action: usize,
    dt: f64,
}

impl<'a> Dynamics<'a> {
    fn new(spec: &'a GameSpec, law: &'a MarginalLaw<'a>, policy: Option<&'a FeedbackPolicy>, dt: f64) -> Result<Self> {
        if policy.is_some() && spec.dim() != 1 {
            return Err(invalid("feedback policies act on one-dimensional states"));
        }
        if !(dt > 0.0) {
            return Err(invalid("time step must be positive"));
        }
        let origin = vec![0.0; spec.actions.dim()];
        Ok(Self {
            spec,
            law,
            policy,
            default_action: spec.actions.nearest_index(&origin),
            dt,
        })
    }

    fn start<R: Rng + ?Sized>(&self, start: StartLaw<'_>, rng: &mut R, x: &mut [f64]) {
        match start {
            StartLaw::Initial(l) => l.sample(rng, x),
            StartLaw::Histogram(h) => {
                x.iter_mut().for_each(|v| *v = 0.0);
                x[0] = h.sample(rng);
            }
        }
    }

    /// One step in place; `b`, `sigma`, `dw` are scratch.
    #[inline]
    fn step<R: Rng + ?Sized>(&self, x: &mut [f64], rng: &mut R, b: &mut [f64], sigma: &mut [f64], dw: &mut [f64]) {
        let d = x.len();
        let a = match self.policy {
            Some(p) => self.spec.actions.point(p.index_at(x[0]) as usize),
            None => self.spec.actions.point(self.default_action),
        };
        let view = PathView::from_prefix(x, d);
        self.spec.coefficients.drift(0.0, &view, self.law, a, b);
        self.spec.coefficients.volatility(0.0, &view, sigma);
        let sq = self.dt.sqrt();
        for w in dw.iter_mut() {
            let g: f64 = StandardNormal.sample(rng);
            *w = sq * g;
        }
        for i in 0..d {
            let noise: f64 = (0..d).map(|j| sigma[i * d + j] * dw[j]).sum();
            x[i] += b[i] * self.dt + noise;
        }
    }
}

fn chunk_rng(seed: u64, chunk: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk as u64);
    rng
}

/// Histogram counts and first two moments, unnormalised.
#[derive(Clone, Debug)]
struct Tally {
    counts: Vec<f64>,
    m1: f64,
    m2: f64,
}

impl Tally {
    fn new(bins: usize) -> Self {
        Self {
            counts: vec![0.0; bins],
            m1: 0.0,
            m2: 0.0,
        }
    }

    fn add_scaled(&mut self, other: &Tally, w: f64) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += w * b;
        }
        self.m1 += w * other.m1;
        self.m2 += w * other.m2;
    }
}

/// Per-step marginals at `record` steps and trapezoidal running sums at
/// `snapshots` steps, streamed over chunks of paths.
struct FlowStats {
    marginals: Vec<Tally>,
    cesaro: Vec<Tally>,
    paths: usize,
}

fn run_flow(
    dynamics: &Dynamics<'_>,
    start: StartLaw<'_>,
    grid: &Grid,
    paths: usize,
    seed: u64,
    record: &[usize],
    snapshots: &[usize],
) -> FlowStats {
    let d = dynamics.spec.dim();
    let last = record.iter().chain(snapshots).copied().max().unwrap_or(0);
    let chunks = exec::map_ranges(paths, exec::PATH_CHUNK, |r| {
        let mut rng = chunk_rng(seed, r.start / exec::PATH_CHUNK);
        let m = r.len();
        let mut xs = vec![0.0; m * d];
        for x in xs.chunks_mut(d) {
            dynamics.start(start, &mut rng, x);
        }
        let mut marginals = Vec::with_capacity(record.len());
        let mut cesaro = Vec::with_capacity(snapshots.len());
        let mut running = Tally::new(grid.bins);
        let (mut b, mut sigma, mut dw) = (vec![0.0; d], vec![0.0; d * d], vec![0.0; d]);
        for k in 0..=last {
            if k > 0 {
                for x in xs.chunks_mut(d) {
                    dynamics.step(x, &mut rng, &mut b, &mut sigma, &mut dw);
                }
            }
            let mut now = Tally::new(grid.bins);
            for x in xs.chunks(d) {
                now.counts[grid.index(x[0])] += 1.0;
                now.m1 += x[0];
                now.m2 += x[0] * x[0];
            }
            if snapshots.contains(&k) {
                let mut snap = running.clone();
                snap.add_scaled(&now, 0.5);
                cesaro.push(snap);
            }
            running.add_scaled(&now, if k == 0 { 0.5 } else { 1.0 });
            if record.contains(&k) {
                marginals.push(now);
            }
        }
        (marginals, cesaro)
    });
    let mut marginals: Vec<Tally> = record.iter().map(|_| Tally::new(grid.bins)).collect();
    let mut cesaro: Vec<Tally> = snapshots.iter().map(|_| Tally::new(grid.bins)).collect();
    for (m, c) in &chunks {
        let mut sorted_record: Vec<usize> = record.to_vec();
        sorted_record.sort_unstable();
        for (slot, t) in marginals.iter_mut().zip(m) {
            slot.add_scaled(t, 1.0);
        }
        for (slot, t) in cesaro.iter_mut().zip(c) {
            slot.add_scaled(t, 1.0);
        }
    }
    FlowStats {
        marginals,
        cesaro,
        paths,
    }
}

/// Options for [`estimate_stationary`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StationaryConfig {
    pub horizon: f64,
    pub dt: f64,
    pub paths: usize,
    pub seed: u64,
    pub grid: Grid,
    /// Number of horizon halvings kept as snapshots.
    pub doublings: usize,
}

impl Default for StationaryConfig {
    fn default() -> Self {
        Self {
            horizon: 32.0,
            dt: 0.01,
            paths: 20_000,
            seed: 0,
            grid: Grid::default(),
            doublings: 3,
        }
    }
}

impl StationaryConfig {
    fn steps(&self) -> Result<usize> {
        let k = (self.horizon / self.dt).round();
        if !(k >= 1.0) || (k * self.dt - self.horizon).abs() > 1e-9 * self.horizon.max(1.0) {
            return Err(MfgError::OffGrid {
                t: self.horizon,
                dt: self.dt,
            });
        }
        Ok(k as usize)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CesaroSnapshot {
    pub horizon: f64,
    pub law: Histogram,
    pub mean: f64,
    pub second_moment: f64,
}

/// Cesàro estimate of the stationary law.
#[derive(Clone, Debug, Serialize)]
pub struct StationaryEstimate {
    /// `D^T` at the full horizon.
    pub law: Histogram,
    pub horizon: f64,
    pub mean: f64,
    pub second_moment: f64,
    /// `Γ̂ = T·d_TV(D^{T/2}, D^T)`.
    pub gamma_hat: f64,
    /// `Γ̂/T`; heuristic, the constant is fitted rather than proved.
    pub certificate: f64,
    /// `(T_j, d_TV(D^{T_j/2}, D^{T_j}))` along the snapshots.
    pub cesaro_residuals: Vec<(f64, f64)>,
    /// Snapshots at `T/2^j`, increasing in the horizon.
    pub snapshots: Vec<CesaroSnapshot>,
    pub paths: usize,
    pub dt: f64,
}

impl StationaryEstimate {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        self.law.write_csv(out)
    }
}

/// Simulates `P^{μ,α}` from `start` up to `T` and returns `D^T` with the
/// snapshots at `T/2, T/4, …`. Fails when the drift condition fails.
pub fn estimate_stationary(
    spec: &GameSpec,
    law: &MarginalLaw<'_>,
    policy: Option<&FeedbackPolicy>,
    start: StartLaw<'_>,
    config: &StationaryConfig,
) -> Result<StationaryEstimate> {
    let drift = check_drift_condition(spec, &DriftProbe::default())?;
    if drift.status != Status::Pass {
        return Err(MfgError::DriftConditionFailed {
            margin: drift.min_margin,
            required: drift.required,
            witness: drift.witness.map(|w| w.x).unwrap_or_default(),
        });
    }
    config.grid.validate()?;
    let steps = config.steps()?;
    let mut snaps: Vec<usize> = (0..=config.doublings)
        .map(|j| steps >> j)
        .filter(|&k| k > 0)
        .collect();
    snaps.reverse();
    snaps.dedup();
    let dynamics = Dynamics::new(spec, law, policy, config.dt)?;
    let stats = run_flow(&dynamics, start, &config.grid, config.paths, config.seed, &[], &snaps);
    let snapshots: Vec<CesaroSnapshot> = snaps
        .iter()
        .zip(&stats.cesaro)
        .map(|(&k, t)| {
            let horizon = k as f64 * config.dt;
            let norm = t.counts.iter().sum::<f64>();
            Ok(CesaroSnapshot {
                horizon,
                law: Histogram::new(config.grid.clone(), t.counts.clone())?,
                mean: t.m1 / norm,
                second_moment: t.m2 / norm,
            })
        })
        .collect::<Result<_>>()?;
    let cesaro_residuals: Vec<(f64, f64)> = snapshots
        .windows(2)
        .filter(|w| (w[1].horizon - 2.0 * w[0].horizon).abs() < config.dt)
        .map(|w| (w[1].horizon, w[1].law.tv(&w[0].law)))
        .collect();
    let last = snapshots.last().expect("at least one snapshot");
    let horizon = last.horizon;
    let gamma_hat = cesaro_residuals.last().map_or(f64::NAN, |r| r.0 * r.1);
    Ok(StationaryEstimate {
        law: last.law.clone(),
        horizon,
        mean: last.mean,
        second_moment: last.second_moment,
        gamma_hat,
        certificate: gamma_hat / horizon,
        cesaro_residuals,
        snapshots,
        paths: stats.paths,
        dt: config.dt,
    })
}

/// `d_TV(μ_t, reference)` along a simulated flow.
#[derive(Clone, Debug, Serialize)]
pub struct InvarianceTrace {
    pub times: Vec<f64>,
    pub tv: Vec<f64>,
    pub max_tv: f64,
    /// Expected sampling TV of one marginal, `½ Σ sqrt(p(1 − p)/N)`.
    pub band: f64,
}

impl InvarianceTrace {
    /// Columns: `t, tv_to_mu`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,tv_to_mu")?;
        for (t, v) in self.times.iter().zip(&self.tv) {
            writeln!(out, "{t},{v:.12e}")?;
        }
        Ok(())
    }
}

/// Marginal TV distances to `reference` every `record_dt` up to `t_check`.
#[allow(clippy::too_many_arguments)]
pub fn invariance_trace(
    spec: &GameSpec,
    reference: &Histogram,
    policy: Option<&FeedbackPolicy>,
    start: StartLaw<'_>,
    t_check: f64,
    record_dt: f64,
    dt: f64,
    paths: usize,
    seed: u64,
) -> Result<InvarianceTrace> {
    params(spec)?;
    let law = reference.law();
    let dynamics = Dynamics::new(spec, &law, policy, dt)?;
    let stride = ((record_dt / dt).round() as usize).max(1);
    let last = (t_check / dt).round() as usize;
    let record: Vec<usize> = (0..=last).step_by(stride).collect();
    let stats = run_flow(&dynamics, start, &reference.grid, paths, seed, &record, &[]);
    let tv: Vec<f64> = stats
        .marginals
        .iter()
        .map(|t| Histogram::new(reference.grid.clone(), t.counts.clone()).map(|h| h.tv(reference)))
        .collect::<Result<_>>()?;
    Ok(InvarianceTrace {
        times: record.iter().map(|&k| k as f64 * dt).collect(),
        max_tv: tv.iter().copied().fold(0.0, f64::max),
        tv,
        band: reference.sampling_floor(paths),
    })
}

/// Options for the optimal-feedback solve against a frozen law.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeedbackConfig {
    pub paths: usize,
    pub dt: f64,
    /// Truncation tolerance on the value.
    pub tol: f64,
    pub bins: usize,
    /// Fraction of the certified horizon pooled into the fit.
    pub pool: f64,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        Self {
            paths: 4000,
            dt: 0.05,
            tol: 0.05,
            bins: 24,
            pool: 0.5,
        }
    }
}

/// Optimal time-homogeneous feedback against the constant flow `μ_t ≡ law`.
pub struct FeedbackSolve {
    pub policy: FeedbackPolicy,
    pub value: f64,
    pub certificate: TruncationCertificate,
    pub warnings: Vec<String>,
}

pub fn optimal_feedback(spec: &GameSpec, law: &Histogram, config: &FeedbackConfig, seed: u64) -> Result<FeedbackSolve> {
    params(spec)?;
    let certificate = TruncationCertificate::new(spec.bounds.reward, spec.discount, config.tol, config.dt)?;
    let steps = certificate.steps;
    let mut start = spec.clone();
    start.initial = law.initial_law();
    let ens = PathEnsemble::simulate(&start, config.paths, steps, steps as f64 * config.dt, seed)?;
    let solver = BsdeSolver::for_ensemble(&ens)?;
    let mu = law.law();
    let q = ActionLaw::uniform(&spec.actions);
    let field = MeanField::new(LawFlow::Constant(&mu), ActionFlow::Constant(&q));
    let sol = solver.solve_finite_horizon(spec, &field, steps)?;
    let weights = sol.weights(&ens, spec.bounds.drift)?;
    let pool = ((steps as f64 * config.pool).round() as usize).clamp(1, steps);
    let control = ControlField::from_solution(&sol).restrict(pool)?;
    let policy = fit_feedback(spec, &control, &ens, Some(&weights), config.bins)?;
    Ok(FeedbackSolve {
        policy,
        value: sol.y0_mean(),
        certificate,
        warnings: sol.warnings.clone(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StationaryMfgConfig {
    pub estimate: StationaryConfig,
    pub feedback: FeedbackConfig,
    /// Stop when `d_TV(μ_{n+1}, μ_n) < tol`.
    pub tol: f64,
    pub max_iter: usize,
    /// Weight of the new estimate in `μ_{n+1}`.
    pub damping: f64,
}

impl Default for StationaryMfgConfig {
    fn default() -> Self {
        Self {
            estimate: StationaryConfig {
                horizon: 16.0,
                ..Default::default()
            },
            feedback: FeedbackConfig::default(),
            tol: 0.02,
            max_iter: 12,
            damping: 1.0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StationaryIteration {
    pub iter: usize,
    pub tv_change: f64,
    pub mean: f64,
    pub second_moment: f64,
    pub value: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct StationaryMfgReport {
    pub converged: bool,
    pub iterations: usize,
    pub law: Histogram,
    pub policy: FeedbackPolicy,
    pub estimate: StationaryEstimate,
    pub drift: DriftConditionReport,
    pub certificate: TruncationCertificate,
    pub value: f64,
    pub history: Vec<StationaryIteration>,
    pub warnings: Vec<String>,
}

impl StationaryMfgReport {
    /// Columns: `iter, tv_change, mean, second_moment, V`.
    pub fn write_history_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "iter,tv_change,mean,second_moment,V")?;
        for h in &self.history {
            writeln!(
                out,
                "{},{:.12e},{:.12e},{:.12e},{:.12e}",
                h.iter, h.tv_change, h.mean, h.second_moment, h.value
            )?;
        }
        Ok(())
    }
}

/// Outer iteration `μ_{n+1} = D^T(μ_n, α_n)` with `α_n` the optimal feedback
/// against `μ_n`. All iterations reuse the same random numbers. Starts from
/// `initial`, or from the binned initial law of the game.
pub fn solve_stationary_mfg(
    spec: &GameSpec,
    config: &StationaryMfgConfig,
    initial: Option<&Histogram>,
) -> Result<StationaryMfgReport> {
    let drift = check_drift_condition(spec, &DriftProbe::default())?;
    if !drift.passed() {
        return Err(MfgError::DriftConditionFailed {
            margin: drift.min_margin,
            required: drift.required,
            witness: drift.witness.clone().map(|w| w.x).unwrap_or_default(),
        });
    }
    if config.max_iter == 0 || !(config.damping > 0.0 && config.damping <= 1.0) || !(config.tol > 0.0) {
        return Err(invalid("stationary iteration needs max_iter > 0, tol > 0 and damping in (0, 1]"));
    }
    let grid = &config.estimate.grid;
    let mut mu = match initial {
        Some(h) => h.clone(),
        None => Histogram::sampled(grid, &spec.initial, config.estimate.paths, config.estimate.seed)?,
    };
    let mut history = Vec::new();
    let mut warnings = Vec::new();
    for iter in 0..config.max_iter {
        let fb = optimal_feedback(spec, &mu, &config.feedback, config.estimate.seed.wrapping_add(1))?;
        warnings.extend(fb.warnings.iter().cloned());
        let law = mu.law();
        let est = estimate_stationary(
            spec,
            &law,
            Some(&fb.policy),
            StartLaw::Initial(&spec.initial),
            &config.estimate,
        )?;
        let next = mu.mix(&est.law, config.damping);
        let change = next.tv(&mu);
        history.push(StationaryIteration {
            iter,
            tv_change: change,
            mean: est.mean,
            second_moment: est.second_moment,
            value: fb.value,
        });
        info!("stationary iteration {iter}: TV change {change:.3e}, mean {:.4}", est.mean);
        let converged = change < config.tol;
        if converged || iter + 1 == config.max_iter {
            if !converged {
                warn!("stationary iteration stopped at TV change {change:.3e}");
            }
            let mut policy = fb.policy;
            policy.iteration = Some(iter);
            return Ok(StationaryMfgReport {
                converged,
                iterations: iter + 1,
                law: est.law.clone(),
                policy,
                estimate: est,
                drift,
                certificate: fb.certificate,
                value: fb.value,
                history,
                warnings,
            });
        }
        mu = next;
    }
    unreachable!("max_iter is positive")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvariantConfig {
    pub stationary: StationaryMfgConfig,
    pub t_check: f64,
    pub record_dt: f64,
    /// Invariance tolerance on `max_t d_TV(μ_t, μ)`.
    pub tol: f64,
}

impl Default for InvariantConfig {
    fn default() -> Self {
        Self {
            stationary: StationaryMfgConfig::default(),
            t_check: 16.0,
            record_dt: 0.5,
            tol: 0.05,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct InvariantReport {
    pub stationary: StationaryMfgReport,
    pub trace: InvarianceTrace,
    /// `max_t d_TV(μ_t, μ) < tol + band`.
    pub verified: bool,
    pub tol: f64,
    /// `d_TV(μ, mirrored μ)` when the grid is symmetric.
    pub mirror_tv: Option<f64>,
}

/// Solves the stationary game, then restarts the dynamics from `X₀ ~ μ`
/// under the equilibrium feedback and checks that the marginals stay at `μ`.
pub fn solve_invariant_mfg(spec: &GameSpec, config: &InvariantConfig) -> Result<InvariantReport> {
    let stationary = solve_stationary_mfg(spec, &config.stationary, None)?;
    let est = &config.stationary.estimate;
    let trace = invariance_trace(
        spec,
        &stationary.law,
        Some(&stationary.policy),
        StartLaw::Histogram(&stationary.law),
        config.t_check,
        config.record_dt,
        est.dt,
        est.paths,
        est.seed.wrapping_add(2),
    )?;
    let verified = trace.max_tv < config.tol + trace.band;
    if !verified {
        warn!("invariance check failed: max TV {:.3e}", trace.max_tv);
    }
    let mirror_tv = stationary.law.mirrored().ok().map(|m| m.tv(&stationary.law));
    Ok(InvariantReport {
        stationary,
        trace,
        verified,
        tol: config.tol,
        mirror_tv,
    })
}

/// Options for [`doeblin_chain_diagnostic`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DoeblinConfig {
    /// Cycles per start point.
    pub cycles: usize,
    pub dt: f64,
    /// A cycle longer than this counts as incomplete.
    pub max_cycle_time: f64,
    pub seed: u64,
    /// Start points on the outer sphere in dimension `d > 1`.
    pub starts: usize,
}

impl Default for DoeblinConfig {
    fn default() -> Self {
        Self {
            cycles: 2000,
            dt: 0.005,
            max_cycle_time: 500.0,
            seed: 0,
            starts: 4,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DoeblinReport {
    /// Smallest histogram overlap of exit locations between start points.
    pub theta: f64,
    pub mean_cycle: f64,
    pub cycle_std_error: f64,
    /// `ξ = (R² − R′²)/(2RΛ + dΛ²)`.
    pub xi: f64,
    pub bound_holds: bool,
    pub completed: usize,
    pub incomplete: usize,
    pub flagged: bool,
    pub starts: Vec<Vec<f64>>,
    /// Exit-location masses per start point, binned by the sign pattern of
    /// the exit point (`2^d` cells).
    pub exit_histograms: Vec<Vec<f64>>,
}

/// `ξ = (R² − R′²)/(2RΛ + dΛ²)`.
pub fn cycle_lower_bound(p: &StationaryParams, d: usize) -> f64 {
    let (r, rp, l) = (p.outer_radius, p.inner_radius, p.local_bound);
    (r * r - rp * rp) / (2.0 * r * l + d as f64 * l * l)
}

/// Simulates the chain of returns to the outer sphere: from `‖x‖ = R` run
/// until `‖x‖ ≤ R′`, then until `‖x‖ ≥ R`. Records cycle lengths and exit
/// locations per start point.
pub fn doeblin_chain_diagnostic(
    spec: &GameSpec,
    law: &MarginalLaw<'_>,
    policy: Option<&FeedbackPolicy>,
    config: &DoeblinConfig,
) -> Result<DoeblinReport> {
    let p = params(spec)?.clone();
    let drift = check_drift_condition(spec, &DriftProbe::default())?;
    if drift.status != Status::Pass {
        return Err(MfgError::DriftConditionFailed {
            margin: drift.min_margin,
            required: drift.required,
            witness: drift.witness.map(|w| w.x).unwrap_or_default(),
        });
    }
    let d = spec.dim();
    let dynamics = Dynamics::new(spec, law, policy, config.dt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let starts: Vec<Vec<f64>> = unit_directions(d, config.starts.saturating_sub(2 * d), &mut rng)
        .into_iter()
        .map(|u| u.iter().map(|v| v * p.outer_radius).collect())
        .collect();
    let max_steps = (config.max_cycle_time / config.dt).ceil() as usize;
    let cells = 1usize << d.min(16);
    let (r_in2, r_out2) = (p.inner_radius * p.inner_radius, p.outer_radius * p.outer_radius);
    let per_start = exec::map(starts.len(), |s| {
        let mut rng = chunk_rng(config.seed.wrapping_add(1), s);
        let (mut b, mut sigma, mut dw) = (vec![0.0; d], vec![0.0; d * d], vec![0.0; d]);
        let mut lengths = Vec::with_capacity(config.cycles);
        let mut exits = vec![0.0; cells];
        let mut incomplete = 0usize;
        for _ in 0..config.cycles {
            let mut x = starts[s].clone();
            let mut inner = false;
            let mut done = false;
            for step in 1..=max_steps {
                dynamics.step(&mut x, &mut rng, &mut b, &mut sigma, &mut dw);
                let r2: f64 = x.iter().map(|v| v * v).sum();
                if !inner {
                    inner = r2 <= r_in2;
                } else if r2 >= r_out2 {
                    lengths.push(step as f64 * config.dt);
                    let cell = x.iter().take(16).enumerate().fold(0usize, |c, (j, v)| c | (usize::from(*v > 0.0) << j));
                    exits[cell] += 1.0;
                    done = true;
                    break;
                }
            }
            if !done {
                incomplete += 1;
            }
        }
        (lengths, exits, incomplete)
    });
    let mut lengths = Vec::new();
    let mut incomplete = 0;
    let mut exit_histograms = Vec::new();
    for (l, e, inc) in per_start {
        lengths.extend(l);
        incomplete += inc;
        let s: f64 = e.iter().sum();
        exit_histograms.push(if s > 0.0 { e.iter().map(|v| v / s).collect() } else { e });
    }
    let mut theta = f64::INFINITY;
    for i in 0..exit_histograms.len() {
        for j in i + 1..exit_histograms.len() {
            let o: f64 = exit_histograms[i].iter().zip(&exit_histograms[j]).map(|(a, b)| a.min(*b)).sum();
            theta = theta.min(o);
        }
    }
    let completed = lengths.len();
    let (mean_cycle, cycle_std_error) = if completed > 0 {
        let n = completed as f64;
        let m = lengths.iter().sum::<f64>() / n;
        let v = lengths.iter().map(|l| (l - m) * (l - m)).sum::<f64>() / (n - 1.0).max(1.0);
        (m, (v / n).sqrt())
    } else {
        (f64::NAN, f64::NAN)
    };
    let xi = cycle_lower_bound(&p, d);
    Ok(DoeblinReport {
        theta: if theta.is_finite() { theta } else { 1.0 },
        mean_cycle,
        cycle_std_error,
        xi,
        bound_holds: completed > 0 && mean_cycle >= xi,
        completed,
        incomplete,
        flagged: completed == 0 || incomplete > 0,
        starts,
        exit_histograms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::inline::{registry, GameDescription, InlineCoefficients};
    use crate::game::ActionKind;
    use crate::oracle::stationary_density_quadrature;

    fn game(coefficients: InlineCoefficients, actions: ActionKind, p: StationaryParams) -> GameSpec {
        let mut d = GameDescription::custom(coefficients, actions);
        d.stationary = Some(p);
        d.bounds.drift = 5.0;
        d.build().unwrap()
    }

    fn clipped_ou(k: f64) -> GameSpec {
        game(
            InlineCoefficients {
                drift_x: -1.0,
                drift_x_clip: Some(3.0),
                ..Default::default()
            },
            ActionKind::atoms_1d(&[0.0]),
            StationaryParams {
                inner_radius: 2.0,
                outer_radius: 3.0,
                margin: k,
                local_bound: 3.0,
            },
        )
    }

    #[test]
    fn drift_condition_clipped_ou() {
        let r = check_drift_condition(&clipped_ou(3.0), &DriftProbe::default()).unwrap();
        assert_eq!(r.status, Status::Pass);
        assert!((r.min_margin - 3.5).abs() < 1e-12, "{}", r.min_margin);
        assert_eq!(r.local_status, Status::Pass);
        let strict = check_drift_condition(&clipped_ou(3.6), &DriftProbe::default()).unwrap();
        assert_eq!(strict.status, Status::Fail);
        assert_eq!(strict.witness.unwrap().x[0].abs(), 2.0);
    }

    #[test]
    fn drift_condition_fails_without_drift() {
        let spec = game(
            InlineCoefficients::default(),
            ActionKind::atoms_1d(&[0.0]),
            StationaryParams {
                inner_radius: 2.0,
                outer_radius: 3.0,
                margin: 1.0,
                local_bound: 3.0,
            },
        );
        let r = check_drift_condition(&spec, &DriftProbe::default()).unwrap();
        assert_eq!(r.status, Status::Fail);
        assert!((r.min_margin + 0.5).abs() < 1e-12);
        assert!(r.witness.is_some());
    }

    #[test]
    fn drift_condition_with_actions() {
        let spec = game(
            InlineCoefficients {
                drift_x: -1.0,
                drift_a: 0.2,
                ..Default::default()
            },
            ActionKind::interval(-1.0, 1.0, 21),
            StationaryParams {
                inner_radius: 2.0,
                outer_radius: 3.0,
                margin: 3.0,
                local_bound: 3.2,
            },
        );
        let r = check_drift_condition(&spec, &DriftProbe::default()).unwrap();
        assert_eq!(r.status, Status::Pass);
        assert!((r.min_margin - 3.1).abs() < 1e-9, "{}", r.min_margin);
    }

    #[test]
    fn cesaro_of_constant_and_piecewise_flows() {
        let nu = vec![0.2, 0.3, 0.5];
        let flow = vec![nu.clone(); 11];
        let d = cesaro_operator(&flow, 0.1, 10).unwrap();
        for (a, b) in d.iter().zip(&nu) {
            assert!((a - b).abs() < 1e-15);
        }
        let n1 = vec![1.0, 0.0, 0.0];
        let n2 = vec![0.0, 0.0, 1.0];
        let flow: Vec<Vec<f64>> = (0..=100).map(|k| if k < 50 { n1.clone() } else { n2.clone() }).collect();
        let d = cesaro_operator(&flow, 0.1, 100).unwrap();
        assert!((d[0] - 0.5).abs() <= 0.01 + 1e-12);
        assert!((d[2] - 0.5).abs() <= 0.01 + 1e-12);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cesaro_is_linear() {
        let a: Vec<Vec<f64>> = (0..=20).map(|k| vec![k as f64 / 20.0, 1.0 - k as f64 / 20.0]).collect();
        let b: Vec<Vec<f64>> = (0..=20).map(|k| vec![0.5 + 0.01 * k as f64, 0.5 - 0.01 * k as f64]).collect();
        let mix: Vec<Vec<f64>> = a.iter().zip(&b).map(|(x, y)| vec![0.3 * x[0] + 0.7 * y[0], 0.3 * x[1] + 0.7 * y[1]]).collect();
        let (da, db, dm) = (
            cesaro_operator(&a, 0.5, 20).unwrap(),
            cesaro_operator(&b, 0.5, 20).unwrap(),
            cesaro_operator(&mix, 0.5, 20).unwrap(),
        );
        for j in 0..2 {
            assert!((dm[j] - 0.3 * da[j] - 0.7 * db[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn grid_folds_tails() {
        let g = Grid { lo: -1.0, hi: 1.0, bins: 4 };
        assert_eq!(g.index(-7.0), 0);
        assert_eq!(g.index(7.0), 3);
        assert_eq!(g.index(1.0), 3);
        assert_eq!(g.index(-0.25), 1);
        assert!(g.is_symmetric());
    }

    #[test]
    fn stationary_second_moment_matches_quadrature() {
        let spec = clipped_ou(3.0);
        let oracle = stationary_density_quadrature(|x: f64| (-x).clamp(-3.0, 3.0), |_| 1.0, -8.0, 8.0, 4000).unwrap();
        let cfg = StationaryConfig {
            horizon: 16.0,
            dt: 0.01,
            paths: 4000,
            seed: 3,
            ..Default::default()
        };
        let law = MarginalLaw::dirac(&[0.0]);
        let est = estimate_stationary(&spec, &law, None, StartLaw::Initial(&spec.initial), &cfg).unwrap();
        // D^T from δ_0 is narrower than the stationary law by O(1/T)
        assert!((est.second_moment - oracle.second_moment()).abs() < 0.05, "{}", est.second_moment);
        assert!(est.mean.abs() < 0.03);
        assert_eq!(est.snapshots.len(), 4);
        assert_eq!(est.cesaro_residuals.len(), 3);
        assert!(est.gamma_hat > 0.0);
        let sum: f64 = est.law.masses.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn estimate_requires_drift_condition() {
        let spec = clipped_ou(4.0);
        let law = MarginalLaw::dirac(&[0.0]);
        let err = estimate_stationary(&spec, &law, None, StartLaw::Initial(&spec.initial), &StationaryConfig::default());
        assert!(matches!(err, Err(MfgError::DriftConditionFailed { .. })));
    }

    #[test]
    fn worker_count_does_not_change_estimates() {
        let spec = clipped_ou(3.0);
        let law = MarginalLaw::dirac(&[0.0]);
        let cfg = StationaryConfig {
            horizon: 2.0,
            dt: 0.02,
            paths: 5000,
            seed: 9,
            ..Default::default()
        };
        let run = || estimate_stationary(&spec, &law, None, StartLaw::Initial(&spec.initial), &cfg).unwrap();
        let a = run();
        let b = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap().install(run);
        assert_eq!(a.law.masses, b.law.masses);
        assert_eq!(a.second_moment, b.second_moment);
    }

    #[test]
    fn mirror_and_sampling() {
        let g = Grid { lo: -2.0, hi: 2.0, bins: 4 };
        let h = Histogram::new(g.clone(), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(h.mirrored().unwrap().masses, vec![0.4, 0.3, 0.2, 0.1]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = vec![0.0; 4];
        for _ in 0..40_000 {
            counts[g.index(h.sample(&mut rng))] += 1.0;
        }
        let emp = Histogram::new(g, counts).unwrap();
        assert!(emp.tv(&h) < 3.0 * h.sampling_floor(40_000));
    }

    #[test]
    fn cycle_bound_formula() {
        let p = StationaryParams {
            inner_radius: 2.0,
            outer_radius: 3.0,
            margin: 1.0,
            local_bound: 3.0,
        };
        assert!((cycle_lower_bound(&p, 1) - 5.0 / 27.0).abs() < 1e-15);
    }

    #[test]
    fn doeblin_chain_on_weak_confinement() {
        let spec = game(
            InlineCoefficients {
                drift_x: -1.0,
                drift_x_clip: Some(2.0),
                ..Default::default()
            },
            ActionKind::atoms_1d(&[0.0]),
            StationaryParams {
                inner_radius: 0.8,
                outer_radius: 1.2,
                margin: 0.1,
                local_bound: 1.2,
            },
        );
        let law = MarginalLaw::dirac(&[0.0]);
        let cfg = DoeblinConfig {
            cycles: 400,
            dt: 0.005,
            ..Default::default()
        };
        let r = doeblin_chain_diagnostic(&spec, &law, None, &cfg).unwrap();
        assert!(!r.flagged);
        assert!(r.theta > 0.0);
        assert!(r.bound_holds, "{} < {}", r.mean_cycle, r.xi);
        // exit from +R vs −R mirror each other
        let (p, q) = (&r.exit_histograms[0], &r.exit_histograms[1]);
        let n = cfg.cycles as f64;
        let se = (p[1] * (1.0 - p[1]) / n + q[0] * (1.0 - q[0]) / n).sqrt();
        assert!((p[1] - q[0]).abs() < 3.0 * se + 1e-9);
    }

    #[test]
    fn no_interaction_stationary_game_converges_quickly() {
        let spec = registry("clipped-ou-invariant").unwrap();
        let mut d = crate::game::inline::preset("clipped-ou-invariant").unwrap();
        d.coefficients.drift_mean = 0.0;
        d.coefficients.reward_kernel = 0.0;
        d.coefficients.reward_x = 0.1;
        d.coefficients.reward_cap = Some(2.0);
        let free = d.build().unwrap();
        let cfg = StationaryMfgConfig {
            estimate: StationaryConfig {
                horizon: 8.0,
                dt: 0.02,
                paths: 4000,
                seed: 1,
                ..Default::default()
            },
            feedback: FeedbackConfig {
                paths: 1500,
                dt: 0.1,
                tol: 0.2,
                ..Default::default()
            },
            tol: 0.03,
            max_iter: 4,
            damping: 1.0,
        };
        let r = solve_stationary_mfg(&free, &cfg, None).unwrap();
        // the law does not enter the coefficients, so the second iterate repeats the first
        assert!(r.converged && r.iterations <= 2, "{:?}", r.history);
        assert!(spec.stationary.is_some());
    }
}
