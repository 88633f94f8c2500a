//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Exits 0 so the workspace test run stays green when a criterion fails on
//! its merits; set `MFG_ACCEPTANCE_STRICT=1` to exit 1 on any failure.

use std::time::{Duration, Instant};

use mfg_core::asymptotics::{
    epsilon_bound, epsilon_gap, gaps_monotone, rate_sweep, truncation_profile, SweepConfig,
};
use mfg_core::bsde::{ActionFlow, BsdeSolver, LawFlow, MeanField, TruncationCertificate};
use mfg_core::equilibrium::{EquilibriumProblem, EquilibriumReport, PicardConfig};
use mfg_core::game::assumptions::Status;
use mfg_core::game::hamiltonian::{grid_argmax, maximize_hamiltonian};
use mfg_core::metrics::{pinsker, relative_entropy_paths, tv_paths};
use mfg_core::oracle::{stationary_density_quadrature, DiscreteOracle};
use mfg_core::stationary::{
    estimate_stationary, solve_invariant_mfg, Grid, Histogram, InvariantConfig, StartLaw, StationaryConfig,
};
use mfg_core::{registry, ActionLaw, InitialLaw, MarginalLaw, MeasureWeights, NoiseKind, PathEnsemble};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn run(id: usize, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = f();
    let took = start.elapsed();
    let in_time = took <= limit;
    let pass = o.pass && in_time;
    println!(
        "criterion {id} [{name}]: {} ({:.1}s of {}s) {}{}",
        if pass { "PASS" } else { "FAIL" },
        took.as_secs_f64(),
        limit.as_secs(),
        o.detail,
        if in_time { "" } else { "; over the runtime limit" }
    );
    pass
}

fn oracle_equivalence() -> Outcome {
    let spec = registry("discrete-oracle").unwrap();
    let dt: f64 = 0.5;
    let w = -(-spec.discount * dt).exp_m1() / spec.discount;
    let eq = DiscreteOracle::new(&spec, 2, dt, w).unwrap().enumerate().unwrap();
    let ens = PathEnsemble::binomial_tree(&spec, 2, dt).unwrap();
    let solver = BsdeSolver::for_ensemble(&ens).unwrap();
    let report = EquilibriumProblem::finite(&spec, &solver, 2)
        .unwrap()
        .solve(&PicardConfig {
            tol: 1e-12,
            max_iter: 200,
            ..Default::default()
        })
        .unwrap();
    let value_err = (report.value - eq.value).abs();
    let mut policy_ok = true;
    for k in 0..2 {
        for i in 0..ens.len() {
            policy_ok &= report.solution.actions_at(k)[i] as usize == eq.path_action(k, i);
        }
    }
    let mut mass_err: f64 = 0.0;
    for k in 0..=2 {
        for (a, b) in report.response.weights.masses_at(k).iter().zip(eq.path_masses(k)) {
            mass_err = mass_err.max((a - b).abs());
        }
    }
    outcome(
        report.converged && value_err < 1e-9 && policy_ok && mass_err < 1e-9,
        format!(
            "value {:.12} vs oracle {:.12} (|Δ| {value_err:.1e}), policies equal {policy_ok}, max marginal |Δ| {mass_err:.1e}",
            report.value, eq.value
        ),
    )
}

fn constant_reward() -> Outcome {
    let spec = registry("constant-reward").unwrap();
    let dt = 0.05;
    let cert = TruncationCertificate::new(spec.bounds.reward, spec.discount, 1e-3, dt).unwrap();
    let ens = PathEnsemble::simulate(&spec, 10_000, cert.steps, cert.steps as f64 * dt, 11).unwrap();
    let solver = BsdeSolver::for_ensemble(&ens).unwrap();
    let mu = MarginalLaw::dirac(&[0.0]);
    let q = ActionLaw::uniform(&spec.actions);
    let field = MeanField::new(LawFlow::Constant(&mu), ActionFlow::Constant(&q));
    let sol = solver.solve_infinite_horizon(&spec, &field, 1e-3).unwrap();
    let v = sol.y0_mean();
    let band = 1e-3 + 3.0 * sol.y0_std_error();
    let energy = sol.z_energy();
    outcome(
        (v - 2.0).abs() <= band && energy < 1e-4,
        format!("V = {v:.6} (target 2 ± {band:.2e}), discounted Z energy {energy:.2e}, horizon {:.2}", cert.t_required),
    )
}

/// The infinite equilibrium shared by criteria 3 to 6.
struct Monotone {
    spec: mfg_core::GameSpec,
    ens: PathEnsemble,
    tol_fp: f64,
}

impl Monotone {
    fn new() -> Self {
        let spec = registry("gaussian-repulsion").unwrap();
        let dt: f64 = 0.05;
        let steps = (17.0 / dt).round() as usize;
        let ens = PathEnsemble::simulate(&spec, 20_000, steps, steps as f64 * dt, 7).unwrap();
        Self { spec, ens, tol_fp: 2e-3 }
    }

    fn picard(&self) -> PicardConfig {
        PicardConfig {
            tol: self.tol_fp,
            max_iter: 60,
            ..Default::default()
        }
    }
}

fn truncation(m: &Monotone, eq: &EquilibriumReport, solver: &BsdeSolver<'_>) -> Outcome {
    let prof = truncation_profile(&m.spec, solver, &eq.response.field(), &[4.0, 6.0, 8.0, 10.0], 16.0).unwrap();
    let lambda = m.spec.discount;
    let slope = prof.slope.as_ref().map_or(f64::NAN, |s| s.slope);
    let diffs: Vec<String> = prof.rows.iter().map(|r| format!("{:.2e}", r.difference)).collect();
    outcome(
        (slope + lambda).abs() <= 0.2 * lambda,
        format!("slope {slope:.3} (target {:.2} ± 20%), |Ỹ₀(T) − Ỹ₀(16)| = [{}]", -lambda, diffs.join(", ")),
    )
}

fn epsilon(m: &Monotone, eq: &EquilibriumReport, solver: &BsdeSolver<'_>) -> Outcome {
    let gaps: Vec<_> = [4.0, 6.0, 8.0, 10.0]
        .iter()
        .map(|&h| epsilon_gap(&m.spec, solver, &eq.response, &eq.control, h, 13).unwrap())
        .collect();
    let last = gaps.last().unwrap();
    let bound10 = epsilon_bound(m.spec.bounds.reward, m.spec.discount, 10.0);
    let monotone = gaps_monotone(&gaps, 0.0);
    let all_within = gaps.iter().all(|g| g.within_bound);
    let list: Vec<String> = gaps.iter().map(|g| format!("{:.2e}", g.gap)).collect();
    outcome(
        monotone && all_within && (bound10 - 2.695e-2).abs() < 1e-5,
        format!(
            "gaps [{}], T=10 gap {:.2e} ≤ {:.4e} + 3 bands ({:.2e}), monotone {monotone}",
            list.join(", "),
            last.gap,
            last.bound,
            last.allowance - last.bound
        ),
    )
}

fn sweep(m: &Monotone, eq: &EquilibriumReport, solver: &BsdeSolver<'_>) -> Outcome {
    let cfg = SweepConfig {
        picard: m.picard(),
        seed: 5,
        ..Default::default()
    };
    let sw = rate_sweep(&m.spec, solver, eq, &cfg).unwrap();
    let mono = sw.applicability.monotonicity.status == Status::Pass && m.spec.bounds.monotonicity_slack == 0.0;
    let within = sw.all_within();
    let lambda = m.spec.discount;
    let target = -lambda / 2.0;
    let slope = sw.tv_slope.as_ref().map_or(f64::NAN, |s| s.slope);
    let slope_ok = (slope - target).abs() <= 0.2 * target.abs();
    let worst = sw
        .rows
        .iter()
        .flat_map(|r| [r.entropy, r.tv, r.control, r.w1q])
        .map(|x| (x.value + x.band) / x.bound)
        .fold(0.0, f64::max);
    outcome(
        mono && within && slope_ok,
        format!(
            "δ = 0 verified {mono}; all {} rows within bounds {within} (worst measured/bound {worst:.2e}); TV slope {slope:.3} (target {target:.2} ± 20%) {}",
            sw.rows.len(),
            if slope_ok { "ok" } else { "outside band" }
        ),
    )
}

fn uniqueness(m: &Monotone, eq: &EquilibriumReport, solver: &BsdeSolver<'_>) -> Outcome {
    let cert = eq.certificate.clone().unwrap();
    let problem = EquilibriumProblem::infinite(&m.spec, solver, &cert).unwrap();
    let last = m.spec.actions.len() - 1;
    let lo = problem
        .solve_from(problem.constant_action_state(0).unwrap(), &m.picard())
        .unwrap();
    let hi = problem
        .solve_from(problem.constant_action_state(last).unwrap(), &m.picard())
        .unwrap();
    let pairs = [
        ("a≡min vs a≡max", problem.residual(&lo.response, &hi.response).unwrap()),
        ("a≡min vs driftless", problem.residual(&lo.response, &eq.response).unwrap()),
        ("a≡max vs driftless", problem.residual(&hi.response, &eq.response).unwrap()),
    ];
    let limit = 3.0 * m.tol_fp;
    let ok = lo.converged && hi.converged && pairs.iter().all(|(_, r)| r.tv < limit);
    let detail: Vec<String> = pairs.iter().map(|(n, r)| format!("{n} {:.2e}", r.tv)).collect();
    outcome(
        ok,
        format!("max-t TV: {} (limit {limit:.1e}); values {:.5} {:.5} {:.5}", detail.join(", "), lo.value, hi.value, eq.value),
    )
}

fn stationary_law() -> Outcome {
    let oracle = stationary_density_quadrature(|x: f64| (-x).clamp(-3.0, 3.0), |_| 1.0, -8.0, 8.0, 4000).unwrap();
    let target_m2 = oracle.second_moment();
    let mut spec = registry("clipped-ou-invariant").unwrap();
    spec.initial = InitialLaw::Dirac { point: vec![1.0] };
    let grid = Grid {
        lo: -4.0,
        hi: 4.0,
        bins: 32,
    };
    let reference = Histogram::new(grid.clone(), oracle.bin_masses(&grid.edges())).unwrap();
    let cfg = StationaryConfig {
        horizon: 64.0,
        dt: 0.005,
        paths: 50_000,
        seed: 21,
        grid,
        doublings: 3,
    };
    let law = MarginalLaw::dirac(&[0.0]);
    let est = estimate_stationary(&spec, &law, None, StartLaw::Initial(&spec.initial), &cfg).unwrap();
    let ts: Vec<f64> = est.snapshots.iter().map(|s| s.horizon.ln()).collect();
    let tvs: Vec<f64> = est.snapshots.iter().map(|s| s.law.tv(&reference).ln()).collect();
    let fit = mfg_core::asymptotics::least_squares(&ts, &tvs).unwrap();
    let m2_ok = (est.second_moment - target_m2).abs() <= 0.03;
    let slope_ok = (fit.slope + 1.0).abs() <= 0.2;
    let list: Vec<String> = est
        .snapshots
        .iter()
        .map(|s| format!("T={} {:.2e}", s.horizon, s.law.tv(&reference)))
        .collect();
    outcome(
        m2_ok && slope_ok && est.snapshots.len() == 4,
        format!(
            "E[X²] {:.4} vs quadrature {target_m2:.4}; TV(D^T, oracle) [{}], log-log slope {:.3}",
            est.second_moment,
            list.join(", "),
            fit.slope
        ),
    )
}

fn invariant() -> Outcome {
    let spec = registry("clipped-ou-invariant").unwrap();
    let mut cfg = InvariantConfig::default();
    cfg.stationary.estimate.paths = 20_000;
    cfg.stationary.estimate.seed = 31;
    let r = solve_invariant_mfg(&spec, &cfg).unwrap();
    let mirror = r.mirror_tv.unwrap_or(f64::INFINITY);
    let ok = r.stationary.converged && r.trace.max_tv < 0.05 + r.trace.band && mirror < 0.03;
    outcome(
        ok,
        format!(
            "converged {} in {} iterations; max_t≤16 TV(marginal_t, μ) {:.3e} < 0.05 + band {:.3e}; TV(μ, mirrored μ) {mirror:.3e}",
            r.stationary.converged,
            r.stationary.iterations,
            r.trace.max_tv,
            r.trace.band
        ),
    )
}

/// Random non-anticipative drift field `β_k = c·tanh(a·x_k + b·t_k + φ)`.
fn random_field(ens: &PathEnsemble, horizon: usize, c: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let a: f64 = 2.0 * rng.random::<f64>() - 1.0;
    let b: f64 = 2.0 * rng.random::<f64>() - 1.0;
    let phi: f64 = 3.0 * rng.random::<f64>();
    let mut out = Vec::with_capacity(horizon * ens.len());
    for k in 0..horizon {
        let t = ens.time(k);
        out.extend(ens.states_at(k).iter().map(|x| c * (a * 2.0 * x + b * t + phi).tanh()));
    }
    out
}

fn properties() -> Outcome {
    let spec = registry("constant-reward").unwrap();
    let (n, k, dt, c) = (4000, 20, 0.05, 1.0);
    let ens = PathEnsemble::simulate(&spec, n, k, k as f64 * dt, 41).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let t = k as f64 * dt;

    // weights: mean one, second moment under exp(C²T)
    let mut weight_fail = 0;
    for _ in 0..100 {
        let beta = random_field(&ens, k, c, &mut rng);
        let w = MeasureWeights::girsanov(&ens, beta, k, c).unwrap();
        let m = w.mean_weight(k);
        let s2 = w.second_moment(k);
        let se = ((s2 - m * m).max(0.0) / n as f64).sqrt();
        let s4 = w.log_weights_at(k).iter().map(|l| (4.0 * l).exp()).sum::<f64>() / n as f64;
        let se2 = ((s4 - s2 * s2).max(0.0) / n as f64).sqrt();
        if (m - 1.0).abs() > 4.0 * se || s2 > (c * c * t).exp() + 4.0 * se2 {
            weight_fail += 1;
        }
    }

    // entropy: Girsanov energy vs direct log-ratio
    let mut entropy_fail = 0;
    let mut pinsker_fail = 0;
    for pair in 0..50 {
        let a = MeasureWeights::girsanov(&ens, random_field(&ens, k, c, &mut rng), k, c).unwrap();
        let b = MeasureWeights::girsanov(&ens, random_field(&ens, k, c, &mut rng), k, c).unwrap();
        let h = relative_entropy_paths(&a, &b, k, dt).unwrap();
        if pair < 20 && !h.agree(3.0) {
            entropy_fail += 1;
        }
        let tv = tv_paths(&a, &b, k);
        let p = a.masses_at(k);
        let q = b.masses_at(k);
        let kl: f64 = p.iter().zip(&q).filter(|(x, _)| **x > 0.0).map(|(x, y)| x * (x / y).ln()).sum();
        if tv > pinsker(kl) + 1e-12 || tv > pinsker(h.girsanov + 3.0 * h.girsanov_se) {
            pinsker_fail += 1;
        }
    }

    // tie-breaking: flat Hamiltonian and planted ties
    let mut tie_fail = 0;
    let x = [0.0];
    let view = mfg_core::PathView::from_prefix(&x, 1);
    let law = MarginalLaw::dirac(&[0.0]);
    for _ in 0..20 {
        if maximize_hamiltonian(&spec, 0.0, &view, &law, &[0.0]).unwrap().index != 0 {
            tie_fail += 1;
        }
    }
    for trial in 0..200 {
        let len = 5 + trial % 40;
        let f3: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
        let beta = vec![0.0; len];
        let top = f3.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (i, j) = (rng.random_range(0..len), rng.random_range(0..len));
        let mut planted = f3.clone();
        planted[i] = top + 1.0;
        planted[j] = top + 1.0;
        if grid_argmax(&beta, &planted, &[0.3]).0 != i.min(j) {
            tie_fail += 1;
        }
    }

    // non-anticipativity: perturb increments after step j
    let mut anticipation = 0;
    let d = 1;
    for trial in 0..20 {
        let j = 1 + trial % (k - 1);
        let mut inc: Vec<f64> = (0..k).flat_map(|s| ens.increments_at(s).to_vec()).collect();
        let mut states: Vec<f64> = ens.states_at(0).to_vec();
        for s in 0..k {
            if s >= j {
                for v in &mut inc[s * n * d..(s + 1) * n * d] {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    *v = dt.sqrt() * g;
                }
            }
            let prev: Vec<f64> = states[s * n..(s + 1) * n].to_vec();
            states.extend(prev.iter().zip(&inc[s * n..(s + 1) * n]).map(|(x, dw)| x + dw));
        }
        let alt = PathEnsemble::from_parts(n, d, dt, NoiseKind::Gaussian, states, inc).unwrap();
        let mut field_rng = ChaCha8Rng::seed_from_u64(1000 + trial as u64);
        let wa = MeasureWeights::girsanov(&ens, random_field(&ens, k, c, &mut field_rng), k, c).unwrap();
        let mut field_rng = ChaCha8Rng::seed_from_u64(1000 + trial as u64);
        let wb = MeasureWeights::girsanov(&alt, random_field(&alt, k, c, &mut field_rng), k, c).unwrap();
        for s in 0..=j {
            if wa.log_weights_at(s) != wb.log_weights_at(s) || ens.states_at(s) != alt.states_at(s) {
                anticipation += 1;
            }
        }
        for name in ["gaussian-repulsion", "clipped-ou-invariant"] {
            let g = registry(name).unwrap();
            let mu = ens.marginal(j);
            let mut ba = [0.0];
            let mut bb = [0.0];
            for i in (0..n).step_by(97) {
                let a = g.actions.point(i % g.actions.len());
                g.coefficients.drift(ens.time(j), &ens.path_view(j, i), &mu, a, &mut ba);
                g.coefficients.drift(ens.time(j), &alt.path_view(j, i), &mu, a, &mut bb);
                let ra = g.coefficients.reward_state(ens.time(j), &ens.path_view(j, i), &mu);
                let rb = g.coefficients.reward_state(ens.time(j), &alt.path_view(j, i), &mu);
                if ba != bb || ra != rb {
                    anticipation += 1;
                }
            }
        }
    }
    let total = weight_fail + entropy_fail + pinsker_fail + tie_fail + anticipation;
    outcome(
        total == 0,
        format!(
            "violations: weights {weight_fail}/100, entropy estimators {entropy_fail}/20, Pinsker {pinsker_fail}/50, tie-break {tie_fail}/220, non-anticipativity {anticipation}"
        ),
    )
}

fn main() {
    let strict = std::env::var("MFG_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    // comma-separated criterion numbers, e.g. `MFG_ACCEPTANCE_ONLY=7,9`
    let only: Option<Vec<usize>> = std::env::var("MFG_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |id: usize| only.as_ref().is_none_or(|o| o.contains(&id));
    let secs = Duration::from_secs;
    let mut results = Vec::new();
    if wanted(1) {
        results.push(run(1, "oracle equivalence", secs(5), oracle_equivalence));
    }
    if wanted(2) {
        results.push(run(2, "constant-reward BSDE", secs(30), constant_reward));
    }

    if (3..=6).any(wanted) {
        let setup = Instant::now();
        let m = Monotone::new();
        let solver = BsdeSolver::for_ensemble(&m.ens).unwrap();
        let cert = solver.certificate(&m.spec, 1e-3).unwrap();
        let eq = EquilibriumProblem::infinite(&m.spec, &solver, &cert)
            .unwrap()
            .solve(&m.picard())
            .unwrap();
        println!(
            "shared infinite equilibrium on gaussian-repulsion: N = {}, converged {} in {} iterations, residual {:.2e}, V = {:.5}, {:.1}s",
            m.ens.len(),
            eq.converged,
            eq.iterations,
            eq.final_residual,
            eq.value,
            setup.elapsed().as_secs_f64()
        );
        // the shared solve counts against every criterion that uses it
        let shared = setup.elapsed();
        if wanted(3) {
            results.push(run(3, "truncation rate", secs(300).saturating_sub(shared), || truncation(&m, &eq, &solver)));
        }
        if wanted(4) {
            results.push(run(4, "ε-equilibrium bound", secs(600).saturating_sub(shared), || epsilon(&m, &eq, &solver)));
        }
        if wanted(5) {
            results.push(run(5, "rate sweep", secs(1200).saturating_sub(shared), || sweep(&m, &eq, &solver)));
        }
        if wanted(6) {
            results.push(run(6, "uniqueness under monotonicity", secs(600).saturating_sub(shared), || {
                uniqueness(&m, &eq, &solver)
            }));
        }
    }

    if wanted(7) {
        results.push(run(7, "stationary law", secs(300), stationary_law));
    }
    if wanted(8) {
        results.push(run(8, "invariant MFG", secs(600), invariant));
    }
    if wanted(9) {
        results.push(run(9, "metric and property suite", secs(120), properties));
    }

    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria pass", results.len());
    if strict && passed < results.len() {
        std::process::exit(1);
    }
}
