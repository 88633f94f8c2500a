//! Conditional expectations `E[Y | F_k]` on a fixed ensemble.
//!
//! A [`Regressor`] is planned once per ensemble (design matrices, Cholesky
//! factors, bin and prefix assignments) and then applied to any number of
//! targets. Three bases are available: a global polynomial in the current
//! state, equal-mass bins on the first state coordinate, and exact
//! conditioning on the path prefix for finite-state ensembles.

use std::collections::HashMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, MfgError, Result};
use crate::exec;
use crate::paths::PathEnsemble;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Basis {
    Polynomial { degree: usize },
    Binned { bins: usize },
    /// Group averages over identical path prefixes.
    Exact,
}

impl Default for Basis {
    fn default() -> Self {
        Basis::Polynomial { degree: 3 }
    }
}

impl std::fmt::Display for Basis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Basis::Polynomial { degree } => write!(f, "polynomial(degree={degree})"),
            Basis::Binned { bins } => write!(f, "binned(bins={bins})"),
            Basis::Exact => write!(f, "exact"),
        }
    }
}

pub const FALLBACK_BINS: usize = 32;
const PIVOT_TOL: f64 = 1e-10;

#[derive(Clone, Debug)]
enum Plan {
    Constant,
    Poly {
        mean: Vec<f64>,
        scale: Vec<f64>,
        exponents: Vec<Vec<u32>>,
        /// Lower-triangular Cholesky factor of the normalised Gram matrix.
        chol: Vec<f64>,
    },
    Groups {
        id: Vec<u32>,
        count: Vec<u32>,
    },
}

/// Per-step regression plans for steps `0..steps` of one ensemble.
#[derive(Clone, Debug)]
pub struct Regressor {
    n: usize,
    d: usize,
    basis: Basis,
    plans: Vec<Plan>,
    warnings: Vec<String>,
}

impl Regressor {
    pub fn new(ens: &PathEnsemble, basis: Basis, steps: usize) -> Result<Self> {
        if steps > ens.steps() {
            return Err(MfgError::HorizonExceeded {
                requested: steps,
                available: ens.steps(),
            });
        }
        match basis {
            Basis::Polynomial { degree } if degree > 8 => {
                return Err(invalid("polynomial degree above 8 is not supported"))
            }
            Basis::Binned { bins: 0 } => return Err(invalid("bin count must be positive")),
            _ => {}
        }
        let n = ens.len();
        let d = ens.dim();
        let mut warnings = Vec::new();
        let plans = match basis {
            Basis::Exact => exact_plans(ens, steps),
            Basis::Binned { bins } => (0..steps).map(|k| binned_plan(ens, k, bins)).collect(),
            Basis::Polynomial { degree } => {
                let mut plans = Vec::with_capacity(steps);
                for k in 0..steps {
                    plans.push(poly_plan(ens, k, degree, &mut warnings));
                }
                plans
            }
        };
        if !warnings.is_empty() {
            warn!("regression basis reduced at {} step(s)", warnings.len());
        }
        Ok(Self {
            n,
            d,
            basis,
            plans,
            warnings,
        })
    }

    pub fn basis(&self) -> Basis {
        self.basis
    }

    /// Number of steps with a plan.
    pub fn steps(&self) -> usize {
        self.plans.len()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn descriptor(&self) -> String {
        if self.warnings.is_empty() {
            self.basis.to_string()
        } else {
            format!("{} with {} reduced step(s)", self.basis, self.warnings.len())
        }
    }

    /// Writes the fitted conditional expectation of `target` given `F_k`.
    pub fn fit(&self, ens: &PathEnsemble, k: usize, target: &[f64], out: &mut [f64]) {
        assert_eq!(target.len(), self.n);
        assert_eq!(out.len(), self.n);
        match &self.plans[k] {
            Plan::Constant => {
                let m = target.iter().sum::<f64>() / self.n as f64;
                out.fill(m);
            }
            Plan::Groups { id, count } => {
                let mut sum = vec![0.0; count.len()];
                for (&g, &y) in id.iter().zip(target) {
                    sum[g as usize] += y;
                }
                for (s, &c) in sum.iter_mut().zip(count) {
                    *s /= c as f64;
                }
                for (o, &g) in out.iter_mut().zip(id) {
                    *o = sum[g as usize];
                }
            }
            Plan::Poly {
                mean,
                scale,
                exponents,
                chol,
            } => {
                let p = exponents.len();
                let x = ens.states_at(k);
                let d = self.d;
                let feats = |i: usize, phi: &mut [f64]| features(&x[i * d..(i + 1) * d], mean, scale, exponents, phi);
                let parts = exec::map_ranges(self.n, exec::PATH_CHUNK, |r| {
                    let mut acc = vec![0.0; p];
                    let mut phi = vec![0.0; p];
                    for i in r {
                        feats(i, &mut phi);
                        for (a, f) in acc.iter_mut().zip(&phi) {
                            *a += f * target[i];
                        }
                    }
                    acc
                });
                let mut rhs = vec![0.0; p];
                for part in parts {
                    for (r, v) in rhs.iter_mut().zip(part) {
                        *r += v;
                    }
                }
                rhs.iter_mut().for_each(|v| *v /= self.n as f64);
                cholesky_solve(chol, p, &mut rhs);
                exec::chunks_mut(out, exec::PATH_CHUNK, |start, chunk| {
                    let mut phi = vec![0.0; p];
                    for (j, o) in chunk.iter_mut().enumerate() {
                        feats(start + j, &mut phi);
                        *o = phi.iter().zip(&rhs).map(|(a, b)| a * b).sum();
                    }
                });
            }
        }
    }
}

fn features(x: &[f64], mean: &[f64], scale: &[f64], exponents: &[Vec<u32>], phi: &mut [f64]) {
    if x.len() == 1 {
        let u = (x[0] - mean[0]) / scale[0];
        let mut v = 1.0;
        for f in phi.iter_mut() {
            *f = v;
            v *= u;
        }
        return;
    }
    for (f, e) in phi.iter_mut().zip(exponents) {
        let mut v = 1.0;
        for ((&xi, (&m, &s)), &p) in x.iter().zip(mean.iter().zip(scale)).zip(e) {
            v *= ((xi - m) / s).powi(p as i32);
        }
        *f = v;
    }
}

/// Exponent vectors of total degree `<= degree` in `d` variables, graded.
fn monomials(d: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for total in 0..=degree as u32 {
        let mut cur = vec![0u32; d];
        push_compositions(&mut out, &mut cur, 0, total);
    }
    out
}

fn push_compositions(out: &mut Vec<Vec<u32>>, cur: &mut Vec<u32>, pos: usize, left: u32) {
    if pos + 1 == cur.len() {
        cur[pos] = left;
        out.push(cur.clone());
        return;
    }
    for v in (0..=left).rev() {
        cur[pos] = v;
        push_compositions(out, cur, pos + 1, left - v);
    }
    cur[pos] = 0;
}

fn poly_plan(ens: &PathEnsemble, k: usize, degree: usize, warnings: &mut Vec<String>) -> Plan {
    let n = ens.len();
    let d = ens.dim();
    let x = ens.states_at(k);
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += x[i * d + j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut scale = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            let c = x[i * d + j] - mean[j];
            scale[j] += c * c;
        }
    }
    let mut varying = false;
    for (s, m) in scale.iter_mut().zip(&mean) {
        *s = (*s / n as f64).sqrt();
        if *s > 1e-12 * (1.0 + m.abs()) {
            varying = true;
        } else {
            *s = 1.0;
        }
    }
    if !varying || degree == 0 {
        return Plan::Constant;
    }
    let mut deg = degree;
    while deg >= 1 {
        let exponents = monomials(d, deg);
        let p = exponents.len();
        let parts = exec::map_ranges(n, exec::PATH_CHUNK, |r| {
            let mut g = vec![0.0; p * p];
            let mut phi = vec![0.0; p];
            for i in r {
                features(&x[i * d..(i + 1) * d], &mean, &scale, &exponents, &mut phi);
                for a in 0..p {
                    for b in 0..=a {
                        g[a * p + b] += phi[a] * phi[b];
                    }
                }
            }
            g
        });
        let mut gram = vec![0.0; p * p];
        for part in parts {
            for (g, v) in gram.iter_mut().zip(part) {
                *g += v;
            }
        }
        gram.iter_mut().for_each(|v| *v /= n as f64);
        if let Some(chol) = cholesky(&gram, p) {
            if deg < degree {
                warnings.push(format!("step {k}: polynomial degree reduced to {deg}"));
            }
            return Plan::Poly {
                mean,
                scale,
                exponents,
                chol,
            };
        }
        deg -= 1;
    }
    warnings.push(format!("step {k}: polynomial basis singular, using {FALLBACK_BINS} bins"));
    binned_plan(ens, k, FALLBACK_BINS)
}

fn cholesky(a: &[f64], p: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; p * p];
    let top = (0..p).map(|i| a[i * p + i]).fold(0.0, f64::max);
    for i in 0..p {
        for j in 0..=i {
            let mut s = a[i * p + j];
            for m in 0..j {
                s -= l[i * p + m] * l[j * p + m];
            }
            if i == j {
                if !(s > PIVOT_TOL * top) {
                    return None;
                }
                l[i * p + i] = s.sqrt();
            } else {
                l[i * p + j] = s / l[j * p + j];
            }
        }
    }
    Some(l)
}

fn cholesky_solve(l: &[f64], p: usize, b: &mut [f64]) {
    for i in 0..p {
        let mut s = b[i];
        for m in 0..i {
            s -= l[i * p + m] * b[m];
        }
        b[i] = s / l[i * p + i];
    }
    for i in (0..p).rev() {
        let mut s = b[i];
        for m in i + 1..p {
            s -= l[m * p + i] * b[m];
        }
        b[i] = s / l[i * p + i];
    }
}

fn binned_plan(ens: &PathEnsemble, k: usize, bins: usize) -> Plan {
    let n = ens.len();
    let order = ens.sorted_order(k);
    let x = ens.states_at(k);
    let d = ens.dim();
    let bins = bins.min(n);
    let mut id = vec![0u32; n];
    let mut count = vec![0u32; bins];
    // Ties stay in one bin so the fit is a function of the state.
    let mut prev = f64::NAN;
    let mut cur = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        let v = x[i as usize * d];
        let target = rank * bins / n;
        if target > cur && v != prev {
            cur = target;
        }
        prev = v;
        id[i as usize] = cur as u32;
        count[cur] += 1;
    }
    compact(id, count)
}

fn compact(mut id: Vec<u32>, count: Vec<u32>) -> Plan {
    let mut remap = vec![u32::MAX; count.len()];
    let mut kept = Vec::new();
    for (g, &c) in count.iter().enumerate() {
        if c > 0 {
            remap[g] = kept.len() as u32;
            kept.push(c);
        }
    }
    id.iter_mut().for_each(|g| *g = remap[*g as usize]);
    Plan::Groups { id, count: kept }
}

fn exact_plans(ens: &PathEnsemble, steps: usize) -> Vec<Plan> {
    let n = ens.len();
    let d = ens.dim();
    let mut plans = Vec::with_capacity(steps);
    // Prefix classes: X_0 first, then refined by each increment.
    let mut table: HashMap<Vec<u64>, u32> = HashMap::new();
    let mut ids = vec![0u32; n];
    let x0 = ens.states_at(0);
    for i in 0..n {
        let key: Vec<u64> = x0[i * d..(i + 1) * d].iter().map(|v| v.to_bits()).collect();
        let next = table.len() as u32;
        ids[i] = *table.entry(key).or_insert(next);
    }
    for k in 0..steps {
        let mut count = vec![0u32; table.len()];
        for &g in &ids {
            count[g as usize] += 1;
        }
        plans.push(Plan::Groups {
            id: ids.clone(),
            count,
        });
        if k + 1 == steps {
            break;
        }
        let dw = ens.increments_at(k);
        let mut refined: HashMap<Vec<u64>, u32> = HashMap::new();
        for i in 0..n {
            let mut key = Vec::with_capacity(1 + d);
            key.push(ids[i] as u64);
            key.extend(dw[i * d..(i + 1) * d].iter().map(|v| v.to_bits()));
            let next = refined.len() as u32;
            ids[i] = *refined.entry(key).or_insert(next);
        }
        table = refined;
    }
    plans
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::inline::registry;

    fn ensemble(n: usize, steps: usize) -> PathEnsemble {
        let spec = registry("gaussian-repulsion").unwrap();
        PathEnsemble::simulate(&spec, n, steps, steps as f64 * 0.1, 3).unwrap()
    }

    #[test]
    fn monomial_counts() {
        assert_eq!(monomials(1, 3).len(), 4);
        assert_eq!(monomials(2, 3).len(), 10);
        assert_eq!(monomials(3, 2).len(), 10);
        assert_eq!(monomials(2, 1), vec![vec![0, 0], vec![1, 0], vec![0, 1]]);
    }

    #[test]
    fn polynomial_reproduces_cubic() {
        let ens = ensemble(500, 4);
        let reg = Regressor::new(&ens, Basis::default(), 4).unwrap();
        assert!(reg.warnings().is_empty());
        let x = ens.states_at(2);
        let y: Vec<f64> = x.iter().map(|v| 1.0 - 2.0 * v + 0.5 * v * v * v).collect();
        let mut out = vec![0.0; 500];
        reg.fit(&ens, 2, &y, &mut out);
        for (a, b) in out.iter().zip(&y) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_state_uses_mean() {
        let spec = registry("constant-reward").unwrap();
        let ens = PathEnsemble::simulate(&spec, 100, 2, 0.2, 1).unwrap();
        let reg = Regressor::new(&ens, Basis::default(), 2).unwrap();
        assert!(reg.warnings().is_empty());
        let y: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let mut out = vec![0.0; 100];
        reg.fit(&ens, 0, &y, &mut out);
        assert!(out.iter().all(|v| (v - 49.5).abs() < 1e-12));
    }

    #[test]
    fn tree_falls_back_when_rank_deficient() {
        let spec = registry("discrete-oracle").unwrap();
        let ens = PathEnsemble::binomial_tree(&spec, 3, 0.25).unwrap();
        let reg = Regressor::new(&ens, Basis::default(), 3).unwrap();
        // Step 1 has two distinct states, step 2 three.
        assert_eq!(reg.warnings().len(), 2);
    }

    #[test]
    fn exact_groups_match_prefixes() {
        let spec = registry("discrete-oracle").unwrap();
        let ens = PathEnsemble::binomial_tree(&spec, 3, 0.25).unwrap();
        let reg = Regressor::new(&ens, Basis::Exact, 3).unwrap();
        let y: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let mut out = vec![0.0; 8];
        reg.fit(&ens, 0, &y, &mut out);
        assert!(out.iter().all(|v| (v - 3.5).abs() < 1e-15));
        reg.fit(&ens, 1, &y, &mut out);
        assert_eq!(&out[..4], &[1.5; 4]);
        assert_eq!(&out[4..], &[5.5; 4]);
        reg.fit(&ens, 2, &y, &mut out);
        assert_eq!(out, vec![0.5, 0.5, 2.5, 2.5, 4.5, 4.5, 6.5, 6.5]);
    }

    #[test]
    fn binned_is_piecewise_mean() {
        let ens = ensemble(1000, 2);
        let reg = Regressor::new(&ens, Basis::Binned { bins: 10 }, 2).unwrap();
        let x = ens.states_at(1);
        let y: Vec<f64> = x.to_vec();
        let mut out = vec![0.0; 1000];
        reg.fit(&ens, 1, &y, &mut out);
        // Fitted values are monotone in x and preserve the mean.
        let order = ens.sorted_order(1);
        for w in order.windows(2) {
            assert!(out[w[0] as usize] <= out[w[1] as usize] + 1e-15);
        }
        let (a, b): (f64, f64) = (out.iter().sum(), y.iter().sum());
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn fit_is_a_projection() {
        let ens = ensemble(2000, 3);
        let reg = Regressor::new(&ens, Basis::default(), 3).unwrap();
        let y: Vec<f64> = ens.states_at(3).iter().map(|v| v.sin()).collect();
        let mut once = vec![0.0; 2000];
        let mut twice = vec![0.0; 2000];
        reg.fit(&ens, 2, &y, &mut once);
        reg.fit(&ens, 2, &once, &mut twice);
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
