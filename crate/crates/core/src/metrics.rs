//! Distances and divergences between weighted empirical measures.

use serde::Serialize;

use crate::error::{MfgError, Result};
use crate::law::{ActionLaw, MarginalLaw};
use crate::paths::MeasureWeights;

pub const DEFAULT_BINS: usize = 64;

/// `Σ p log(p/q)` for two mass vectors on common atoms; `+∞` when `p` is
/// not absolutely continuous with respect to `q`.
pub fn discrete_entropy(p: &[f64], q: &[f64]) -> f64 {
    let mut h = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return f64::INFINITY;
            }
            h += a * (a / b).ln();
        }
    }
    h.max(0.0)
}

/// Both estimators of `H(P_A | P_B)` on `F_{t_k}` for two weight sets over
/// one ensemble, with standard errors.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EntropyEstimate {
    /// `½ E_A[∫‖β_A − β_B‖² ds]`.
    pub girsanov: f64,
    /// `E_A[ℓ_A − ℓ_B]`.
    pub direct: f64,
    pub girsanov_se: f64,
    pub direct_se: f64,
    /// Standard error of the per-path difference of the two integrands.
    pub difference_se: f64,
}

impl EntropyEstimate {
    /// Whether the two estimators agree within `z` standard errors.
    pub fn agree(&self, z: f64) -> bool {
        (self.girsanov - self.direct).abs() <= z * self.difference_se + 1e-12
    }
}

fn weighted_mean_se(w: &[f64], v: &[f64]) -> (f64, f64) {
    let sw: f64 = w.iter().sum();
    let mean = w.iter().zip(v).map(|(w, v)| w * v).sum::<f64>() / sw;
    let var = w
        .iter()
        .zip(v)
        .map(|(w, v)| w * w * (v - mean) * (v - mean))
        .sum::<f64>()
        / (sw * sw);
    (mean, var.sqrt())
}

/// Relative entropy of the path laws restricted to `[0, t_k]`.
pub fn relative_entropy_paths(a: &MeasureWeights, b: &MeasureWeights, k: usize, dt: f64) -> Result<EntropyEstimate> {
    if a.len() != b.len() {
        return Err(MfgError::Shape("weights over different ensembles".into()));
    }
    if k > a.horizon() || k > b.horizon() {
        return Err(MfgError::HorizonExceeded {
            requested: k,
            available: a.horizon().min(b.horizon()),
        });
    }
    let (Some(da), Some(db)) = (a.drift(), b.drift()) else {
        return Err(crate::error::invalid("entropy needs weights with stored drift fields"));
    };
    let n = a.len();
    let d = da.len() / (a.horizon() * n).max(1);
    let mut energy = vec![0.0; n];
    for step in 0..k {
        let off = step * n * d;
        for (i, e) in energy.iter_mut().enumerate() {
            let s: f64 = (0..d)
                .map(|j| {
                    let diff = da[off + i * d + j] - db[off + i * d + j];
                    diff * diff
                })
                .sum();
            *e += 0.5 * s * dt;
        }
    }
    let w = a.weights_at(k);
    let la = a.log_weights_at(k);
    let lb = b.log_weights_at(k);
    let log_ratio: Vec<f64> = la.iter().zip(lb).map(|(x, y)| x - y).collect();
    let diff: Vec<f64> = log_ratio.iter().zip(&energy).map(|(l, e)| l - e).collect();
    let (g, g_se) = weighted_mean_se(&w, &energy);
    let (dr, d_se) = weighted_mean_se(&w, &log_ratio);
    let (_, diff_se) = weighted_mean_se(&w, &diff);
    Ok(EntropyEstimate {
        girsanov: g,
        direct: dr,
        girsanov_se: g_se,
        direct_se: d_se,
        difference_se: diff_se,
    })
}

/// Total variation between the path laws on `F_{t_k}`: `½ Σ |p_i − q_i|`
/// with self-normalised masses.
pub fn tv_paths(a: &MeasureWeights, b: &MeasureWeights, k: usize) -> f64 {
    let p = a.masses_at(k);
    let q = b.masses_at(k);
    0.5 * p.iter().zip(&q).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Binned total variation with `bins` equal-mass bins of the pooled sample
/// (first coordinate). Atoms with equal values always share a bin.
pub fn tv_binned(a: &MarginalLaw<'_>, b: &MarginalLaw<'_>, bins: usize) -> f64 {
    let bins = bins.max(1);
    let d = a.dim();
    if a.shares_atoms(b) {
        let pa = a.masses();
        let pb = b.masses();
        let x = a.atoms();
        let owned;
        let order: &[u32] = match a.order().or(b.order()) {
            Some(o) => o,
            None => {
                let mut idx: Vec<u32> = (0..a.len() as u32).collect();
                idx.sort_by(|&i, &j| x[i as usize * d].total_cmp(&x[j as usize * d]));
                owned = idx;
                &owned
            }
        };
        return binned_walk(
            order.iter().map(|&i| {
                let i = i as usize;
                (x[i * d], pa[i], pb[i])
            }),
            bins,
        );
    }
    let mut items: Vec<(f64, f64, f64)> = Vec::with_capacity(a.len() + b.len());
    items.extend((0..a.len()).map(|i| (a.atom(i)[0], a.masses()[i], 0.0)));
    items.extend((0..b.len()).map(|i| (b.atom(i)[0], 0.0, b.masses()[i])));
    items.sort_by(|u, v| u.0.total_cmp(&v.0));
    binned_walk(items.into_iter(), bins)
}

fn binned_walk(items: impl Iterator<Item = (f64, f64, f64)>, bins: usize) -> f64 {
    let mut tv = 0.0;
    let mut cum = 0.0;
    let mut next_cut = 1.0 / bins as f64;
    let mut cut_index = 1;
    let (mut ba, mut bb) = (0.0f64, 0.0f64);
    let mut last = f64::NAN;
    for (x, pa, pb) in items {
        if x != last && cum >= next_cut - 1e-15 {
            tv += (ba - bb).abs();
            ba = 0.0;
            bb = 0.0;
            while cum >= next_cut - 1e-15 && cut_index < bins {
                cut_index += 1;
                next_cut = cut_index as f64 / bins as f64;
            }
        }
        ba += pa;
        bb += pb;
        cum += 0.5 * (pa + pb);
        last = x;
    }
    tv += (ba - bb).abs();
    (0.5 * tv).min(1.0)
}

/// Exact total variation of two laws on shared atoms.
pub fn tv_atoms(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// `sqrt(H/2)`; negative inputs (estimation noise) are clamped to zero.
pub fn pinsker(h: f64) -> f64 {
    if h < 0.0 {
        log::warn!("negative entropy estimate {h} clamped to 0");
        return 0.0;
    }
    (0.5 * h).sqrt()
}

/// Wasserstein-1 distance between two laws on the action grid.
pub fn w1_actions(q: &ActionLaw, r: &ActionLaw) -> f64 {
    assert_eq!(q.len(), r.len(), "action laws on different grids");
    if q.dim() == 1 {
        let atoms: Vec<f64> = (0..q.len()).map(|i| q.atom(i)[0]).collect();
        return w1_line(&atoms, q.masses(), &atoms, r.masses());
    }
    let pts: Vec<&[f64]> = (0..q.len()).map(|i| q.atom(i)).collect();
    w1_transport(&pts, q.masses(), &pts, r.masses())
}

/// Exact W1 on the line: `∫ |F_A − F_B| dx`.
pub fn w1_line(xa: &[f64], ma: &[f64], xb: &[f64], mb: &[f64]) -> f64 {
    let sa: f64 = ma.iter().sum();
    let sb: f64 = mb.iter().sum();
    let mut items: Vec<(f64, f64)> = Vec::with_capacity(xa.len() + xb.len());
    items.extend(xa.iter().zip(ma).map(|(x, m)| (*x, m / sa)));
    items.extend(xb.iter().zip(mb).map(|(x, m)| (*x, -m / sb)));
    items.sort_by(|u, v| u.0.total_cmp(&v.0));
    let mut w = 0.0;
    let mut cdf = 0.0;
    for pair in items.windows(2) {
        cdf += pair[0].1;
        w += cdf.abs() * (pair[1].0 - pair[0].0);
    }
    w
}

/// Exact W1 between discrete laws in `R^d` (Euclidean ground cost) by
/// successive shortest paths on the transport network.
pub fn w1_transport(xa: &[&[f64]], ma: &[f64], xb: &[&[f64]], mb: &[f64]) -> f64 {
    let sa: f64 = ma.iter().sum();
    let sb: f64 = mb.iter().sum();
    let supply: Vec<f64> = ma.iter().map(|m| m / sa).collect();
    let demand: Vec<f64> = mb.iter().map(|m| m / sb).collect();
    let (na, nb) = (xa.len(), xb.len());
    let cost = |i: usize, j: usize| -> f64 {
        xa[i].iter().zip(xb[j]).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
    };
    // node layout: source, A nodes, B nodes, sink
    let src = 0;
    let sink = na + nb + 1;
    let nodes = na + nb + 2;
    struct Edge {
        to: usize,
        cap: f64,
        cost: f64,
    }
    let mut edges: Vec<Edge> = Vec::new();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nodes];
    let add = |edges: &mut Vec<Edge>, adj: &mut Vec<Vec<usize>>, u: usize, v: usize, cap: f64, c: f64| {
        adj[u].push(edges.len());
        edges.push(Edge { to: v, cap, cost: c });
        adj[v].push(edges.len());
        edges.push(Edge { to: u, cap: 0.0, cost: -c });
    };
    for (i, &s) in supply.iter().enumerate() {
        add(&mut edges, &mut adj, src, 1 + i, s, 0.0);
    }
    for (j, &t) in demand.iter().enumerate() {
        add(&mut edges, &mut adj, 1 + na + j, sink, t, 0.0);
    }
    for i in 0..na {
        for j in 0..nb {
            add(&mut edges, &mut adj, 1 + i, 1 + na + j, f64::INFINITY, cost(i, j));
        }
    }
    const EPS: f64 = 1e-15;
    let mut remaining: f64 = 1.0;
    let mut total = 0.0;
    for _ in 0..(4 * (na + nb) * (na + nb) + 16) {
        if remaining <= 1e-13 {
            break;
        }
        // Bellman-Ford on the residual graph
        let mut dist = vec![f64::INFINITY; nodes];
        let mut prev: Vec<Option<usize>> = vec![None; nodes];
        dist[src] = 0.0;
        for _ in 0..nodes {
            let mut changed = false;
            for u in 0..nodes {
                if !dist[u].is_finite() {
                    continue;
                }
                for &e in &adj[u] {
                    let ed = &edges[e];
                    if ed.cap > EPS && dist[u] + ed.cost < dist[ed.to] - 1e-15 {
                        dist[ed.to] = dist[u] + ed.cost;
                        prev[ed.to] = Some(e);
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        if !dist[sink].is_finite() {
            break;
        }
        let mut push: f64 = remaining;
        let mut v = sink;
        while let Some(e) = prev[v] {
            push = push.min(edges[e].cap);
            v = edges[e ^ 1].to;
        }
        let mut v = sink;
        while let Some(e) = prev[v] {
            edges[e].cap -= push;
            edges[e ^ 1].cap += push;
            v = edges[e ^ 1].to;
        }
        total += push * dist[sink];
        remaining -= push;
    }
    total
}
