//! Reference solutions that share no code with the solvers.
//!
//! [`DiscreteOracle`] solves tiny games on the binomial tree by brute force:
//! every feedback policy (one action per tree node) is evaluated exactly
//! over all `2^K` scenarios, best responses are found by scanning every
//! policy, and equilibria by scanning every policy-induced flow.
//! [`stationary_density_quadrature`] integrates the classical 1-D
//! stationary density `p ∝ σ⁻² exp(∫ 2b/σ²)`.

use std::io::Write;

use crate::error::{invalid, MfgError, Result};
use crate::game::{GameSpec, InitialLaw};
use crate::law::{ActionLaw, MarginalLaw, PathView};

/// Upper bound on `policies × scenarios` for one best-response scan.
pub const ENUMERATION_BUDGET: usize = 1_000_000;

/// Node `n` at step `k + 1` has children `2n` (up move `+√Δt`) and `2n + 1`.
/// Path `i` of a `K`-step tree visits node `i >> (K - k)` at step `k`.
#[derive(Clone, Debug)]
pub struct DiscreteOracle<'a> {
    spec: &'a GameSpec,
    steps: usize,
    dt: f64,
    step_weight: f64,
    rho: f64,
    /// `prefixes[k][node]` holds `X_0..X_k`.
    prefixes: Vec<Vec<Vec<f64>>>,
    policies: usize,
}

/// An exogenous mean field flow on the tree.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeFlow {
    /// `node_probs[k]` has `2^k` entries, `k = 0..=K`.
    pub node_probs: Vec<Vec<f64>>,
    /// Action-law masses on the grid, `k = 0..K`.
    pub action_masses: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct BestResponse {
    /// `policy[k][node]` is a grid index.
    pub policy: Vec<Vec<usize>>,
    pub value: f64,
    /// Reward-to-go of the policy at every node, `k = 0..=K`.
    pub node_values: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct DiscreteEquilibrium {
    pub steps: usize,
    pub dt: f64,
    pub step_weight: f64,
    pub policy: Vec<Vec<usize>>,
    pub states: Vec<Vec<f64>>,
    pub flow: TreeFlow,
    pub node_values: Vec<Vec<f64>>,
    pub value: f64,
    /// Number of policies that are best responses to their own flow.
    pub equilibria: usize,
    pub policies_scanned: usize,
}

struct Tables {
    /// `reward[k][node * A + a]`.
    reward: Vec<Vec<f64>>,
    /// Probability of the up move.
    up: Vec<Vec<f64>>,
}

impl<'a> DiscreteOracle<'a> {
    /// `step_weight` multiplies each running reward; the value of a policy
    /// is `Σ_k e^{-λ t_k} · step_weight · E[f_k]`.
    pub fn new(spec: &'a GameSpec, steps: usize, dt: f64, step_weight: f64) -> Result<Self> {
        if spec.dim() != 1 {
            return Err(invalid("the discrete oracle is one-dimensional"));
        }
        let x0 = match &spec.initial {
            InitialLaw::Dirac { point } => point[0],
            _ => return Err(invalid("the discrete oracle needs a Dirac initial law")),
        };
        if steps == 0 || steps > 6 || !(dt > 0.0) || !(step_weight > 0.0) {
            return Err(invalid("discrete oracle needs 1 <= K <= 6, dt > 0 and a positive step weight"));
        }
        let nodes = (1usize << steps) - 1;
        let a = spec.actions.len() as f64;
        let policies = a.powi(nodes as i32);
        let pairs = policies * (1u64 << steps) as f64;
        if pairs > ENUMERATION_BUDGET as f64 {
            return Err(MfgError::BudgetExceeded {
                needed: pairs as u64,
                budget: ENUMERATION_BUDGET as u64,
            });
        }
        let sq = dt.sqrt();
        let mut sigma = [0.0];
        let mut prefixes = vec![vec![vec![x0]]];
        for k in 0..steps {
            let mut next = Vec::with_capacity(1 << (k + 1));
            for prefix in &prefixes[k] {
                let view = PathView::from_prefix(prefix, 1);
                spec.coefficients.volatility(k as f64 * dt, &view, &mut sigma);
                let x = prefix[k];
                for dw in [sq, -sq] {
                    let mut p = prefix.clone();
                    p.push(x + sigma[0] * dw);
                    next.push(p);
                }
            }
            prefixes.push(next);
        }
        Ok(Self {
            spec,
            steps,
            dt,
            step_weight,
            rho: (-spec.discount * dt).exp(),
            prefixes,
            policies: policies as usize,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn policy_count(&self) -> usize {
        self.policies
    }

    pub fn state(&self, k: usize, node: usize) -> f64 {
        self.prefixes[k][node][k]
    }

    /// Decodes policy `p`: slots are nodes in order `(0,0), (1,0), (1,1), …`,
    /// the first slot being the most significant digit.
    pub fn decode(&self, mut p: usize) -> Vec<Vec<usize>> {
        let a = self.spec.actions.len();
        let mut policy: Vec<Vec<usize>> = (0..self.steps).map(|k| vec![0; 1 << k]).collect();
        for k in (0..self.steps).rev() {
            for node in (0..1usize << k).rev() {
                policy[k][node] = p % a;
                p /= a;
            }
        }
        policy
    }

    fn law(&self, flow: &TreeFlow, k: usize) -> Result<MarginalLaw<'static>> {
        let atoms: Vec<f64> = (0..1usize << k).map(|n| self.state(k, n)).collect();
        Ok(MarginalLaw::new(1, atoms, flow.node_probs[k].clone())?.into_owned())
    }

    fn tables(&self, flow: &TreeFlow) -> Result<Tables> {
        let spec = self.spec;
        let c = &spec.coefficients;
        let na = spec.actions.len();
        let sq = self.dt.sqrt();
        let mut reward = Vec::with_capacity(self.steps);
        let mut up = Vec::with_capacity(self.steps);
        let mut sigma = [0.0];
        let mut b = [0.0];
        for k in 0..self.steps {
            let t = k as f64 * self.dt;
            let law = self.law(flow, k)?;
            let q = ActionLaw::from_masses(&spec.actions, flow.action_masses[k].clone())?;
            let f2 = c.reward_interaction(t, &law, &q);
            let mut rk = vec![0.0; (1 << k) * na];
            let mut uk = vec![0.0; (1 << k) * na];
            for node in 0..1usize << k {
                let view = PathView::from_prefix(&self.prefixes[k][node], 1);
                let f1 = c.reward_state(t, &view, &law);
                c.volatility(t, &view, &mut sigma);
                for j in 0..na {
                    let a = spec.actions.point(j);
                    c.drift(t, &view, &law, a, &mut b);
                    let beta = b[0] / sigma[0];
                    let p = 0.5 * (1.0 + beta * sq);
                    if !(p > 0.0 && p < 1.0) {
                        return Err(invalid(format!(
                            "tree transition probability {p} outside (0, 1) at step {k}"
                        )));
                    }
                    rk[node * na + j] = f1 + f2 + c.reward_action(t, &view, a);
                    uk[node * na + j] = p;
                }
            }
            reward.push(rk);
            up.push(uk);
        }
        Ok(Tables { reward, up })
    }

    /// Value of `policy` against a fixed flow, by forward propagation of
    /// node probabilities.
    fn evaluate(&self, tables: &Tables, policy: &[Vec<usize>]) -> f64 {
        let na = self.spec.actions.len();
        let mut probs = vec![1.0];
        let mut value = 0.0;
        let mut disc = self.step_weight;
        for (k, row) in policy.iter().enumerate().take(self.steps) {
            let mut next = vec![0.0; probs.len() * 2];
            let mut acc = 0.0;
            for (node, &p) in probs.iter().enumerate() {
                let j = row[node];
                acc += p * tables.reward[k][node * na + j];
                let u = tables.up[k][node * na + j];
                next[2 * node] = p * u;
                next[2 * node + 1] = p * (1.0 - u);
            }
            value += disc * acc;
            disc *= self.rho;
            probs = next;
        }
        value
    }

    fn node_values(&self, tables: &Tables, policy: &[Vec<usize>]) -> Vec<Vec<f64>> {
        let na = self.spec.actions.len();
        let mut values: Vec<Vec<f64>> = (0..=self.steps).map(|k| vec![0.0; 1 << k]).collect();
        for k in (0..self.steps).rev() {
            for node in 0..1usize << k {
                let j = policy[k][node];
                let u = tables.up[k][node * na + j];
                let cont = u * values[k + 1][2 * node] + (1.0 - u) * values[k + 1][2 * node + 1];
                values[k][node] = self.step_weight * tables.reward[k][node * na + j] + self.rho * cont;
            }
        }
        values
    }

    /// The flow `(μ, q)` generated by playing `policy` against itself.
    pub fn induced_flow(&self, policy: &[Vec<usize>]) -> Result<TreeFlow> {
        let spec = self.spec;
        let na = spec.actions.len();
        let sq = self.dt.sqrt();
        let mut node_probs = vec![vec![1.0]];
        let mut action_masses = Vec::with_capacity(self.steps);
        let mut sigma = [0.0];
        let mut b = [0.0];
        for k in 0..self.steps {
            let t = k as f64 * self.dt;
            let probs = node_probs[k].clone();
            let atoms: Vec<f64> = (0..1usize << k).map(|n| self.state(k, n)).collect();
            let law = MarginalLaw::new(1, atoms, probs.clone())?;
            let mut masses = vec![0.0; na];
            let mut next = vec![0.0; probs.len() * 2];
            for (node, &p) in probs.iter().enumerate() {
                let j = policy[k][node];
                masses[j] += p;
                let view = PathView::from_prefix(&self.prefixes[k][node], 1);
                c_drift(spec, t, &view, &law, j, &mut sigma, &mut b);
                let u = 0.5 * (1.0 + b[0] / sigma[0] * sq);
                if !(u > 0.0 && u < 1.0) {
                    return Err(invalid(format!("tree transition probability {u} outside (0, 1)")));
                }
                next[2 * node] = p * u;
                next[2 * node + 1] = p * (1.0 - u);
            }
            action_masses.push(masses);
            node_probs.push(next);
        }
        Ok(TreeFlow {
            node_probs,
            action_masses,
        })
    }

    /// Exhaustive best response; ties go to the first policy in decode order.
    pub fn best_response(&self, flow: &TreeFlow) -> Result<BestResponse> {
        let tables = self.tables(flow)?;
        let mut best = (0usize, f64::NEG_INFINITY);
        for p in 0..self.policies {
            let v = self.evaluate(&tables, &self.decode(p));
            if v > best.1 {
                best = (p, v);
            }
        }
        let policy = self.decode(best.0);
        let node_values = self.node_values(&tables, &policy);
        Ok(BestResponse {
            policy,
            value: best.1,
            node_values,
        })
    }

    /// Scans every policy for the equilibrium property and returns the first
    /// equilibrium in decode order.
    pub fn enumerate(&self) -> Result<DiscreteEquilibrium> {
        let mut found: Option<(usize, TreeFlow, BestResponse)> = None;
        let mut count = 0;
        for p in 0..self.policies {
            let policy = self.decode(p);
            let flow = self.induced_flow(&policy)?;
            let tables = self.tables(&flow)?;
            let own = self.evaluate(&tables, &policy);
            let mut best = f64::NEG_INFINITY;
            for r in 0..self.policies {
                best = best.max(self.evaluate(&tables, &self.decode(r)));
            }
            if own >= best - 1e-12 * (1.0 + best.abs()) {
                count += 1;
                if found.is_none() {
                    let node_values = self.node_values(&tables, &policy);
                    found = Some((
                        p,
                        flow,
                        BestResponse {
                            policy,
                            value: own,
                            node_values,
                        },
                    ));
                }
            }
        }
        let (_, flow, br) = found.ok_or_else(|| invalid("no pure equilibrium on the tree"))?;
        let states = (0..=self.steps)
            .map(|k| (0..1usize << k).map(|n| self.state(k, n)).collect())
            .collect();
        Ok(DiscreteEquilibrium {
            steps: self.steps,
            dt: self.dt,
            step_weight: self.step_weight,
            policy: br.policy,
            states,
            flow,
            node_values: br.node_values,
            value: br.value,
            equilibria: count,
            policies_scanned: self.policies,
        })
    }
}

fn c_drift(
    spec: &GameSpec,
    t: f64,
    view: &PathView<'_>,
    law: &MarginalLaw<'_>,
    j: usize,
    sigma: &mut [f64],
    b: &mut [f64],
) {
    spec.coefficients.volatility(t, view, sigma);
    spec.coefficients.drift(t, view, law, spec.actions.point(j), b);
}

impl DiscreteEquilibrium {
    /// Mass of path `i` restricted to `F_{t_k}`, spread evenly over the
    /// `2^{K-k}` paths sharing its prefix.
    pub fn path_masses(&self, k: usize) -> Vec<f64> {
        let n = 1usize << self.steps;
        let share = (1usize << (self.steps - k)) as f64;
        (0..n)
            .map(|i| self.flow.node_probs[k][i >> (self.steps - k)] / share)
            .collect()
    }

    /// Action of path `i` at step `k`.
    pub fn path_action(&self, k: usize, i: usize) -> usize {
        self.policy[k][i >> (self.steps - k)]
    }

    /// Columns: `step, node, state, probability, action_index, value`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "step,node,state,probability,action_index,value")?;
        for k in 0..=self.steps {
            for node in 0..1usize << k {
                let action = if k < self.steps {
                    self.policy[k][node].to_string()
                } else {
                    String::new()
                };
                writeln!(
                    out,
                    "{k},{node},{:.17e},{:.17e},{action},{:.17e}",
                    self.states[k][node], self.flow.node_probs[k][node], self.node_values[k][node]
                )?;
            }
        }
        Ok(())
    }
}

/// Stationary density of `dX = b dt + σ dW` on a uniform grid.
#[derive(Clone, Debug)]
pub struct StationaryDensity {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub step: f64,
}

/// Integrates `p(x) ∝ σ(x)⁻² exp(∫_lo^x 2b/σ²)` over `[lo, hi]` with `cells`
/// Simpson panels. Fails with [`MfgError::NonIntegrable`] unless the density
/// decays at both ends below `1e-12` of its peak.
pub fn stationary_density_quadrature(
    drift: impl Fn(f64) -> f64,
    sigma: impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    cells: usize,
) -> Result<StationaryDensity> {
    if !(hi > lo) || cells < 4 {
        return Err(invalid("quadrature needs lo < hi and at least 4 cells"));
    }
    let cells = cells + cells % 2;
    let h = (hi - lo) / cells as f64;
    let g = |x: f64| {
        let s = sigma(x);
        2.0 * drift(x) / (s * s)
    };
    let grid: Vec<f64> = (0..=cells).map(|j| lo + j as f64 * h).collect();
    let mut potential = vec![0.0; cells + 1];
    for j in 0..cells {
        let (a, b) = (grid[j], grid[j + 1]);
        potential[j + 1] = potential[j] + h / 6.0 * (g(a) + 4.0 * g(0.5 * (a + b)) + g(b));
    }
    let mut log_p: Vec<f64> = grid
        .iter()
        .zip(&potential)
        .map(|(&x, &u)| u - 2.0 * sigma(x).abs().ln())
        .collect();
    if log_p.iter().any(|v| !v.is_finite()) {
        return Err(MfgError::NonFinite("stationary potential"));
    }
    let top = log_p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    log_p.iter_mut().for_each(|v| *v -= top);
    let cutoff = (1e-12f64).ln();
    if log_p[0] > cutoff || log_p[cells] > cutoff {
        return Err(MfgError::NonIntegrable(format!(
            "density at the domain ends is {:.3e} and {:.3e} of its peak",
            log_p[0].exp(),
            log_p[cells].exp()
        )));
    }
    let mut density: Vec<f64> = log_p.iter().map(|v| v.exp()).collect();
    let z = simpson(&density, h);
    density.iter_mut().for_each(|p| *p /= z);
    Ok(StationaryDensity {
        grid,
        density,
        step: h,
    })
}

fn simpson(values: &[f64], h: f64) -> f64 {
    let n = values.len() - 1;
    let mut s = values[0] + values[n];
    for (j, v) in values.iter().enumerate().take(n).skip(1) {
        s += if j % 2 == 1 { 4.0 * v } else { 2.0 * v };
    }
    s * h / 3.0
}

impl StationaryDensity {
    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        let v: Vec<f64> = self.grid.iter().zip(&self.density).map(|(&x, &p)| f(x) * p).collect();
        simpson(&v, self.step)
    }

    pub fn mean(&self) -> f64 {
        self.expect(|x| x)
    }

    pub fn second_moment(&self) -> f64 {
        self.expect(|x| x * x)
    }

    /// Cumulative distribution at `x` by trapezoid integration of the
    /// piecewise-linear density.
    pub fn cdf(&self, x: f64) -> f64 {
        let lo = self.grid[0];
        if x <= lo {
            return 0.0;
        }
        let mut acc = 0.0;
        for j in 0..self.grid.len() - 1 {
            let (a, b) = (self.grid[j], self.grid[j + 1]);
            let (pa, pb) = (self.density[j], self.density[j + 1]);
            if x >= b {
                acc += 0.5 * (pa + pb) * (b - a);
            } else {
                let s = x - a;
                let px = pa + (pb - pa) * s / (b - a);
                acc += 0.5 * (pa + px) * s;
                return acc;
            }
        }
        acc
    }

    /// Masses of the cells `[edges[j], edges[j+1])`, with the outer tails
    /// added to the first and last cells.
    pub fn bin_masses(&self, edges: &[f64]) -> Vec<f64> {
        let cdf: Vec<f64> = edges.iter().map(|&e| self.cdf(e)).collect();
        let total = self.cdf(f64::INFINITY);
        let m = edges.len() - 1;
        let mut out: Vec<f64> = (0..m).map(|j| cdf[j + 1] - cdf[j]).collect();
        out[0] += cdf[0];
        out[m - 1] += total - cdf[m];
        let s: f64 = out.iter().sum();
        out.iter_mut().for_each(|v| *v /= s);
        out
    }

    /// Columns: `x, density`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "x,density")?;
        for (x, p) in self.grid.iter().zip(&self.density) {
            writeln!(out, "{x:.17e},{p:.17e}")?;
        }
        Ok(())
    }
}
