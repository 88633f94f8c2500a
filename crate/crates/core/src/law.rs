//! Weighted empirical laws on the state space and on the action set, plus
//! the non-anticipative path view handed to coefficient functions.

use std::borrow::Cow;
use std::sync::{Arc, OnceLock};

use crate::error::{invalid, MfgError, Result};
use crate::game::ActionSet;

/// Read-only view of one path restricted to the steps `0..=k`.
///
/// States of step `j` live at `data[j * stride + offset..][..dim]`. Any
/// access beyond step `k` panics, so coefficient functions are
/// non-anticipative by construction.
#[derive(Clone, Copy, Debug)]
pub struct PathView<'a> {
    data: &'a [f64],
    stride: usize,
    offset: usize,
    dim: usize,
    k: usize,
}

impl<'a> PathView<'a> {
    pub fn new(data: &'a [f64], stride: usize, offset: usize, dim: usize, k: usize) -> Self {
        debug_assert!(k * stride + offset + dim <= data.len());
        Self {
            data,
            stride,
            offset,
            dim,
            k,
        }
    }

    /// View of a contiguous prefix `x_0, …, x_k` stored back to back.
    pub fn from_prefix(prefix: &'a [f64], dim: usize) -> Self {
        assert!(dim > 0 && !prefix.is_empty() && prefix.len().is_multiple_of(dim));
        Self::new(prefix, dim, 0, dim, prefix.len() / dim - 1)
    }

    pub fn step(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn current(&self) -> &'a [f64] {
        self.at(self.k)
    }

    pub fn at(&self, j: usize) -> &'a [f64] {
        assert!(j <= self.k, "path access at step {j} beyond current step {}", self.k);
        let start = j * self.stride + self.offset;
        &self.data[start..start + self.dim]
    }
}

/// Path-level information attached to a marginal built from an ensemble:
/// atom `i` of the marginal is the endpoint of path `i` at step `k`.
#[derive(Clone, Copy, Debug)]
pub struct PathHistory<'a> {
    pub data: &'a [f64],
    pub stride: usize,
    pub k: usize,
}

#[derive(Clone, Debug)]
struct KernelGrid {
    bandwidth: f64,
    lo: f64,
    step: f64,
    values: Vec<f64>,
}

/// Atom counts up to which kernel sums are evaluated directly.
const DIRECT_KERNEL_LIMIT: usize = 256;

/// A probability measure on `R^d` given by weighted atoms.
#[derive(Clone, Debug)]
pub struct MarginalLaw<'a> {
    dim: usize,
    atoms: Cow<'a, [f64]>,
    masses: Vec<f64>,
    order: Option<&'a [u32]>,
    history: Option<PathHistory<'a>>,
    kernel: OnceLock<KernelGrid>,
    mean: OnceLock<Vec<f64>>,
}

impl<'a> MarginalLaw<'a> {
    /// Builds a law from atoms and nonnegative masses; masses are normalised.
    pub fn new(dim: usize, atoms: impl Into<Cow<'a, [f64]>>, masses: Vec<f64>) -> Result<Self> {
        let atoms = atoms.into();
        if dim == 0 || atoms.len() % dim != 0 || atoms.len() / dim != masses.len() {
            return Err(MfgError::Shape(format!(
                "{} atom values, dim {dim}, {} masses",
                atoms.len(),
                masses.len()
            )));
        }
        if masses.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(invalid("masses must be finite and nonnegative"));
        }
        let total: f64 = masses.iter().sum();
        if !(total > 0.0) {
            return Err(invalid("total mass must be positive"));
        }
        let masses = masses.into_iter().map(|m| m / total).collect();
        Ok(Self {
            dim,
            atoms,
            masses,
            order: None,
            history: None,
            kernel: OnceLock::new(),
            mean: OnceLock::new(),
        })
    }

    pub fn uniform(dim: usize, atoms: impl Into<Cow<'a, [f64]>>) -> Result<Self> {
        let atoms = atoms.into();
        let n = atoms.len().checked_div(dim).unwrap_or(0);
        Self::new(dim, atoms, vec![1.0; n])
    }

    pub fn dirac(x: &[f64]) -> MarginalLaw<'static> {
        MarginalLaw::new(x.len(), x.to_vec(), vec![1.0]).expect("dirac law")
    }

    /// Attaches an ascending sort order of the (1-D) atoms.
    pub fn with_order(mut self, order: &'a [u32]) -> Self {
        debug_assert_eq!(order.len(), self.len());
        self.order = Some(order);
        self
    }

    pub fn with_history(mut self, history: PathHistory<'a>) -> Self {
        self.history = Some(history);
        self
    }

    pub fn into_owned(self) -> MarginalLaw<'static> {
        MarginalLaw {
            dim: self.dim,
            atoms: Cow::Owned(self.atoms.into_owned()),
            masses: self.masses,
            order: None,
            history: None,
            kernel: self.kernel,
            mean: self.mean,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i * self.dim..(i + 1) * self.dim]
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn order(&self) -> Option<&'a [u32]> {
        self.order
    }

    /// Prefix of the path behind atom `i`, when the law came from an ensemble.
    pub fn path_prefix(&self, i: usize) -> Option<PathView<'a>> {
        self.history
            .map(|h| PathView::new(h.data, h.stride, i * self.dim, self.dim, h.k))
    }

    /// True when both laws are supported on the very same atom buffer.
    pub fn shares_atoms(&self, other: &MarginalLaw<'_>) -> bool {
        self.dim == other.dim
            && self.atoms.len() == other.atoms.len()
            && std::ptr::eq(self.atoms.as_ptr(), other.atoms.as_ptr())
    }

    pub fn expect(&self, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        self.masses
            .iter()
            .enumerate()
            .map(|(i, m)| m * f(self.atom(i)))
            .sum()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.get_or_init(|| {
            let mut out = vec![0.0; self.dim];
            for (i, m) in self.masses.iter().enumerate() {
                for (o, x) in out.iter_mut().zip(self.atom(i)) {
                    *o += m * x;
                }
            }
            out
        })
    }

    /// Trace of the covariance.
    pub fn variance(&self) -> f64 {
        let mean = self.mean().to_vec();
        self.expect(|x| x.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum())
    }

    /// `Σ_j m_j exp(-|x - y_j|² / (2h²))`, the convolution of the law with an
    /// unnormalised Gaussian kernel (peak value 1).
    pub fn kernel_sum(&self, bandwidth: f64, x: &[f64]) -> f64 {
        if self.dim != 1 || self.len() <= DIRECT_KERNEL_LIMIT {
            return self.kernel_sum_direct(bandwidth, x);
        }
        let grid = self.kernel.get_or_init(|| self.build_kernel_grid(bandwidth));
        if grid.bandwidth != bandwidth {
            return self.kernel_sum_direct(bandwidth, x);
        }
        let pos = (x[0] - grid.lo) / grid.step;
        if pos < 0.0 || pos >= (grid.values.len() - 1) as f64 {
            return 0.0;
        }
        let j = pos.floor() as usize;
        let frac = pos - j as f64;
        grid.values[j] * (1.0 - frac) + grid.values[j + 1] * frac
    }

    pub fn kernel_sum_direct(&self, bandwidth: f64, x: &[f64]) -> f64 {
        let scale = -0.5 / (bandwidth * bandwidth);
        self.expect(|y| {
            let d2: f64 = y.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            (scale * d2).exp()
        })
    }

    // Cloud-in-cell deposit on a uniform grid, discrete convolution with the
    // truncated kernel, linear interpolation on lookup.
    fn build_kernel_grid(&self, bandwidth: f64) -> KernelGrid {
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in self.atoms.iter() {
            min = min.min(v);
            max = max.max(v);
        }
        let reach = 6.0 * bandwidth;
        let lo = min - reach;
        let span = (max + reach) - lo;
        let cells = ((span / (0.1 * bandwidth)).ceil() as usize).clamp(64, 4096);
        let step = span / cells as f64;
        let mut deposit = vec![0.0; cells + 1];
        for (i, &m) in self.masses.iter().enumerate() {
            let pos = (self.atoms[i] - lo) / step;
            let j = (pos.floor() as usize).min(cells - 1);
            let frac = pos - j as f64;
            deposit[j] += m * (1.0 - frac);
            deposit[j + 1] += m * frac;
        }
        let width = (reach / step).ceil() as usize;
        let scale = -0.5 * step * step / (bandwidth * bandwidth);
        let kernel: Vec<f64> = (0..=width).map(|d| (scale * (d * d) as f64).exp()).collect();
        let mut values = vec![0.0; cells + 1];
        for (j, &dep) in deposit.iter().enumerate() {
            if dep == 0.0 {
                continue;
            }
            let from = j.saturating_sub(width);
            let to = (j + width).min(cells);
            for (l, v) in values.iter_mut().enumerate().take(to + 1).skip(from) {
                *v += dep * kernel[l.abs_diff(j)];
            }
        }
        KernelGrid {
            bandwidth,
            lo,
            step,
            values,
        }
    }
}

/// A probability measure on the action grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionLaw {
    dim: usize,
    atoms: Arc<[f64]>,
    masses: Vec<f64>,
}

impl ActionLaw {
    pub fn uniform(actions: &ActionSet) -> Self {
        let n = actions.len();
        Self {
            dim: actions.dim(),
            atoms: actions.grid().clone(),
            masses: vec![1.0 / n as f64; n],
        }
    }

    pub fn dirac(actions: &ActionSet, index: usize) -> Self {
        let mut masses = vec![0.0; actions.len()];
        masses[index] = 1.0;
        Self {
            dim: actions.dim(),
            atoms: actions.grid().clone(),
            masses,
        }
    }

    pub fn from_masses(actions: &ActionSet, masses: Vec<f64>) -> Result<Self> {
        if masses.len() != actions.len() {
            return Err(MfgError::Shape("action law length differs from grid".into()));
        }
        if masses.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(invalid("action masses must be finite and nonnegative"));
        }
        let total: f64 = masses.iter().sum();
        if !(total > 0.0) {
            return Err(invalid("action law has no mass"));
        }
        Ok(Self {
            dim: actions.dim(),
            atoms: actions.grid().clone(),
            masses: masses.into_iter().map(|m| m / total).collect(),
        })
    }

    /// Law of the grid indices `indices[i]` under path masses `weights[i]`.
    pub fn from_indices(actions: &ActionSet, indices: &[u32], weights: &[f64]) -> Result<Self> {
        let mut masses = vec![0.0; actions.len()];
        for (&j, &w) in indices.iter().zip(weights) {
            masses[j as usize] += w;
        }
        Self::from_masses(actions, masses)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i * self.dim..(i + 1) * self.dim]
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (i, m) in self.masses.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.atom(i)) {
                *o += m * a;
            }
        }
        out
    }

    /// Trace of the covariance.
    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.masses
            .iter()
            .enumerate()
            .map(|(i, m)| {
                m * self
                    .atom(i)
                    .iter()
                    .zip(&mean)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum()
    }

    /// `(1 - theta) * self + theta * other`.
    pub fn mix(&self, other: &ActionLaw, theta: f64) -> ActionLaw {
        assert_eq!(self.masses.len(), other.masses.len());
        ActionLaw {
            dim: self.dim,
            atoms: self.atoms.clone(),
            masses: self
                .masses
                .iter()
                .zip(&other.masses)
                .map(|(a, b)| (1.0 - theta) * a + theta * b)
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::ActionKind;

    #[test]
    fn masses_are_normalised() {
        let law = MarginalLaw::new(1, vec![0.0, 1.0], vec![3.0, 1.0]).unwrap();
        assert_eq!(law.masses(), &[0.75, 0.25]);
        assert_eq!(law.mean(), &[0.25]);
    }

    #[test]
    fn rejects_bad_masses() {
        assert!(MarginalLaw::new(1, vec![0.0], vec![-1.0]).is_err());
        assert!(MarginalLaw::new(1, vec![0.0], vec![0.0]).is_err());
        assert!(MarginalLaw::new(2, vec![0.0, 1.0, 2.0], vec![1.0]).is_err());
    }

    #[test]
    fn gridded_kernel_sum_tracks_direct_sum() {
        let atoms: Vec<f64> = (0..2000).map(|i| ((i as f64) * 0.7919).sin() * 3.0).collect();
        let masses: Vec<f64> = (0..2000).map(|i| 1.0 + (i % 7) as f64).collect();
        let law = MarginalLaw::new(1, atoms, masses).unwrap();
        for x in [-3.5, -1.0, 0.0, 0.3, 2.9, 8.0] {
            let fast = law.kernel_sum(0.5, &[x]);
            let slow = law.kernel_sum_direct(0.5, &[x]);
            assert!((fast - slow).abs() < 2e-3, "x={x}: {fast} vs {slow}");
        }
    }

    #[test]
    #[should_panic]
    fn path_view_blocks_future_access() {
        let data = [0.0, 1.0, 2.0, 3.0];
        let view = PathView::new(&data, 1, 0, 1, 1);
        let _ = view.at(2);
    }

    #[test]
    fn action_law_from_indices() {
        let set = ActionSet::new(ActionKind::atoms_1d(&[-1.0, 0.0, 1.0])).unwrap();
        let q = ActionLaw::from_indices(&set, &[0, 2, 2, 2], &[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(q.masses(), &[0.25, 0.0, 0.75]);
        assert!((q.mean()[0] - 0.5).abs() < 1e-15);
        assert!((q.variance() - 0.75).abs() < 1e-15);
    }
}
