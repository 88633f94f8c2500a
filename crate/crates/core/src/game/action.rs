use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{MfgError, Result};

/// Description of a compact action set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ActionKind {
    /// Product of closed intervals `[low[j], high[j]]`, discretised with
    /// `resolution` points per coordinate.
    Box {
        low: Vec<f64>,
        high: Vec<f64>,
        #[serde(default = "default_resolution")]
        resolution: usize,
    },
    /// Explicit finite list of actions.
    Atoms { atoms: Vec<Vec<f64>> },
}

fn default_resolution() -> usize {
    41
}

impl ActionKind {
    pub fn interval(low: f64, high: f64, resolution: usize) -> Self {
        ActionKind::Box {
            low: vec![low],
            high: vec![high],
            resolution,
        }
    }

    pub fn atoms_1d(values: &[f64]) -> Self {
        ActionKind::Atoms {
            atoms: values.iter().map(|&v| vec![v]).collect(),
        }
    }
}

/// A compact action set together with its materialised search grid.
///
/// Grid points are stored row-major (`len() * dim()` values). For boxes the
/// first coordinate varies slowest, so "smallest grid index" is the
/// lexicographic order used for tie-breaking.
#[derive(Clone, Debug)]
pub struct ActionSet {
    kind: ActionKind,
    dim: usize,
    grid: Arc<[f64]>,
}

impl ActionSet {
    pub fn new(kind: ActionKind) -> Result<Self> {
        let (dim, grid) = match &kind {
            ActionKind::Box {
                low,
                high,
                resolution,
            } => {
                if low.len() != high.len() || low.is_empty() {
                    return Err(MfgError::Shape(
                        "action box bounds must be non-empty and of equal length".into(),
                    ));
                }
                if low.iter().zip(high).any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite()) {
                    return Err(MfgError::InvalidArgument(
                        "action box needs finite bounds with low <= high".into(),
                    ));
                }
                if *resolution == 0 {
                    return Err(MfgError::EmptyActionGrid);
                }
                let dim = low.len();
                let axes: Vec<Vec<f64>> = low
                    .iter()
                    .zip(high)
                    .map(|(&l, &h)| linspace(l, h, *resolution))
                    .collect();
                let count = resolution.pow(dim as u32);
                let mut grid = Vec::with_capacity(count * dim);
                let mut idx = vec![0usize; dim];
                for _ in 0..count {
                    for (j, &i) in idx.iter().enumerate() {
                        grid.push(axes[j][i]);
                    }
                    // odometer, last coordinate fastest
                    for j in (0..dim).rev() {
                        idx[j] += 1;
                        if idx[j] < *resolution {
                            break;
                        }
                        idx[j] = 0;
                    }
                }
                (dim, grid)
            }
            ActionKind::Atoms { atoms } => {
                let Some(first) = atoms.first() else {
                    return Err(MfgError::EmptyActionGrid);
                };
                let dim = first.len();
                if dim == 0 || atoms.iter().any(|a| a.len() != dim) {
                    return Err(MfgError::Shape("action atoms must share a positive dimension".into()));
                }
                if atoms.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(MfgError::InvalidArgument("action atoms must be finite".into()));
                }
                (dim, atoms.iter().flatten().copied().collect())
            }
        };
        Ok(Self {
            kind,
            dim,
            grid: grid.into(),
        })
    }

    pub fn kind(&self) -> &ActionKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.grid.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn point(&self, index: usize) -> &[f64] {
        &self.grid[index * self.dim..(index + 1) * self.dim]
    }

    pub fn grid(&self) -> &Arc<[f64]> {
        &self.grid
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.grid.chunks_exact(self.dim)
    }

    /// Euclidean norm, the inner-product norm used on the action space.
    pub fn norm(a: &[f64]) -> f64 {
        a.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }

    /// Largest grid spacing of a box, or the smallest gap between distinct
    /// atoms for a finite set.
    pub fn spacing(&self) -> f64 {
        match &self.kind {
            ActionKind::Box {
                low,
                high,
                resolution,
            } => {
                if *resolution < 2 {
                    return 0.0;
                }
                low.iter()
                    .zip(high)
                    .map(|(l, h)| (h - l) / (*resolution as f64 - 1.0))
                    .fold(0.0, f64::max)
            }
            ActionKind::Atoms { .. } => {
                let mut best = f64::INFINITY;
                for i in 0..self.len() {
                    for j in i + 1..self.len() {
                        let d = Self::distance(self.point(i), self.point(j));
                        if d > 0.0 {
                            best = best.min(d);
                        }
                    }
                }
                if best.is_finite() {
                    best
                } else {
                    0.0
                }
            }
        }
    }

    /// Diameter of the grid in the action norm.
    pub fn diameter(&self) -> f64 {
        match &self.kind {
            ActionKind::Box { low, high, .. } => Self::distance(low, high),
            ActionKind::Atoms { .. } => {
                let mut d: f64 = 0.0;
                for i in 0..self.len() {
                    for j in i + 1..self.len() {
                        d = d.max(Self::distance(self.point(i), self.point(j)));
                    }
                }
                d
            }
        }
    }

    /// Largest action norm on the set (`C_A`).
    pub fn norm_bound(&self) -> f64 {
        self.points().map(Self::norm).fold(0.0, f64::max)
    }

    pub fn contains(&self, a: &[f64]) -> bool {
        if a.len() != self.dim {
            return false;
        }
        const TOL: f64 = 1e-12;
        match &self.kind {
            ActionKind::Box { low, high, .. } => a
                .iter()
                .zip(low.iter().zip(high))
                .all(|(v, (l, h))| *v >= l - TOL && *v <= h + TOL),
            ActionKind::Atoms { .. } => self
                .points()
                .any(|p| p.iter().zip(a).all(|(x, y)| (x - y).abs() <= TOL)),
        }
    }

    /// Index of the grid point nearest to `a` (smallest index on ties).
    pub fn nearest_index(&self, a: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, p) in self.points().enumerate() {
            let d = Self::distance(p, a);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    let step = (hi - lo) / (n as f64 - 1.0);
    (0..n)
        .map(|i| if i + 1 == n { hi } else { lo + step * i as f64 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_grid_covers_endpoints() {
        let a = ActionSet::new(ActionKind::interval(-1.0, 1.0, 41)).unwrap();
        assert_eq!(a.len(), 41);
        assert_eq!(a.point(0), &[-1.0]);
        assert_eq!(a.point(40), &[1.0]);
        assert!((a.spacing() - 0.05).abs() < 1e-15);
        assert!((a.point(26)[0] - 0.3).abs() < 1e-12);
        assert_eq!(a.norm_bound(), 1.0);
    }

    #[test]
    fn box_grid_is_lexicographic() {
        let a = ActionSet::new(ActionKind::Box {
            low: vec![0.0, 0.0],
            high: vec![1.0, 1.0],
            resolution: 2,
        })
        .unwrap();
        let pts: Vec<Vec<f64>> = a.points().map(|p| p.to_vec()).collect();
        assert_eq!(
            pts,
            vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]]
        );
    }

    #[test]
    fn empty_atoms_rejected() {
        assert!(matches!(
            ActionSet::new(ActionKind::Atoms { atoms: vec![] }),
            Err(MfgError::EmptyActionGrid)
        ));
    }

    #[test]
    fn membership() {
        let a = ActionSet::new(ActionKind::atoms_1d(&[-1.0, 0.0, 1.0])).unwrap();
        assert!(a.contains(&[0.0]));
        assert!(!a.contains(&[0.5]));
        let b = ActionSet::new(ActionKind::interval(-1.0, 1.0, 5)).unwrap();
        assert!(b.contains(&[0.37]));
        assert!(!b.contains(&[1.2]));
        assert_eq!(a.spacing(), 1.0);
        assert_eq!(a.diameter(), 2.0);
    }
}
