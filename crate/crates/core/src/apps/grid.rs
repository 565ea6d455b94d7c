//! Uniform evaluation grids.

use crate::{Error, Result};

/// A rectangular lattice with inclusive endpoints. Flattened ordering is
/// row-major with axis 0 slowest and the last axis fastest:
/// `index = ((i_0 * r_1) + i_1) * r_2 + ...`.
#[derive(Debug, Clone)]
pub struct EvalGrid {
    pub bounds: Vec<(f64, f64)>,
    pub res: Vec<usize>,
}

impl EvalGrid {
    pub fn new(bounds: Vec<(f64, f64)>, res: Vec<usize>) -> Result<Self> {
        if bounds.len() != res.len() || bounds.is_empty() {
            return Err(Error::BadConfig("grid bounds/resolution mismatch".into()));
        }
        if res.iter().any(|&r| r < 2) {
            return Err(Error::BadConfig("grid needs >= 2 nodes per axis".into()));
        }
        if bounds.iter().any(|(lo, hi)| !(hi > lo)) {
            return Err(Error::BadConfig("grid bounds must be increasing".into()));
        }
        Ok(Self { bounds, res })
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn len(&self) -> usize {
        self.res.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Coordinate along one axis.
    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        let (lo, hi) = self.bounds[axis];
        lo + (hi - lo) * i as f64 / (self.res[axis] - 1) as f64
    }

    /// Point at a flattened index.
    pub fn point(&self, mut index: usize) -> Vec<f64> {
        let mut idx = vec![0usize; self.dim()];
        for axis in (0..self.dim()).rev() {
            idx[axis] = index % self.res[axis];
            index /= self.res[axis];
        }
        idx.iter()
            .enumerate()
            .map(|(axis, &i)| self.coord(axis, i))
            .collect()
    }

    pub fn points(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.len()).map(|i| self.point(i))
    }
}

/// Root-mean-square error and its ground-truth-normalized variant
/// (`nRMSE = RMSE / sqrt(mean u^2)`).
pub fn rmse_metrics(predicted: &[f64], truth: &[f64]) -> (f64, f64) {
    assert_eq!(predicted.len(), truth.len());
    let n = predicted.len() as f64;
    let mse = predicted
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n;
    let ref_ms = truth.iter().map(|t| t * t).sum::<f64>() / n;
    let rmse = mse.sqrt();
    (rmse, rmse / ref_ms.sqrt().max(1e-300))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordering_is_last_axis_fastest() {
        let g = EvalGrid::new(vec![(0.0, 1.0), (0.0, 2.0)], vec![3, 2]).unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(g.point(0), vec![0.0, 0.0]);
        assert_eq!(g.point(1), vec![0.0, 2.0]);
        assert_eq!(g.point(2), vec![0.5, 0.0]);
        assert_eq!(g.point(5), vec![1.0, 2.0]);
    }

    #[test]
    fn endpoints_inclusive() {
        let g = EvalGrid::new(vec![(-2.0, 2.0)], vec![5]).unwrap();
        let xs: Vec<f64> = g.points().map(|p| p[0]).collect();
        assert_eq!(xs, vec![-2.0, -1.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn metrics_definitions() {
        let (rmse, nrmse) = rmse_metrics(&[1.0, 2.0], &[0.0, 2.0]);
        assert!((rmse - (0.5f64).sqrt()).abs() < 1e-15);
        assert!((nrmse - (0.5f64 / 2.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn grid_validation() {
        assert!(EvalGrid::new(vec![(0.0, 1.0)], vec![1]).is_err());
        assert!(EvalGrid::new(vec![(1.0, 0.0)], vec![4]).is_err());
        assert!(EvalGrid::new(vec![(0.0, 1.0), (0.0, 1.0)], vec![4]).is_err());
    }
}
