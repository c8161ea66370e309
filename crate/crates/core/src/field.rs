//! Per-cell BEV maps shared by pseudo labels, predictions and ground truth.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Per-cell 2D displacement in meters over `horizon` seconds.
///
/// Cells outside `valid` always hold zero.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionField {
    pub dx: Array2<f64>,
    pub dy: Array2<f64>,
    pub valid: Array2<bool>,
    pub horizon: f64,
}

impl MotionField {
    pub fn zeros(valid: Array2<bool>, horizon: f64) -> Self {
        let dim = valid.dim();
        Self {
            dx: Array2::zeros(dim),
            dy: Array2::zeros(dim),
            valid,
            horizon,
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.valid.dim()
    }

    pub fn get(&self, cell: (usize, usize)) -> [f64; 2] {
        [self.dx[cell], self.dy[cell]]
    }

    pub fn set(&mut self, cell: (usize, usize), d: [f64; 2]) {
        self.dx[cell] = d[0];
        self.dy[cell] = d[1];
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn valid_cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.valid
            .indexed_iter()
            .filter_map(|(c, &v)| v.then_some(c))
    }

    /// Same mask, displacements multiplied by `k`, horizon set to `horizon`.
    pub fn scaled(&self, k: f64, horizon: f64) -> Self {
        Self {
            dx: self.dx.mapv(|v| v * k),
            dy: self.dy.mapv(|v| v * k),
            valid: self.valid.clone(),
            horizon,
        }
    }

    /// Copy with a different validity mask; newly invalid cells are zeroed.
    pub fn with_mask(&self, valid: &Array2<bool>) -> Self {
        let mut out = self.clone();
        out.valid = valid.clone();
        out.dx.zip_mut_with(valid, |d, &v| {
            if !v {
                *d = 0.0
            }
        });
        out.dy.zip_mut_with(valid, |d, &v| {
            if !v {
                *d = 0.0
            }
        });
        out
    }

    /// Errors unless `other` has the same shape and validity mask.
    pub fn check_aligned(&self, other: &MotionField) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::Shape(format!(
                "motion fields {:?} vs {:?}",
                self.dim(),
                other.dim()
            )));
        }
        if self.valid != other.valid {
            return Err(Error::Shape("motion field masks differ".into()));
        }
        Ok(())
    }

    /// Per-cell speed in m/s (zero off-mask).
    pub fn speed(&self) -> Array2<f64> {
        let mut out = Array2::zeros(self.dim());
        for c in self.valid_cells() {
            out[c] = self.dx[c].hypot(self.dy[c]) / self.horizon;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellState {
    Static,
    Moving,
    Invalid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateMap {
    pub labels: Array2<CellState>,
}

impl StateMap {
    pub fn count(&self, state: CellState) -> usize {
        self.labels.iter().filter(|&&s| s == state).count()
    }
}
