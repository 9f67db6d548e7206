use crate::linalg::{Matrix, Vector};

/// Observed data: design matrix, response, optional anchors.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vector,
    pub anchors: Option<Matrix>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }
    pub fn p(&self) -> usize {
        self.x.ncols()
    }
}
