//! Spectral transformations of the design matrix: Trim, PCA adjustment,
//! Lava and Identity, all expressed as per-singular-value shrink ratios
//! `rho_i = d_tilde_i / d_i` applied through `F = U diag(rho) U^T`
//! extended by the identity on the orthogonal complement of col(U).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, SvdFactors};

/// Trim threshold: an explicit value or the median singular value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Tau {
    Value(f64),
    Median,
}

/// Lava ridge parameter: explicit or the median rule `d_med^2 / n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Lambda2 {
    Value(f64),
    MedianRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TransformKind {
    Identity,
    Trim(Tau),
    Pca(usize),
    Lava(Lambda2),
}

/// A fitted spectral transform: the SVD of the design it was fitted on plus
/// the shrink ratios. Zero singular values get ratio 1 (the 0/0 direction is
/// a no-op on the row space either way).
#[derive(Debug, Clone)]
pub struct SpectralTransform {
    pub svd: SvdFactors,
    pub shrink: Vec<f64>,
    pub kind: TransformKind,
    pub n: usize,
    pub p: usize,
}

/// Index of the median singular value in the descending spectrum
/// (0-based `floor(m/2)`; for d = (4, 2, 2) this picks 2).
pub fn median_index(m: usize) -> usize {
    m / 2
}

/// The median-rule Lava parameter `lambda_2 = d_med^2 / n`.
pub fn lava_median_rule(d: &[f64], n: usize) -> f64 {
    let dm = d[median_index(d.len())];
    dm * dm / n as f64
}

pub fn fit_transform(x: &Matrix, kind: TransformKind) -> Result<SpectralTransform> {
    let (n, p) = (x.nrows(), x.ncols());
    let svd = linalg::svd(x)?;
    let m = svd.d.len();
    let d: Vec<f64> = svd.d.iter().copied().collect();

    let shrink: Vec<f64> = match kind {
        TransformKind::Identity => vec![1.0; m],
        TransformKind::Trim(tau) => {
            let tau = match tau {
                Tau::Value(t) => {
                    if t < 0.0 {
                        return Err(Error::invalid("trim threshold must be >= 0"));
                    }
                    t
                }
                Tau::Median => d[median_index(m)],
            };
            d.iter()
                .map(|&di| if di > 0.0 { di.min(tau) / di } else { 1.0 })
                .collect()
        }
        TransformKind::Pca(qhat) => {
            if qhat > m {
                return Err(Error::invalid(format!(
                    "pca adjustment with q_hat = {qhat} exceeds min(n, p) = {m}"
                )));
            }
            d.iter()
                .enumerate()
                .map(|(i, &di)| if di > 0.0 && i < qhat { 0.0 } else { 1.0 })
                .collect()
        }
        TransformKind::Lava(l2) => {
            let l2 = match l2 {
                Lambda2::Value(v) => {
                    if v <= 0.0 {
                        return Err(Error::invalid("lava lambda_2 must be > 0"));
                    }
                    v
                }
                Lambda2::MedianRule => lava_median_rule(&d, n),
            };
            let nl2 = n as f64 * l2;
            d.iter()
                .map(|&di| if di > 0.0 { (nl2 / (nl2 + di * di)).sqrt() } else { 1.0 })
                .collect()
        }
    };

    Ok(SpectralTransform { svd, shrink, kind, n, p })
}

impl SpectralTransform {
    /// Apply `F M = U diag(rho) U^T M + (M - U U^T M)`; the component of `M`
    /// orthogonal to col(U) passes through unchanged.
    pub fn apply(&self, m: &Matrix) -> Result<Matrix> {
        if m.nrows() != self.n {
            return Err(Error::invalid(format!(
                "transform was fitted on {} rows, input has {}",
                self.n,
                m.nrows()
            )));
        }
        let mut t = self.svd.u.transpose() * m;
        for (i, mut row) in t.row_iter_mut().enumerate() {
            row.scale_mut(self.shrink[i] - 1.0);
        }
        Ok(m + &self.svd.u * t)
    }

    /// Pairs `(d_i, d_tilde_i)` in descending `d_i` order.
    pub fn singular_spectrum(&self) -> Vec<(f64, f64)> {
        self.svd
            .d
            .iter()
            .zip(&self.shrink)
            .map(|(&d, &r)| (d, d * r))
            .collect()
    }
}
