//! End-to-end deconfounded estimation: Trim-Lasso, PCA-adjust-Lasso, Lava
//! (transformed route with exact dense-part recovery) and the population
//! bias of least squares under hidden confounding.

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::sparse::{self, LassoConfig};
use crate::spectral::{self, Lambda2, SpectralTransform, Tau, TransformKind};

/// How the `l1` tuning parameter is chosen.
#[derive(Debug, Clone)]
pub enum LambdaChoice {
    Fixed(f64),
    /// Cross-validate on the transformed full data and use `lambda_min`.
    Cv(CvOptions),
}

#[derive(Debug, Clone)]
pub struct CvOptions {
    pub folds: usize,
    pub grid_size: usize,
    pub grid_min_ratio: f64,
    pub seed: u64,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions { folds: 10, grid_size: 50, grid_min_ratio: 0.01, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct DeconfoundFit {
    /// The sparse / unconfounded part.
    pub beta: Vector,
    pub intercept: f64,
    /// Lava's dense part; present iff the method is Lava.
    pub dense_part: Option<Vector>,
    pub transform_kind: TransformKind,
    pub lambda: f64,
    pub lambda2: Option<f64>,
}

/// Transform (X, Y) with a fitted spectral transform and solve the Lasso;
/// the shared backbone of all three pipelines.
fn transformed_lasso(
    x: &Matrix,
    y: &Vector,
    kind: TransformKind,
    lambda: &LambdaChoice,
    center: bool,
) -> Result<(SpectralTransform, sparse::SparseFit)> {
    let t = spectral::fit_transform(x, kind)?;
    let xt = t.apply(x)?;
    let yt = t
        .apply(&Matrix::from_column_slice(y.len(), 1, y.as_slice()))?
        .column(0)
        .into_owned();
    let lambda = match lambda {
        LambdaChoice::Fixed(l) => *l,
        LambdaChoice::Cv(opts) => {
            let grid = sparse::default_grid(&xt, &yt, opts.grid_size, opts.grid_min_ratio);
            let cfg = LassoConfig { standardize: center, ..Default::default() };
            sparse::cv_lasso(&xt, &yt, opts.folds, &grid, &cfg, opts.seed)?.lambda_min
        }
    };
    let cfg = LassoConfig { lambda, standardize: center, ..Default::default() };
    let fit = sparse::lasso(&xt, &yt, &cfg)?;
    Ok((t, fit))
}

/// Trim-transform the data and run the Lasso on the transformed quantities.
pub fn trim_lasso(x: &Matrix, y: &Vector, tau: Tau, lambda: &LambdaChoice) -> Result<DeconfoundFit> {
    let kind = TransformKind::Trim(tau);
    let (_, fit) = transformed_lasso(x, y, kind, lambda, true)?;
    Ok(DeconfoundFit {
        beta: fit.beta,
        intercept: fit.intercept,
        dense_part: None,
        transform_kind: kind,
        lambda: fit.lambda,
        lambda2: None,
    })
}

/// PCA adjustment expressed as the shrink profile that zeroes the leading
/// `q_hat` singular values, then Lasso.
pub fn pca_adjust_lasso(
    x: &Matrix,
    y: &Vector,
    qhat: usize,
    lambda: &LambdaChoice,
) -> Result<DeconfoundFit> {
    let m = x.nrows().min(x.ncols());
    if qhat >= m {
        return Err(Error::invalid(format!("q_hat = {qhat} must be < min(n, p) = {m}")));
    }
    let kind = TransformKind::Pca(qhat);
    let (_, fit) = transformed_lasso(x, y, kind, lambda, true)?;
    Ok(DeconfoundFit {
        beta: fit.beta,
        intercept: fit.intercept,
        dense_part: None,
        transform_kind: kind,
        lambda: fit.lambda,
        lambda2: None,
    })
}

/// Lava: sparse-plus-dense decomposition. The sparse part comes from the
/// Lasso on Lava-transformed data; the dense part is the exact inner ridge
/// minimizer `(X^T X / n + lambda_2 I)^{-1} X^T (Y - X beta) / n`.
/// The joint objective carries no intercept, so nothing is centered here.
pub fn lava(x: &Matrix, y: &Vector, lambda1: f64, lambda2: Lambda2) -> Result<DeconfoundFit> {
    if lambda1 < 0.0 {
        return Err(Error::invalid("lambda_1 must be >= 0"));
    }
    let kind = TransformKind::Lava(lambda2);
    let (t, fit) = transformed_lasso(x, y, kind, &LambdaChoice::Fixed(lambda1), false)?;
    let l2 = match lambda2 {
        Lambda2::Value(v) => v,
        Lambda2::MedianRule => {
            let d: Vec<f64> = t.svd.d.iter().copied().collect();
            spectral::lava_median_rule(&d, x.nrows())
        }
    };
    let n = x.nrows() as f64;
    let p = x.ncols();
    let gram = x.transpose() * x / n + Matrix::identity(p, p) * l2;
    let rhs = x.transpose() * (y - x * &fit.beta) / n;
    let dense = gram
        .cholesky()
        .ok_or_else(|| Error::degenerate("lava ridge system not positive definite"))?
        .solve(&rhs);
    Ok(DeconfoundFit {
        beta: fit.beta,
        intercept: 0.0,
        dense_part: Some(dense),
        transform_kind: kind,
        lambda: lambda1,
        lambda2: Some(l2),
    })
}

/// Population bias of least squares under confounding:
/// `b = Cov(X)^{-1} Cov(X, H) delta`.
pub fn population_bias(sigma_x: &Matrix, sigma_xh: &Matrix, delta: &Vector) -> Result<Vector> {
    let p = sigma_x.nrows();
    if sigma_x.ncols() != p || sigma_xh.nrows() != p || sigma_xh.ncols() != delta.len() {
        return Err(Error::invalid("population_bias: inconsistent shapes"));
    }
    let rhs = sigma_xh * delta;
    let chol = sigma_x
        .clone()
        .cholesky()
        .ok_or_else(|| Error::degenerate("Cov(X) is not positive definite"))?;
    Ok(chol.solve(&rhs))
}


#[doc(hidden)]
pub mod tests_support {
    //! Shared by unit and acceptance tests: median population-bias norm over
    //! random unit-scale loadings, and its decay factor under doubling p.

    use super::population_bias;
    use crate::linalg::Matrix;
    use crate::seeding;
    use nalgebra::DVector;
    use rand_distr::{Distribution, StandardNormal};

    pub fn median_bias_norm(p: usize, draws: usize, seed: u64) -> f64 {
        let mut norms: Vec<f64> = (0..draws)
            .map(|d| {
                let mut rng = seeding::sub_rng(seed, d as u64);
                let gamma = Matrix::from_fn(1, p, |_, _| StandardNormal.sample(&mut rng));
                let sigma = gamma.transpose() * &gamma + Matrix::identity(p, p) * 0.01;
                let b = population_bias(
                    &sigma,
                    &gamma.transpose(),
                    &DVector::from_row_slice(&[1.0]),
                )
                .unwrap();
                b.norm()
            })
            .collect();
        norms.sort_by(|a, b| a.partial_cmp(b).unwrap());
        norms[draws / 2]
    }

    /// Ratio of median bias norms at p and 2p (target sqrt(2)).
    pub fn bias_decay_factor(p: usize, draws: usize, seed: u64) -> f64 {
        median_bias_norm(p, draws, seed) / median_bias_norm(2 * p, draws, seed)
    }
}
