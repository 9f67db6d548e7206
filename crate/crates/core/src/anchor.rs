//! Anchor regression over gamma in [0, inf], two-stage least squares, the
//! diluted causal parameter (lexicographic limit), projectability, and the
//! two-term anchor objective at empirical and population level.

use nalgebra::SymmetricEigen;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::sem::PopulationMoments;
use crate::sparse::{self, LassoConfig};

/// Anchor tuning parameter; Infinity means the lexicographic limit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gamma {
    Finite(f64),
    Infinity,
}

#[derive(Debug, Clone)]
pub struct AnchorConfig {
    pub gamma: Gamma,
    /// l1 penalty on the transformed problem; 0 = unpenalized.
    pub lambda: f64,
    pub rank_tol: f64,
}

impl AnchorConfig {
    pub fn new(gamma: Gamma) -> Self {
        AnchorConfig { gamma, lambda: 0.0, rank_tol: 1e-10 }
    }
}

#[derive(Debug, Clone)]
pub struct AnchorFit {
    pub beta: Vector,
    pub gamma: Gamma,
    /// Two-term objective at beta; for Gamma::Infinity the primary
    /// (projected) term alone.
    pub anchor_objective: f64,
    /// A^T R / n with centered anchors, R the fit residual.
    pub residual_anchor_correlation: Vector,
}

fn as_col(v: &Vector) -> Matrix {
    Matrix::from_column_slice(v.len(), 1, v.as_slice())
}

fn check_shapes(x: &Matrix, y: &Vector, a: &Matrix) -> Result<()> {
    if x.nrows() != y.len() || a.nrows() != x.nrows() {
        return Err(Error::invalid("x, y and anchors must share the row count"));
    }
    if a.ncols() == 0 {
        return Err(Error::invalid("anchors must be non-empty"));
    }
    Ok(())
}

fn centered_projector(a: &Matrix, rank_tol: f64) -> Result<linalg::Projector> {
    let (ac, _) = linalg::center_columns(a);
    linalg::projector_from(&ac, rank_tol)
}

/// `W_gamma M = M - (1 - sqrt(gamma)) P_A M` for finite gamma.
pub fn anchor_transform(
    x: &Matrix,
    y: &Vector,
    a: &Matrix,
    gamma: f64,
    rank_tol: f64,
) -> Result<(Matrix, Vector)> {
    if gamma < 0.0 || !gamma.is_finite() {
        return Err(Error::invalid("gamma must be finite and >= 0"));
    }
    check_shapes(x, y, a)?;
    let proj = centered_projector(a, rank_tol)?;
    let c = 1.0 - gamma.sqrt();
    let xt = x - linalg::apply_proj(&proj, x)? * c;
    let yt = y - (linalg::apply_proj(&proj, &as_col(y))? * c).column(0).into_owned();
    Ok((xt, yt))
}

/// Two-term empirical objective
/// `||(I - P_A)(Y - Xb)||^2/n + gamma ||P_A(Y - Xb)||^2/n`.
pub fn anchor_objective(
    b: &Vector,
    x: &Matrix,
    y: &Vector,
    a: &Matrix,
    gamma: f64,
    rank_tol: f64,
) -> Result<f64> {
    check_shapes(x, y, a)?;
    let proj = centered_projector(a, rank_tol)?;
    let r = y - x * b;
    let pr = linalg::apply_proj(&proj, &as_col(&r))?.column(0).into_owned();
    let n = y.len() as f64;
    let proj_term = pr.norm_squared() / n;
    Ok((r.norm_squared() / n - proj_term) + gamma * proj_term)
}

/// Population version of the two-term objective from analytic moments.
pub fn population_anchor_objective(
    m: &PopulationMoments,
    b: &Vector,
    gamma: f64,
) -> Result<f64> {
    let total = m.var_y() - 2.0 * b.dot(&m.cov_xy()) + (m.cov_xx() * b).dot(b);
    let r = m.cov_ay() - m.cov_ax() * b;
    let chol = m
        .cov_aa()
        .cholesky()
        .ok_or_else(|| Error::degenerate("anchor second moment not positive definite"))?;
    let proj_term = chol.solve(&r).dot(&r);
    Ok(total + (gamma - 1.0) * proj_term)
}

/// Minimum-norm minimizer of `||P_A(Y - Xb)||^2`.
pub fn tsls(x: &Matrix, y: &Vector, a: &Matrix, rank_tol: f64) -> Result<Vector> {
    check_shapes(x, y, a)?;
    let proj = centered_projector(a, rank_tol)?;
    let px = linalg::apply_proj(&proj, x)?;
    let py = linalg::apply_proj(&proj, &as_col(y))?;
    if linalg::svd(&px)?.rank(rank_tol) == 0 {
        return Err(Error::degenerate("P_A X has rank zero"));
    }
    Ok(linalg::pseudo_solve(&px, &py, rank_tol)?.column(0).into_owned())
}

/// Orthonormal basis of the (right) null space of `m`, through the
/// eigendecomposition of the Gram matrix; handles n < p.
fn null_basis(m: &Matrix, rank_tol: f64) -> Matrix {
    let p = m.ncols();
    // rank by the same singular-value rule as pseudo_solve; the null
    // dimension then selects that many smallest-eigenvalue directions
    let f = linalg::svd(m).expect("svd of finite matrix");
    let rank = if f.d[0] == 0.0 { 0 } else { f.rank(rank_tol) };
    let dim = p - rank;
    if dim == 0 {
        return Matrix::zeros(p, 0);
    }
    let eig = SymmetricEigen::new(m.transpose() * m);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).unwrap());
    let mut out = Matrix::zeros(p, dim);
    for (c, &i) in order.iter().take(dim).enumerate() {
        out.set_column(c, &eig.eigenvectors.column(i));
    }
    out
}

/// Lexicographic gamma -> infinity limit: among minimizers of the projected
/// problem, the minimizer of the residual (unprojected) problem.
pub fn diluted_causal(x: &Matrix, y: &Vector, a: &Matrix, rank_tol: f64) -> Result<Vector> {
    check_shapes(x, y, a)?;
    let proj = centered_projector(a, rank_tol)?;
    let px = linalg::apply_proj(&proj, x)?;
    let py = linalg::apply_proj(&proj, &as_col(y))?;
    if linalg::svd(&px)?.rank(rank_tol) == 0 {
        return Err(Error::degenerate("P_A X has rank zero"));
    }
    let base = linalg::pseudo_solve(&px, &py, rank_tol)?.column(0).into_owned();
    let nb = null_basis(&px, rank_tol);
    if nb.ncols() == 0 {
        return Ok(base);
    }
    let rx = linalg::residualize(&proj, x)?;
    let ry = linalg::residualize(&proj, &as_col(y))?.column(0).into_owned();
    let target = &ry - &rx * &base;
    let eta = linalg::pseudo_solve(&(&rx * &nb), &as_col(&target), rank_tol)?;
    Ok(&base + nb * eta.column(0).into_owned())
}

/// Diluted causal parameter from analytic population moments; used for
/// cross-system replicability checks.
pub fn diluted_causal_from_moments(m: &PopulationMoments, rank_tol: f64) -> Result<Vector> {
    let chol = m
        .cov_aa()
        .cholesky()
        .ok_or_else(|| Error::degenerate("anchor second moment not positive definite"))?;
    // whiten the anchors so the projected term is a plain least squares
    let design = chol.l().solve_lower_triangular(&m.cov_ax()).ok_or_else(|| {
        Error::degenerate("anchor second moment factor not invertible")
    })?;
    let target = chol
        .l()
        .solve_lower_triangular(&as_col(&m.cov_ay()))
        .ok_or_else(|| Error::degenerate("anchor second moment factor not invertible"))?;
    let base = linalg::pseudo_solve(&design, &target, rank_tol)?.column(0).into_owned();
    let nb = null_basis(&design, rank_tol);
    if nb.ncols() == 0 {
        return Ok(base);
    }
    // secondary objective restricted to base + N eta is the quadratic
    // eta^T N^T S_xx N eta - 2 eta^T N^T (S_xy - S_xx base)
    let sxx = m.cov_xx();
    let rhs = nb.transpose() * (m.cov_xy() - &sxx * &base);
    let quad = nb.transpose() * &sxx * &nb;
    let eta = linalg::pseudo_solve(&quad, &as_col(&rhs), rank_tol)?;
    Ok(&base + nb * eta.column(0).into_owned())
}

/// Anchor regression: OLS or Lasso on the `W_gamma`-transformed data for
/// finite gamma, the lexicographic solve at gamma = Infinity.
pub fn anchor_fit(x: &Matrix, y: &Vector, a: &Matrix, cfg: &AnchorConfig) -> Result<AnchorFit> {
    check_shapes(x, y, a)?;
    if cfg.lambda < 0.0 {
        return Err(Error::invalid("lambda must be >= 0"));
    }
    let beta = match cfg.gamma {
        Gamma::Infinity => {
            if cfg.lambda > 0.0 {
                return Err(Error::invalid("penalized fit needs finite gamma"));
            }
            diluted_causal(x, y, a, cfg.rank_tol)?
        }
        Gamma::Finite(g) => {
            let (xt, yt) = anchor_transform(x, y, a, g, cfg.rank_tol)?;
            if cfg.lambda > 0.0 {
                let lcfg = LassoConfig {
                    lambda: cfg.lambda,
                    standardize: false,
                    ..Default::default()
                };
                sparse::lasso(&xt, &yt, &lcfg)?.beta
            } else {
                linalg::pseudo_solve(&xt, &as_col(&yt), cfg.rank_tol)?
                    .column(0)
                    .into_owned()
            }
        }
    };
    let n = y.len() as f64;
    let resid = y - x * &beta;
    let (ac, _) = linalg::center_columns(a);
    let corr = ac.transpose() * &resid / n;
    let objective = match cfg.gamma {
        Gamma::Finite(g) => anchor_objective(&beta, x, y, a, g, cfg.rank_tol)?,
        Gamma::Infinity => {
            let proj = centered_projector(a, cfg.rank_tol)?;
            linalg::apply_proj(&proj, &as_col(&resid))?.norm_squared() / n
        }
    };
    Ok(AnchorFit {
        beta,
        gamma: cfg.gamma,
        anchor_objective: objective,
        residual_anchor_correlation: corr,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Projectability {
    pub holds: bool,
    pub rank_ax: usize,
    pub rank_axy: usize,
}

fn projectability_from_covs(cov_ax: &Matrix, cov_ay: &Vector, tol: f64) -> Projectability {
    let r = cov_ax.nrows();
    let mut aug = Matrix::zeros(r, cov_ax.ncols() + 1);
    aug.columns_mut(0, cov_ax.ncols()).copy_from(cov_ax);
    aug.set_column(cov_ax.ncols(), cov_ay);
    let f_aug = linalg::svd(&aug).expect("svd of finite matrix");
    let top = f_aug.d[0];
    if top == 0.0 {
        return Projectability { holds: true, rank_ax: 0, rank_axy: 0 };
    }
    let thresh = tol * top;
    let f_ax = linalg::svd(cov_ax).expect("svd of finite matrix");
    let rank_ax = f_ax.d.iter().filter(|&&d| d > thresh).count();
    let rank_axy = f_aug.d.iter().filter(|&&d| d > thresh).count();
    Projectability { holds: rank_ax == rank_axy, rank_ax, rank_axy }
}

/// Whether `rank Cov(A, X) = rank [Cov(A, X), Cov(A, Y)]`, from data.
pub fn projectability(a: &Matrix, x: &Matrix, y: &Vector, tol: f64) -> Result<Projectability> {
    check_shapes(x, y, a)?;
    let n = y.len() as f64;
    let (ac, _) = linalg::center_columns(a);
    let (xc, _) = linalg::center_columns(x);
    let yc = y.add_scalar(-y.mean());
    let cov_ax = ac.transpose() * xc / n;
    let cov_ay = ac.transpose() * yc / n;
    Ok(projectability_from_covs(&cov_ax, &cov_ay, tol))
}

/// Same check from analytic population moments.
pub fn projectability_from_moments(m: &PopulationMoments, tol: f64) -> Projectability {
    projectability_from_covs(&m.cov_ax(), &m.cov_ay(), tol)
}
