//! Dense matrix primitives: thin SVD with a deterministic sign convention,
//! rank-revealing orthogonal projectors and minimum-norm least squares.
//!
//! Everything downstream (spectral transforms, anchor regression, the SEM
//! oracles) goes through this module so that numerical-rank conventions are
//! decided in exactly one place.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Default relative rank tolerance: `1e-10 * max(n, p)`.
pub fn default_rank_tol(rows: usize, cols: usize) -> f64 {
    1e-10 * rows.max(cols) as f64
}

/// Thin SVD `M = U diag(D) V^T` with `m = min(n, p)` columns,
/// singular values descending and a deterministic sign convention
/// (largest-magnitude entry of each `U` column is positive).
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub u: Matrix,
    pub d: Vector,
    pub v: Matrix,
}

impl SvdFactors {
    pub fn rank(&self, tol: f64) -> usize {
        let top = self.d[0];
        self.d.iter().filter(|&&s| s > tol * top).count()
    }

    /// Reconstruct `U diag(D) V^T`.
    pub fn reconstruct(&self) -> Matrix {
        let mut ud = self.u.clone();
        for (i, mut col) in ud.column_iter_mut().enumerate() {
            col *= self.d[i];
        }
        &ud * self.v.transpose()
    }
}

fn check_finite(m: &Matrix, name: &str) -> Result<()> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("{name} contains non-finite entries")));
    }
    Ok(())
}

/// Thin SVD of `m`, descending singular values, sign-normalized.
pub fn svd(m: &Matrix) -> Result<SvdFactors> {
    check_finite(m, "matrix")?;
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let d = svd.singular_values;

    // Sort descending; nalgebra already orders them but we do not rely on it.
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.sort_by(|&a, &b| d[b].partial_cmp(&d[a]).unwrap());

    let k = d.len();
    let mut u_s = Matrix::zeros(u.nrows(), k);
    let mut v_s = Matrix::zeros(vt.ncols(), k);
    let mut d_s = Vector::zeros(k);
    for (out, &i) in idx.iter().enumerate() {
        d_s[out] = d[i];
        u_s.set_column(out, &u.column(i));
        v_s.set_column(out, &vt.row(i).transpose());
    }

    // Sign convention: largest-magnitude entry of each U column positive.
    for j in 0..k {
        let col = u_s.column(j);
        let mut best = 0usize;
        for i in 1..col.len() {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            u_s.column_mut(j).neg_mut();
            v_s.column_mut(j).neg_mut();
        }
    }
    Ok(SvdFactors { u: u_s, d: d_s, v: v_s })
}

/// Orthogonal projector onto the column space of some matrix `A`.
#[derive(Debug, Clone)]
pub struct Projector {
    /// n x k orthonormal basis of col(A); empty (k = 0) for all-zero A.
    pub basis: Matrix,
    pub rank: usize,
    pub rank_tolerance: f64,
}

impl Projector {
    pub fn nrows(&self) -> usize {
        self.basis.nrows()
    }
}

/// Projector onto col(A), with rank decided at `tol * (largest singular value)`.
/// An all-zero `A` yields a rank-0 projector (projects everything to zero).
pub fn projector_from(a: &Matrix, tol: f64) -> Result<Projector> {
    if tol <= 0.0 {
        return Err(Error::invalid("rank tolerance must be positive"));
    }
    let f = svd(a)?;
    let rank = if f.d[0] == 0.0 { 0 } else { f.rank(tol) };
    let basis = f.u.columns(0, rank).into_owned();
    Ok(Projector { basis, rank, rank_tolerance: tol })
}

/// `P M` = projection of the columns of `M` onto the basis.
pub fn apply_proj(p: &Projector, m: &Matrix) -> Result<Matrix> {
    if p.nrows() != m.nrows() {
        return Err(Error::invalid(format!(
            "projector has {} rows, matrix has {}",
            p.nrows(),
            m.nrows()
        )));
    }
    if p.rank == 0 {
        return Ok(Matrix::zeros(m.nrows(), m.ncols()));
    }
    Ok(&p.basis * (p.basis.transpose() * m))
}

/// `(I - P) M`; together with [`apply_proj`] this reconstructs `M` exactly.
pub fn residualize(p: &Projector, m: &Matrix) -> Result<Matrix> {
    Ok(m - apply_proj(p, m)?)
}

/// Minimum-norm least-squares solution of `M X = B` via the SVD, treating
/// singular values below `tol * d_1` as zero.
pub fn pseudo_solve(m: &Matrix, b: &Matrix, tol: f64) -> Result<Matrix> {
    if m.nrows() != b.nrows() {
        return Err(Error::invalid(format!(
            "lhs has {} rows, rhs has {}",
            m.nrows(),
            b.nrows()
        )));
    }
    let f = svd(m)?;
    let rank = if f.d[0] == 0.0 { 0 } else { f.rank(tol) };
    let mut ut_b = f.u.transpose() * b;
    for i in 0..f.d.len() {
        let scale = if i < rank { 1.0 / f.d[i] } else { 0.0 };
        ut_b.row_mut(i).scale_mut(scale);
    }
    Ok(&f.v * ut_b)
}

/// Column means of `m` as a row-compatible vector.
pub fn column_means(m: &Matrix) -> Vector {
    let n = m.nrows() as f64;
    Vector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

/// Subtract the column means; returns (centered, means).
pub fn center_columns(m: &Matrix) -> (Matrix, Vector) {
    let means = column_means(m);
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    (out, means)
}
