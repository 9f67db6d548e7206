//! Structural-equation-model generators and their analytic population
//! oracles: dense-confounding data, IV / anchor systems, shift-perturbed
//! systems, closed-form second moments and the worst-case-risk oracle that
//! the anchor objective is checked against.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::seeding;

// sub-seed streams, so redrawing one ingredient never shifts the others
const STREAM_H: u64 = 0;
const STREAM_EPS_X: u64 = 1;
const STREAM_EPS_Y: u64 = 2;
const STREAM_LOADING: u64 = 3;
const STREAM_ANCHOR: u64 = 4;
const STREAM_NOISE: u64 = 5;
const STREAM_DELTA: u64 = 6;

fn randn<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn randn_mat<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    DMatrix::from_fn(rows, cols, |_, _| randn(rng))
}

/// Dense-confounding model: `X = H gamma + eps_X`, `Y = X beta0 + H delta + eps_Y`
/// with `H` standard normal `n x q`. Optional fields default to the generic
/// dense setting (i.i.d. standard-normal loadings, unit delta, unit-strength
/// sparse beta0 on the first `s0` coordinates).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseConfoundSpec {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub s0: usize,
    #[serde(default)]
    pub beta0: Option<Vec<f64>>,
    /// q x p loading matrix, row per confounder.
    #[serde(default)]
    pub confounder_loading: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub delta: Option<Vec<f64>>,
    pub noise_x_scale: f64,
    pub noise_y_scale: f64,
    pub seed: u64,
}

impl DenseConfoundSpec {
    pub fn new(n: usize, p: usize, q: usize, s0: usize, seed: u64) -> Self {
        DenseConfoundSpec {
            n,
            p,
            q,
            s0,
            beta0: None,
            confounder_loading: None,
            delta: None,
            noise_x_scale: 1.0,
            noise_y_scale: 1.0,
            seed,
        }
    }

    pub fn beta0_vector(&self) -> Result<Vector> {
        match &self.beta0 {
            Some(b) => {
                if b.len() != self.p {
                    return Err(Error::invalid("beta0 length must equal p"));
                }
                let support = b.iter().filter(|v| **v != 0.0).count();
                if support != self.s0 {
                    return Err(Error::invalid(format!(
                        "beta0 has {support} non-zeros, spec says s0 = {}",
                        self.s0
                    )));
                }
                Ok(DVector::from_row_slice(b))
            }
            None => {
                if self.s0 > self.p {
                    return Err(Error::invalid("s0 exceeds p"));
                }
                let mut b = DVector::zeros(self.p);
                for j in 0..self.s0 {
                    b[j] = 1.0;
                }
                Ok(b)
            }
        }
    }

    pub fn loading_matrix(&self) -> Result<Matrix> {
        match &self.confounder_loading {
            Some(rows) => {
                if rows.len() != self.q || rows.iter().any(|r| r.len() != self.p) {
                    return Err(Error::invalid("confounder_loading must be q x p"));
                }
                Ok(Matrix::from_fn(self.q, self.p, |i, j| rows[i][j]))
            }
            None => Ok(randn_mat(
                self.q,
                self.p,
                &mut seeding::sub_rng(self.seed, STREAM_LOADING),
            )),
        }
    }

    pub fn delta_vector(&self) -> Result<Vector> {
        match &self.delta {
            Some(d) => {
                if d.len() != self.q {
                    return Err(Error::invalid("delta length must equal q"));
                }
                Ok(DVector::from_row_slice(d))
            }
            None => Ok(DVector::from_element(self.q, 1.0)),
        }
    }

    /// `Cov(X) = gamma^T gamma + xi^2 I` (standard-normal confounders).
    pub fn population_cov_x(&self) -> Result<Matrix> {
        let g = self.loading_matrix()?;
        let xi2 = self.noise_x_scale * self.noise_x_scale;
        Ok(g.transpose() * &g + Matrix::identity(self.p, self.p) * xi2)
    }

    /// `Cov(X, H) = gamma^T` (p x q).
    pub fn population_cov_xh(&self) -> Result<Matrix> {
        Ok(self.loading_matrix()?.transpose())
    }
}

/// What the generator knows and the observer does not.
#[derive(Debug, Clone)]
pub struct DenseTruth {
    pub beta0: Vector,
    pub gamma: Matrix,
    pub delta: Vector,
    pub h: Matrix,
}

pub fn gen_dense_confounded(spec: &DenseConfoundSpec) -> Result<(Dataset, DenseTruth)> {
    if spec.noise_x_scale <= 0.0 {
        return Err(Error::invalid("noise_x_scale must be > 0"));
    }
    let beta0 = spec.beta0_vector()?;
    let gamma = spec.loading_matrix()?;
    let delta = spec.delta_vector()?;

    let h = randn_mat(spec.n, spec.q, &mut seeding::sub_rng(spec.seed, STREAM_H));
    let eps_x = randn_mat(spec.n, spec.p, &mut seeding::sub_rng(spec.seed, STREAM_EPS_X));
    let eps_y = randn_mat(spec.n, 1, &mut seeding::sub_rng(spec.seed, STREAM_EPS_Y));

    let x = &h * &gamma + eps_x * spec.noise_x_scale;
    let y = &x * &beta0 + &h * &delta + eps_y.column(0) * spec.noise_y_scale;

    Ok((
        Dataset { x, y: y.column(0).into_owned(), anchors: None },
        DenseTruth { beta0, gamma, delta, h },
    ))
}

/// How anchors enter the joint system.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorModel {
    /// `A ~ N(0, cov)`, r x r covariance.
    Gaussian { cov: Vec<Vec<f64>> },
    /// Discrete environments dummy-encoded; `E[A A^T] = diag(proportions)`.
    Environments { proportions: Vec<f64> },
}

/// Joint system `(X, Y, H)^T = B (X, Y, H)^T + eps + M A^T`, variable order
/// X-block, then the scalar Y, then the H-block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnchorSemSpec {
    pub dim_x: usize,
    pub dim_h: usize,
    /// k x k with k = dim_x + 1 + dim_h.
    pub b: Vec<Vec<f64>>,
    /// k x r shift-loading matrix.
    pub m: Vec<Vec<f64>>,
    /// k x k noise covariance.
    pub noise_cov: Vec<Vec<f64>>,
    pub anchor: AnchorModel,
    /// Declared by the spec author; invertibility of I - B is checked either way.
    #[serde(default)]
    pub acyclic: bool,
}

/// Shift perturbation replacing the `M A` contribution: `v = M delta`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Perturbation {
    /// Deterministic delta, or the mean-zero Gaussian delta covariance.
    pub delta: Vec<f64>,
    pub stochastic: bool,
    #[serde(default)]
    pub delta_cov: Option<Vec<Vec<f64>>>,
}

fn to_matrix(rows: &[Vec<f64>], nr: usize, nc: usize, name: &str) -> Result<Matrix> {
    if rows.len() != nr || rows.iter().any(|r| r.len() != nc) {
        return Err(Error::invalid(format!("{name} must be {nr} x {nc}")));
    }
    Ok(Matrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

/// Square root factor of a symmetric PSD matrix, tolerant of exact
/// semi-definiteness (dummy-environment second moments are singular).
fn psd_factor(cov: &Matrix) -> Result<Matrix> {
    if let Some(chol) = cov.clone().cholesky() {
        return Ok(chol.l());
    }
    let eig = nalgebra::SymmetricEigen::new(cov.clone());
    let k = cov.nrows();
    if eig.eigenvalues.iter().any(|&e| e < -1e-10 * eig.eigenvalues.amax()) {
        return Err(Error::invalid("covariance matrix is not positive semi-definite"));
    }
    let mut f = eig.eigenvectors;
    for (i, mut col) in f.column_iter_mut().enumerate() {
        col *= eig.eigenvalues[i].max(0.0).sqrt();
    }
    let _ = k;
    Ok(f)
}

impl AnchorSemSpec {
    pub fn k(&self) -> usize {
        self.dim_x + 1 + self.dim_h
    }

    pub fn r(&self) -> usize {
        match &self.anchor {
            AnchorModel::Gaussian { cov } => cov.len(),
            AnchorModel::Environments { proportions } => proportions.len(),
        }
    }

    pub fn b_matrix(&self) -> Result<Matrix> {
        to_matrix(&self.b, self.k(), self.k(), "B")
    }

    pub fn m_matrix(&self) -> Result<Matrix> {
        to_matrix(&self.m, self.k(), self.r(), "M")
    }

    pub fn noise_matrix(&self) -> Result<Matrix> {
        to_matrix(&self.noise_cov, self.k(), self.k(), "noise_cov")
    }

    /// `E[A A^T]`.
    pub fn anchor_second_moment(&self) -> Result<Matrix> {
        match &self.anchor {
            AnchorModel::Gaussian { cov } => to_matrix(cov, self.r(), self.r(), "anchor cov"),
            AnchorModel::Environments { proportions } => {
                let s: f64 = proportions.iter().sum();
                if proportions.iter().any(|&p| p < 0.0) || (s - 1.0).abs() > 1e-8 {
                    return Err(Error::invalid("environment proportions must sum to 1"));
                }
                Ok(Matrix::from_diagonal(&DVector::from_row_slice(proportions)))
            }
        }
    }

    /// `(I - B)^{-1}`, the map from exogenous inputs to the joint vector.
    pub fn structural_solve(&self) -> Result<Matrix> {
        let b = self.b_matrix()?;
        let k = self.k();
        let i_minus_b = Matrix::identity(k, k) - b;
        i_minus_b
            .lu()
            .try_inverse()
            .ok_or_else(|| Error::invalid("I - B is singular"))
    }

    fn split(&self, z: &Matrix, a: Option<Matrix>) -> (Dataset, Matrix) {
        let p = self.dim_x;
        let x = z.columns(0, p).into_owned();
        let y = z.column(p).into_owned();
        let h = z.columns(p + 1, self.dim_h).into_owned();
        (Dataset { x, y, anchors: a }, h)
    }

    /// IV wiring of the extended SEM: anchors affect X only,
    /// `X = A kappa + H gamma + eps_X`, `Y = X beta0 + H delta + eps_Y`.
    pub fn iv(
        beta0: &[f64],
        kappa: &Matrix,       // r x p
        gamma: &Matrix,       // q x p
        delta: &[f64],        // q
        noise_x_scale: f64,
        noise_y_scale: f64,
        anchor: AnchorModel,
    ) -> Result<AnchorSemSpec> {
        let p = beta0.len();
        let q = delta.len();
        let r = kappa.nrows();
        if kappa.ncols() != p || gamma.nrows() != q || gamma.ncols() != p {
            return Err(Error::invalid("iv builder: inconsistent dimensions"));
        }
        let k = p + 1 + q;
        let mut b = vec![vec![0.0; k]; k];
        for j in 0..p {
            // X_j <- sum_i gamma[i][j] H_i
            for i in 0..q {
                b[j][p + 1 + i] = gamma[(i, j)];
            }
            // Y <- X beta0 + H delta
            b[p][j] = beta0[j];
        }
        for i in 0..q {
            b[p][p + 1 + i] = delta[i];
        }
        let mut m = vec![vec![0.0; r]; k];
        for j in 0..p {
            for s in 0..r {
                m[j][s] = kappa[(s, j)];
            }
        }
        let mut noise = vec![vec![0.0; k]; k];
        for j in 0..p {
            noise[j][j] = noise_x_scale * noise_x_scale;
        }
        noise[p][p] = noise_y_scale * noise_y_scale;
        for i in 0..q {
            noise[p + 1 + i][p + 1 + i] = 1.0;
        }
        Ok(AnchorSemSpec {
            dim_x: p,
            dim_h: q,
            b,
            m,
            noise_cov: noise,
            anchor,
            acyclic: true,
        })
    }

    /// Random acyclic spec (strictly lower-triangular B in the (X, Y, H)
    /// order) with full-rank Gaussian anchors; used by the oracle tests.
    pub fn random(dim_x: usize, dim_h: usize, r: usize, seed: u64) -> AnchorSemSpec {
        let k = dim_x + 1 + dim_h;
        let mut rng = seeding::rng(seed);
        let mut b = vec![vec![0.0; k]; k];
        for i in 1..k {
            for j in 0..i {
                b[i][j] = 0.5 * randn(&mut rng);
            }
        }
        let m: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..r).map(|_| randn(&mut rng)).collect())
            .collect();
        let mut noise = vec![vec![0.0; k]; k];
        for (i, row) in noise.iter_mut().enumerate() {
            row[i] = 0.5 + rng.random::<f64>();
        }
        let g = randn_mat(r, r, &mut rng);
        let cov_m = &g * g.transpose() / r as f64 + Matrix::identity(r, r) * 0.2;
        let cov: Vec<Vec<f64>> = (0..r)
            .map(|i| (0..r).map(|j| cov_m[(i, j)]).collect())
            .collect();
        AnchorSemSpec {
            dim_x,
            dim_h,
            b,
            m,
            noise_cov: noise,
            anchor: AnchorModel::Gaussian { cov },
            acyclic: true,
        }
    }
}

fn draw_anchors(spec: &AnchorSemSpec, n: usize, rng: &mut impl Rng) -> Result<Matrix> {
    let r = spec.r();
    match &spec.anchor {
        AnchorModel::Gaussian { cov } => {
            let cov = to_matrix(cov, r, r, "anchor cov")?;
            let l = psd_factor(&cov)?;
            Ok(randn_mat(n, r, rng) * l.transpose())
        }
        AnchorModel::Environments { proportions } => {
            let mut a = Matrix::zeros(n, r);
            for i in 0..n {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut env = r - 1;
                for (e, &pr) in proportions.iter().enumerate() {
                    acc += pr;
                    if u < acc {
                        env = e;
                        break;
                    }
                }
                a[(i, env)] = 1.0;
            }
            Ok(a)
        }
    }
}

/// Draw `n` rows of `(I - B)^{-1} (eps + M A^T)`; the hidden block is
/// returned separately and withheld from the dataset.
pub fn gen_anchor_sem(spec: &AnchorSemSpec, n: usize, seed: u64) -> Result<(Dataset, Matrix)> {
    let s = spec.structural_solve()?;
    let m = spec.m_matrix()?;
    let noise_l = psd_factor(&spec.noise_matrix()?)?;

    let a = draw_anchors(spec, n, &mut seeding::sub_rng(seed, STREAM_ANCHOR))?;
    let eps = randn_mat(n, spec.k(), &mut seeding::sub_rng(seed, STREAM_NOISE)) * noise_l.transpose();
    let z = (eps + &a * m.transpose()) * s.transpose();
    Ok(spec.split(&z, Some(a)))
}

/// Same system with `M A` replaced by the shift `v = M delta`.
pub fn perturb(
    spec: &AnchorSemSpec,
    pert: &Perturbation,
    n: usize,
    seed: u64,
) -> Result<(Dataset, Matrix)> {
    let s = spec.structural_solve()?;
    let m = spec.m_matrix()?;
    let r = spec.r();
    if pert.delta.len() != r && !pert.stochastic {
        return Err(Error::invalid("perturbation delta length must equal anchor dim"));
    }
    let noise_l = psd_factor(&spec.noise_matrix()?)?;
    let eps = randn_mat(n, spec.k(), &mut seeding::sub_rng(seed, STREAM_NOISE)) * noise_l.transpose();

    let shifts: Matrix = if pert.stochastic {
        let cov = pert
            .delta_cov
            .as_ref()
            .ok_or_else(|| Error::invalid("stochastic perturbation needs delta_cov"))?;
        let cov = to_matrix(cov, r, r, "delta_cov")?;
        let l = psd_factor(&cov)?;
        let deltas = randn_mat(n, r, &mut seeding::sub_rng(seed, STREAM_DELTA)) * l.transpose();
        &deltas * m.transpose()
    } else {
        let d = DVector::from_row_slice(&pert.delta);
        let v = (&m * &d).transpose(); // 1 x k
        Matrix::from_fn(n, spec.k(), |_, j| v[(0, j)])
    };

    let z = (eps + shifts) * s.transpose();
    Ok(spec.split(&z, None))
}

/// Exact second moments of the joint vector and its cross-covariance with
/// the anchors: `Cov = S (Sigma_eps + M Sigma_A M^T) S^T`, `Cross = S M Sigma_A`
/// with `S = (I - B)^{-1}`.
#[derive(Debug, Clone)]
pub struct PopulationMoments {
    pub dim_x: usize,
    pub dim_h: usize,
    /// k x k covariance of (X, Y, H).
    pub joint: Matrix,
    /// k x r cross-covariance with A.
    pub cross: Matrix,
    /// r x r anchor second moment.
    pub anchor: Matrix,
}

impl PopulationMoments {
    pub fn cov_xx(&self) -> Matrix {
        self.joint.view((0, 0), (self.dim_x, self.dim_x)).into_owned()
    }
    pub fn cov_xy(&self) -> Vector {
        self.joint
            .view((0, self.dim_x), (self.dim_x, 1))
            .column(0)
            .into_owned()
    }
    pub fn var_y(&self) -> f64 {
        self.joint[(self.dim_x, self.dim_x)]
    }
    /// r x p.
    pub fn cov_ax(&self) -> Matrix {
        self.cross.view((0, 0), (self.dim_x, self.cross.ncols())).transpose()
    }
    /// r vector.
    pub fn cov_ay(&self) -> Vector {
        self.cross.row(self.dim_x).transpose()
    }
    pub fn cov_aa(&self) -> Matrix {
        self.anchor.clone()
    }
}

pub fn population_moments(spec: &AnchorSemSpec) -> Result<PopulationMoments> {
    moments_with_anchor_cov(spec, &spec.anchor_second_moment()?)
}

/// Moments of the shift-perturbed system whose "anchors" are the stochastic
/// delta with the given covariance.
pub fn perturbed_moments(spec: &AnchorSemSpec, delta_cov: &Matrix) -> Result<PopulationMoments> {
    moments_with_anchor_cov(spec, delta_cov)
}

fn moments_with_anchor_cov(spec: &AnchorSemSpec, sigma_a: &Matrix) -> Result<PopulationMoments> {
    let s = spec.structural_solve()?;
    let m = spec.m_matrix()?;
    let sigma_eps = spec.noise_matrix()?;
    let joint = &s * (sigma_eps + &m * sigma_a * m.transpose()) * s.transpose();
    let cross = &s * &m * sigma_a;
    Ok(PopulationMoments {
        dim_x: spec.dim_x,
        dim_h: spec.dim_h,
        joint,
        cross,
        anchor: sigma_a.clone(),
    })
}

/// Population anchor coefficient from the normal equations
/// `(S_XX + (g-1) S_XA S_AA^-1 S_AX) beta = S_XY + (g-1) S_XA S_AA^-1 S_AY`.
pub fn population_anchor_coef(m: &PopulationMoments, gamma: f64) -> Result<Vector> {
    let p = m.dim_x;
    let cov_ax = m.cov_ax();
    let cov_ay = m.cov_ay();
    let aa_inv_ax = linalg::pseudo_solve(
        &m.cov_aa(),
        &cov_ax,
        linalg::default_rank_tol(cov_ax.nrows(), cov_ax.nrows()),
    )?;
    let aa_inv_ay = linalg::pseudo_solve(
        &m.cov_aa(),
        &Matrix::from_column_slice(cov_ay.len(), 1, cov_ay.as_slice()),
        linalg::default_rank_tol(cov_ay.len(), 1),
    )?;
    let lhs = m.cov_xx() + cov_ax.transpose() * &aa_inv_ax * (gamma - 1.0);
    let rhs = m.cov_xy() + cov_ax.transpose() * aa_inv_ay.column(0) * (gamma - 1.0);
    let sol = linalg::pseudo_solve(
        &lhs,
        &Matrix::from_column_slice(p, 1, rhs.as_slice()),
        linalg::default_rank_tol(p, p),
    )?;
    Ok(sol.column(0).into_owned())
}

/// The worst-case risk `sup_{v in C_gamma} E[(Y^v - X^v b)^2]`.
///
/// With `c = (-b, 1, 0_h)` and `S = (I - B)^{-1}` the residual is
/// `c^T S eps + w^T delta`, `w = M^T S^T c`, so the risk splits into
/// `c0 + E[(w^T delta)^2]` and the sup over `E[delta delta^T] <= gamma E[A A^T]`
/// is attained at the boundary: `c0 + gamma w^T E[A A^T] w`.
pub fn worst_case_sup(spec: &AnchorSemSpec, b: &Vector, gamma: f64) -> Result<f64> {
    if b.len() != spec.dim_x {
        return Err(Error::invalid("b length must equal dim_x"));
    }
    if gamma < 0.0 {
        return Err(Error::invalid("gamma must be >= 0"));
    }
    let s = spec.structural_solve()?;
    let m = spec.m_matrix()?;
    let sigma_eps = spec.noise_matrix()?;
    let sigma_a = spec.anchor_second_moment()?;

    let mut c = DVector::zeros(spec.k());
    for j in 0..spec.dim_x {
        c[j] = -b[j];
    }
    c[spec.dim_x] = 1.0;

    let st_c = s.transpose() * &c;
    let c0 = (st_c.transpose() * &sigma_eps * &st_c)[(0, 0)];
    let w = m.transpose() * &st_c;
    let quad = (w.transpose() * &sigma_a * &w)[(0, 0)];
    Ok(c0 + gamma * quad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::max_abs;
    use approx::assert_abs_diff_eq;

    #[test]
    fn dense_no_confounding_reduces_to_sparse_linear_model() {
        let mut spec = DenseConfoundSpec::new(50, 5, 1, 2, 1);
        spec.confounder_loading = Some(vec![vec![0.0; 5]]);
        spec.delta = Some(vec![0.0]);
        spec.noise_y_scale = 0.01;
        let (data, truth) = gen_dense_confounded(&spec).unwrap();
        let resid = &data.y - &data.x * &truth.beta0;
        assert!(resid.amax() < 0.05);
    }

    #[test]
    fn dense_generation_is_seed_deterministic() {
        let spec = DenseConfoundSpec::new(30, 10, 2, 3, 9);
        let (a, _) = gen_dense_confounded(&spec).unwrap();
        let (b, _) = gen_dense_confounded(&spec).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
    }

    #[test]
    fn dense_cov_xh_top_singular_value_scales_like_sqrt_p() {
        // q = 1, all-ones loading row: Cov(X, H) = gamma^T, top singular value sqrt(p)
        let n = 2000;
        let p = 100;
        let mut spec = DenseConfoundSpec::new(n, p, 1, 1, 3);
        spec.confounder_loading = Some(vec![vec![1.0; p]]);
        let (data, truth) = gen_dense_confounded(&spec).unwrap();
        let (xc, _) = linalg::center_columns(&data.x);
        let (hc, _) = linalg::center_columns(&truth.h);
        let cov_xh = xc.transpose() * &hc / n as f64;
        let top = crate::linalg::svd(&cov_xh).unwrap().d[0];
        let target = (p as f64).sqrt();
        assert!((top - target).abs() / target < 0.15, "top = {top}, target = {target}");
    }

    #[test]
    fn dense_median_singular_value_order_sqrt_p() {
        let spec = DenseConfoundSpec::new(300, 600, 3, 5, 4);
        let (data, _) = gen_dense_confounded(&spec).unwrap();
        let d = crate::linalg::svd(&data.x).unwrap().d;
        let med = d[d.len() / 2];
        let ratio = med / (600f64).sqrt();
        assert!((0.3..3.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn anchor_sem_b_zero_m_zero_is_pure_noise() {
        let k = 4; // dim_x = 2, y, dim_h = 1
        let spec = AnchorSemSpec {
            dim_x: 2,
            dim_h: 1,
            b: vec![vec![0.0; k]; k],
            m: vec![vec![0.0; 1]; k],
            noise_cov: {
                let mut nc = vec![vec![0.0; k]; k];
                for (i, row) in nc.iter_mut().enumerate() {
                    row[i] = 1.0;
                }
                nc
            },
            anchor: AnchorModel::Gaussian { cov: vec![vec![1.0]] },
            acyclic: true,
        };
        let m = population_moments(&spec).unwrap();
        assert!(max_abs(&(m.joint.clone() - Matrix::identity(k, k))) < 1e-12);
        assert!(max_abs(&m.cross) < 1e-12);

        let (data, h) = gen_anchor_sem(&spec, 5000, 11).unwrap();
        // empirical cross-correlations of independent components stay small
        let (xc, _) = linalg::center_columns(&data.x);
        let yc = data.y.add_scalar(-data.y.mean());
        let c01 = xc.column(0).dot(&xc.column(1)) / 5000.0;
        let cxy = xc.column(0).dot(&yc) / 5000.0;
        assert!(c01.abs() < 0.06 && cxy.abs() < 0.06);
        assert_eq!(h.ncols(), 1);
    }

    #[test]
    fn iv_wiring_matches_structural_zero_pattern() {
        let kappa = Matrix::from_row_slice(1, 2, &[1.0, 0.5]);
        let gamma = Matrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let spec = AnchorSemSpec::iv(
            &[1.0, 0.0],
            &kappa,
            &gamma,
            &[1.0],
            1.0,
            1.0,
            AnchorModel::Gaussian { cov: vec![vec![1.0]] },
        )
        .unwrap();
        // anchors do not load on Y or H
        assert_eq!(spec.m[2][0], 0.0);
        assert_eq!(spec.m[3][0], 0.0);
        let m = population_moments(&spec).unwrap();
        // Cov(A, H) = 0 (exogenous instruments): last block row of cross
        assert_abs_diff_eq!(m.cross[(3, 0)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn empirical_covariance_matches_population_moments() {
        let spec = AnchorSemSpec::random(3, 2, 2, 12);
        let pm = population_moments(&spec).unwrap();
        let n = 10_000;
        let (data, h) = gen_anchor_sem(&spec, n, 12).unwrap();
        let joint = {
            let mut z = Matrix::zeros(n, spec.k());
            z.view_mut((0, 0), (n, 3)).copy_from(&data.x);
            z.set_column(3, &data.y);
            z.view_mut((0, 4), (n, 2)).copy_from(&h);
            z
        };
        let (zc, _) = linalg::center_columns(&joint);
        let emp = zc.transpose() * &zc / n as f64;
        let diff = (&emp - &pm.joint).norm() / pm.joint.norm();
        assert!(diff < 0.10, "relative Frobenius error {diff}");
    }

    #[test]
    fn moments_law_of_large_numbers_tightens() {
        let spec = AnchorSemSpec::random(2, 1, 1, 13);
        let pm = population_moments(&spec).unwrap();
        let err_at = |n: usize| {
            let (data, h) = gen_anchor_sem(&spec, n, 13).unwrap();
            let mut z = Matrix::zeros(n, spec.k());
            z.view_mut((0, 0), (n, 2)).copy_from(&data.x);
            z.set_column(2, &data.y);
            z.set_column(3, &h.column(0));
            let (zc, _) = linalg::center_columns(&z);
            ((zc.transpose() * &zc / n as f64) - &pm.joint).norm() / pm.joint.norm()
        };
        let big = err_at(100_000);
        let small = err_at(2_000);
        assert!(big < 0.02, "error at n = 1e5 is {big}");
        assert!(big < small);
    }

    #[test]
    fn one_factor_dense_cov_is_exact() {
        let p = 4;
        let mut spec = DenseConfoundSpec::new(10, p, 1, 1, 5);
        spec.confounder_loading = Some(vec![vec![1.0, 2.0, -1.0, 0.5]]);
        spec.noise_x_scale = 0.7;
        let cov = spec.population_cov_x().unwrap();
        let g = Matrix::from_row_slice(1, p, &[1.0, 2.0, -1.0, 0.5]);
        let expect = g.transpose() * &g + Matrix::identity(p, p) * 0.49;
        assert!(max_abs(&(cov - expect)) < 1e-14);
    }

    #[test]
    fn deterministic_shift_moves_means_exactly() {
        let spec = AnchorSemSpec::random(2, 1, 2, 14);
        let delta = vec![0.7, -0.3];
        let pert = Perturbation { delta: delta.clone(), stochastic: false, delta_cov: None };
        let n = 60_000;
        let (data, _) = perturb(&spec, &pert, n, 7).unwrap();
        let s = spec.structural_solve().unwrap();
        let m = spec.m_matrix().unwrap();
        let shift = s * (m * DVector::from_row_slice(&delta));
        let mean_x0 = data.x.column(0).mean();
        let mean_y = data.y.mean();
        // 3-sigma Monte-Carlo tolerance
        assert!((mean_x0 - shift[0]).abs() < 0.05, "{mean_x0} vs {shift:?}");
        assert!((mean_y - shift[2]).abs() < 0.05);
    }

    #[test]
    fn zero_delta_matches_unperturbed_no_anchor_system() {
        let spec = AnchorSemSpec::random(2, 1, 1, 15);
        let pert = Perturbation { delta: vec![0.0], stochastic: false, delta_cov: None };
        let (data, _) = perturb(&spec, &pert, 40_000, 3).unwrap();
        // mean should be ~0 within 3 standard errors
        for j in 0..2 {
            let col = data.x.column(j);
            let se = (col.variance() / 40_000.0).sqrt();
            assert!(col.mean().abs() < 3.5 * se);
        }
    }

    #[test]
    fn worst_case_sup_gamma_zero_is_unperturbed_risk() {
        let spec = AnchorSemSpec::random(3, 1, 2, 16);
        let b = DVector::from_row_slice(&[0.3, -0.2, 0.1]);
        let sup0 = worst_case_sup(&spec, &b, 0.0).unwrap();
        // oracle: E[(Y - Xb)^2] with the anchor contribution removed is c0
        let s = spec.structural_solve().unwrap();
        let sigma_eps = spec.noise_matrix().unwrap();
        let mut c = DVector::zeros(spec.k());
        c[0] = -0.3;
        c[1] = 0.2;
        c[2] = -0.1;
        c[3] = 1.0;
        let stc = s.transpose() * &c;
        let c0 = (stc.transpose() * sigma_eps * &stc)[(0, 0)];
        assert_abs_diff_eq!(sup0, c0, epsilon = 1e-10);
    }

    #[test]
    fn worst_case_sup_scalar_anchor_matches_grid_search() {
        let spec = AnchorSemSpec::random(2, 1, 1, 17);
        let b = DVector::from_row_slice(&[0.5, -1.0]);
        for gamma in [0.5, 1.0, 4.0] {
            let closed = worst_case_sup(&spec, &b, gamma).unwrap();
            // brute force over deterministic delta in the constraint set
            let s = spec.structural_solve().unwrap();
            let m = spec.m_matrix().unwrap();
            let sigma_eps = spec.noise_matrix().unwrap();
            let ea2 = spec.anchor_second_moment().unwrap()[(0, 0)];
            let mut c = DVector::zeros(spec.k());
            c[0] = -b[0];
            c[1] = -b[1];
            c[spec.dim_x] = 1.0;
            let stc = s.transpose() * &c;
            let c0 = (stc.transpose() * &sigma_eps * &stc)[(0, 0)];
            let w = (m.transpose() * &stc)[(0, 0)];
            let bound = (gamma * ea2).sqrt();
            let mut best = f64::NEG_INFINITY;
            let grid = 10_001;
            for g in 0..grid {
                let delta = -bound + 2.0 * bound * g as f64 / (grid - 1) as f64;
                best = best.max(c0 + w * w * delta * delta);
            }
            assert_abs_diff_eq!(closed, best, epsilon = 1e-8 * closed.abs().max(1.0));
        }
    }

    #[test]
    fn stochastic_perturbation_risk_stays_under_sup() {
        let spec = AnchorSemSpec::random(2, 1, 1, 18);
        let b = DVector::from_row_slice(&[0.2, 0.4]);
        let gamma = 2.0;
        let sup = worst_case_sup(&spec, &b, gamma).unwrap();
        let ea = spec.anchor_second_moment().unwrap() * gamma;
        let cov: Vec<Vec<f64>> = vec![vec![ea[(0, 0)]]];
        let pert = Perturbation { delta: vec![0.0], stochastic: true, delta_cov: Some(cov) };
        let n = 200_000;
        let (data, _) = perturb(&spec, &pert, n, 4).unwrap();
        let resid = &data.y - &data.x * &b;
        let risk = resid.norm_squared() / n as f64;
        // at the maximizing covariance the sampled risk attains the sup, up to MC error
        assert!((risk - sup).abs() / sup < 0.05, "risk {risk} vs sup {sup}");
    }

    #[test]
    fn environment_anchor_second_moment() {
        let spec = AnchorSemSpec {
            anchor: AnchorModel::Environments { proportions: vec![0.25, 0.75] },
            ..AnchorSemSpec::random(1, 1, 2, 19)
        };
        let sm = spec.anchor_second_moment().unwrap();
        assert_abs_diff_eq!(sm[(0, 0)], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(sm[(1, 1)], 0.75, epsilon = 1e-12);
        let (data, _) = gen_anchor_sem(&spec, 4000, 5).unwrap();
        let a = data.anchors.unwrap();
        for i in 0..4000 {
            assert_abs_diff_eq!(a.row(i).sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn singular_i_minus_b_rejected() {
        let mut spec = AnchorSemSpec::random(1, 1, 1, 20);
        // make I - B singular: X <- Y and Y <- X with unit weights
        spec.b[0][1] = 1.0;
        spec.b[1][0] = 1.0;
        spec.b[1][2] = 0.0;
        spec.b[2][0] = 0.0;
        spec.b[2][1] = 0.0;
        assert!(gen_anchor_sem(&spec, 10, 1).is_err());
    }
}
