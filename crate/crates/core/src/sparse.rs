//! Coordinate-descent Lasso with a KKT-certificate convergence criterion,
//! warm-started regularization paths, K-fold cross-validation and stability
//! selection.
//!
//! Objective convention (fixed across the whole crate):
//! `||Y - X beta||_2^2 / n + lambda * ||beta||_1`,
//! whose KKT conditions give `lambda_max = 2 ||X^T (Y - mean(Y))||_inf / n`.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::seeding;

#[derive(Debug, Clone)]
pub struct LassoConfig {
    pub lambda: f64,
    pub max_iter: usize,
    pub tol: f64,
    /// Center Y and the columns of X before solving; the intercept is
    /// reported separately. Variance scaling is deliberately not done.
    pub standardize: bool,
}

impl Default for LassoConfig {
    fn default() -> Self {
        LassoConfig { lambda: 0.0, max_iter: 1000, tol: 1e-7, standardize: true }
    }
}

impl LassoConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        LassoConfig { lambda, ..Default::default() }
    }
}

#[derive(Debug, Clone)]
pub struct SparseFit {
    pub beta: Vector,
    pub intercept: f64,
    pub lambda: f64,
    pub objective: f64,
    pub n_iter: usize,
    pub converged: bool,
}

impl SparseFit {
    pub fn active_set(&self) -> Vec<usize> {
        self.beta
            .iter()
            .enumerate()
            .filter(|(_, &b)| b != 0.0)
            .map(|(j, _)| j)
            .collect()
    }

    pub fn predict(&self, x: &Matrix) -> Vector {
        let mut out = x * &self.beta;
        out.add_scalar_mut(self.intercept);
        out
    }
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub lambda_grid: Vec<f64>,
    pub mean_cv_error: Vec<f64>,
    pub se: Vec<f64>,
    pub lambda_min: f64,
    pub lambda_1se: f64,
    pub folds: usize,
}

#[derive(Debug, Clone)]
pub struct StabilityResult {
    pub frequencies: Vec<f64>,
    pub threshold: f64,
    pub selected: Vec<usize>,
    pub subsamples: usize,
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// `lambda_max = 2 ||X^T (Y - mean(Y))||_inf / n` on centered data.
pub fn lambda_max(x: &Matrix, y: &Vector) -> f64 {
    let n = x.nrows() as f64;
    let (xc, _) = linalg::center_columns(x);
    let yc = y.add_scalar(-y.mean());
    xc.column_iter()
        .map(|c| 2.0 * c.dot(&yc).abs() / n)
        .fold(0.0f64, f64::max)
}

/// Default grid: `grid_size` log-spaced values from `lambda_max` down to
/// `min_ratio * lambda_max`, strictly descending.
pub fn default_grid(x: &Matrix, y: &Vector, grid_size: usize, min_ratio: f64) -> Vec<f64> {
    let lmax = lambda_max(x, y).max(f64::MIN_POSITIVE);
    if grid_size == 1 {
        return vec![lmax];
    }
    let lmin = lmax * min_ratio;
    let step = (lmin.ln() - lmax.ln()) / (grid_size - 1) as f64;
    (0..grid_size).map(|k| (lmax.ln() + step * k as f64).exp()).collect()
}

/// Max violation of the stationarity conditions at `beta`, recomputed from
/// scratch; the independent certificate the solver is checked against.
pub fn kkt_violation(xc: &Matrix, yc: &Vector, beta: &Vector, lambda: f64) -> f64 {
    let n = xc.nrows() as f64;
    let r = yc - xc * beta;
    let mut worst = 0.0f64;
    for (j, col) in xc.column_iter().enumerate() {
        let g = 2.0 * col.dot(&r) / n;
        let v = if beta[j] == 0.0 {
            (g.abs() - lambda).max(0.0)
        } else {
            (g - lambda * beta[j].signum()).abs()
        };
        worst = worst.max(v);
    }
    worst
}

struct Centered {
    xc: Matrix,
    yc: Vector,
    x_means: Vector,
    y_mean: f64,
}

fn center(x: &Matrix, y: &Vector, standardize: bool) -> Centered {
    if standardize {
        let (xc, x_means) = linalg::center_columns(x);
        let y_mean = y.mean();
        Centered { xc, yc: y.add_scalar(-y_mean), x_means, y_mean }
    } else {
        Centered {
            xc: x.clone(),
            yc: y.clone(),
            x_means: DVector::zeros(x.ncols()),
            y_mean: 0.0,
        }
    }
}

fn sweep_coords(
    xc: &Matrix,
    r: &mut Vector,
    beta: &mut Vector,
    lambda: f64,
    n: f64,
    col_ssq: &[f64],
    coords: &[usize],
) {
    for &j in coords {
        if col_ssq[j] == 0.0 {
            continue;
        }
        let col = xc.column(j);
        let old = beta[j];
        let z = col.dot(&*r) / n + col_ssq[j] * old;
        let new = soft_threshold(z, lambda / 2.0) / col_ssq[j];
        if new != old {
            r.axpy(old - new, &col, 1.0);
            beta[j] = new;
        }
    }
}

/// KKT violation over `coords` using a maintained residual.
fn kkt_with_residual(
    xc: &Matrix,
    r: &Vector,
    beta: &Vector,
    lambda: f64,
    n: f64,
    coords: &[usize],
) -> f64 {
    let mut worst = 0.0f64;
    for &j in coords {
        let g = 2.0 * xc.column(j).dot(r) / n;
        let v = if beta[j] == 0.0 {
            (g.abs() - lambda).max(0.0)
        } else {
            (g - lambda * beta[j].signum()).abs()
        };
        worst = worst.max(v);
    }
    worst
}

fn coordinate_descent(
    xc: &Matrix,
    yc: &Vector,
    lambda: f64,
    cfg: &LassoConfig,
    beta: &mut Vector,
) -> (usize, bool) {
    let n = xc.nrows() as f64;
    let p = xc.ncols();
    let col_ssq: Vec<f64> = xc.column_iter().map(|c| c.norm_squared() / n).collect();
    let all: Vec<usize> = (0..p).collect();
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < cfg.max_iter {
        // fresh residual bounds drift from the incremental updates below
        let mut r = yc - xc * &*beta;
        sweeps += 1;
        sweep_coords(xc, &mut r, beta, lambda, n, &col_ssq, &all);
        // iterate on the active set only until it is internally converged
        let active: Vec<usize> = (0..p).filter(|&j| beta[j] != 0.0).collect();
        while sweeps < cfg.max_iter {
            sweeps += 1;
            sweep_coords(xc, &mut r, beta, lambda, n, &col_ssq, &active);
            if kkt_with_residual(xc, &r, beta, lambda, n, &active) <= cfg.tol {
                break;
            }
        }
        if kkt_with_residual(xc, &r, beta, lambda, n, &all) <= cfg.tol {
            converged = true;
            break;
        }
    }
    (sweeps, converged)
}

fn finish_fit(c: &Centered, beta: Vector, lambda: f64, n_iter: usize, converged: bool) -> SparseFit {
    let n = c.xc.nrows() as f64;
    let r = &c.yc - &c.xc * &beta;
    let objective = r.norm_squared() / n + lambda * beta.iter().map(|b| b.abs()).sum::<f64>();
    let intercept = c.y_mean - c.x_means.dot(&beta);
    SparseFit { beta, intercept, lambda, objective, n_iter, converged }
}

/// Lasso fit at a single `cfg.lambda`. With `lambda = 0` the problem is
/// solved exactly by least squares and requires a full-column-rank design.
pub fn lasso(x: &Matrix, y: &Vector, cfg: &LassoConfig) -> Result<SparseFit> {
    if x.nrows() != y.len() {
        return Err(Error::invalid("X and Y row counts differ"));
    }
    if cfg.lambda < 0.0 {
        return Err(Error::invalid("lambda must be >= 0"));
    }
    let c = center(x, y, cfg.standardize);
    if cfg.lambda == 0.0 {
        let f = linalg::svd(&c.xc)?;
        let tol = linalg::default_rank_tol(x.nrows(), x.ncols());
        if f.d[0] == 0.0 || f.rank(tol) < x.ncols() {
            return Err(Error::degenerate(
                "lambda = 0 requires a full-column-rank design",
            ));
        }
        let beta = linalg::pseudo_solve(
            &c.xc,
            &Matrix::from_column_slice(y.len(), 1, c.yc.as_slice()),
            tol,
        )?
        .column(0)
        .into_owned();
        return Ok(finish_fit(&c, beta, 0.0, 1, true));
    }
    let mut beta = DVector::zeros(x.ncols());
    let (n_iter, converged) = coordinate_descent(&c.xc, &c.yc, cfg.lambda, cfg, &mut beta);
    Ok(finish_fit(&c, beta, cfg.lambda, n_iter, converged))
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::invalid("empty lambda grid"));
    }
    for w in grid.windows(2) {
        if w[1] >= w[0] {
            return Err(Error::invalid("lambda grid must be strictly descending"));
        }
    }
    if grid.iter().any(|&l| l < 0.0) {
        return Err(Error::invalid("lambda values must be >= 0"));
    }
    Ok(())
}

/// Warm-started fits along a strictly descending grid.
pub fn lasso_path(x: &Matrix, y: &Vector, grid: &[f64], cfg: &LassoConfig) -> Result<Vec<SparseFit>> {
    check_grid(grid)?;
    let c = center(x, y, cfg.standardize);
    let mut beta = DVector::zeros(x.ncols());
    let mut out = Vec::with_capacity(grid.len());
    for &lambda in grid {
        if lambda == 0.0 {
            let mut cfg0 = cfg.clone();
            cfg0.lambda = 0.0;
            out.push(lasso(x, y, &cfg0)?);
            continue;
        }
        let (n_iter, converged) = coordinate_descent(&c.xc, &c.yc, lambda, cfg, &mut beta);
        out.push(finish_fit(&c, beta.clone(), lambda, n_iter, converged));
    }
    Ok(out)
}

fn take_rows(m: &Matrix, rows: &[usize]) -> Matrix {
    Matrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

fn take_entries(v: &Vector, rows: &[usize]) -> Vector {
    DVector::from_iterator(rows.len(), rows.iter().map(|&i| v[i]))
}

/// K-fold cross-validation over a lambda grid. The fold partition is a
/// seed-deterministic shuffle; errors are held-out mean squared prediction
/// errors on the supplied (already transformed, if applicable) data.
pub fn cv_lasso(
    x: &Matrix,
    y: &Vector,
    folds: usize,
    grid: &[f64],
    cfg: &LassoConfig,
    seed: u64,
) -> Result<CvResult> {
    check_grid(grid)?;
    let n = x.nrows();
    if folds < 2 {
        return Err(Error::invalid("need at least 2 folds"));
    }
    if n < folds {
        return Err(Error::invalid("more folds than rows"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut seeding::rng(seed));
    let fold_of: Vec<usize> = {
        let mut f = vec![0usize; n];
        for (pos, &row) in order.iter().enumerate() {
            f[row] = pos % folds;
        }
        f
    };

    let per_fold: Vec<Vec<f64>> = (0..folds)
        .into_par_iter()
        .map(|k| {
            let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != k).collect();
            let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == k).collect();
            let xtr = take_rows(x, &train);
            let ytr = take_entries(y, &train);
            let xte = take_rows(x, &test);
            let yte = take_entries(y, &test);
            let fits = lasso_path(&xtr, &ytr, grid, cfg).expect("grid validated");
            fits.iter()
                .map(|fit| {
                    let pred = fit.predict(&xte);
                    (&yte - pred).norm_squared() / test.len() as f64
                })
                .collect()
        })
        .collect();

    let mut mean = vec![0.0; grid.len()];
    let mut se = vec![0.0; grid.len()];
    for (li, m) in mean.iter_mut().enumerate() {
        let vals: Vec<f64> = per_fold.iter().map(|f| f[li]).collect();
        let mu = vals.iter().sum::<f64>() / folds as f64;
        let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (folds - 1) as f64;
        *m = mu;
        se[li] = (var / folds as f64).sqrt();
    }

    let min_idx = (0..grid.len())
        .min_by(|&a, &b| mean[a].partial_cmp(&mean[b]).unwrap())
        .unwrap();
    let bar = mean[min_idx] + se[min_idx];
    // grid is descending, so the first index within one se has the largest lambda
    let idx_1se = (0..grid.len()).find(|&i| mean[i] <= bar).unwrap_or(min_idx);

    Ok(CvResult {
        lambda_grid: grid.to_vec(),
        mean_cv_error: mean,
        se,
        lambda_min: grid[min_idx],
        lambda_1se: grid[idx_1se],
        folds,
    })
}

/// Stability selection: selection frequencies over seed-deterministic
/// half-sample draws; a variable counts as selected in a draw when it enters
/// the path's active set at any grid value.
pub fn stability_selection(
    x: &Matrix,
    y: &Vector,
    grid: &[f64],
    subsamples: usize,
    threshold: f64,
    cfg: &LassoConfig,
    seed: u64,
) -> Result<StabilityResult> {
    check_grid(grid)?;
    if subsamples < 2 {
        return Err(Error::invalid("need at least 2 subsamples"));
    }
    if !(threshold > 0.5 && threshold <= 1.0) {
        return Err(Error::invalid("threshold must lie in (0.5, 1]"));
    }
    let n = x.nrows();
    let p = x.ncols();
    let half = n / 2;
    if half == 0 {
        return Err(Error::invalid("too few rows to subsample"));
    }

    let counts: Vec<Vec<bool>> = (0..subsamples)
        .into_par_iter()
        .map(|s| {
            let mut rng = seeding::sub_rng(seed, s as u64);
            use rand::seq::SliceRandom;
            let mut rows: Vec<usize> = (0..n).collect();
            rows.shuffle(&mut rng);
            rows.truncate(half);
            let xs = take_rows(x, &rows);
            let ys = take_entries(y, &rows);
            let fits = lasso_path(&xs, &ys, grid, cfg).expect("grid validated");
            let mut hit = vec![false; p];
            for fit in &fits {
                for j in fit.active_set() {
                    hit[j] = true;
                }
            }
            hit
        })
        .collect();

    let mut frequencies = vec![0.0; p];
    for hit in &counts {
        for (j, &h) in hit.iter().enumerate() {
            if h {
                frequencies[j] += 1.0;
            }
        }
    }
    for f in &mut frequencies {
        *f /= subsamples as f64;
    }
    let selected = frequencies
        .iter()
        .enumerate()
        .filter(|(_, &f)| f >= threshold)
        .map(|(j, _)| j)
        .collect();
    Ok(StabilityResult { frequencies, threshold, selected, subsamples })
}
