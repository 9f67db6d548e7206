//! Replicability and robustness experiments: selection agreement metrics,
//! CI coverage studies, worst-case-MSE curves over the anchor tuning
//! parameter, and leave-one-environment-out selection of that parameter.

use std::collections::BTreeSet;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchor::{self, AnchorConfig, Gamma};
use crate::deconfound::{CvOptions, LambdaChoice};
use crate::error::{Error, Result};
use crate::inference::{self, DdLassoConfig};
use crate::linalg::{Matrix, Vector};
use crate::seeding;
use crate::sem::{self, AnchorSemSpec, DenseConfoundSpec, Perturbation};
use crate::sparse::{self, LassoConfig};
use crate::spectral::{Lambda2, Tau, TransformKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionSet {
    pub indices: BTreeSet<usize>,
    pub source: String,
}

impl SelectionSet {
    pub fn new(indices: impl IntoIterator<Item = usize>, source: impl Into<String>) -> Self {
        SelectionSet { indices: indices.into_iter().collect(), source: source.into() }
    }
}

/// Jaccard distance `1 - |S1 n S2| / |S1 u S2|`; two empty sets agree
/// perfectly (distance 0).
pub fn jaccard(s1: &SelectionSet, s2: &SelectionSet) -> f64 {
    let union = s1.indices.union(&s2.indices).count();
    if union == 0 {
        return 0.0;
    }
    let inter = s1.indices.intersection(&s2.indices).count();
    1.0 - inter as f64 / union as f64
}

fn top_k_indices(coef: &Vector, k: usize) -> BTreeSet<usize> {
    let mut order: Vec<usize> = (0..coef.len()).collect();
    // descending magnitude, smaller index wins ties
    order.sort_by(|&i, &j| {
        coef[j]
            .abs()
            .partial_cmp(&coef[i].abs())
            .unwrap()
            .then(i.cmp(&j))
    });
    order.into_iter().take(k).collect()
}

/// Size of the intersection of the top-K magnitude coordinates.
pub fn topk_overlap(coef1: &Vector, coef2: &Vector, k: usize) -> Result<usize> {
    if coef1.len() != coef2.len() {
        return Err(Error::invalid("coefficient vectors differ in length"));
    }
    if k == 0 || k > coef1.len() {
        return Err(Error::invalid("K must satisfy 1 <= K <= p"));
    }
    let t1 = top_k_indices(coef1, k);
    let t2 = top_k_indices(coef2, k);
    Ok(t1.intersection(&t2).count())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricTable {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// Every number lives in a (condition, replicate-aggregate) cell of one of
/// the tables. Wall-clock time is kept out of the serialized form so that
/// reports are reproducible bit-for-bit from (config, seed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub replicates: usize,
    pub tables: Vec<MetricTable>,
    pub flags: Vec<String>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicabilityConfig {
    /// Two generating systems sharing the sparse coefficient vector.
    pub spec_a: DenseConfoundSpec,
    pub spec_b: DenseConfoundSpec,
    pub support_sizes: Vec<usize>,
    pub replicates: usize,
    pub grid_size: usize,
    pub seed: u64,
}

const METHODS: [&str; 3] = ["plain", "trim", "lava"];

/// Active set of the first point along a descending path whose support
/// reaches `k`; the last point if none does.
fn select_k(fits: &[sparse::SparseFit], k: usize) -> BTreeSet<usize> {
    for f in fits {
        if f.active_set().len() >= k {
            return f.active_set().into_iter().collect();
        }
    }
    fits.last().map(|f| f.active_set().into_iter().collect()).unwrap_or_default()
}

fn method_path(
    method: &str,
    x: &Matrix,
    y: &Vector,
    grid_size: usize,
) -> Result<Vec<sparse::SparseFit>> {
    let (design, target, center) = match method {
        "plain" => (x.clone(), y.clone(), true),
        "trim" => {
            let t = crate::spectral::fit_transform(x, TransformKind::Trim(Tau::Median))?;
            let yt = t
                .apply(&Matrix::from_column_slice(y.len(), 1, y.as_slice()))?
                .column(0)
                .into_owned();
            (t.apply(x)?, yt, true)
        }
        "lava" => {
            let t = crate::spectral::fit_transform(x, TransformKind::Lava(Lambda2::MedianRule))?;
            let yt = t
                .apply(&Matrix::from_column_slice(y.len(), 1, y.as_slice()))?
                .column(0)
                .into_owned();
            (t.apply(x)?, yt, false)
        }
        _ => return Err(Error::invalid(format!("unknown method {method}"))),
    };
    let grid = sparse::default_grid(&design, &target, grid_size, 0.01);
    let cfg = LassoConfig { standardize: center, ..Default::default() };
    sparse::lasso_path(&design, &target, &grid, &cfg)
}

/// Selection agreement between two datasets drawn from systems that share
/// the sparse signal: mean Jaccard distance per method and support size.
pub fn replicability_experiment(cfg: &ReplicabilityConfig) -> Result<ExperimentReport> {
    if cfg.spec_a.p != cfg.spec_b.p {
        return Err(Error::invalid("paired systems must share p"));
    }
    if cfg.replicates == 0 || cfg.support_sizes.is_empty() {
        return Err(Error::invalid("need replicates >= 1 and a support-size list"));
    }
    let start = Instant::now();
    let per_rep: Vec<Vec<Vec<f64>>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|rep| -> Result<Vec<Vec<f64>>> {
            let mut sa = cfg.spec_a.clone();
            sa.seed = seeding::sub_seed(cfg.seed, 2 * rep as u64);
            let mut sb = cfg.spec_b.clone();
            sb.seed = seeding::sub_seed(cfg.seed, 2 * rep as u64 + 1);
            let (da, _) = sem::gen_dense_confounded(&sa)?;
            let (db, _) = sem::gen_dense_confounded(&sb)?;
            let mut out = Vec::new();
            for method in METHODS {
                let pa = method_path(method, &da.x, &da.y, cfg.grid_size)?;
                let pb = method_path(method, &db.x, &db.y, cfg.grid_size)?;
                let row: Vec<f64> = cfg
                    .support_sizes
                    .iter()
                    .map(|&k| {
                        let s1 = SelectionSet::new(select_k(&pa, k), method);
                        let s2 = SelectionSet::new(select_k(&pb, k), method);
                        jaccard(&s1, &s2)
                    })
                    .collect();
                out.push(row);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut tables = Vec::new();
    for (mi, method) in METHODS.iter().enumerate() {
        let rows: Vec<Vec<f64>> = cfg
            .support_sizes
            .iter()
            .enumerate()
            .map(|(ki, &k)| {
                let mean: f64 = per_rep.iter().map(|r| r[mi][ki]).sum::<f64>()
                    / cfg.replicates as f64;
                vec![k as f64, mean]
            })
            .collect();
        tables.push(MetricTable {
            name: format!("jaccard_{method}"),
            columns: vec!["k".into(), "mean_jaccard_distance".into()],
            rows,
        });
    }
    Ok(ExperimentReport {
        experiment: "replicability".into(),
        config: serde_json::to_value(cfg).expect("config serialization"),
        seed: cfg.seed,
        replicates: cfg.replicates,
        tables,
        flags: Vec::new(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageConfig {
    pub spec: DenseConfoundSpec,
    pub coords: Vec<usize>,
    pub replicates: usize,
    pub level: f64,
    pub cv_folds: usize,
    pub cv_grid_size: usize,
    pub seed: u64,
}

fn dd_cfg(cfg: &CoverageConfig, kind: TransformKind) -> DdLassoConfig {
    // the grid floor stops well above the near-saturated (slowest) fits;
    // CV minima in this regime sit far from the boundary anyway
    let cv = CvOptions {
        folds: cfg.cv_folds,
        grid_size: cfg.cv_grid_size,
        grid_min_ratio: 0.05,
        ..Default::default()
    };
    DdLassoConfig {
        transform_y_reg: kind,
        transform_nodewise: kind,
        lambda_y: LambdaChoice::Cv(cv.clone()),
        lambda_nodewise: LambdaChoice::Cv(cv),
        confidence_level: cfg.level,
    }
}

/// Empirical coverage and rejection rates of the doubly debiased Lasso
/// against the uncorrected debiased Lasso.
pub fn coverage_experiment(cfg: &CoverageConfig) -> Result<ExperimentReport> {
    if cfg.replicates == 0 || cfg.coords.is_empty() {
        return Err(Error::invalid("need replicates >= 1 and coordinates"));
    }
    let start = Instant::now();
    let truth = cfg.spec.beta0_vector()?;
    for &j in &cfg.coords {
        if j >= cfg.spec.p {
            return Err(Error::invalid(format!("coordinate {j} out of range")));
        }
    }
    let dd = dd_cfg(cfg, TransformKind::Trim(Tau::Median));
    let deb = dd_cfg(cfg, TransformKind::Identity);
    // per replicate, per coordinate: (dd covers, dd rejects, deb covers, deb rejects)
    let per_rep: Vec<Vec<[f64; 4]>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|rep| -> Result<Vec<[f64; 4]>> {
            let mut spec = cfg.spec.clone();
            spec.seed = seeding::sub_seed(cfg.seed, rep as u64);
            let (data, tr) = sem::gen_dense_confounded(&spec)?;
            let dd_res = inference::dd_lasso_all(&data.x, &data.y, &cfg.coords, &dd)?;
            let deb_res = inference::dd_lasso_all(&data.x, &data.y, &cfg.coords, &deb)?;
            Ok(cfg
                .coords
                .iter()
                .enumerate()
                .map(|(ci, &j)| {
                    let t = tr.beta0[j];
                    let a = &dd_res[ci];
                    let b = &deb_res[ci];
                    [
                        f64::from(a.ci_low <= t && t <= a.ci_high),
                        f64::from(a.p_value < 1.0 - cfg.level),
                        f64::from(b.ci_low <= t && t <= b.ci_high),
                        f64::from(b.p_value < 1.0 - cfg.level),
                    ]
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let n = cfg.replicates as f64;
    let rows: Vec<Vec<f64>> = cfg
        .coords
        .iter()
        .enumerate()
        .map(|(ci, &j)| {
            let sum = per_rep.iter().fold([0.0; 4], |mut acc, r| {
                for (a, v) in acc.iter_mut().zip(r[ci].iter()) {
                    *a += v;
                }
                acc
            });
            vec![
                j as f64,
                truth[j],
                sum[0] / n,
                sum[1] / n,
                sum[2] / n,
                sum[3] / n,
            ]
        })
        .collect();
    let mut flags = Vec::new();
    if cfg.replicates == 1 {
        flags.push("wide-uncertainty: single replicate".into());
    }
    Ok(ExperimentReport {
        experiment: "coverage".into(),
        config: serde_json::to_value(cfg).expect("config serialization"),
        seed: cfg.seed,
        replicates: cfg.replicates,
        tables: vec![MetricTable {
            name: "coverage".into(),
            columns: vec![
                "coord".into(),
                "truth".into(),
                "dd_coverage".into(),
                "dd_rejection".into(),
                "debiased_coverage".into(),
                "debiased_rejection".into(),
            ],
            rows,
        }],
        flags,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessConfig {
    pub spec: AnchorSemSpec,
    pub gammas: Vec<f64>,
    pub strengths: Vec<f64>,
    pub n_train: usize,
    pub n_test: usize,
    pub perturbations_per_strength: usize,
    pub seed: u64,
}

/// Worst empirical test MSE over sampled shift perturbations of each
/// strength, for each anchor fit on the gamma grid; also reports the best
/// grid gamma per strength.
pub fn robustness_curve(cfg: &RobustnessConfig) -> Result<ExperimentReport> {
    if cfg.gammas.is_empty() || cfg.strengths.is_empty() {
        return Err(Error::invalid("need non-empty gamma and strength grids"));
    }
    let start = Instant::now();
    let (train, _) = sem::gen_anchor_sem(&cfg.spec, cfg.n_train, seeding::sub_seed(cfg.seed, 0))?;
    let a = train.anchors.as_ref().expect("generator returns anchors");
    let fits: Vec<Vector> = cfg
        .gammas
        .iter()
        .map(|&g| {
            Ok(anchor::anchor_fit(&train.x, &train.y, a, &AnchorConfig::new(Gamma::Finite(g)))?
                .beta)
        })
        .collect::<Result<_>>()?;
    let aa = cfg.spec.anchor_second_moment()?;
    let r = cfg.spec.r();
    // deterministic boundary shifts delta = sqrt(strength) L u, ||u|| = 1
    let l = {
        let eig = nalgebra::SymmetricEigen::new(aa.clone());
        let mut f = eig.eigenvectors.clone();
        for (i, mut col) in f.column_iter_mut().enumerate() {
            col *= eig.eigenvalues[i].max(0.0).sqrt();
        }
        f
    };
    let mut rows = Vec::new();
    let mut best_rows = Vec::new();
    for (si, &strength) in cfg.strengths.iter().enumerate() {
        let mut worst = vec![0.0_f64; cfg.gammas.len()];
        let draws = if strength == 0.0 { 1 } else { cfg.perturbations_per_strength };
        let per_draw: Vec<Vec<f64>> = (0..draws)
            .into_par_iter()
            .map(|d| -> Result<Vec<f64>> {
                let seed = seeding::sub_seed(cfg.seed, 1 + (si * cfg.perturbations_per_strength + d) as u64);
                let delta: Vec<f64> = if strength == 0.0 {
                    vec![0.0; r]
                } else {
                    use rand_distr::{Distribution, StandardNormal};
                    let mut rng = seeding::rng(seed);
                    let u = Vector::from_fn(r, |_, _| StandardNormal.sample(&mut rng));
                    let u = &u / u.norm();
                    (&l * u * strength.sqrt()).iter().copied().collect()
                };
                let pert = Perturbation { delta, stochastic: false, delta_cov: None };
                let (test, _) = sem::perturb(&cfg.spec, &pert, cfg.n_test, seed)?;
                Ok(fits
                    .iter()
                    .map(|b| (&test.y - &test.x * b).norm_squared() / cfg.n_test as f64)
                    .collect())
            })
            .collect::<Result<_>>()?;
        for mses in &per_draw {
            for (w, &m) in worst.iter_mut().zip(mses.iter()) {
                *w = w.max(m);
            }
        }
        for (gi, &g) in cfg.gammas.iter().enumerate() {
            rows.push(vec![strength, g, worst[gi]]);
        }
        let best = (0..cfg.gammas.len())
            .min_by(|&i, &j| worst[i].partial_cmp(&worst[j]).unwrap())
            .expect("non-empty grid");
        best_rows.push(vec![strength, cfg.gammas[best], worst[best]]);
    }
    Ok(ExperimentReport {
        experiment: "robustness".into(),
        config: serde_json::to_value(cfg).expect("config serialization"),
        seed: cfg.seed,
        replicates: cfg.perturbations_per_strength,
        tables: vec![
            MetricTable {
                name: "worst_mse".into(),
                columns: vec!["strength".into(), "gamma".into(), "worst_test_mse".into()],
                rows,
            },
            MetricTable {
                name: "best_gamma_per_strength".into(),
                columns: vec!["strength".into(), "gamma".into(), "worst_test_mse".into()],
                rows: best_rows,
            },
        ],
        flags: Vec::new(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone)]
pub struct LoeoResult {
    pub selected_gamma: f64,
    /// (gamma, worst left-out MSE) per grid point.
    pub profile: Vec<(f64, f64)>,
    pub degenerate_grid: bool,
}

/// Leave-one-environment-out selection of the anchor tuning parameter:
/// fit on all but one environment with dummy anchors, score on the left-out
/// one; pick the gamma minimizing the worst left-out MSE, ties to the
/// larger gamma.
pub fn loeo_gamma(environments: &[(Matrix, Vector)], gammas: &[f64]) -> Result<LoeoResult> {
    if environments.len() < 2 {
        return Err(Error::invalid("need at least two environments"));
    }
    if gammas.is_empty() {
        return Err(Error::invalid("gamma grid must be non-empty"));
    }
    let p = environments[0].0.ncols();
    if environments.iter().any(|(x, y)| x.ncols() != p || x.nrows() != y.len()) {
        return Err(Error::invalid("environments must share p and have matching rows"));
    }
    let m = environments.len();
    let mut profile = Vec::with_capacity(gammas.len());
    for &g in gammas {
        let mut worst = f64::NEG_INFINITY;
        for left_out in 0..m {
            let keep: Vec<usize> = (0..m).filter(|&e| e != left_out).collect();
            let n_train: usize = keep.iter().map(|&e| environments[e].0.nrows()).sum();
            let mut x = Matrix::zeros(n_train, p);
            let mut y = Vector::zeros(n_train);
            let mut a = Matrix::zeros(n_train, keep.len());
            let mut row = 0;
            for (ei, &e) in keep.iter().enumerate() {
                let (xe, ye) = &environments[e];
                for i in 0..xe.nrows() {
                    x.row_mut(row).copy_from(&xe.row(i));
                    y[row] = ye[i];
                    a[(row, ei)] = 1.0;
                    row += 1;
                }
            }
            let fit = anchor::anchor_fit(&x, &y, &a, &AnchorConfig::new(Gamma::Finite(g)))?;
            let (xt, yt) = &environments[left_out];
            let mse = (yt - xt * &fit.beta).norm_squared() / yt.len() as f64;
            worst = worst.max(mse);
        }
        profile.push((g, worst));
    }
    // scan in grid order; ">=" keeps later (larger) gammas on ties
    let mut best = 0;
    let mut sorted: Vec<usize> = (0..gammas.len()).collect();
    sorted.sort_by(|&i, &j| gammas[i].partial_cmp(&gammas[j]).unwrap());
    let mut best_val = f64::INFINITY;
    for &i in &sorted {
        if profile[i].1 <= best_val {
            best_val = profile[i].1;
            best = i;
        }
    }
    Ok(LoeoResult {
        selected_gamma: gammas[best],
        profile,
        degenerate_grid: gammas.len() == 1,
    })
}
