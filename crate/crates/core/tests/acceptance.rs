//! Acceptance gate: one test per release criterion, each printing a single
//! pass/fail line. Numeric tolerances are part of the contract; Monte-Carlo
//! checks use fixed seeds and are deterministic.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;

use approx::assert_abs_diff_eq;
use nalgebra::DVector;
use rayon::prelude::*;

use deconfound::anchor::{self, AnchorConfig, Gamma};
use deconfound::deconfound as pipelines;
use deconfound::deconfound::{CvOptions, LambdaChoice};
use deconfound::linalg::{self, Matrix, Vector};
use deconfound::metrics::{self, ReplicabilityConfig};
use deconfound::seeding;
use deconfound::sem::{self, AnchorSemSpec, DenseConfoundSpec};
use deconfound::sparse::{self, LassoConfig};
use deconfound::spectral::{self, Lambda2, Tau, TransformKind};
use deconfound::testutil::randn_matrix;

fn criterion<F: FnOnce() + std::panic::UnwindSafe>(name: &str, body: F) {
    let result = catch_unwind(AssertUnwindSafe(body));
    match &result {
        Ok(()) => println!("acceptance [{name}]: PASS"),
        Err(_) => println!("acceptance [{name}]: FAIL"),
    }
    if let Err(e) = result {
        std::panic::resume_unwind(e);
    }
}

fn l1(v: &Vector) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

// 1: with p < n full-rank X and no l1 penalty, any strictly positive
// shrink profile leaves the least-squares coefficients unchanged.
#[test]
fn criterion_1_unpenalized_transform_invariance() {
    criterion("1 transform-invariance at lambda 0", || {
        let (x, _) = linalg::center_columns(&randn_matrix(60, 8, 1));
        let beta = randn_matrix(8, 1, 2).column(0).into_owned();
        let y_raw = &x * &beta + randn_matrix(60, 1, 3).column(0) * 0.4;
        let y = y_raw.add_scalar(-y_raw.mean());
        let raw =
            linalg::pseudo_solve(&x, &Matrix::from_column_slice(60, 1, y.as_slice()), 1e-12)
                .unwrap();
        let d = linalg::svd(&x).unwrap().d;
        let kinds = [
            TransformKind::Trim(Tau::Median),
            TransformKind::Trim(Tau::Value(0.5 * d[7])),
            TransformKind::Lava(Lambda2::Value(0.3)),
            TransformKind::Lava(Lambda2::MedianRule),
        ];
        for kind in kinds {
            let t = spectral::fit_transform(&x, kind).unwrap();
            let xt = t.apply(&x).unwrap();
            let yt = t
                .apply(&Matrix::from_column_slice(60, 1, y.as_slice()))
                .unwrap();
            let got = linalg::pseudo_solve(&xt, &yt, 1e-12).unwrap();
            for j in 0..8 {
                assert_abs_diff_eq!(got[(j, 0)], raw[(j, 0)], epsilon = 1e-8);
            }
        }
    });
}

// 2: the transformed-Lasso route solves the joint sparse-plus-dense
// objective; checked against cold-start alternating minimization.
#[test]
fn criterion_2_lava_equivalence() {
    criterion("2 lava joint-objective equivalence", || {
        for seed in 0..5u64 {
            let x = randn_matrix(50, 20, 10 + seed);
            let mut beta = DVector::zeros(20);
            beta[1] = 1.5;
            beta[7] = -1.0;
            let y = &x * &beta + randn_matrix(50, 1, 20 + seed).column(0) * 0.5;
            let (l1p, l2) = (0.3, 0.4);
            let fit = pipelines::lava(&x, &y, l1p, Lambda2::Value(l2)).unwrap();
            // oracle: alternate exact ridge and lasso steps on the joint form
            let n = 50.0;
            let gram = x.transpose() * &x / n + Matrix::identity(20, 20) * l2;
            let chol = gram.cholesky().unwrap();
            let mut b_s = DVector::zeros(20);
            let mut b_d = DVector::zeros(20);
            for _ in 0..400 {
                b_d = chol.solve(&(x.transpose() * (&y - &x * &b_s) / n));
                let cfg = LassoConfig {
                    lambda: l1p,
                    standardize: false,
                    tol: 1e-10,
                    ..Default::default()
                };
                b_s = sparse::lasso(&x, &(&y - &x * &b_d), &cfg).unwrap().beta;
            }
            for j in 0..20 {
                assert_abs_diff_eq!(fit.beta[j], b_s[j], epsilon = 1e-6);
                assert_abs_diff_eq!(fit.dense_part.as_ref().unwrap()[j], b_d[j], epsilon = 1e-6);
            }
        }
    });
}

// 3: the population worst-case risk over the shift class equals the
// two-term anchor objective; scalar case cross-checked by grid search.
#[test]
fn criterion_3_worst_case_identity() {
    criterion("3 worst-case risk identity", || {
        for seed in 0..5u64 {
            let spec = AnchorSemSpec::random(2 + (seed % 3) as usize, 2, 1 + (seed % 2) as usize, 30 + seed);
            let m = sem::population_moments(&spec).unwrap();
            let p = spec.dim_x;
            for bs in 0..10u64 {
                let b = randn_matrix(p, 1, 100 * seed + bs).column(0).into_owned();
                for &g in &[0.5, 1.0, 4.0] {
                    let sup = sem::worst_case_sup(&spec, &b, g).unwrap();
                    let obj = anchor::population_anchor_objective(&m, &b, g).unwrap();
                    assert_abs_diff_eq!(sup, obj, epsilon = 1e-6);
                }
            }
        }
        // scalar-anchor grid oracle
        let spec = AnchorSemSpec::random(2, 1, 1, 77);
        let s = spec.structural_solve().unwrap();
        let mm = spec.m_matrix().unwrap();
        let noise = spec.noise_matrix().unwrap();
        let aa = spec.anchor_second_moment().unwrap()[(0, 0)];
        let b = DVector::from_row_slice(&[0.4, -1.2]);
        let mut c = DVector::zeros(spec.k());
        c[0] = -b[0];
        c[1] = -b[1];
        c[2] = 1.0;
        let stc = s.transpose() * &c;
        let c0 = (noise * &stc).dot(&stc);
        let w = (mm.transpose() * &stc)[0];
        for &g in &[0.5, 2.0, 9.0] {
            let bound = (g * aa).sqrt();
            let mut best = f64::NEG_INFINITY;
            let steps = 4000;
            for i in 0..=steps {
                let delta = -bound + 2.0 * bound * i as f64 / steps as f64;
                best = best.max(c0 + (w * delta) * (w * delta));
            }
            let sup = sem::worst_case_sup(&spec, &b, g).unwrap();
            assert_abs_diff_eq!(sup, best, epsilon = 1e-8);
        }
    });
}

// 4: the projected-limit parameter computed from unperturbed population
// moments equals the one from any shift-perturbed system's moments when
// the rank condition holds; a constructed violation is flagged.
#[test]
fn criterion_4_replicable_limit_parameter() {
    criterion("4 limit parameter replicability", || {
        for seed in 0..5u64 {
            let spec = AnchorSemSpec::random(3, 2, 2, 50 + seed);
            let m0 = sem::population_moments(&spec).unwrap();
            let g = randn_matrix(2, 2, 60 + seed);
            let delta_cov = &g * g.transpose() + Matrix::identity(2, 2) * 0.3;
            let m1 = sem::perturbed_moments(&spec, &delta_cov).unwrap();
            assert!(anchor::projectability_from_moments(&m0, 1e-8).holds);
            assert!(anchor::projectability_from_moments(&m1, 1e-8).holds);
            let d0 = anchor::diluted_causal_from_moments(&m0, 1e-10).unwrap();
            let d1 = anchor::diluted_causal_from_moments(&m1, 1e-10).unwrap();
            for j in 0..3 {
                assert_abs_diff_eq!(d0[j], d1[j], epsilon = 1e-8);
            }
        }
        // violation: the response loads on an anchor direction invisible in X
        let spec = AnchorSemSpec {
            dim_x: 1,
            dim_h: 0,
            b: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            m: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            noise_cov: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            anchor: sem::AnchorModel::Gaussian { cov: vec![vec![1.0, 0.0], vec![0.0, 1.0]] },
            acyclic: true,
        };
        let m = sem::population_moments(&spec).unwrap();
        let pr = anchor::projectability_from_moments(&m, 1e-8);
        assert!(!pr.holds);
        assert_eq!((pr.rank_ax, pr.rank_axy), (1, 2));
    });
}

fn dense_rate_spec(n: usize, p: usize, seed: u64) -> DenseConfoundSpec {
    let mut spec = DenseConfoundSpec::new(n, p, 3, 5, seed);
    spec.delta = Some(vec![2.0, 2.0, 2.0]);
    spec
}

fn cv_lambda_fit(x: &Matrix, y: &Vector, seed: u64) -> Vector {
    let grid = sparse::default_grid(x, y, 12, 0.05);
    let cfg = LassoConfig::default();
    let cv = sparse::cv_lasso(x, y, 5, &grid, &cfg, seed).unwrap();
    sparse::lasso(x, y, &LassoConfig::with_lambda(cv.lambda_min))
        .unwrap()
        .beta
}

fn trim_errors(n: usize, p: usize, seeds: u64) -> Vec<f64> {
    (0..seeds)
        .into_par_iter()
        .map(|s| {
            let spec = dense_rate_spec(n, p, seeding::sub_seed(1000, s));
            let (data, truth) = sem::gen_dense_confounded(&spec).unwrap();
            let cv = CvOptions { folds: 5, grid_size: 12, grid_min_ratio: 0.05, seed: s };
            let fit = pipelines::trim_lasso(&data.x, &data.y, Tau::Median, &LambdaChoice::Cv(cv))
                .unwrap();
            l1(&(&fit.beta - &truth.beta0))
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

// 5: under dense confounding the trim pipeline beats the plain Lasso by
// at least 2x in median l1 error, and its error shrinks with n at the
// expected square-root-like rate.
#[test]
fn criterion_5_estimation_rate() {
    criterion("5 estimation error rate", || {
        let seeds = 20;
        let trim_300 = trim_errors(300, 600, seeds);
        let plain_300: Vec<f64> = (0..seeds)
            .into_par_iter()
            .map(|s| {
                let spec = dense_rate_spec(300, 600, seeding::sub_seed(1000, s));
                let (data, truth) = sem::gen_dense_confounded(&spec).unwrap();
                let beta = cv_lambda_fit(&data.x, &data.y, s);
                l1(&(&beta - &truth.beta0))
            })
            .collect();
        let m_trim = median(trim_300.clone());
        let m_plain = median(plain_300);
        assert!(
            m_plain >= 2.0 * m_trim,
            "plain {m_plain:.3} vs trim {m_trim:.3}: ratio {:.2}",
            m_plain / m_trim
        );
        let trim_600 = trim_errors(600, 1200, seeds);
        let ratio = m_trim / median(trim_600);
        assert!(
            (1.1..=1.9).contains(&ratio),
            "error ratio across n doubling: {ratio:.3}"
        );
    });
}

// 6: doubly debiased CIs keep near-nominal coverage under dense
// confounding while the uncorrected debiased Lasso over-rejects the null.
#[test]
fn criterion_6_coverage_and_conservativeness() {
    criterion("6 interval coverage", || {
        let mut spec = DenseConfoundSpec::new(200, 300, 3, 5, 0);
        spec.delta = Some(vec![2.0, 2.0, 2.0]);
        let cfg = metrics::CoverageConfig {
            spec,
            coords: vec![299, 0], // null and non-null
            replicates: 200,
            level: 0.95,
            cv_folds: 5,
            cv_grid_size: 10,
            seed: 404,
        };
        let report = metrics::coverage_experiment(&cfg).unwrap();
        let rows = &report.tables[0].rows;
        let null_row = &rows[0];
        let signal_row = &rows[1];
        assert_eq!(null_row[1], 0.0, "coordinate 299 must be null");
        assert!(signal_row[1] != 0.0, "coordinate 0 must carry signal");
        for row in [null_row, signal_row] {
            let cov = row[2];
            assert!(
                (0.90..=0.99).contains(&cov),
                "dd coverage {cov} at coordinate {}",
                row[0]
            );
        }
        let dd_reject = null_row[3];
        let deb_reject = null_row[5];
        assert!(
            deb_reject - dd_reject > 0.05,
            "rejection gap {:.3} (debiased {deb_reject}, dd {dd_reject})",
            deb_reject - dd_reject
        );
    });
}

// 7: closed-form endpoints of the anchor path.
#[test]
fn criterion_7_anchor_endpoints() {
    criterion("7 anchor endpoint identities", || {
        let x = randn_matrix(70, 4, 900);
        let a = randn_matrix(70, 2, 901);
        let y = (x.column(0) * 2.0 - x.column(2) + a.column(1) * 0.7
            + randn_matrix(70, 1, 902).column(0) * 0.3)
            .into_owned();
        let ols =
            linalg::pseudo_solve(&x, &Matrix::from_column_slice(70, 1, y.as_slice()), 1e-10)
                .unwrap();
        let f1 = anchor::anchor_fit(&x, &y, &a, &AnchorConfig::new(Gamma::Finite(1.0))).unwrap();
        for j in 0..4 {
            assert_abs_diff_eq!(f1.beta[j], ols[(j, 0)], epsilon = 1e-10);
        }
        let (ac, _) = linalg::center_columns(&a);
        let proj = linalg::projector_from(&ac, 1e-10).unwrap();
        let rx = linalg::residualize(&proj, &x).unwrap();
        let ry = linalg::residualize(&proj, &Matrix::from_column_slice(70, 1, y.as_slice()))
            .unwrap();
        let pols = linalg::pseudo_solve(&rx, &ry, 1e-10).unwrap();
        let f0 = anchor::anchor_fit(&x, &y, &a, &AnchorConfig::new(Gamma::Finite(0.0))).unwrap();
        for j in 0..4 {
            assert_abs_diff_eq!(f0.beta[j], pols[(j, 0)], epsilon = 1e-10);
        }
        // scalar instrumental ratio
        let a1 = randn_matrix(80, 1, 903);
        let x1 = &a1 * 1.2 + randn_matrix(80, 1, 904) * 0.4;
        let y1 = (&x1 * 1.7 + randn_matrix(80, 1, 905) * 0.2).column(0).into_owned();
        let beta = anchor::tsls(&x1, &y1, &a1, 1e-10).unwrap();
        let ac1 = a1.column(0).add_scalar(-a1.column(0).mean());
        let ratio = ac1.dot(&y1) / ac1.dot(&x1.column(0).into_owned());
        assert_abs_diff_eq!(beta[0], ratio, epsilon = 1e-10);
    });
}

// 8: the population least-squares bias from dense confounding shrinks at
// roughly the square root of the dimension.
#[test]
fn criterion_8_bias_dimension_decay() {
    criterion("8 bias decay with dimension", || {
        for (p, seed) in [(100usize, 7u64), (200, 8)] {
            let factor = pipelines::tests_support::bias_decay_factor(p, 80, seed);
            let lo = 1.25;
            let hi = 1.6;
            assert!(
                (lo..=hi).contains(&factor),
                "decay factor {factor:.3} at p = {p}"
            );
        }
    });
}

// 9: on paired confounded datasets the trim pipeline's selected sets
// replicate at least as well as the plain Lasso's at most support sizes.
#[test]
fn criterion_9_selection_replicability() {
    criterion("9 selection replicability direction", || {
        let mut spec_a = DenseConfoundSpec::new(100, 200, 3, 5, 0);
        spec_a.delta = Some(vec![2.5, 2.5, 2.5]);
        let mut spec_b = spec_a.clone();
        spec_b.noise_y_scale = 1.5;
        let cfg = ReplicabilityConfig {
            spec_a,
            spec_b,
            support_sizes: vec![2, 4, 6, 8, 10],
            replicates: 20,
            grid_size: 25,
            seed: 777,
        };
        let report = metrics::replicability_experiment(&cfg).unwrap();
        let table = |name: &str| {
            report
                .tables
                .iter()
                .find(|t| t.name == name)
                .unwrap_or_else(|| panic!("missing table {name}"))
        };
        let plain = table("jaccard_plain");
        let trim = table("jaccard_trim");
        let wins = plain
            .rows
            .iter()
            .zip(trim.rows.iter())
            .filter(|(p, t)| t[1] <= p[1])
            .count();
        let total = plain.rows.len();
        assert!(
            wins * 5 >= total * 4,
            "trim at least ties plain at only {wins}/{total} support sizes"
        );
    });
}

// 10: every CLI command is byte-deterministic given (config, seed),
// including across thread counts.
#[test]
fn criterion_10_cli_determinism() {
    criterion("10 cli byte determinism", || {
        let bin = env!("CARGO_BIN_EXE_deconfound");
        let dir = tempfile::tempdir().unwrap();
        let path = |name: &str| dir.path().join(name);
        let run = |args: &[&str]| {
            let out = Command::new(bin).args(args).output().unwrap();
            assert!(
                out.status.success(),
                "command {args:?} failed: {}",
                String::from_utf8_lossy(&out.stderr)
            );
        };
        let dense_spec = path("dense.json");
        std::fs::write(
            &dense_spec,
            r#"{"family":"dense","spec":{"n":40,"p":15,"q":2,"s0":3,"beta0":null,"confounder_loading":null,"delta":null,"noise_x_scale":1.0,"noise_y_scale":1.0,"seed":0}}"#,
        )
        .unwrap();
        let data = path("data.csv");
        let data_s = data.to_str().unwrap();
        run(&["simulate", "--spec", dense_spec.to_str().unwrap(), "--seed", "5", "--output", data_s]);
        let rep_cfg = path("rep.json");
        std::fs::write(
            &rep_cfg,
            r#"{"spec_a":{"n":40,"p":20,"q":1,"s0":2,"beta0":null,"confounder_loading":null,"delta":null,"noise_x_scale":1.0,"noise_y_scale":1.0,"seed":0},"spec_b":{"n":40,"p":20,"q":1,"s0":2,"beta0":null,"confounder_loading":null,"delta":null,"noise_x_scale":1.0,"noise_y_scale":1.5,"seed":0},"support_sizes":[2,4],"replicates":2,"grid_size":10,"seed":7}"#,
        )
        .unwrap();
        let cov_cfg = path("cov.json");
        std::fs::write(
            &cov_cfg,
            r#"{"spec":{"n":50,"p":30,"q":1,"s0":2,"beta0":null,"confounder_loading":null,"delta":null,"noise_x_scale":1.0,"noise_y_scale":1.0,"seed":0},"coords":[0],"replicates":2,"level":0.95,"cv_folds":4,"cv_grid_size":6,"seed":3}"#,
        )
        .unwrap();
        let rob_cfg = path("rob.json");
        std::fs::write(
            &rob_cfg,
            r#"{"spec":{"dim_x":2,"dim_h":1,"b":[[0,0,0,0],[0,0,0,0],[1,0.5,0,1],[0,0,0,0]],"m":[[1,0],[0,1],[0,0],[0,0]],"noise_cov":[[1,0,0,0],[0,1,0,0],[0,0,0.25,0],[0,0,0,1]],"anchor":{"gaussian":{"cov":[[1,0],[0,1]]}},"acyclic":true},"gammas":[1.0,4.0],"strengths":[0.0,4.0],"n_train":200,"n_test":200,"perturbations_per_strength":3,"seed":9}"#,
        )
        .unwrap();
        let out_path = path("out.txt");
        let out_s = out_path.to_str().unwrap();
        let cases: Vec<Vec<String>> = vec![
            vec!["transform", "--input", data_s, "--response", "y", "--kind", "trim", "--output", out_s],
            vec!["deconfound", "--input", data_s, "--response", "y", "--kind", "trim", "--lambda", "cv", "--seed", "2", "--output", out_s],
            vec!["deconfound", "--input", data_s, "--response", "y", "--kind", "lava", "--lambda", "0.2", "--output", out_s],
            vec!["ddlasso", "--input", data_s, "--response", "y", "--coords", "0,1", "--lambda", "0.3", "--output", out_s],
            vec!["simulate", "--spec", dense_spec.to_str().unwrap(), "--seed", "11", "--output", out_s],
            vec!["replicate", "--spec", rep_cfg.to_str().unwrap(), "--output", out_s],
            vec!["coverage", "--spec", cov_cfg.to_str().unwrap(), "--output", out_s],
            vec!["robustness", "--spec", rob_cfg.to_str().unwrap(), "--output", out_s],
        ]
        .into_iter()
        .map(|v| v.into_iter().map(String::from).collect())
        .collect();
        for case in &cases {
            let args: Vec<&str> = case.iter().map(String::as_str).collect();
            run(&args);
            let first = std::fs::read(&out_path).unwrap();
            run(&args);
            let second = std::fs::read(&out_path).unwrap();
            assert_eq!(first, second, "non-deterministic rerun: {case:?}");
            // thread-count variation must not change the bytes
            let mut threaded = args.clone();
            threaded.extend(["--threads", "1"]);
            run(&threaded);
            let third = std::fs::read(&out_path).unwrap();
            assert_eq!(first, third, "thread-dependent output: {case:?}");
        }
        // anchor parsing normalization: "--gamma 1" vs "--gamma 1.0"
        let a_path = path("anchored.csv");
        let mut csv = String::from("y,x1,x2,env\n");
        for i in 0..20 {
            let e = if i % 2 == 0 { "a" } else { "b" };
            csv.push_str(&format!("{}.0,{}.5,{}.25,{e}\n", i, i, i));
        }
        std::fs::write(&a_path, csv).unwrap();
        let g1 = Command::new(bin)
            .args(["anchor", "--input", a_path.to_str().unwrap(), "--response", "y", "--anchors", "env", "--gamma", "1"])
            .output()
            .unwrap();
        let g2 = Command::new(bin)
            .args(["anchor", "--input", a_path.to_str().unwrap(), "--response", "y", "--anchors", "env", "--gamma", "1.0"])
            .output()
            .unwrap();
        assert!(g1.status.success() && g2.status.success());
        assert_eq!(g1.stdout, g2.stdout, "gamma parse normalization");
    });
}
