//! Randomized property checks for the structural invariants of the core
//! building blocks: factorization round-trips, optimizer certificates,
//! transform spectra and metric axioms.

use proptest::prelude::*;

use deconfound::linalg::{self, Matrix, Vector};
use deconfound::metrics::{jaccard, topk_overlap, SelectionSet};
use deconfound::sparse::{self, kkt_violation, lasso, LassoConfig};
use deconfound::spectral::{fit_transform, Tau, TransformKind};

fn small_matrix() -> impl Strategy<Value = Matrix> {
    ((2usize..8, 1usize..6)).prop_flat_map(|(n, p)| {
        proptest::collection::vec(-5.0f64..5.0, n * p)
            .prop_map(move |v| Matrix::from_row_slice(n, p, &v))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn svd_reconstructs_and_is_orthonormal(x in small_matrix()) {
        let f = linalg::svd(&x).unwrap();
        let err = (f.reconstruct() - &x).abs().max();
        prop_assert!(err < 1e-9, "reconstruction error {err}");
        let utu = f.u.transpose() * &f.u;
        for i in 0..utu.nrows() {
            for j in 0..utu.ncols() {
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((utu[(i, j)] - want).abs() < 1e-9);
            }
        }
        for w in f.d.as_slice().windows(2) {
            prop_assert!(w[0] >= w[1] - 1e-12, "spectrum not descending");
        }
    }

    #[test]
    fn lasso_kkt_certificate_holds(x in small_matrix(), lam in 0.01f64..2.0, seed in 0u64..50) {
        let n = x.nrows();
        let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        let y = Vector::from_fn(n, |_, _| {
            s ^= s << 13; s ^= s >> 7; s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        });
        let fit = lasso(&x, &y, &LassoConfig::with_lambda(lam)).unwrap();
        prop_assert!(fit.converged);
        let (xc, _) = linalg::center_columns(&x);
        let ym = y.mean();
        let yc = y.map(|v| v - ym);
        prop_assert!(kkt_violation(&xc, &yc, &fit.beta, lam) <= 1e-6);
    }

    #[test]
    fn lasso_support_shrinks_along_the_grid(x in small_matrix(), seed in 0u64..50) {
        let n = x.nrows();
        let mut s = seed.wrapping_add(7).wrapping_mul(0x2545f4914f6cdd1d);
        let y = Vector::from_fn(n, |_, _| {
            s ^= s << 13; s ^= s >> 7; s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        });
        let lmax = sparse::lambda_max(&x, &y);
        prop_assume!(lmax > 1e-10);
        // at lambda_max the solution is exactly zero
        let fit = lasso(&x, &y, &LassoConfig::with_lambda(lmax * (1.0 + 1e-12))).unwrap();
        prop_assert!(fit.active_set().is_empty());
    }

    #[test]
    fn trim_never_inflates_the_spectrum(x in small_matrix()) {
        let t = fit_transform(&x, TransformKind::Trim(Tau::Median)).unwrap();
        for (d, ds) in t.singular_spectrum() {
            prop_assert!(ds <= d + 1e-12);
            prop_assert!(ds >= 0.0);
        }
        // transformed data never has larger Frobenius norm
        let xt = t.apply(&x).unwrap();
        prop_assert!(xt.norm() <= x.norm() + 1e-9);
    }

    #[test]
    fn jaccard_is_a_bounded_metric(
        a in proptest::collection::btree_set(0usize..20, 0..10),
        b in proptest::collection::btree_set(0usize..20, 0..10),
    ) {
        let sa = SelectionSet::new(a.iter().copied(), "a");
        let sb = SelectionSet::new(b.iter().copied(), "b");
        let d = jaccard(&sa, &sb);
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!((jaccard(&sb, &sa) - d).abs() < 1e-15);
        prop_assert_eq!(jaccard(&sa, &sa), 0.0);
        if d == 0.0 {
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn topk_overlap_is_symmetric_and_bounded(
        pairs in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..12),
        k in 1usize..6,
    ) {
        let c1: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let c2: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let v1 = Vector::from_column_slice(&c1);
        let v2 = Vector::from_column_slice(&c2);
        let k = k.min(c1.len());
        let o12 = topk_overlap(&v1, &v2, k).unwrap();
        let o21 = topk_overlap(&v2, &v1, k).unwrap();
        prop_assert_eq!(o12, o21);
        prop_assert!(o12 <= k);
        prop_assert_eq!(topk_overlap(&v1, &v1, k).unwrap(), k);
    }
}
