use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use pqlasso::grm::{grm_bytes, parse_grm_bytes, sparsify, Grm, Relatedness};
use pqlasso::penalized::{adaptive_weights, lambda_grid, r2_mspe, soft_threshold, ADAPTIVE_CAP};

fn symmetric(m: usize, vals: &[f64]) -> DMatrix<f64> {
    let mut v = DMatrix::zeros(m, m);
    let mut k = 0;
    for i in 0..m {
        for j in 0..=i {
            let x = if i == j { 1.0 + vals[k].abs() } else { vals[k] * 0.2 };
            v[(i, j)] = x;
            v[(j, i)] = x;
            k += 1;
        }
    }
    v
}

fn grm_strategy() -> impl Strategy<Value = Grm> {
    (1usize..12).prop_flat_map(|m| {
        prop::collection::vec(-1.0f64..1.0, m * (m + 1) / 2).prop_map(move |vals| Grm {
            ids: (0..m).map(|i| format!("id{i}")).collect(),
            matrix: symmetric(m, &vals),
        })
    })
}

proptest! {
    #[test]
    fn soft_threshold_shrinks_toward_zero(z in -50.0f64..50.0, t in 0.0f64..20.0) {
        let s = soft_threshold(z, t);
        prop_assert!(s.abs() <= z.abs());
        prop_assert!(s == 0.0 || s.signum() == z.signum());
        prop_assert_eq!(s == 0.0, z.abs() <= t);
        prop_assert_eq!(soft_threshold(-z, t), -s);
        prop_assert!((z - s).abs() <= t + 1e-12);
    }

    #[test]
    fn soft_threshold_is_nonexpansive(a in -50.0f64..50.0, b in -50.0f64..50.0, t in 0.0f64..20.0) {
        prop_assert!((soft_threshold(a, t) - soft_threshold(b, t)).abs() <= (a - b).abs() + 1e-12);
    }

    #[test]
    fn r2_is_at_most_one_and_shift_invariant(
        y in prop::collection::vec(-10.0f64..10.0, 3..40),
        noise in prop::collection::vec(-1.0f64..1.0, 40),
        shift in -100.0f64..100.0,
    ) {
        let y = DVector::from_vec(y);
        prop_assume!(y.variance() > 1e-6);
        let yhat = DVector::from_fn(y.len(), |i, _| y[i] + noise[i]);
        let r2 = r2_mspe(&y, &yhat).unwrap();
        prop_assert!(r2 <= 1.0);
        let shifted = r2_mspe(&y.add_scalar(shift), &yhat.add_scalar(shift)).unwrap();
        prop_assert!((r2 - shifted).abs() < 1e-8);
    }

    #[test]
    fn adaptive_weights_decrease_with_effect_size(
        beta in prop::collection::vec(-3.0f64..3.0, 1..30),
        gamma in 0.0f64..2.0,
    ) {
        let (nu, capped) = adaptive_weights(&beta, gamma).unwrap();
        for (j, &a) in beta.iter().enumerate() {
            prop_assert!(nu[j] > 0.0 && nu[j] <= ADAPTIVE_CAP);
            prop_assert_eq!(capped.contains(&j), nu[j] == ADAPTIVE_CAP && gamma > 0.0);
            for (k, &b) in beta.iter().enumerate() {
                if a.abs() < b.abs() {
                    prop_assert!(nu[j] >= nu[k]);
                }
            }
        }
    }

    #[test]
    fn lambda_grid_spans_the_requested_ratio(lmax in 1e-3f64..1e3, n in 2usize..120, ratio in 1e-4f64..0.9) {
        let g = lambda_grid(lmax, n, ratio);
        prop_assert_eq!(g.len(), n);
        prop_assert_eq!(g[0], lmax);
        prop_assert!((g[n - 1] / (lmax * ratio) - 1.0).abs() < 1e-9);
        prop_assert!(g.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn sparsified_grm_keeps_only_within_cluster_entries(grm in grm_strategy(), threshold in 0.01f64..0.2) {
        let sparse = sparsify(&grm, threshold).unwrap();
        let dense = sparse.densify();
        let mut cluster_of = vec![0; grm.ids.len()];
        for (c, members) in sparse.clusters().iter().enumerate() {
            for &i in members {
                cluster_of[i] = c;
            }
        }
        prop_assert_eq!(sparse.cluster_sizes().iter().sum::<usize>(), grm.ids.len());
        for i in 0..grm.ids.len() {
            for j in 0..grm.ids.len() {
                let v = grm.matrix[(i, j)];
                if cluster_of[i] != cluster_of[j] {
                    prop_assert!(v.abs() < threshold);
                    prop_assert_eq!(dense[(i, j)], 0.0);
                } else if i == j || v.abs() >= threshold {
                    prop_assert_eq!(dense[(i, j)], v);
                }
            }
        }
    }

    #[test]
    fn relatedness_files_roundtrip(grm in grm_strategy(), threshold in 0.01f64..0.2, sparse in any::<bool>()) {
        let rel = if sparse {
            Relatedness::Sparse(sparsify(&grm, threshold).unwrap())
        } else {
            Relatedness::Dense(grm)
        };
        let back = parse_grm_bytes("mem", &grm_bytes(&rel)).unwrap();
        prop_assert_eq!(back, rel);
    }
}
