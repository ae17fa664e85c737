use proptest::prelude::*;

use mcrc::encoder::{link_probabilities, neighbor_probabilities, phrasal_matrix};
use mcrc::tensor::Matrix;
use mcrc::verify::{attention_suite, equivariance_suite, phrasal_suite};

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-1.0f64..1.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).scale(scale))
}

fn features_and_bilinear() -> impl Strategy<Value = (Matrix, Matrix)> {
    (1usize..=16, 1usize..=16, 0.0f64..3.0).prop_flat_map(|(n, d, s)| (matrix(n, d, 2.0), matrix(d, d, s)))
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn phrasal_matrix_invariants((f, w_b) in features_and_bilinear()) {
        let n = f.rows();
        let links = link_probabilities(&f, &w_b);
        let p = phrasal_matrix(&links).unwrap();
        for i in 0..n {
            prop_assert_eq!(p[(i, i)], 1.0);
            let mut product = 1.0;
            for j in i + 1..n {
                product *= links[j - 1];
                prop_assert_eq!(p[(i, j)], p[(j, i)]);
                prop_assert!(p[(i, j)] > 0.0 && p[(i, j)] <= 1.0);
                prop_assert!(p[(i, j)] <= p[(i, j - 1)]);
                prop_assert!((p[(i, j)] - product).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn interior_neighbor_probabilities_sum_to_one((f, w_b) in features_and_bilinear()) {
        let probs = neighbor_probabilities(&f, &w_b);
        let n = probs.len();
        for (k, (left, right)) in probs.into_iter().enumerate() {
            if k > 0 && k + 1 < n {
                prop_assert_eq!(left + right, 1.0);
            }
        }
    }

    #[test]
    fn links_outside_the_unit_interval_are_rejected(bad in prop_oneof![-1.0f64..=0.0, 1.0f64 + 1e-9..2.0]) {
        prop_assert!(phrasal_matrix(&[0.5, bad]).is_err());
    }

    #[test]
    fn option_order_equivariance(seed in 0u64..10_000) {
        let report = equivariance_suite(1, seed).unwrap();
        prop_assert!(report.passed(), "{}", report);
    }

    #[test]
    fn attention_maps_are_row_stochastic(seed in 0u64..10_000) {
        let report = attention_suite(1, seed).unwrap();
        prop_assert!(report.passed(), "{}", report);
    }
}

#[test]
fn phrasal_suite_thousand_draws() {
    let report = phrasal_suite(1000, 2024);
    assert_eq!(report.cases, 1000);
    assert!(report.passed(), "{report}");
}
