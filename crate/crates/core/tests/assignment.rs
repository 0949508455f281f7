mod common;

use common::brute_force_match;
use kplift::assignment::{hungarian_match, matching_cost};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn matrix(q: usize, g: usize, values: Vec<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(q, g, &values[..q * g])
}

proptest! {
    #[test]
    fn random_costs_match_brute_force(g in 1usize..=6, extra in 0usize..=2, values in prop::collection::vec(-5.0f64..5.0, 64)) {
        let cost = matrix(g + extra, g, values);
        let m = hungarian_match(&cost).unwrap();
        let (queries, best) = brute_force_match(&cost);
        prop_assert_eq!(m.queries(), queries);
        prop_assert_eq!(m.total_cost, best);
    }

    #[test]
    fn integer_costs_pick_the_smallest_optimal_query_list(g in 1usize..=5, extra in 0usize..=2, values in prop::collection::vec(0u8..3, 49)) {
        let cost = matrix(g + extra, g, values.into_iter().map(f64::from).collect());
        let m = hungarian_match(&cost).unwrap();
        let (queries, best) = brute_force_match(&cost);
        prop_assert_eq!(m.queries(), queries);
        prop_assert_eq!(m.total_cost, best);
    }

    #[test]
    fn assignment_is_injective_and_covers_every_target(g in 1usize..=7, values in prop::collection::vec(0.0f64..1.0, 100)) {
        let q = g + 2;
        let m = hungarian_match(&matrix(q, g, values)).unwrap();
        let mut seen = vec![false; q];
        for (i, &(qi, gi)) in m.pairs.iter().enumerate() {
            prop_assert_eq!(gi, i);
            prop_assert!(!seen[qi]);
            seen[qi] = true;
        }
    }
}

#[test]
fn too_few_queries_is_an_error() {
    assert!(hungarian_match(&DMatrix::zeros(2, 3)).is_err());
    let mut c = DMatrix::zeros(3, 3);
    c[(1, 1)] = f64::NAN;
    assert!(hungarian_match(&c).is_err());
}

#[test]
fn matching_cost_adds_location_and_type_terms() {
    let c = matching_cost(&[[0.0, 0.0], [1.0, 1.0]], &[vec![0.0, 0.0], vec![0.0, 0.0]], &[[1.0, 0.0]], &[1]);
    let ln2 = std::f64::consts::LN_2;
    assert!((c[(0, 0)] - (0.5 + ln2)).abs() < 1e-15);
    assert!((c[(1, 0)] - (0.5 + ln2)).abs() < 1e-15);
    // the tie goes to the lower query
    assert_eq!(hungarian_match(&c).unwrap().queries(), vec![0]);
}
