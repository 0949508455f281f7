use kplift::geometry::{depth_flip, Structure3D};
use kplift::metrics::{mpjpe, mpjpe_with_flip, mutual_coherence, stress};
use nalgebra::{DMatrix, Matrix3, Matrix3xX, Rotation3, Vector3};
use proptest::prelude::*;

fn structure(k: usize, v: &[f64]) -> Structure3D {
    Structure3D(Matrix3xX::from_column_slice(&v[..3 * k]))
}

fn coords() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, 42)
}

proptest! {
    #[test]
    fn mpjpe_is_flip_symmetric(k in 1usize..=14, a in coords(), b in coords()) {
        let (x, y) = (structure(k, &a), structure(k, &b));
        prop_assert_eq!(mpjpe(&x, &y).unwrap(), mpjpe(&depth_flip(&x), &y).unwrap());
    }

    #[test]
    fn mpjpe_ignores_translations(k in 1usize..=14, a in coords(), b in coords(), t in prop::array::uniform6(-5.0f64..5.0)) {
        let (x, y) = (structure(k, &a), structure(k, &b));
        let shift = |s: &Structure3D, v: Vector3<f64>| {
            let mut m = s.0.clone();
            for mut c in m.column_iter_mut() {
                c += v;
            }
            Structure3D(m)
        };
        let moved = mpjpe(&shift(&x, Vector3::new(t[0], t[1], t[2])), &shift(&y, Vector3::new(t[3], t[4], t[5]))).unwrap();
        prop_assert!((moved - mpjpe(&x, &y).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn stress_ignores_rigid_motions_and_reflections(
        k in 2usize..=14, a in coords(), b in coords(),
        axis in prop::array::uniform3(-1.0f64..1.0), angle in -3.0f64..3.0,
        t in prop::array::uniform3(-5.0f64..5.0), reflect in any::<bool>(),
    ) {
        prop_assume!(axis.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        let (x, y) = (structure(k, &a), structure(k, &b));
        let mut r: Matrix3<f64> = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(Vector3::from(axis)), angle).into_inner();
        if reflect {
            r *= Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        }
        let mut m = r * &x.0;
        for mut c in m.column_iter_mut() {
            c += Vector3::from(t);
        }
        let moved = Structure3D(m);
        prop_assert!((stress(&moved, &y).unwrap() - stress(&x, &y).unwrap()).abs() <= 1e-9);
        prop_assert!((stress(&y, &moved).unwrap() - stress(&y, &x).unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn coherence_ignores_positive_column_scaling(
        w in prop::collection::vec(-1.0f64..1.0, 24), scales in prop::collection::vec(0.01f64..100.0, 4),
    ) {
        let m = DMatrix::from_column_slice(6, 4, &w);
        prop_assume!(m.column_iter().all(|c| c.norm() > 1e-3));
        let mut scaled = m.clone();
        for (j, s) in scales.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*s);
        }
        let (a, b) = (mutual_coherence(&m).unwrap(), mutual_coherence(&scaled).unwrap());
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }
}

#[test]
fn hand_examples() {
    let x = Structure3D::from_columns(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
    let z = Structure3D::from_columns(&[[0.0; 3], [0.0; 3]]);
    assert_eq!(mpjpe(&x, &z).unwrap(), 1.0);
    let y = Structure3D::from_columns(&[[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]);
    // only the flipped branch matches
    assert_eq!(mpjpe_with_flip(&depth_flip(&y), &y).unwrap(), (0.0, true));
    assert_eq!(mpjpe_with_flip(&y, &y).unwrap(), (0.0, false));
    let w = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
    assert!((mutual_coherence(&w).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    assert_eq!(mutual_coherence(&DMatrix::identity(3, 3)).unwrap(), 0.0);
}
