//! Rotations, the flat-vector ↔ 3×k structure layout, and orthographic
//! projection.
//!
//! A structure vector of length `3k` stores point `j` at `[3j, 3j+1, 3j+2]`.
//! Rotations come from 6 reals (two 3-vectors) by Gram-Schmidt; the batched
//! tensor path performs the same floating-point operations in the same order
//! as the scalar path, so both agree bit for bit.

use kplift_tensor::Tensor;
use nalgebra::{Matrix2xX, Matrix3, Matrix3xX};

use crate::{Error, Result};

const DEGENERATE_NORM: f64 = 1e-9;
const RETRY_PERTURBATION: [f64; 6] = [1e-6, 2e-6, 3e-6, -3e-6, 1e-6, -2e-6];

/// A 3×k point set in canonical shape units, one column per keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Structure3D(pub Matrix3xX<f64>);

impl Structure3D {
    pub fn zeros(k: usize) -> Self {
        Structure3D(Matrix3xX::zeros(k))
    }

    pub fn from_columns(points: &[[f64; 3]]) -> Self {
        Structure3D(Matrix3xX::from_fn(points.len(), |r, c| points[c][r]))
    }

    pub fn k(&self) -> usize {
        self.0.ncols()
    }

    pub fn point(&self, j: usize) -> [f64; 3] {
        [self.0[(0, j)], self.0[(1, j)], self.0[(2, j)]]
    }

    /// Inverse of [`reshape_structure`].
    pub fn flatten(&self) -> Vec<f64> {
        // nalgebra is column-major, which is exactly the per-point layout.
        self.0.as_slice().to_vec()
    }

    pub fn select_columns(&self, cols: std::ops::Range<usize>) -> Structure3D {
        Structure3D(self.0.columns(cols.start, cols.len()).into_owned())
    }

    /// Rotate every point: `R·X`.
    pub fn rotated(&self, r: &Matrix3<f64>) -> Structure3D {
        let mut out = Matrix3xX::zeros(self.k());
        for j in 0..self.k() {
            for i in 0..3 {
                out[(i, j)] = r[(i, 0)] * self.0[(0, j)] + r[(i, 1)] * self.0[(1, j)] + r[(i, 2)] * self.0[(2, j)];
            }
        }
        Structure3D(out)
    }
}

fn gram_schmidt(raw: &[f64; 6]) -> Option<Matrix3<f64>> {
    let a1 = [raw[0], raw[1], raw[2]];
    let a2 = [raw[3], raw[4], raw[5]];
    let n1 = (a1[0] * a1[0] + a1[1] * a1[1] + a1[2] * a1[2]).sqrt();
    if !(n1 >= DEGENERATE_NORM) {
        return None;
    }
    let r1 = [a1[0] / n1, a1[1] / n1, a1[2] / n1];
    let d = r1[0] * a2[0] + r1[1] * a2[1] + r1[2] * a2[2];
    let u = [a2[0] - d * r1[0], a2[1] - d * r1[1], a2[2] - d * r1[2]];
    let n2 = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    if !(n2 >= DEGENERATE_NORM) {
        return None;
    }
    let r2 = [u[0] / n2, u[1] / n2, u[2] / n2];
    let r3 = [
        r1[1] * r2[2] - r1[2] * r2[1],
        r1[2] * r2[0] - r1[0] * r2[2],
        r1[0] * r2[1] - r1[1] * r2[0],
    ];
    Some(Matrix3::from_columns(&[r1.into(), r2.into(), r3.into()]))
}

/// Rotation matrix with columns `r1, r2, r1×r2` obtained by Gram-Schmidt
/// on the two 3-vectors in `raw`.
///
/// A degenerate input (zero first vector, or second vector parallel to the
/// first) is nudged once by a fixed 1e-6 perturbation before giving up.
pub fn rotation_from_6d(raw: &[f64; 6]) -> Result<Matrix3<f64>> {
    if let Some(r) = gram_schmidt(raw) {
        return Ok(r);
    }
    let mut nudged = *raw;
    for (v, p) in nudged.iter_mut().zip(RETRY_PERTURBATION) {
        *v += p;
    }
    gram_schmidt(&nudged).ok_or(Error::DegenerateRotation(*raw))
}

/// Turn a flat `3k` vector into a 3×k structure (point `j` = `s[3j..3j+3]`).
pub fn reshape_structure(s: &[f64]) -> Result<Structure3D> {
    if !s.len().is_multiple_of(3) {
        return Err(Error::StructureLength(s.len()));
    }
    Ok(Structure3D(Matrix3xX::from_column_slice(s)))
}

/// Drop depth after rotating: the first two rows of `R·X`.
pub fn orthographic_project(r: &Matrix3<f64>, x: &Structure3D) -> Matrix2xX<f64> {
    let mut y = Matrix2xX::zeros(x.k());
    for j in 0..x.k() {
        for i in 0..2 {
            y[(i, j)] = r[(i, 0)] * x.0[(0, j)] + r[(i, 1)] * x.0[(1, j)] + r[(i, 2)] * x.0[(2, j)];
        }
    }
    y
}

/// Negate the depth (third) coordinate of every point.
pub fn depth_flip(x: &Structure3D) -> Structure3D {
    let mut out = x.clone();
    for j in 0..out.k() {
        out.0[(2, j)] = -out.0[(2, j)];
    }
    out
}

/// Batched, differentiable [`rotation_from_6d`] without the degenerate-input
/// retry: `[b, 6] → [b, 3, 3]` holding `Rᵀ` (row `c` is column `c` of `R`).
pub fn rotation_transposed_batch(raw: &Tensor) -> Result<Tensor> {
    let b = raw.shape()[0];
    let a1 = raw.slice(1, 0, 3)?;
    let a2 = raw.slice(1, 3, 6)?;
    let n1 = a1.mul(&a1)?.sum_axis(1, true)?.sqrt();
    let r1 = a1.div(&n1)?;
    let d = r1.mul(&a2)?.sum_axis(1, true)?;
    let u = a2.sub(&d.mul(&r1)?)?;
    let n2 = u.mul(&u)?.sum_axis(1, true)?.sqrt();
    let r2 = u.div(&n2)?;
    let c = |t: &Tensor, i: usize| t.slice(1, i, i + 1);
    let r3 = Tensor::concat(
        &[
            c(&r1, 1)?.mul(&c(&r2, 2)?)?.sub(&c(&r1, 2)?.mul(&c(&r2, 1)?)?)?,
            c(&r1, 2)?.mul(&c(&r2, 0)?)?.sub(&c(&r1, 0)?.mul(&c(&r2, 2)?)?)?,
            c(&r1, 0)?.mul(&c(&r2, 1)?)?.sub(&c(&r1, 1)?.mul(&c(&r2, 0)?)?)?,
        ],
        1,
    )?;
    Ok(Tensor::concat(&[r1, r2, r3], 1)?.reshape(&[b, 3, 3])?)
}

/// Points of a batch of flat structures, `[b, 3k] → [b, k, 3]`.
pub fn structure_points_batch(flat: &Tensor) -> Result<Tensor> {
    let (b, n) = (flat.shape()[0], flat.shape()[1]);
    if n % 3 != 0 {
        return Err(Error::StructureLength(n));
    }
    Ok(flat.reshape(&[b, n / 3, 3])?)
}

/// Camera-frame points `(R·X)ᵀ`, `[b, k, 3]`.
pub fn rotate_batch(points: &Tensor, rot_t: &Tensor) -> Result<Tensor> {
    Ok(points.matmul(rot_t)?)
}

/// Orthographic projection of a batch, `[b, k, 3] × [b, 3, 3] → [b, k, 2]`.
pub fn project_batch(points: &Tensor, rot_t: &Tensor) -> Result<Tensor> {
    Ok(points.matmul(&rot_t.slice(2, 0, 2)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_rotation(r: &Matrix3<f64>) {
        let e = r.transpose() * r - Matrix3::identity();
        assert!(e.amax() < 1e-6, "RᵀR − I = {e}");
        assert!((r.determinant() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn orthonormal_input_is_identity() {
        assert_eq!(rotation_from_6d(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap(), Matrix3::identity());
        assert_eq!(rotation_from_6d(&[2.0, 0.0, 0.0, 0.0, 3.0, 0.0]).unwrap(), Matrix3::identity());
    }

    #[test]
    fn hand_gram_schmidt() {
        let r = rotation_from_6d(&[0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let expected = Matrix3::from_columns(&[[0.0, 1.0, 0.0].into(), [1.0, 0.0, 0.0].into(), [0.0, 0.0, -1.0].into()]);
        assert_eq!(r, expected);
    }

    #[test]
    fn degenerate_inputs() {
        // zero first vector: rescued by the perturbation
        let r = rotation_from_6d(&[0.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_rotation(&r);
        // parallel vectors: rescued as well
        let r = rotation_from_6d(&[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]).unwrap();
        assert_rotation(&r);
        // non-finite input cannot be rescued
        assert!(rotation_from_6d(&[f64::NAN, 0.0, 0.0, 0.0, 1.0, 0.0]).is_err());
    }

    #[test]
    fn reshape_layout() {
        let s = reshape_structure(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(s.point(0), [1.0, 2.0, 3.0]);
        assert_eq!(s.point(1), [4.0, 5.0, 6.0]);
        assert_eq!(reshape_structure(&[0.0; 12]).unwrap(), Structure3D::zeros(4));
        assert!(matches!(reshape_structure(&[0.0; 4]), Err(Error::StructureLength(4))));
    }

    #[test]
    fn projection_examples() {
        let x = Structure3D::from_columns(&[[1.0, 2.0, 3.0]]);
        let y = orthographic_project(&Matrix3::identity(), &x);
        assert_eq!((y[(0, 0)], y[(1, 0)]), (1.0, 2.0));

        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
        let y = orthographic_project(&rx, &x);
        assert_eq!((y[(0, 0)], y[(1, 0)]), (1.0, -2.0));

        let r = rotation_from_6d(&[0.3, -1.0, 2.0, 0.5, 0.5, 0.1]).unwrap();
        assert!(orthographic_project(&r, &Structure3D::zeros(5)).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depth_flip_examples() {
        let x = Structure3D::from_columns(&[[1.0, 2.0, 3.0]]);
        assert_eq!(depth_flip(&x).point(0), [1.0, 2.0, -3.0]);
        assert_eq!(depth_flip(&depth_flip(&x)), x);
        let flat = Structure3D::from_columns(&[[1.0, 2.0, 0.0], [-1.0, 0.5, 0.0]]);
        assert_eq!(depth_flip(&flat), flat);
    }

    #[test]
    fn batched_rotation_is_bitwise_equal_to_scalar_path() {
        let raws = [
            [0.3, -1.0, 2.0, 0.5, 0.5, 0.1],
            [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            [-0.2, 0.7, 0.1, 0.9, -0.4, 1.3],
        ];
        let flat: Vec<f64> = raws.iter().flatten().copied().collect();
        let rt = rotation_transposed_batch(&Tensor::new(flat, &[3, 6]).unwrap()).unwrap();
        for (b, raw) in raws.iter().enumerate() {
            let r = rotation_from_6d(raw).unwrap();
            for c in 0..3 {
                for i in 0..3 {
                    assert_eq!(rt.data()[b * 9 + c * 3 + i], r[(i, c)]);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn random_raw_decodes_to_rotation(raw in prop::array::uniform6(-10.0f64..10.0)) {
            prop_assume!(raw[..3].iter().map(|v| v * v).sum::<f64>() > 1e-6);
            let r = rotation_from_6d(&raw).unwrap();
            let e = r.transpose() * r - Matrix3::identity();
            prop_assert!(e.amax() < 1e-6);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn flatten_inverts_reshape(s in prop::collection::vec(-5.0f64..5.0, 0..10usize).prop_map(|v| {
            let n = v.len() / 3 * 3; v[..n].to_vec()
        })) {
            prop_assert_eq!(reshape_structure(&s).unwrap().flatten(), s);
        }

        // Flipping depth under the mirrored rotation gives the same image.
        #[test]
        fn flip_ambiguity_preserves_projection(raw in prop::array::uniform6(-3.0f64..3.0),
                                              pts in prop::collection::vec(prop::array::uniform3(-2.0f64..2.0), 1..8)) {
            prop_assume!(raw[..3].iter().map(|v| v * v).sum::<f64>() > 1e-3);
            let r = rotation_from_6d(&raw).unwrap();
            let x = Structure3D::from_columns(&pts);
            let flip = Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, -1.0));
            let r_flipped = flip * r * flip;
            let a = orthographic_project(&r, &x);
            let b = orthographic_project(&r_flipped, &depth_flip(&x));
            prop_assert!((a - b).amax() < 1e-9);
        }
    }
}
