//! Category registry and the shared multi-category shape dictionary.
//!
//! All categories live in one stacked layout of `k = Σ k_z` keypoints; each
//! category owns a contiguous block. Shapes are decoded from latent codes as
//! `ReLU(β′)·S + b_S` ("cut-off" coefficients) or, for comparison, as the
//! plain linear `β′·S`.

use kplift_tensor::Tensor;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{reshape_structure, Structure3D};
use crate::nn::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryId(pub usize);

impl std::fmt::Display for CategoryId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySchema {
    pub id: CategoryId,
    pub name: String,
    pub keypoint_names: Vec<String>,
    /// First stacked index owned by this category.
    pub block_offset: usize,
}

impl CategorySchema {
    pub fn keypoint_count(&self) -> usize {
        self.keypoint_names.len()
    }

    pub fn block(&self) -> std::ops::Range<usize> {
        self.block_offset..self.block_offset + self.keypoint_count()
    }
}

/// Binary selector `ζ_z` over the stacked keypoints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryMask(pub Vec<bool>);

impl CategoryMask {
    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryRegistry {
    categories: Vec<CategorySchema>,
}

impl CategoryRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a category; its block starts where the previous one ended.
    pub fn register(&mut self, name: &str, keypoint_names: Vec<String>) -> Result<CategoryId> {
        if self.categories.iter().any(|c| c.name == name) {
            return Err(Error::DuplicateCategory(name.to_string()));
        }
        if keypoint_names.len() < 3 {
            return Err(Error::InvalidSchema(format!(
                "category {name:?} has {} keypoints, need at least 3",
                keypoint_names.len()
            )));
        }
        for (i, n) in keypoint_names.iter().enumerate() {
            if keypoint_names[..i].contains(n) {
                return Err(Error::InvalidSchema(format!("duplicate keypoint name {n:?} in {name:?}")));
            }
        }
        let id = CategoryId(self.categories.len());
        self.categories.push(CategorySchema {
            id,
            name: name.to_string(),
            keypoint_names,
            block_offset: self.total_keypoints(),
        });
        Ok(id)
    }

    pub fn get(&self, id: CategoryId) -> Result<&CategorySchema> {
        self.categories.get(id.0).ok_or_else(|| Error::UnknownCategory(id.to_string()))
    }

    pub fn by_name(&self, name: &str) -> Result<&CategorySchema> {
        self.categories
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::UnknownCategory(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &CategorySchema> {
        self.categories.iter()
    }

    /// Stacked keypoint count `k`.
    pub fn total_keypoints(&self) -> usize {
        self.categories.iter().map(CategorySchema::keypoint_count).sum()
    }

    /// Largest per-category keypoint count `K`.
    pub fn max_keypoints(&self) -> usize {
        self.categories.iter().map(CategorySchema::keypoint_count).max().unwrap_or(0)
    }

    pub fn mask(&self, id: CategoryId) -> Result<CategoryMask> {
        let c = self.get(id)?;
        let mut zeta = vec![false; self.total_keypoints()];
        zeta[c.block()].fill(true);
        Ok(CategoryMask(zeta))
    }
}

/// How latent coefficients become a shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderKind {
    /// `ReLU(β′)·S + b_S`
    #[default]
    CutOff,
    /// `β′·S`, no truncation and no bias
    Linear,
}

pub const BASIS: &str = "dict.basis";
pub const BIAS: &str = "dict.bias";

/// Borrowed view of the basis `S` (D × 3k) and bias `b_S` (3k).
#[derive(Debug, Clone)]
pub struct ShapeDictionary {
    pub basis: Tensor,
    pub bias: Tensor,
}

impl ShapeDictionary {
    /// `S ~ N(0, 1/D)` entrywise, `b_S = 0`.
    pub fn init(params: &mut ParamStore, latent_dim: usize, total_keypoints: usize, rng: &mut impl Rng) {
        let std = 1.0 / (latent_dim as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let n = latent_dim * 3 * total_keypoints;
        let basis: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        params.insert_param(BASIS, basis, &[latent_dim, 3 * total_keypoints]);
        params.insert_param(BIAS, vec![0.0; 3 * total_keypoints], &[3 * total_keypoints]);
    }

    pub fn from_params(params: &ParamStore) -> Result<Self> {
        Ok(ShapeDictionary {
            basis: params.get(BASIS)?.clone(),
            bias: params.get(BIAS)?.clone(),
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.basis.shape()[0]
    }

    pub fn total_keypoints(&self) -> usize {
        self.basis.shape()[1] / 3
    }

    /// Differentiable batch decode, `[b, D] → [b, 3k]`.
    pub fn decode_batch(&self, beta_raw: &Tensor, kind: DecoderKind) -> Result<Tensor> {
        Ok(match kind {
            DecoderKind::CutOff => beta_raw.relu().matmul(&self.basis)?.add(&self.bias)?,
            DecoderKind::Linear => beta_raw.matmul(&self.basis)?,
        })
    }
}

/// `reshape(ReLU(β′)·S + b_S)` for a single code.
pub fn cutoff_decode(beta_raw: &[f64], dict: &ShapeDictionary) -> Result<Structure3D> {
    let d = dict.latent_dim();
    if beta_raw.len() != d {
        return Err(Error::Invalid(format!(
            "latent code has {} entries, dictionary has {d}",
            beta_raw.len()
        )));
    }
    let b = Tensor::new(beta_raw.to_vec(), &[1, d])?;
    let flat = dict.decode_batch(&b, DecoderKind::CutOff)?;
    reshape_structure(flat.data())
}

/// Decode a code under another category's mask: the full decode restricted
/// to that category's block of columns.
pub fn cross_category_decode(
    beta_raw: &[f64],
    category: CategoryId,
    dict: &ShapeDictionary,
    registry: &CategoryRegistry,
) -> Result<Structure3D> {
    let schema = registry.get(category)?;
    Ok(cutoff_decode(beta_raw, dict)?.select_columns(schema.block()))
}

/// Constructive witness that cut-off coefficients lose no expressiveness.
///
/// Given unconstrained coefficients `α` (N × D) over basis `S` (D × 3k),
/// returns nonnegative `β` (N × D) and a bias `b_S` (3k) with
/// `β_n·S + b_S = α_n·S` for every row `n`:
/// `m_d = min_n α_nd`, `β_nd = α_nd − (m_d − ε_d)`, `b_S = Σ_d (m_d − ε_d) S_d`.
pub fn expressiveness_oracle(alphas: &DMatrix<f64>, basis: &DMatrix<f64>, eps: &[f64]) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let d = alphas.ncols();
    if basis.nrows() != d || eps.len() != d || alphas.nrows() == 0 {
        return Err(Error::Invalid(format!(
            "oracle shapes: alphas {}×{}, basis {}×{}, eps {}",
            alphas.nrows(),
            d,
            basis.nrows(),
            basis.ncols(),
            eps.len()
        )));
    }
    if eps.iter().any(|&e| !(e >= 0.0)) {
        return Err(Error::Invalid("eps must be nonnegative".into()));
    }
    let shift: Vec<f64> = (0..d).map(|j| alphas.column(j).min() - eps[j]).collect();
    let betas = DMatrix::from_fn(alphas.nrows(), d, |n, j| alphas[(n, j)] - shift[j]);
    let mut bias = vec![0.0; basis.ncols()];
    for (j, s) in shift.iter().enumerate() {
        for (c, b) in bias.iter_mut().enumerate() {
            *b += s * basis[(j, c)];
        }
    }
    Ok((betas, bias))
}

/// Latent dimensions that are zero on more than `threshold` of the given
/// post-ReLU codes.
pub fn inactive_atoms(codes: &[Vec<f64>], threshold: f64) -> Vec<usize> {
    let Some(d) = codes.first().map(Vec::len) else {
        return Vec::new();
    };
    (0..d)
        .filter(|&j| {
            let zeros = codes.iter().filter(|c| c[j] <= 0.0).count();
            zeros as f64 > threshold * codes.len() as f64
        })
        .collect()
}

/// Basis rows that are identically zero.
pub fn dead_basis_rows(dict: &ShapeDictionary) -> Vec<usize> {
    let w = dict.basis.shape()[1];
    dict.basis
        .data()
        .chunks(w)
        .enumerate()
        .filter(|(_, row)| row.iter().all(|&v| v == 0.0))
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("kp{i}")).collect()
    }

    fn dict_from(basis: Vec<f64>, bias: Vec<f64>, d: usize) -> ShapeDictionary {
        let w = bias.len();
        ShapeDictionary {
            basis: Tensor::new(basis, &[d, w]).unwrap(),
            bias: Tensor::new(bias, &[w]).unwrap(),
        }
    }

    #[test]
    fn block_offsets_are_running_sums() {
        let mut reg = CategoryRegistry::new();
        let a = reg.register("a", names(8)).unwrap();
        let b = reg.register("b", names(12)).unwrap();
        let c = reg.register("c", names(5)).unwrap();
        assert_eq!(reg.get(a).unwrap().block_offset, 0);
        assert_eq!(reg.get(b).unwrap().block_offset, 8);
        assert_eq!(reg.get(c).unwrap().block_offset, 20);
        assert_eq!(reg.total_keypoints(), 25);
        assert_eq!(reg.max_keypoints(), 12);
    }

    #[test]
    fn registration_errors() {
        let mut reg = CategoryRegistry::new();
        reg.register("a", names(3)).unwrap();
        assert!(matches!(reg.register("a", names(4)), Err(Error::DuplicateCategory(_))));
        assert!(matches!(reg.register("b", names(2)), Err(Error::InvalidSchema(_))));
        let dup = vec!["x".to_string(), "y".into(), "x".into()];
        assert!(matches!(reg.register("c", dup), Err(Error::InvalidSchema(_))));
    }

    #[test]
    fn masks() {
        let mut reg = CategoryRegistry::new();
        let a = reg.register("a", names(3)).unwrap();
        assert!(reg.mask(a).unwrap().0.iter().all(|&b| b));

        let mut reg = CategoryRegistry::new();
        let a = reg.register("a", names(3)).unwrap();
        let b = reg.register("b", names(4)).unwrap();
        assert_eq!(reg.mask(b).unwrap().as_f64(), vec![0., 0., 0., 1., 1., 1., 1.]);
        let total: Vec<f64> = reg
            .mask(a)
            .unwrap()
            .as_f64()
            .iter()
            .zip(reg.mask(b).unwrap().as_f64())
            .map(|(x, y)| x + y)
            .collect();
        assert!(total.iter().all(|&v| v == 1.0));
        assert!(matches!(reg.mask(CategoryId(9)), Err(Error::UnknownCategory(_))));
    }

    #[test]
    fn cutoff_decode_examples() {
        let d = 2;
        let basis = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, -1.0, 0.5, 0.0, 2.0, 2.0, 2.0];
        let bias = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let dict = dict_from(basis, bias.clone(), d);
        assert_eq!(cutoff_decode(&[-1.0, -3.0], &dict).unwrap().flatten(), bias);
        let s = cutoff_decode(&[0.0, 1.0], &dict).unwrap().flatten();
        let expected: Vec<f64> = [-1.0, 0.5, 0.0, 2.0, 2.0, 2.0].iter().zip(&bias).map(|(a, b)| a + b).collect();
        assert_eq!(s, expected);
        assert!(cutoff_decode(&[1.0], &dict).is_err());
    }

    #[test]
    fn cutoff_decode_matches_direct_evaluation() {
        let (d, k) = (4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let basis: Vec<f64> = (0..d * 3 * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..3 * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let beta: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dict = dict_from(basis.clone(), bias.clone(), d);
        let got = cutoff_decode(&beta, &dict).unwrap().flatten();
        for c in 0..3 * k {
            let mut v = 0.0;
            for j in 0..d {
                v += beta[j].max(0.0) * basis[j * 3 * k + c];
            }
            v += bias[c];
            assert!((got[c] - v).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_hand_example() {
        let alphas = DMatrix::from_row_slice(1, 1, &[-3.0]);
        let basis = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let (betas, bias) = expressiveness_oracle(&alphas, &basis, &[0.0]).unwrap();
        assert_eq!(betas[(0, 0)], 0.0);
        assert_eq!(bias, vec![-3.0, 0.0, 0.0]);
    }

    #[test]
    fn oracle_single_sample_is_its_own_minimum() {
        let alphas = DMatrix::from_row_slice(1, 2, &[0.7, -1.5]);
        let basis = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.0, 4.0]);
        let (betas, bias) = expressiveness_oracle(&alphas, &basis, &[0.0, 0.0]).unwrap();
        assert!(betas.iter().all(|&b| b == 0.0));
        let direct = &alphas * &basis;
        for c in 0..3 {
            assert!((bias[c] - direct[(0, c)]).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_with_nonnegative_alphas_reconstructs() {
        let alphas = DMatrix::from_row_slice(3, 2, &[0.5, 1.0, 2.0, 0.25, 1.5, 3.0]);
        let basis = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 0.0, 1.0, 1.0]);
        let (betas, bias) = expressiveness_oracle(&alphas, &basis, &[0.0, 0.0]).unwrap();
        // m = (0.5, 0.25), b_S = 0.5·S_0 + 0.25·S_1
        assert_eq!(bias, vec![0.5, -0.75, 0.5]);
        let recon = &betas * &basis;
        let direct = &alphas * &basis;
        for n in 0..3 {
            for c in 0..3 {
                assert!((recon[(n, c)] + bias[c] - direct[(n, c)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_category_decode_selects_blocks() {
        let mut reg = CategoryRegistry::new();
        let a = reg.register("a", names(3)).unwrap();
        let b = reg.register("b", names(4)).unwrap();
        let k = reg.total_keypoints();
        let d = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dict = dict_from(
            (0..d * 3 * k).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..3 * k).map(|_| rng.random_range(-1.0..1.0)).collect(),
            d,
        );
        let neg = [-1.0, -2.0, -0.5];
        let bias_shape = reshape_structure(dict.bias.data()).unwrap();
        assert_eq!(
            cross_category_decode(&neg, b, &dict, &reg).unwrap(),
            bias_shape.select_columns(3..7)
        );

        let code = [0.4, -0.3, 1.2];
        let full = cutoff_decode(&code, &dict).unwrap();
        let da = cross_category_decode(&code, a, &dict, &reg).unwrap();
        let db = cross_category_decode(&code, b, &dict, &reg).unwrap();
        let mut joined = da.flatten();
        joined.extend(db.flatten());
        assert_eq!(joined, full.flatten());
        assert!(cross_category_decode(&code, CategoryId(2), &dict, &reg).is_err());
    }

    #[test]
    fn masked_decode_ignores_foreign_basis_columns() {
        let mut reg = CategoryRegistry::new();
        reg.register("a", names(3)).unwrap();
        let b = reg.register("b", names(3)).unwrap();
        let d = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let basis: Vec<f64> = (0..d * 18).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias = vec![0.0; 18];
        let code = [0.8, 0.3];
        let before = cross_category_decode(&code, b, &dict_from(basis.clone(), bias.clone(), d), &reg).unwrap();
        let mut perturbed = basis;
        for row in 0..d {
            for c in 0..9 {
                perturbed[row * 18 + c] += 10.0;
            }
        }
        let after = cross_category_decode(&code, b, &dict_from(perturbed, bias, d), &reg).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn inactive_atom_report() {
        let mut codes = vec![vec![0.0, 1.0]; 200];
        codes[0][0] = 0.5;
        assert_eq!(inactive_atoms(&codes, 0.99), vec![0]);
        codes[1][0] = 0.5;
        codes[2][0] = 0.5;
        assert!(inactive_atoms(&codes, 0.99).is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn oracle_is_exact_and_nonnegative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, d, k) = (1 + (seed % 20) as usize, 1 + (seed % 7) as usize, 3);
            let alphas = DMatrix::from_fn(n, d, |_, _| rng.random_range(-5.0..5.0));
            let basis = DMatrix::from_fn(d, 3 * k, |_, _| rng.random_range(-2.0..2.0));
            let eps: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..0.5)).collect();
            let (betas, bias) = expressiveness_oracle(&alphas, &basis, &eps).unwrap();
            for n_ in 0..n {
                for j in 0..d {
                    prop_assert!(betas[(n_, j)] >= eps[j] - 1e-12);
                }
            }
            let recon = &betas * &basis;
            let direct = &alphas * &basis;
            for n_ in 0..n {
                for c in 0..3 * k {
                    prop_assert!((recon[(n_, c)] + bias[c] - direct[(n_, c)]).abs() <= 1e-9);
                }
            }
        }
    }
}
