//! Query ↔ ground-truth matching and the four training losses.

use std::cmp::Ordering;
use std::ops::{Add, Sub};

use kplift_tensor::Tensor;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Huber threshold of the reprojection loss.
pub const HUBER_DELTA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(query, gt)` pairs ordered by ground-truth index.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl MatchResult {
    /// Query assigned to each ground-truth keypoint.
    pub fn queries(&self) -> Vec<usize> {
        self.pairs.iter().map(|&(q, _)| q).collect()
    }
}

/// Primary cost with an exact integer tie-breaker.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Lex(f64, i128);

impl Add for Lex {
    type Output = Lex;
    fn add(self, o: Lex) -> Lex {
        Lex(self.0 + o.0, self.1 + o.1)
    }
}

impl Sub for Lex {
    type Output = Lex;
    fn sub(self, o: Lex) -> Lex {
        Lex(self.0 - o.0, self.1 - o.1)
    }
}

impl PartialOrd for Lex {
    fn partial_cmp(&self, o: &Lex) -> Option<Ordering> {
        match self.0.partial_cmp(&o.0)? {
            Ordering::Equal => Some(self.1.cmp(&o.1)),
            ord => Some(ord),
        }
    }
}

/// Shortest augmenting path assignment (O(n²m)) of `n` rows into `m ≥ n`
/// columns. Returns the column of each row.
fn solve(n: usize, m: usize, cost: impl Fn(usize, usize) -> Lex) -> Vec<usize> {
    let zero = Lex(0.0, 0);
    let inf = Lex(f64::INFINITY, 0);
    let mut u = vec![zero; n + 1];
    let mut v = vec![zero; m + 1];
    // p[j]: row (1-based) owning column j; column 0 is the virtual root
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] = u[p[j]] + delta;
                    v[j] = v[j] - delta;
                } else {
                    minv[j] = minv[j] - delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            col[p[j] - 1] = j - 1;
        }
    }
    col
}

/// Minimum-cost injective assignment of ground-truth columns to query rows
/// of `cost` (`Q × G`). Among optimal assignments the one whose query list,
/// read in ground-truth order, is lexicographically smallest wins.
pub fn hungarian_match(cost: &DMatrix<f64>) -> Result<MatchResult> {
    let (q, g) = cost.shape();
    if q < g {
        return Err(Error::NotEnoughQueries { queries: q, targets: g });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Invalid("cost matrix has non-finite entries".into()));
    }
    // weight q·Q^(G−1−g) turns the query list into a base-Q number
    let weights: Option<Vec<i128>> = (0..g).map(|gi| (q as i128).checked_pow((g - 1 - gi) as u32)).collect();
    let weights = weights.filter(|w| w.first().is_none_or(|&w0| w0.checked_mul(q as i128 * g as i128).is_some()));
    let assign = solve(g, q, |gi, qi| {
        let tie = weights.as_ref().map_or(0, |w| qi as i128 * w[gi]);
        Lex(cost[(qi, gi)], tie)
    });
    let pairs: Vec<(usize, usize)> = assign.iter().enumerate().map(|(gi, &qi)| (qi, gi)).collect();
    let total_cost = pairs.iter().map(|&(qi, gi)| cost[(qi, gi)]).sum();
    Ok(MatchResult { pairs, total_cost })
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Matching cost `L_l + L_k` of every (query, ground truth) pair: mean
/// absolute location error over the two coordinates plus the type
/// cross-entropy. `type_logits` is `Q × K`.
pub fn matching_cost(locations: &[[f64; 2]], type_logits: &[Vec<f64>], gt_locations: &[[f64; 2]], gt_types: &[usize]) -> DMatrix<f64> {
    let logp: Vec<Vec<f64>> = type_logits.iter().map(|r| log_softmax(r)).collect();
    DMatrix::from_fn(locations.len(), gt_locations.len(), |q, g| {
        let l = ((locations[q][0] - gt_locations[g][0]).abs() + (locations[q][1] - gt_locations[g][1]).abs()) / 2.0;
        l - logp[q][gt_types[g]]
    })
}

/// Mean absolute error over all coordinates.
pub fn loss_location(gt: &Tensor, pred: &Tensor) -> Result<Tensor> {
    Ok(gt.sub(pred)?.abs().mean())
}

/// Mean cross-entropy of `softmax(logits)` rows against one-hot rows.
pub fn loss_type(gt_onehot: &Tensor, logits: &Tensor) -> Result<Tensor> {
    if gt_onehot.shape() != logits.shape() || logits.rank() != 2 {
        return Err(Error::Invalid(format!(
            "type loss shapes {:?} vs {:?}",
            gt_onehot.shape(),
            logits.shape()
        )));
    }
    let rows = logits.shape()[0] as f64;
    Ok(gt_onehot.mul(&logits.log_softmax()?)?.sum().scale(-1.0 / rows))
}

/// One-hot rows from class indices.
pub fn one_hot(classes: &[usize], n: usize) -> Result<Tensor> {
    let mut data = vec![0.0; classes.len() * n];
    for (i, &c) in classes.iter().enumerate() {
        if c >= n {
            return Err(Error::Invalid(format!("class {c} out of {n}")));
        }
        data[i * n + c] = 1.0;
    }
    Ok(Tensor::new(data, &[classes.len(), n])?)
}

/// Category cross-entropy; `logits` is `[|Z|]` or `[b, |Z|]`.
pub fn loss_category(gt: &[usize], logits: &Tensor) -> Result<Tensor> {
    let n = *logits.shape().last().unwrap_or(&0);
    let logits = logits.reshape(&[gt.len(), n])?;
    loss_type(&one_hot(gt, n)?, &logits)
}

/// Huber loss on `gt − reproj` averaged over supervised coordinates.
/// `gt`, `reproj`: `[..., k, 2]`. `mask` is either per keypoint (`[..., k]`,
/// category mask times visibility) or per coordinate (same shape as `gt`).
pub fn loss_reprojection(gt: &Tensor, reproj: &Tensor, mask: &Tensor, delta: f64) -> Result<Tensor> {
    let (m, supervised) = if mask.shape() == gt.shape() {
        (mask.clone(), mask.data().iter().sum::<f64>())
    } else {
        let mut mshape = mask.shape().to_vec();
        mshape.push(1);
        (mask.reshape(&mshape)?, 2.0 * mask.data().iter().sum::<f64>())
    };
    if supervised <= 0.0 {
        return Err(Error::NothingSupervised);
    }
    // masking the residual (not just the loss) keeps gradients at zero on
    // unsupervised columns
    let r = gt.sub(reproj)?.mul(&m)?;
    Ok(r.huber(delta).sum().scale(1.0 / supervised))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub location: f64,
    pub keypoint_type: f64,
    pub category: f64,
    pub reprojection: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            location: 5.0,
            keypoint_type: 1.0,
            category: 1.0,
            reprojection: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.location, self.keypoint_type, self.category, self.reprojection];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().all(|&x| x == 0.0) {
            return Err(Error::Invalid(format!("loss weights {w:?} must be nonnegative with one positive")));
        }
        Ok(())
    }
}

/// The loss terms of one step; absent terms do not contribute.
#[derive(Debug, Clone, Default)]
pub struct LossComponents {
    pub location: Option<Tensor>,
    pub keypoint_type: Option<Tensor>,
    pub category: Option<Tensor>,
    pub reprojection: Option<Tensor>,
}

/// Scalar values of the loss terms (0 when absent) and their weighted sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub location: f64,
    pub keypoint_type: f64,
    pub category: f64,
    pub reprojection: f64,
    pub total: f64,
}

impl LossComponents {
    fn named(&self) -> [(&'static str, &Option<Tensor>); 4] {
        [
            ("location", &self.location),
            ("keypoint type", &self.keypoint_type),
            ("category", &self.category),
            ("reprojection", &self.reprojection),
        ]
    }

    pub fn breakdown(&self, total: &Tensor) -> LossBreakdown {
        let v = |t: &Option<Tensor>| t.as_ref().map_or(0.0, Tensor::item);
        LossBreakdown {
            location: v(&self.location),
            keypoint_type: v(&self.keypoint_type),
            category: v(&self.category),
            reprojection: v(&self.reprojection),
            total: total.item(),
        }
    }
}

/// `λ_l L_l + λ_k L_k + λ_b L_b + λ_r L_r`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<Tensor> {
    let lambdas = [w.location, w.keypoint_type, w.category, w.reprojection];
    let mut total: Option<Tensor> = None;
    for ((name, term), lambda) in c.named().into_iter().zip(lambdas) {
        let Some(t) = term else { continue };
        if !t.is_finite() {
            return Err(Error::NonFiniteLoss(name));
        }
        let s = t.scale(lambda);
        total = Some(match total {
            Some(acc) => acc.add(&s)?,
            None => s,
        });
    }
    total.ok_or_else(|| Error::Invalid("no loss terms".into()))
}
