#![allow(dead_code)]

use nalgebra::DMatrix;

/// Minimum over all injective maps of targets (columns) into queries
/// (rows). Enumerates query lists in lexicographic order and keeps the
/// first minimum, so ties resolve to the smallest list.
pub fn brute_force_match(cost: &DMatrix<f64>) -> (Vec<usize>, f64) {
    fn go(cost: &DMatrix<f64>, g: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, best: &mut Option<(Vec<usize>, f64)>) {
        if g == cost.ncols() {
            let c: f64 = cur.iter().enumerate().map(|(gi, &q)| cost[(q, gi)]).sum();
            if best.as_ref().is_none_or(|b| c < b.1) {
                *best = Some((cur.clone(), c));
            }
            return;
        }
        for q in 0..cost.nrows() {
            if !used[q] {
                used[q] = true;
                cur.push(q);
                go(cost, g + 1, used, cur, best);
                cur.pop();
                used[q] = false;
            }
        }
    }
    let mut best = None;
    go(cost, 0, &mut vec![false; cost.nrows()], &mut Vec::new(), &mut best);
    best.expect("at least one assignment")
}
