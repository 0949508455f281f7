//! Hungarian matching of detector queries to ground-truth keypoints, and
//! the three evaluation metrics on a toy structure.

use kplift::assignment::{hungarian_match, matching_cost};
use kplift::geometry::{depth_flip, Structure3D};
use kplift::metrics::{mpjpe_with_flip, mutual_coherence, stress};
use nalgebra::DMatrix;

fn main() -> kplift::Result<()> {
    // four queries, three keypoints of types 0..3
    let locations = [[0.9, 0.1], [0.2, 0.2], [0.5, 0.8], [0.21, 0.19]];
    let logits = vec![vec![0.0, 0.0, 3.0], vec![2.0, 0.0, 0.0], vec![0.0, 3.0, 0.0], vec![2.0, 0.0, 0.0]];
    let gt = [[0.2, 0.2], [0.5, 0.75], [0.85, 0.1]];
    let cost = matching_cost(&locations, &logits, &gt, &[0, 1, 2]);
    let m = hungarian_match(&cost)?;
    println!("queries per keypoint {:?}, cost {:.4}", m.queries(), m.total_cost);

    let y = Structure3D::from_columns(&[[0.0, 0.0, 0.5], [1.0, 0.0, -0.5], [0.0, 1.0, 0.2]]);
    let (err, flipped) = mpjpe_with_flip(&depth_flip(&y), &y)?;
    println!("mpjpe of the depth-flipped truth {err} (flip used: {flipped})");
    let squashed = Structure3D(y.0.map(|v| 0.8 * v));
    println!("stress of a 0.8x copy {:.4}", stress(&squashed, &y)?);
    let w = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.2]);
    println!("mutual coherence {:.4}", mutual_coherence(&w)?);
    Ok(())
}
