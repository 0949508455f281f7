use kplift_tensor::{finite_difference_check, gradients, Result, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
}

fn check(name: &str, x: &Tensor, f: impl Fn(&Tensor) -> Result<Tensor>) {
    let r = finite_difference_check(f, x, STEP).unwrap();
    assert_eq!(r.kinks, 0, "{name}: kink hit, {r:?}");
    assert!(r.max_rel_error < TOL, "{name}: {r:?}");
}

#[test]
fn every_op_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&mut rng, &[3, 4]);
    let w = random(&mut rng, &[4, 5]);
    let row = random(&mut rng, &[4]);
    let pos = Tensor::new(a.data().iter().map(|v| v.abs() + 0.5).collect(), &[3, 4]).unwrap();
    let weights = random(&mut rng, &[3, 4]);
    // weighted sum so every output coordinate matters
    let wsum = |t: Tensor| -> Result<Tensor> { Ok(t.mul(&weights)?.sum()) };

    check("add+broadcast", &a, |x| wsum(x.add(&row)?));
    check("broadcast rhs", &row, |x| wsum(a.add(x)?));
    check("sub", &a, |x| wsum(x.sub(&a.scale(0.3))?));
    check("mul", &a, |x| wsum(x.mul(x)?));
    check("div", &pos, |x| wsum(a.div(x)?));
    check("sigmoid", &a, |x| wsum(x.sigmoid()));
    check("sqrt", &pos, |x| wsum(x.sqrt()));
    check("log", &pos, |x| wsum(x.log()));
    check("exp", &a, |x| wsum(x.exp()));
    check("huber", &a, |x| wsum(x.scale(0.2).huber(0.1)));
    check("softmax", &a, |x| wsum(x.softmax()?));
    check("log_softmax", &a, |x| wsum(x.log_softmax()?));
    check("matmul lhs", &a, |x| Ok(x.matmul(&w)?.square().sum()));
    check("matmul rhs", &w, |x| Ok(a.matmul(x)?.square().sum()));
    check("sum_axis", &a, |x| Ok(x.sum_axis(0, false)?.square().sum()));
    check("mean_axis", &a, |x| Ok(x.mean_axis(1, true)?.square().sum()));
    check("transpose", &a, |x| wsum(x.transpose(0, 1)?.square().transpose(0, 1)?));
    check("slice+concat", &a, |x| {
        let l = x.slice(1, 0, 1)?;
        let r = x.slice(1, 1, 4)?;
        wsum(Tensor::concat(&[r.square(), l], 1)?)
    });
    check("gather_rows", &a, |x| Ok(x.gather_rows(&[2, 0, 2])?.square().sum()));
    check("broadcast_to", &row, |x| wsum(x.broadcast_to(&[3, 4])?.square()));
    check("reshape", &a, |x| {
        Ok(x.reshape(&[2, 6])?
            .matmul(&random(&mut ChaCha8Rng::seed_from_u64(1), &[6, 2]))?
            .square()
            .sum())
    });

    // batched matmul
    let b1 = random(&mut rng, &[2, 3, 4]);
    let b2 = random(&mut rng, &[2, 4, 2]);
    check("bmm lhs", &b1, |x| Ok(x.matmul(&b2)?.square().sum()));
    check("bmm rhs", &b2, |x| Ok(b1.matmul(x)?.square().sum()));
}

#[test]
fn attention_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let q = random(&mut rng, &[2, 3, 4]);
    let k = random(&mut rng, &[2, 5, 4]);
    let v = random(&mut rng, &[2, 5, 4]);
    let w = random(&mut rng, &[2, 3, 4]);
    let loss = |q: &Tensor, k: &Tensor, v: &Tensor| -> Result<Tensor> { Ok(Tensor::attention(q, k, v, 2)?.mul(&w)?.sum()) };
    check("attention q", &q, |x| loss(x, &k, &v));
    check("attention k", &k, |x| loss(&q, x, &v));
    check("attention v", &v, |x| loss(&q, &k, x));
}

#[test]
fn attention_matches_explicit_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = random(&mut rng, &[1, 3, 2]);
    let k = random(&mut rng, &[1, 4, 2]);
    let v = random(&mut rng, &[1, 4, 2]);
    let fused = Tensor::attention(&q, &k, &v, 1).unwrap();
    let scores = q.matmul(&k.transpose(1, 2).unwrap()).unwrap().scale(1.0 / 2f64.sqrt());
    let explicit = scores.softmax().unwrap().matmul(&v).unwrap();
    for (a, b) in fused.data().iter().zip(explicit.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn two_losses(x: &Tensor, y: &Tensor) -> (Tensor, Tensor) {
    let l1 = x.matmul(y).unwrap().relu().sum();
    let l2 = x.sigmoid().mul(x).unwrap().mean();
    (l1, l2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Backward of a sum of losses equals the sum of the separate backward passes.
    #[test]
    fn backward_is_linear(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[3, 4]).to_param();
        let y = random(&mut rng, &[4, 2]).to_param();
        let (l1, l2) = two_losses(&x, &y);
        let joint = gradients(&l1.add(&l2).unwrap(), &[x.clone(), y.clone()]).unwrap();
        let g1 = gradients(&l1, &[x.clone(), y.clone()]).unwrap();
        let g2 = gradients(&l2, &[x.clone(), y.clone()]).unwrap();
        for i in 0..2 {
            prop_assert_eq!(joint[i].shape(), g1[i].shape());
            for ((j, a), b) in joint[i].data().iter().zip(g1[i].data()).zip(g2[i].data()) {
                prop_assert!((j - (a + b)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn forward_ops_stay_finite(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[4, 3]).scale(50.0);
        prop_assert!(x.softmax().unwrap().is_finite());
        prop_assert!(x.log_softmax().unwrap().is_finite());
        prop_assert!(x.sigmoid().is_finite());
        prop_assert!(x.huber(0.1).is_finite());
    }
}
