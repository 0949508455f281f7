use crate::{gradients, Result, Tensor, TensorError};

/// Outcome of a central-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    /// `max_i |analytic_i − central_i| / max(1, |analytic_i|)`
    pub max_rel_error: f64,
    /// Coordinate where the maximum was attained.
    pub worst_index: usize,
    /// Coordinates whose one-sided differences disagree, i.e. the step
    /// straddles a kink (ReLU, |·|) and the comparison is meaningless.
    pub kinks: usize,
    /// Largest error over the coordinates that are not kinks.
    pub max_smooth_rel_error: f64,
    pub checked: usize,
}

/// Compare the reverse-mode gradient of `f` at `x` against central
/// differences on every coordinate.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<FdReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    finite_difference_check_coords(f, x, step, &all)
}

/// As [`finite_difference_check`], restricted to the listed coordinates.
pub fn finite_difference_check_coords<F>(f: F, x: &Tensor, step: f64, coords: &[usize]) -> Result<FdReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if !(step > 0.0) {
        return Err(TensorError::invalid("finite_difference_check", "step must be positive"));
    }
    let xp = x.to_param();
    let loss = f(&xp)?;
    let analytic = gradients(&loss, &[xp])?.remove(0);
    let f0 = loss.item();
    let base = x.data().to_vec();

    let eval_at = |i: usize, v: f64| -> Result<f64> {
        let mut d = base.clone();
        d[i] = v;
        Ok(f(&Tensor::new(d, x.shape())?)?.item())
    };

    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_index: 0,
        kinks: 0,
        max_smooth_rel_error: 0.0,
        checked: 0,
    };
    for &i in coords {
        let fp = eval_at(i, base[i] + step)?;
        let fm = eval_at(i, base[i] - step)?;
        let central = (fp - fm) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - central).abs() / a.abs().max(1.0);
        let mut kink = false;
        if err > 1e-6 {
            let fwd = (fp - f0) / step;
            let bwd = (f0 - fm) / step;
            kink = (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()).max(1.0);
        }
        if kink {
            report.kinks += 1;
        } else {
            report.max_smooth_rel_error = report.max_smooth_rel_error.max(err);
        }
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_passes() {
        let x = Tensor::vector(&[1.0, 2.0]);
        let r = finite_difference_check(|x| Ok(x.square().sum()), &x, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.kinks, 0);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::vector(&[1.0, 2.0, 3.0]);
        let r = finite_difference_check(|_| Ok(Tensor::scalar(4.2)), &x, 1e-5).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn huber_at_zero_residual_is_smooth() {
        let x = Tensor::vector(&[0.0]);
        let r = finite_difference_check(|x| Ok(x.huber(0.1).sum()), &x, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6);
        assert_eq!(r.kinks, 0);
    }

    #[test]
    fn relu_kink_is_flagged() {
        let x = Tensor::vector(&[0.0]);
        let r = finite_difference_check(|x| Ok(x.relu().sum()), &x, 1e-5).unwrap();
        assert_eq!(r.kinks, 1);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = Tensor::vector(&[0.0]);
        assert!(finite_difference_check(|x| Ok(x.sum()), &x, 0.0).is_err());
    }
}
