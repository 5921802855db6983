//! Finite-difference verification of recorded gradients.

use super::tape::{grad, Tape, Var};
use super::{Tensor, TensorError, TensorResult};

/// Compares the recorded gradient of a scalar function against central
/// finite differences. Returns the maximum over coordinates of
/// `|analytic - central| / (|analytic| + 1e-12)`.
///
/// `build` must construct the same function on any tape it is given.
pub fn grad_check<F>(build: F, x: &Tensor, step: f64) -> TensorResult<f64>
where
    F: Fn(&Tape, &Var) -> TensorResult<Var>,
{
    if step <= 0.0 {
        return Err(TensorError::InvalidArg(format!("step {step} must be > 0")));
    }

    let eval = |point: &Tensor| -> TensorResult<f64> {
        let tape = Tape::new();
        let v = tape.input(point.clone());
        let y = build(&tape, &v)?;
        let out = y.value();
        if !out.is_scalar() {
            return Err(TensorError::NotScalar {
                shape: out.shape().to_vec(),
            });
        }
        let val = out.item();
        if !val.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        Ok(val)
    };

    let analytic = {
        let tape = Tape::new();
        let v = tape.input(x.clone());
        let y = build(&tape, &v)?;
        if !y.value().is_scalar() {
            return Err(TensorError::NotScalar {
                shape: y.value().shape().to_vec(),
            });
        }
        let g = grad(&y, &[&v])?.remove(0).value();
        if !g.all_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        g
    };

    let mut worst = 0.0_f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;

        let central = (plus - minus) / (2.0 * step);
        let err = (analytic.data()[i] - central).abs() / (analytic.data()[i].abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn quadratic_is_tight() {
        let x = Tensor::new(&[4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let err = grad_check(
            |_, v| v.mul(v)?.sum_all()?.mul_scalar(0.5),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn linear_is_exact() {
        let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let err = grad_check(
            |tape, v| {
                let w = tape.constant(Tensor::new(&[3], vec![2.0, 0.25, -1.5]).unwrap());
                v.mul(&w)?.sum_all()
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "err {err}");
    }

    #[test]
    fn softplus_error_decays_quadratically_with_step() {
        let mut rng = Rng::new(5);
        let x = Tensor::rand_normal(&[8], 0.0, 1.0, &mut rng);
        let f = |_: &Tape, v: &Var| v.softplus(1.0)?.sum_all();
        let coarse = grad_check(f, &x, 1e-3).unwrap();
        let fine = grad_check(f, &x, 1e-5).unwrap();
        assert!(fine < 1e-6, "fine {fine}");
        // central differences are O(step^2); one hundred-fold step reduction
        // should buy roughly four orders of magnitude
        assert!(fine < coarse * 1e-2 + 1e-12, "coarse {coarse}, fine {fine}");
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|_, v| v.sum_all(), &x, 0.0).is_err());
    }
}
