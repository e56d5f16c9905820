//! Central-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Compares the tape gradient of a scalar-valued function against central
/// differences, coordinate by coordinate. Returns the maximum over
/// coordinates of `|analytic - fd| / max(1, |analytic|)`.
///
/// `f` must build the function on the supplied tape from the input var and
/// return the scalar output node.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: T) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let eval = |t: &Tensor<T>| -> Result<T> {
        let mut tape = Tape::new();
        let v = tape.input(t.clone());
        let out = f(&mut tape, v)?;
        let val = tape.value(out);
        if val.numel() != 1 {
            return Err(Error::InvalidArgument {
                op: "grad_check",
                msg: format!("function output must be scalar, got {:?}", val.shape()),
            });
        }
        let y = val.item();
        if !y.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(y)
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let v = tape.input(x.clone());
    let out = f(&mut tape, v)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::InvalidArgument {
            op: "grad_check",
            msg: format!("function output must be scalar, got {:?}", tape.value(out).shape()),
        });
    }
    if !tape.value(out).item().is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    let grads = tape.backward(out)?;
    let zero = Tensor::zeros(x.shape());
    let analytic = grads.get(v).unwrap_or(&zero);

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (fp - fm).to_f64c() / (2.0 * h.to_f64c());
        let a = analytic.data()[i].to_f64c();
        let err = (a - fd).abs() / a.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(
            |tape, v| {
                let sq = tape.mul(v, v)?;
                Ok(tape.sum_all(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn plain_sum_is_exact() {
        let mut rng = Rng::new(1);
        let x: Tensor<f64> = rng.uniform(&[3, 3], -2.0, 2.0);
        let err = grad_check(|tape, v| Ok(tape.sum_all(v)), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "err {err}");
    }

    #[test]
    fn matmul_swish_composition() {
        let mut rng = Rng::new(2);
        let x: Tensor<f64> = rng.uniform(&[3, 3], -2.0, 2.0);
        let w: Tensor<f64> = rng.uniform(&[3, 3], -1.0, 1.0);
        let err = grad_check(
            move |tape, v| {
                let wv = tape.constant(w.clone());
                let y = tape.matmul(v, wv)?;
                let s = tape.swish(y);
                Ok(tape.sum_all(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn non_finite_function_is_an_error() {
        let x = Tensor::from_vec(&[1], vec![1000.0]).unwrap();
        let r = grad_check(
            |tape, v| {
                let e = tape.exp(v);
                let e2 = tape.exp(e);
                Ok(tape.sum_all(e2))
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn single_precision_tolerance() {
        let mut rng = Rng::new(3);
        let x: Tensor<f32> = rng.uniform(&[2, 2], -2.0, 2.0);
        let err = grad_check(
            |tape, v| {
                let s = tape.sigmoid(v);
                Ok(tape.sum_all(s))
            },
            &x,
            1e-2,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }
}
