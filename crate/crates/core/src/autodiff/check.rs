//! Central-difference gradient verification.

use crate::error::{CoreError, Result};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Compare the analytic gradient of a scalar-valued graph against central
/// differences at `eps`, returning the max over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
///
/// `f` must deterministically rebuild the same graph for the same input.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Var,
{
    assert!(eps > 0.0, "grad_check: eps must be positive");

    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.leaf(t.clone());
        let y = f(&mut tape, xv);
        let v = tape.value(y).item();
        if !v.is_finite() {
            return Err(CoreError::NonFinite(format!("grad_check objective = {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&mut tape, xv);
    let y_val = tape.value(y).item();
    if !y_val.is_finite() {
        return Err(CoreError::NonFinite(format!("grad_check objective = {y_val}")));
    }
    let grads = tape.backward(y);
    let analytic: Vec<f64> = match grads.get(xv) {
        Some(g) => g.to_vec(),
        None => vec![0.0; x.numel()],
    };

    let mut max_rel: f64 = 0.0;
    for i in 0..x.numel() {
        let mut xp = x.clone();
        xp.data_mut()[i] += eps;
        let mut xm = x.clone();
        xm.data_mut()[i] -= eps;
        let numeric = (eval(&xp)? - eval(&xm)?) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        // f(x) = x^2, analytic gradient 6.0 at x = 3.
        let x = Tensor::scalar(3.0);
        let rel = grad_check(
            |tape, v| {
                let sq = tape.mul(v, v);
                tape.sum_all(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-6, "rel error {rel}");
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let x = Tensor::new(vec![1, 5], vec![0.4, -1.0, 2.2, 0.0, -0.3]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let sm = tape.softmax(xv, false);
        let y = tape.sum_all(sm);
        let grads = tape.backward(y);
        for &g in grads.get(xv).unwrap() {
            assert!(g.abs() < 1e-12, "gradient {g} should vanish");
        }
        // And grad_check agrees.
        let rel = grad_check(
            |tape, v| {
                let sm = tape.softmax(v, false);
                tape.sum_all(sm)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-6);
    }

    #[test]
    fn mixed_op_graph_passes() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -0.7, 1.2, 0.9, -0.1, 0.5]);
        let rel = grad_check(
            |tape, v| {
                let g = tape.gelu(v);
                let sp = tape.softplus(g);
                let e = tape.exp(sp);
                let a = tape.abs(e);
                tape.mean_all(a)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-7, "rel error {rel}");
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::scalar(800.0);
        let got = grad_check(
            |tape, v| {
                let e = tape.exp(v); // overflows to inf at 800
                tape.sum_all(e)
            },
            &x,
            1e-5,
        );
        assert!(got.is_err());
    }
}
