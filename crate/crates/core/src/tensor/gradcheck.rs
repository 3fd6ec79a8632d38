//! Central-difference gradient oracle, evaluated in double precision.

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::{ensure, Result};

/// Gradients smaller than this are compared on an absolute scale.
const ABS_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Maximum relative error between the tape gradient of `f` at `point` and
/// central differences with step `h`, over every coordinate.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let id = store.add("x", point.clone());
    grad_check_params(
        |tape, s| {
            let x = tape.param(s, id);
            f(tape, x)
        },
        &store,
        h,
    )
}

/// Same as [`grad_check`] over every trainable value of a parameter store.
pub fn grad_check_params<F>(f: F, store: &ParamStore<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    ensure!(h > 0.0, Contract, "finite-difference step must be positive, got {h}");
    let mut analytic_store = store.clone();
    analytic_store.zero_grads();
    let mut tape = Tape::new();
    let root = f(&mut tape, &analytic_store)?;
    tape.backward(root, &mut analytic_store)?;
    let analytic = analytic_store.flatten_grads();

    let base = store.flatten();
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    let mut offset = 0;
    for (_, _, t) in store.iter() {
        let n = t.len();
        if t.requires_grad() {
            for i in offset..offset + n {
                let mut x = base.clone();
                x[i] = base[i] + h;
                probe.unflatten(&x)?;
                let plus = eval(&f, &probe)?;
                x[i] = base[i] - h;
                probe.unflatten(&x)?;
                let minus = eval(&f, &probe)?;
                let numeric = (plus - minus) / (2.0 * h);
                worst = worst.max(relative_error(analytic[i], numeric));
            }
        }
        offset += n;
    }
    Ok(worst)
}

fn eval<F>(f: &F, store: &ParamStore<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let root = f(&mut tape, store)?;
    Ok(tape.scalar(root))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let err = grad_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                tape.sum(sq)
            },
            &Tensor::scalar(3.0),
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn sigmoid_passes_and_mismatch_scores_high() {
        let err = grad_check(
            |tape, x| {
                let y = tape.sigmoid(x)?;
                tape.sum(y)
            },
            &Tensor::new(vec![2], vec![0.3, -0.4]).unwrap(),
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8);
        let relerr = relative_error(0.0, 0.25);
        assert!(relerr > 0.99);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let e = grad_check(|t, x| t.sum(x), &Tensor::scalar(1.0), 0.0);
        assert!(e.is_err());
    }
}
