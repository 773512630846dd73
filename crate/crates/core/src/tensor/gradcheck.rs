use super::{Tape, Tensor, Var};
use crate::error::{shape_err, Result};

/// Floor added to the denominator of the relative error so coordinates
/// whose true gradient is zero do not divide by rounding noise.
const REL_EPS: f64 = 1e-6;

/// Compares the tape gradient of a scalar function with central finite
/// differences at every coordinate of `x`. Returns the largest
/// `|analytic - fd| / (|analytic| + |fd| + eps)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(f, x, step, &coords)
}

/// [`grad_check`] restricted to the listed flat coordinates.
pub fn grad_check_at<F>(f: F, x: &Tensor<f64>, step: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.param(x.clone())?;
    let out = f(&mut tape, leaf)?;
    if tape.value(out).numel() != 1 {
        return shape_err(
            "grad_check",
            format!("non-scalar output {:?}", tape.shape(out)),
        );
    }
    tape.backward(out)?;
    let analytic = tape.grad(leaf).expect("leaf gradient").clone();

    let eval = |probe: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.param(probe.clone())?;
        let out = f(&mut tape, leaf)?;
        Ok(tape.value(out).item())
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - fd).abs() / (a.abs() + fd.abs() + REL_EPS);
        worst = worst.max(err);
    }
    Ok(worst)
}
