//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Compares the tape gradient of `f` at `point` against central finite
/// differences with step `h`, returning
/// `max_i |analytic_i − fd_i| / max(1, |analytic_i|)`.
///
/// `f` must build a scalar-valued graph from the given leaf.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, VarId) -> Result<VarId>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(t.clone(), false);
        let out = f(&mut tape, x)?;
        tape.scalar_value(out)
    };

    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let out = f(&mut tape, x)?;
    if tape.value(out).len() != 1 {
        return Err(Error::NonScalarLoss {
            shape: tape.value(out).shape().to_vec(),
        });
    }
    tape.backward(out)?;
    let analytic = tape
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.len()]);

    let mut max_rel: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
