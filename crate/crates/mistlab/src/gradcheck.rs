//! Central-difference gradient checking.
//!
//! The oracle re-evaluates the function under test from scratch for every
//! perturbed coordinate, so it is independent of the reverse-mode path it
//! verifies.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Max relative error between the reverse-mode gradient of `build` at `x`
/// and a central difference with step `h`.
///
/// `build` must append a scalar-valued graph rooted at the given leaf.
/// The error at coordinate i is |ad_i - fd_i| / max(1, |fd_i|).
pub fn grad_check(build: impl Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor, h: f64) -> Result<f64> {
    if h <= 0.0 {
        return Err(Error::InvalidArgument(format!("step size must be > 0, got {h}")));
    }
    let eval = |point: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(point, false);
        let root = build(&mut tape, leaf)?;
        let v = tape.value(root);
        if !v.is_scalar() {
            return Err(Error::NonScalarRoot(v.shape().to_vec()));
        }
        let y = v.item();
        if !y.is_finite() {
            return Err(Error::RuntimeCheck("non-finite value during grad_check".into()));
        }
        Ok(y)
    };

    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let root = build(&mut tape, leaf)?;
    if !tape.value(root).is_scalar() {
        return Err(Error::NonScalarRoot(tape.value(root).shape().to_vec()));
    }
    let grads = tape.backward(root)?;
    let ad = grads
        .wrt(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (ad.data()[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
