//! Central finite differences, used as the oracle for every adjoint.

use crate::tensor::Tensor;
use crate::Float;

/// Default step for 64-bit checks.
pub const DEFAULT_STEP: Float = 1e-5;

/// Magnitudes below this are compared absolutely in [`relative_error`].
pub const RELATIVE_FLOOR: Float = 1e-6;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element `i` of `x`.
pub fn finite_difference_grad<E>(
    mut f: impl FnMut(&Tensor) -> Result<Float, E>,
    x: &Tensor,
    h: Float,
) -> Result<Tensor, E> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(Tensor::new(x.shape().to_vec(), out).expect("shape preserved"))
}

/// `|a - b| / max(|a|, |b|, RELATIVE_FLOOR)`.
pub fn relative_error(a: Float, b: Float) -> Float {
    let scale = a.abs().max(b.abs()).max(RELATIVE_FLOOR);
    (a - b).abs() / scale
}

/// Worst element-wise [`relative_error`] between two same-shaped tensors.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> Float {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, Float::max)
}
