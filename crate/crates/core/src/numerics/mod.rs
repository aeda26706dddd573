//! Dense `f64` tensors, differentiable kernels, and the gradient tape.

pub mod kernels;
mod tape;
mod tensor;

pub use kernels::{
    cosine_similarity, cross_entropy, gelu, layer_norm, matmul, softmax_rows, LAYER_NORM_EPS,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Max elementwise relative error, with `floor` guarding near-zero denominators.
pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
