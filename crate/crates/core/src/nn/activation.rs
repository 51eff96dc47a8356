use super::{Real, Tensor};

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes the gradient where the forward input was strictly positive
/// (subgradient 0 at 0).
pub fn relu_backward<T: Real>(grad_out: &Tensor<T>, input: &Tensor<T>) -> Tensor<T> {
    let mut out = grad_out.clone();
    out.data_mut().iter_mut().zip(input.data()).for_each(|(g, &x)| {
        if x <= T::zero() {
            *g = T::zero();
        }
    });
    out
}
