//! Weight initializers.

use rand::Rng;

use crate::element::Element;
use crate::tensor::Tensor;

/// Uniform in `±1/sqrt(fan_in)`.
pub fn fan_in_uniform<E: Element, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<E> {
    Tensor::uniform(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
}

/// Conv kernel `[C_out, C_in, k, k, k]`.
pub fn conv_kernel<E: Element, R: Rng + ?Sized>(c_out: usize, c_in: usize, k: usize, rng: &mut R) -> Tensor<E> {
    fan_in_uniform(&[c_out, c_in, k, k, k], c_in * k * k * k, rng)
}

/// Transposed-conv kernel `[C_in, C_out, k, k, k]`; each output voxel sees `C_in·(k/stride)³` taps.
pub fn transposed_kernel<E: Element, R: Rng + ?Sized>(
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    rng: &mut R,
) -> Tensor<E> {
    let per_axis = k.div_ceil(stride).max(1);
    fan_in_uniform(&[c_in, c_out, k, k, k], c_in * per_axis.pow(3), rng)
}
