//! Elementwise and reduction primitives: ReLU, residual add, elementwise
//! multiply, channel masking, scalar extraction ops.

use crate::tensor::{Scalar, Tensor};

pub fn relu_fwd<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient 0 at the kink.
pub fn relu_bwd<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
    dx
}

pub fn add_fwd<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
    let mut y = a.clone();
    y.add_assign(b);
    y
}

pub fn mul_fwd<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
    let mut y = a.clone();
    for (o, &v) in y.data_mut().iter_mut().zip(b.data()) {
        *o *= v;
    }
    y
}

pub fn mul_bwd<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    (mul_fwd(dy, b), mul_fwd(dy, a))
}

/// Zero out whole channels of [N,C,...]. `keep[c] == false` silences
/// channel c. Works for rank-2 ([N,C]) and rank-4 tensors.
pub fn channel_mask_fwd<T: Scalar>(x: &Tensor<T>, keep: &[bool]) -> Tensor<T> {
    let s = x.shape();
    let c = s[1];
    assert_eq!(keep.len(), c, "mask length");
    let inner: usize = s[2..].iter().product();
    let mut y = x.clone();
    for img in 0..s[0] {
        for ch in 0..c {
            if !keep[ch] {
                let base = (img * c + ch) * inner;
                for v in &mut y.data_mut()[base..base + inner] {
                    *v = T::zero();
                }
            }
        }
    }
    y
}

pub fn channel_mask_bwd<T: Scalar>(dy: &Tensor<T>, keep: &[bool]) -> Tensor<T> {
    channel_mask_fwd(dy, keep)
}

/// Pick one logit out of [N,K] as a scalar.
pub fn select_logit_fwd<T: Scalar>(x: &Tensor<T>, sample: usize, class: usize) -> Tensor<T> {
    let k = x.shape()[1];
    Tensor::scalar(x.data()[sample * k + class])
}

pub fn select_logit_bwd<T: Scalar>(
    x_shape: &[usize],
    sample: usize,
    class: usize,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape.to_vec());
    let k = x_shape[1];
    dx.data_mut()[sample * k + class] = dy.item();
    dx
}

/// Sum of one class plane of [N,D,H,W] over a pixel set, as a scalar.
/// The pixel list order is fixed by the caller (row-major construction).
pub fn masked_pixel_sum_fwd<T: Scalar>(
    x: &Tensor<T>,
    sample: usize,
    class: usize,
    pixels: &[(usize, usize)],
) -> Tensor<T> {
    let s = x.shape();
    let (d, h, w) = (s[1], s[2], s[3]);
    let base = (sample * d + class) * h * w;
    let mut sum = T::zero();
    for &(pi, pj) in pixels {
        sum += x.data()[base + pi * w + pj];
    }
    Tensor::scalar(sum)
}

pub fn masked_pixel_sum_bwd<T: Scalar>(
    x_shape: &[usize],
    sample: usize,
    class: usize,
    pixels: &[(usize, usize)],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let (d, h, w) = (x_shape[1], x_shape[2], x_shape[3]);
    let mut dx = Tensor::zeros(x_shape.to_vec());
    let base = (sample * d + class) * h * w;
    let g = dy.item();
    for &(pi, pj) in pixels {
        dx.data_mut()[base + pi * w + pj] += g;
    }
    dx
}

pub fn sum_all_fwd<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::scalar(x.sum())
}

pub fn sum_all_bwd<T: Scalar>(x_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    Tensor::full(x_shape.to_vec(), dy.item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_and_gates() {
        let x = Tensor::<f64>::new(vec![4], vec![-1.0, 0.0, 2.0, -0.5]).unwrap();
        let y = relu_fwd(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0, 0.0]);
        let dy = Tensor::full(vec![4], 1.0);
        let dx = relu_bwd(&x, &dy);
        assert_eq!(dx.data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn channel_mask_zeroes_selected() {
        let x = Tensor::<f64>::new(vec![1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = channel_mask_fwd(&x, &[false, true]);
        assert_eq!(y.data(), &[0.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn masked_pixel_sum_picks_only_listed() {
        let x = Tensor::<f64>::new(
            vec![1, 2, 2, 2],
            vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0],
        )
        .unwrap();
        let s = masked_pixel_sum_fwd(&x, 0, 1, &[(0, 0), (1, 1)]);
        assert_eq!(s.item(), 50.0);
    }
}
