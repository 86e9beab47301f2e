//! Spatial pooling, global average pooling and nearest-neighbour upsampling.

use crate::tensor::{Scalar, Tensor};

pub fn pool_out_dim(input: usize, kernel: usize, stride: usize) -> usize {
    assert!(input >= kernel, "pool window larger than input");
    (input - kernel) / stride + 1
}

/// Max pooling. Returns the pooled map plus, per output element, the flat
/// index of the chosen input element. Ties go to the first maximal element
/// in row-major window order, which makes the backward routing
/// deterministic.
pub fn maxpool_fwd<T: Scalar>(x: &Tensor<T>, kernel: usize, stride: usize) -> (Tensor<T>, Vec<u32>) {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let ho = pool_out_dim(h, kernel, stride);
    let wo = pool_out_dim(w, kernel, stride);
    let mut y = Tensor::zeros(vec![n, c, ho, wo]);
    let mut arg = vec![0u32; n * c * ho * wo];
    let mut out = 0usize;
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for ki in 0..kernel {
                        let row = base + (oi * stride + ki) * w + oj * stride;
                        for kj in 0..kernel {
                            let v = x.data()[row + kj];
                            if v > best {
                                best = v;
                                best_idx = row + kj;
                            }
                        }
                    }
                    y.data_mut()[out] = best;
                    arg[out] = best_idx as u32;
                    out += 1;
                }
            }
        }
    }
    (y, arg)
}

pub fn maxpool_bwd<T: Scalar>(x_shape: &[usize], arg: &[u32], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape.to_vec());
    for (&a, &g) in arg.iter().zip(dy.data()) {
        dx.data_mut()[a as usize] += g;
    }
    dx
}

pub fn avgpool_fwd<T: Scalar>(x: &Tensor<T>, kernel: usize, stride: usize) -> Tensor<T> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let ho = pool_out_dim(h, kernel, stride);
    let wo = pool_out_dim(w, kernel, stride);
    let inv = T::from_f64(1.0 / (kernel * kernel) as f64);
    let mut y = Tensor::zeros(vec![n, c, ho, wo]);
    let mut out = 0usize;
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut sum = T::zero();
                    for ki in 0..kernel {
                        let row = base + (oi * stride + ki) * w + oj * stride;
                        for kj in 0..kernel {
                            sum += x.data()[row + kj];
                        }
                    }
                    y.data_mut()[out] = sum * inv;
                    out += 1;
                }
            }
        }
    }
    y
}

pub fn avgpool_bwd<T: Scalar>(
    x_shape: &[usize],
    kernel: usize,
    stride: usize,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let s = dy.shape();
    let (ho, wo) = (s[2], s[3]);
    let inv = T::from_f64(1.0 / (kernel * kernel) as f64);
    let mut dx = Tensor::zeros(x_shape.to_vec());
    let mut out = 0usize;
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            for oi in 0..ho {
                for oj in 0..wo {
                    let g = dy.data()[out] * inv;
                    out += 1;
                    for ki in 0..kernel {
                        let row = base + (oi * stride + ki) * w + oj * stride;
                        for kj in 0..kernel {
                            dx.data_mut()[row + kj] += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Global average pooling [N,C,H,W] -> [N,C].
pub fn gap_fwd<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let inv = T::from_f64(1.0 / hw as f64);
    let mut y = Tensor::zeros(vec![n, c]);
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * hw;
            let mut sum = T::zero();
            for &v in &x.data()[base..base + hw] {
                sum += v;
            }
            y.data_mut()[img * c + ch] = sum * inv;
        }
    }
    y
}

pub fn gap_bwd<T: Scalar>(x_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, hw) = (x_shape[0], x_shape[1], x_shape[2] * x_shape[3]);
    let inv = T::from_f64(1.0 / hw as f64);
    let mut dx = Tensor::zeros(x_shape.to_vec());
    for img in 0..n {
        for ch in 0..c {
            let g = dy.data()[img * c + ch] * inv;
            let base = (img * c + ch) * hw;
            for v in &mut dx.data_mut()[base..base + hw] {
                *v = g;
            }
        }
    }
    dx
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_fwd<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h * factor, w * factor);
    let mut y = Tensor::zeros(vec![n, c, ho, wo]);
    for img in 0..n {
        for ch in 0..c {
            let base_in = (img * c + ch) * h * w;
            let base_out = (img * c + ch) * ho * wo;
            for oi in 0..ho {
                let src_row = base_in + (oi / factor) * w;
                let dst_row = base_out + oi * wo;
                for oj in 0..wo {
                    y.data_mut()[dst_row + oj] = x.data()[src_row + oj / factor];
                }
            }
        }
    }
    y
}

pub fn upsample_bwd<T: Scalar>(x_shape: &[usize], factor: usize, dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (ho, wo) = (h * factor, w * factor);
    let mut dx = Tensor::zeros(x_shape.to_vec());
    for img in 0..n {
        for ch in 0..c {
            let base_in = (img * c + ch) * h * w;
            let base_out = (img * c + ch) * ho * wo;
            for oi in 0..ho {
                let src_row = base_in + (oi / factor) * w;
                let dst_row = base_out + oi * wo;
                for oj in 0..wo {
                    dx.data_mut()[src_row + oj / factor] += dy.data()[dst_row + oj];
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_ties_pick_first() {
        let x = Tensor::<f64>::new(vec![1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]).unwrap();
        let (y, arg) = maxpool_fwd(&x, 2, 2);
        assert_eq!(y.data()[0], 5.0);
        assert_eq!(arg[0], 0); // first in row-major order
    }

    #[test]
    fn gap_constant_map_is_the_constant() {
        let x = Tensor::<f64>::full(vec![1, 3, 4, 4], 2.75);
        let y = gap_fwd(&x);
        assert_eq!(y.shape(), &[1, 3]);
        for &v in y.data() {
            assert!((v - 2.75).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_replicates() {
        let x = Tensor::<f64>::new(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let y = upsample_fwd(&x, 2);
        assert_eq!(y.shape(), &[1, 1, 2, 4]);
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn avgpool_bwd_spreads_evenly() {
        let x = Tensor::<f64>::zeros(vec![1, 1, 2, 2]);
        let dy = Tensor::new(vec![1, 1, 1, 1], vec![4.0]).unwrap();
        let dx = avgpool_bwd(x.shape(), 2, 2, &dy);
        assert_eq!(dx.data(), &[1.0, 1.0, 1.0, 1.0]);
    }
}
