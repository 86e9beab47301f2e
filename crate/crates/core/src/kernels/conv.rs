//! 2-D convolution via im2col + GEMM.

use crate::gemm::transpose;
use crate::tensor::{Scalar, Tensor};

/// Output extent for a convolution/pool dimension (floor division).
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad).saturating_sub(kernel) / stride + 1
}

/// Unfold one image [C,H,W] into columns [C*kh*kw, ho*wo].
/// Out-of-bounds taps read zero (zero padding).
fn im2col<T: Scalar>(
    x: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    debug_assert_eq!(cols.len(), c_in * kh * kw * ho * wo);
    let mut row = 0usize;
    for c in 0..c_in {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let out = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                let mut p = 0usize;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        for _ in 0..wo {
                            out[p] = T::zero();
                            p += 1;
                        }
                        continue;
                    }
                    let in_row = &plane[ii as usize * w..(ii as usize + 1) * w];
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        out[p] = if jj < 0 || jj >= w as isize {
                            T::zero()
                        } else {
                            in_row[jj as usize]
                        };
                        p += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Fold columns back, accumulating overlapping taps.
fn col2im_add<T: Scalar>(
    cols: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let mut row = 0usize;
    for c in 0..c_in {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                let mut p = 0usize;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        p += wo;
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            plane[ii as usize * w + jj as usize] += src[p];
                        }
                        p += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// x: [N,Cin,H,W], w: [Cout,Cin,kh,kw], b: [Cout] -> [N,Cout,ho,wo].
pub fn conv2d_fwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, c_in, h, wd) = shape4(x);
    let (c_out, c_in_w, kh, kw) = shape4(w);
    assert_eq!(c_in, c_in_w, "conv2d: channel mismatch");
    assert_eq!(b.numel(), c_out, "conv2d: bias length");
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(wd, kw, stride, pad);
    let k = c_in * kh * kw;
    let p = ho * wo;

    let mut y = Tensor::zeros(vec![n, c_out, ho, wo]);
    let mut cols = vec![T::zero(); k * p];
    for img in 0..n {
        let x_img = &x.data()[img * c_in * h * wd..(img + 1) * c_in * h * wd];
        im2col(x_img, c_in, h, wd, kh, kw, stride, pad, ho, wo, &mut cols);
        let y_img = &mut y.data_mut()[img * c_out * p..(img + 1) * c_out * p];
        T::gemm(c_out, k, p, w.data(), &cols, y_img, false);
        for o in 0..c_out {
            let bo = b.data()[o];
            for v in &mut y_img[o * p..(o + 1) * p] {
                *v += bo;
            }
        }
    }
    y
}

/// Gradients of conv2d w.r.t. input, weight and bias.
pub fn conv2d_bwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c_in, h, wd) = shape4(x);
    let (c_out, _, kh, kw) = shape4(w);
    let (_, _, ho, wo) = shape4(dy);
    let k = c_in * kh * kw;
    let p = ho * wo;

    let mut dx = Tensor::zeros(x.shape().to_vec());
    let mut dw = Tensor::zeros(w.shape().to_vec());
    let mut db = Tensor::zeros(vec![c_out]);
    let w_t = transpose(c_out, k, w.data());

    let mut cols = vec![T::zero(); k * p];
    let mut dcols = vec![T::zero(); k * p];
    for img in 0..n {
        let x_img = &x.data()[img * c_in * h * wd..(img + 1) * c_in * h * wd];
        let dy_img = &dy.data()[img * c_out * p..(img + 1) * c_out * p];

        im2col(x_img, c_in, h, wd, kh, kw, stride, pad, ho, wo, &mut cols);
        let cols_t = transpose(k, p, &cols);
        T::gemm(c_out, p, k, dy_img, &cols_t, dw.data_mut(), true);

        T::gemm(k, c_out, p, &w_t, dy_img, &mut dcols, false);
        let dx_img = &mut dx.data_mut()[img * c_in * h * wd..(img + 1) * c_in * h * wd];
        col2im_add(&dcols, c_in, h, wd, kh, kw, stride, pad, ho, wo, dx_img);

        for o in 0..c_out {
            let mut s = T::zero();
            for &v in &dy_img[o * p..(o + 1) * p] {
                s += v;
            }
            db.data_mut()[o] += s;
        }
    }
    (dx, dw, db)
}

fn shape4<T: Scalar>(t: &Tensor<T>) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected rank-4 tensor, got {:?}", s);
    (s[0], s[1], s[2], s[3])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_1x1_kernel() {
        // 2-channel identity: w[o][i] = delta(o,i)
        let x = Tensor::<f64>::new(
            vec![1, 2, 2, 2],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
        )
        .unwrap();
        let w = Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::zeros(vec![2]);
        let y = conv2d_fwd(&x, &w, &b, 1, 0);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn hand_unrolled_2x2_on_3x3() {
        // 1x1x3x3 input, 1x1x2x2 kernel; each output is a dot product of a
        // window with the kernel, written out by hand.
        let x = Tensor::<f64>::new(
            vec![1, 1, 3, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let w = Tensor::new(vec![1, 1, 2, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let b = Tensor::new(vec![1], vec![0.25]).unwrap();
        let y = conv2d_fwd(&x, &w, &b, 1, 0);
        // window (1,2,4,5):  1*1 - 1*2 + 0.5*4 + 2*5 + 0.25 = 11.25
        // window (2,3,5,6):  2 - 3 + 2.5 + 12 + 0.25 = 13.75
        // window (4,5,7,8):  4 - 5 + 3.5 + 16 + 0.25 = 18.75
        // window (5,6,8,9):  5 - 6 + 4.0 + 18 + 0.25 = 21.25
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        let want = [11.25, 13.75, 18.75, 21.25];
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn padding_reads_zero() {
        let x = Tensor::<f64>::new(vec![1, 1, 1, 1], vec![3.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let b = Tensor::zeros(vec![1]);
        let y = conv2d_fwd(&x, &w, &b, 1, 1);
        // only the center tap hits the single pixel
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 3.0);
    }

    #[test]
    fn stride_two_shapes() {
        let x = Tensor::<f32>::zeros(vec![2, 3, 8, 8]);
        let w = Tensor::zeros(vec![4, 3, 3, 3]);
        let b = Tensor::zeros(vec![4]);
        let y = conv2d_fwd(&x, &w, &b, 2, 1);
        assert_eq!(y.shape(), &[2, 4, 4, 4]);
    }
}
