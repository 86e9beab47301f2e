//! Cross-entropy objectives for classification and dense prediction.

use crate::tensor::{Scalar, Tensor};

/// Numerically stable in-place softmax of a slice.
pub fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let mut max = T::neg_infinity();
    for &x in v.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Mean cross-entropy of logits [N,K] against class labels.
pub fn softmax_ce_fwd<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Tensor<T> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    assert_eq!(labels.len(), n, "label count");
    let mut total = T::zero();
    for row in 0..n {
        let l = &logits.data()[row * k..(row + 1) * k];
        debug_assert!(labels[row] < k);
        let mut max = T::neg_infinity();
        for &x in l {
            if x > max {
                max = x;
            }
        }
        let mut sum = T::zero();
        for &x in l {
            sum += (x - max).exp();
        }
        total += max + sum.ln() - l[labels[row]];
    }
    Tensor::scalar(total / T::from_f64(n as f64))
}

/// d loss / d logits = (softmax - onehot) / N, scaled by upstream dy.
pub fn softmax_ce_bwd<T: Scalar>(logits: &Tensor<T>, labels: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let scale = dy.item() / T::from_f64(n as f64);
    let mut dx = logits.clone();
    for row in 0..n {
        let l = &mut dx.data_mut()[row * k..(row + 1) * k];
        softmax_in_place(l);
        l[labels[row]] -= T::one();
        for v in l.iter_mut() {
            *v *= scale;
        }
    }
    dx
}

/// Mean per-pixel cross-entropy of logit maps [N,D,H,W] against a mask of
/// class indices (length N*H*W, row-major per image).
pub fn pixel_ce_fwd<T: Scalar>(logits: &Tensor<T>, mask: &[u8]) -> Tensor<T> {
    let s = logits.shape();
    let (n, d, h, w) = (s[0], s[1], s[2], s[3]);
    assert_eq!(mask.len(), n * h * w, "mask length");
    let hw = h * w;
    let mut total = T::zero();
    let mut class_vals = vec![T::zero(); d];
    for img in 0..n {
        for px in 0..hw {
            for (cd, cv) in class_vals.iter_mut().enumerate() {
                *cv = logits.data()[(img * d + cd) * hw + px];
            }
            let label = mask[img * hw + px] as usize;
            debug_assert!(label < d);
            let mut max = T::neg_infinity();
            for &x in &class_vals {
                if x > max {
                    max = x;
                }
            }
            let mut sum = T::zero();
            for &x in &class_vals {
                sum += (x - max).exp();
            }
            total += max + sum.ln() - class_vals[label];
        }
    }
    Tensor::scalar(total / T::from_f64((n * hw) as f64))
}

pub fn pixel_ce_bwd<T: Scalar>(logits: &Tensor<T>, mask: &[u8], dy: &Tensor<T>) -> Tensor<T> {
    let s = logits.shape();
    let (n, d, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    let scale = dy.item() / T::from_f64((n * hw) as f64);
    let mut dx = Tensor::zeros(s.to_vec());
    let mut class_vals = vec![T::zero(); d];
    for img in 0..n {
        for px in 0..hw {
            for (cd, cv) in class_vals.iter_mut().enumerate() {
                *cv = logits.data()[(img * d + cd) * hw + px];
            }
            softmax_in_place(&mut class_vals);
            let label = mask[img * hw + px] as usize;
            for (cd, &p) in class_vals.iter().enumerate() {
                let onehot = if cd == label { T::one() } else { T::zero() };
                dx.data_mut()[(img * d + cd) * hw + px] = (p - onehot) * scale;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_cost_ln_k() {
        for k in [2usize, 3, 10] {
            let logits = Tensor::<f64>::full(vec![4, k], 0.7);
            let loss = softmax_ce_fwd(&logits, &[0, 1 % k, 0, (k - 1) % k]);
            assert!(
                (loss.item() - (k as f64).ln()).abs() < 1e-12,
                "k={k}: {}",
                loss.item()
            );
        }
    }

    #[test]
    fn confident_logit_drives_loss_to_zero() {
        let logits = Tensor::<f64>::new(vec![1, 3], vec![40.0, 0.0, 0.0]).unwrap();
        let loss = softmax_ce_fwd(&logits, &[0]);
        assert!(loss.item() < 1e-12);
    }

    #[test]
    fn random_logits_match_direct_formula() {
        // direct: loss = mean_i( -log p_i[label] ) with p = exp(l)/sum exp(l)
        let logits = Tensor::<f64>::new(vec![2, 3], vec![0.3, -1.2, 0.8, 2.0, 0.1, -0.4]).unwrap();
        let labels = [2usize, 0];
        let loss = softmax_ce_fwd(&logits, &labels);
        let mut want = 0.0;
        for (row, &lab) in labels.iter().enumerate() {
            let l = &logits.data()[row * 3..(row + 1) * 3];
            let z: f64 = l.iter().map(|v| v.exp()).sum();
            want += -(l[lab].exp() / z).ln();
        }
        want /= 2.0;
        assert!((loss.item() - want).abs() < 1e-12);
    }

    #[test]
    fn pixel_ce_uniform_is_ln_d() {
        let logits = Tensor::<f64>::full(vec![1, 4, 2, 2], -0.3);
        let mask = [0u8, 1, 2, 3];
        let loss = pixel_ce_fwd(&logits, &mask);
        assert!((loss.item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn pixel_ce_matches_direct_formula() {
        let logits = Tensor::<f64>::new(
            vec![1, 2, 1, 2],
            vec![0.5, -0.7, 1.1, 0.2], // class0: [0.5,-0.7] class1: [1.1,0.2]
        )
        .unwrap();
        let mask = [1u8, 0];
        let loss = pixel_ce_fwd(&logits, &mask);
        let px0 = {
            let z = 0.5f64.exp() + 1.1f64.exp();
            -(1.1f64.exp() / z).ln()
        };
        let px1 = {
            let z = (-0.7f64).exp() + 0.2f64.exp();
            -((-0.7f64).exp() / z).ln()
        };
        assert!((loss.item() - (px0 + px1) / 2.0).abs() < 1e-12);
    }
}
