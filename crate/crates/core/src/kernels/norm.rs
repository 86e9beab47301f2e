//! Batch normalization over [N,C,H,W], statistics per channel.
//!
//! Biased variance is used both for normalization and for the running-stat
//! update, so a model frozen on a stationary batch reproduces its train-mode
//! output exactly in eval mode.

use crate::tensor::{Scalar, Tensor};

fn dims<T: Scalar>(x: &Tensor<T>) -> (usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "batchnorm expects rank 4, got {:?}", s);
    (s[0], s[1], s[2] * s[3])
}

/// Per-channel mean and biased variance, accumulated in ascending
/// (n, h, w) order.
pub fn batch_stats<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let (n, c, hw) = dims(x);
    let cnt = T::from_f64((n * hw) as f64);
    let mut mean = vec![T::zero(); c];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * hw;
            let mut s = T::zero();
            for &v in &x.data()[base..base + hw] {
                s += v;
            }
            mean[ch] += s;
        }
    }
    for m in &mut mean {
        *m /= cnt;
    }
    let mut var = vec![T::zero(); c];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * hw;
            let m = mean[ch];
            let mut s = T::zero();
            for &v in &x.data()[base..base + hw] {
                let d = v - m;
                s += d * d;
            }
            var[ch] += s;
        }
    }
    for v in &mut var {
        *v /= cnt;
    }
    (mean, var)
}

/// Train-mode forward. Returns (y, batch_mean, batch_var); the caller is
/// responsible for folding the batch stats into the running estimates.
pub fn bn_train_fwd<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, hw) = dims(x);
    let (mean, var) = batch_stats(x);
    let eps = T::from_f64(eps);
    let mut y = Tensor::zeros(x.shape().to_vec());
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * hw;
            let inv = (var[ch] + eps).sqrt().recip();
            let (g, b, m) = (gamma.data()[ch], beta.data()[ch], mean[ch]);
            for (o, &v) in y.data_mut()[base..base + hw]
                .iter_mut()
                .zip(&x.data()[base..base + hw])
            {
                *o = g * (v - m) * inv + b;
            }
        }
    }
    (y, Tensor::from_vec(mean), Tensor::from_vec(var))
}

/// Train-mode backward through the batch statistics.
pub fn bn_train_bwd<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
    eps: f64,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, hw) = dims(x);
    let (mean, var) = batch_stats(x);
    let eps = T::from_f64(eps);
    let cnt = T::from_f64((n * hw) as f64);

    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xhat = vec![T::zero(); c];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * hw;
            let inv = (var[ch] + eps).sqrt().recip();
            let m = mean[ch];
            let mut s_dy = T::zero();
            let mut s_dyx = T::zero();
            for (&g, &v) in dy.data()[base..base + hw]
                .iter()
                .zip(&x.data()[base..base + hw])
            {
                s_dy += g;
                s_dyx += g * (v - m) * inv;
            }
            sum_dy[ch] += s_dy;
            sum_dy_xhat[ch] += s_dyx;
        }
    }
    for ch in 0..c {
        dbeta[ch] = sum_dy[ch];
        dgamma[ch] = sum_dy_xhat[ch];
    }

    // dx = (gamma * inv_std) * (dy - mean(dy) - xhat * mean(dy * xhat))
    let mut dx = Tensor::zeros(x.shape().to_vec());
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * hw;
            let inv = (var[ch] + eps).sqrt().recip();
            let m = mean[ch];
            let g = gamma.data()[ch];
            let mean_dy = sum_dy[ch] / cnt;
            let mean_dyx = sum_dy_xhat[ch] / cnt;
            for i in 0..hw {
                let xhat = (x.data()[base + i] - m) * inv;
                dx.data_mut()[base + i] =
                    g * inv * (dy.data()[base + i] - mean_dy - xhat * mean_dyx);
            }
        }
    }
    (dx, Tensor::from_vec(dgamma), Tensor::from_vec(dbeta))
}

/// Eval-mode forward using running statistics.
pub fn bn_eval_fwd<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    run_mean: &Tensor<T>,
    run_var: &Tensor<T>,
    eps: f64,
) -> Tensor<T> {
    let (n, c, hw) = dims(x);
    let eps = T::from_f64(eps);
    let mut y = Tensor::zeros(x.shape().to_vec());
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * hw;
            let inv = (run_var.data()[ch] + eps).sqrt().recip();
            let (g, b, m) = (gamma.data()[ch], beta.data()[ch], run_mean.data()[ch]);
            for (o, &v) in y.data_mut()[base..base + hw]
                .iter_mut()
                .zip(&x.data()[base..base + hw])
            {
                *o = g * (v - m) * inv + b;
            }
        }
    }
    y
}

/// Eval-mode backward: the running stats are constants, so the layer is an
/// affine map per channel.
pub fn bn_eval_bwd<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    run_mean: &Tensor<T>,
    run_var: &Tensor<T>,
    dy: &Tensor<T>,
    eps: f64,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, hw) = dims(x);
    let eps = T::from_f64(eps);
    let mut dx = Tensor::zeros(x.shape().to_vec());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * hw;
            let inv = (run_var.data()[ch] + eps).sqrt().recip();
            let m = run_mean.data()[ch];
            let g = gamma.data()[ch];
            let mut s_dy = T::zero();
            let mut s_dyx = T::zero();
            for i in 0..hw {
                let grad = dy.data()[base + i];
                dx.data_mut()[base + i] = grad * g * inv;
                s_dy += grad;
                s_dyx += grad * (x.data()[base + i] - m) * inv;
            }
            dbeta[ch] += s_dy;
            dgamma[ch] += s_dyx;
        }
    }
    (dx, Tensor::from_vec(dgamma), Tensor::from_vec(dbeta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_to_zero_mean_unit_var() {
        let x = Tensor::<f64>::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let gamma = Tensor::from_vec(vec![1.0]);
        let beta = Tensor::from_vec(vec![0.0]);
        let (y, mean, var) = bn_train_fwd(&x, &gamma, &beta, 1e-5);
        assert!((mean.data()[0] - 2.5).abs() < 1e-12);
        assert!((var.data()[0] - 1.25).abs() < 1e-12);
        let m: f64 = y.data().iter().sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12);
    }

    #[test]
    fn eval_matches_train_on_same_stats() {
        let x = Tensor::<f64>::new(vec![2, 1, 1, 2], vec![1.0, 5.0, -2.0, 0.5]).unwrap();
        let gamma = Tensor::from_vec(vec![1.7]);
        let beta = Tensor::from_vec(vec![-0.3]);
        let (y_train, mean, var) = bn_train_fwd(&x, &gamma, &beta, 1e-5);
        let y_eval = bn_eval_fwd(&x, &gamma, &beta, &mean, &var, 1e-5);
        assert!(y_train.max_abs_diff(&y_eval) < 1e-12);
    }
}
