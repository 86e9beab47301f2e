//! Fully-connected layer.

use crate::gemm::transpose;
use crate::tensor::{Scalar, Tensor};

/// x: [N,In], w: [Out,In], b: [Out] -> [N,Out].
pub fn linear_fwd<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, in_f) = (x.shape()[0], x.shape()[1]);
    let (out_f, in_w) = (w.shape()[0], w.shape()[1]);
    assert_eq!(in_f, in_w, "linear: feature mismatch");
    let w_t = transpose(out_f, in_f, w.data());
    let mut y = Tensor::zeros(vec![n, out_f]);
    T::gemm(n, in_f, out_f, x.data(), &w_t, y.data_mut(), false);
    for row in 0..n {
        for (o, &bo) in y.data_mut()[row * out_f..(row + 1) * out_f]
            .iter_mut()
            .zip(b.data())
        {
            *o += bo;
        }
    }
    y
}

pub fn linear_bwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, in_f) = (x.shape()[0], x.shape()[1]);
    let out_f = w.shape()[0];

    // dx = dy [N,Out] x w [Out,In]
    let mut dx = Tensor::zeros(vec![n, in_f]);
    T::gemm(n, out_f, in_f, dy.data(), w.data(), dx.data_mut(), false);

    // dw = dy^T [Out,N] x x [N,In]
    let dy_t = transpose(n, out_f, dy.data());
    let mut dw = Tensor::zeros(vec![out_f, in_f]);
    T::gemm(out_f, n, in_f, &dy_t, x.data(), dw.data_mut(), false);

    // db = column sums of dy, rows in ascending order
    let mut db = Tensor::zeros(vec![out_f]);
    for row in 0..n {
        for (acc, &g) in db
            .data_mut()
            .iter_mut()
            .zip(&dy.data()[row * out_f..(row + 1) * out_f])
        {
            *acc += g;
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_linear_by_hand() {
        // y = W x + b, W = [[1,2],[3,4],[5,6]], x = [1, -1], b = [0.5,0,0]
        let x = Tensor::<f64>::new(vec![1, 2], vec![1.0, -1.0]).unwrap();
        let w = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(vec![0.5, 0.0, 0.0]);
        let y = linear_fwd(&x, &w, &b);
        assert_eq!(y.data(), &[-0.5, -1.0, -1.0]);
    }

    #[test]
    fn backward_of_sum_is_column_sums() {
        // seed = sum(y) => dy = ones, dx = column sums of W
        let x = Tensor::<f64>::new(vec![1, 2], vec![0.3, 0.7]).unwrap();
        let w = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let dy = Tensor::full(vec![1, 3], 1.0);
        let (dx, _, db) = linear_bwd(&x, &w, &dy);
        assert_eq!(dx.data(), &[9.0, 12.0]); // 1+3+5, 2+4+6
        assert_eq!(db.data(), &[1.0, 1.0, 1.0]);
    }
}
