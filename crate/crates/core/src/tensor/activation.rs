use super::{Real, Tensor};
use crate::error::{Error, Result};

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    relu_in_place(x.clone())
}

pub fn relu_in_place<T: Real>(mut x: Tensor<T>) -> Tensor<T> {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
    x
}

/// Gradient through a ReLU, using its output as the mask.
pub fn relu_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if y.shape() != dy.shape() {
        return Err(Error::shape(format!(
            "relu backward: {:?} vs {:?}",
            y.shape(),
            dy.shape()
        )));
    }
    Ok(relu_backward_in_place(y, dy.clone()))
}

pub(crate) fn relu_backward_in_place<T: Real>(y: &Tensor<T>, mut dy: Tensor<T>) -> Tensor<T> {
    for (d, v) in dy.data_mut().iter_mut().zip(y.data()) {
        *d = if *v > T::zero() { *d } else { T::zero() };
    }
    dy
}

/// Row-wise softmax of a `[n, k]` tensor.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.expect_rank(2, "softmax")?;
    let k = x.shape()[1];
    let mut y = x.clone();
    for row in y.data_mut().chunks_mut(k.max(1)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v = *v / total);
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let y = softmax_rows(&Tensor::<f64>::zeros(&[1, 5])).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn softmax_is_shift_invariant_and_stable() {
        let a = softmax_rows(&Tensor::from_vec(&[1, 3], vec![1.0f64, 2.0, 3.0]).unwrap()).unwrap();
        let b = softmax_rows(&Tensor::from_vec(&[1, 3], vec![1001.0f64, 1002.0, 1003.0]).unwrap()).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn relu_zeroes_negatives() {
        let x = Tensor::from_vec(&[4], vec![-2.0f32, -0.5, 0.0, 1.5]).unwrap();
        assert_eq!(relu(&x).data(), [0.0, 0.0, 0.0, 1.5]);
        let g = relu_backward(&relu(&x), &Tensor::filled(&[4], 1.0)).unwrap();
        assert_eq!(g.data(), [0.0, 0.0, 0.0, 1.0]);
    }
}
