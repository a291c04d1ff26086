use rand::Rng;

use super::{Param, Real, Tensor};
use crate::error::{Error, Result};

/// `x · w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
pub fn dense<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, fan_in, fan_out) = dims(x, w, b)?;
    let mut y = Tensor::zeros(&[n, fan_out]);
    for row in y.data_mut().chunks_mut(fan_out.max(1)) {
        row.copy_from_slice(b.data());
    }
    T::gemm(
        n,
        fan_in,
        fan_out,
        T::one(),
        x.data(),
        (fan_in as isize, 1),
        w.data(),
        (fan_out as isize, 1),
        T::one(),
        y.data_mut(),
        (fan_out as isize, 1),
    );
    Ok(y)
}

/// Returns `(dx, dw, db)`.
pub fn dense_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[w.shape().get(1).copied().unwrap_or(0)]);
    let dx = dense_backward_into(x, w, dy, dw.data_mut(), db.data_mut())?;
    Ok((dx, dw, db))
}

/// Adds the weight and bias gradients to `dw`/`db` and returns `dx`.
pub(crate) fn dense_backward_into<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    dw: &mut [T],
    db: &mut [T],
) -> Result<Tensor<T>> {
    let fan_out = w.shape().get(1).copied().unwrap_or(0);
    let (n, fan_in, _) = dims(x, w, &Tensor::zeros(&[fan_out]))?;
    if dy.shape() != [n, fan_out] || dw.len() != w.len() || db.len() != fan_out {
        return Err(Error::shape(format!(
            "dense backward: gradient {:?}, expected [{n}, {fan_out}]",
            dy.shape()
        )));
    }
    // dw += xᵀ · dy
    T::gemm(
        fan_in,
        n,
        fan_out,
        T::one(),
        x.data(),
        (1, fan_in as isize),
        dy.data(),
        (fan_out as isize, 1),
        T::one(),
        dw,
        (fan_out as isize, 1),
    );
    for row in dy.data().chunks(fan_out.max(1)) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += *g;
        }
    }
    // dx = dy · wᵀ
    let mut dx = Tensor::zeros(&[n, fan_in]);
    T::gemm(
        n,
        fan_out,
        fan_in,
        T::one(),
        dy.data(),
        (fan_out as isize, 1),
        w.data(),
        (1, fan_out as isize),
        T::zero(),
        dx.data_mut(),
        (fan_in as isize, 1),
    );
    Ok(dx)
}

fn dims<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    x.expect_rank(2, "dense input")?;
    w.expect_rank(2, "dense weight")?;
    let (n, fan_in) = (x.shape()[0], x.shape()[1]);
    let (w_in, fan_out) = (w.shape()[0], w.shape()[1]);
    if w_in != fan_in || b.shape() != [fan_out] {
        return Err(Error::shape(format!(
            "dense: input {:?}, weight {:?}, bias {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    Ok((n, fan_in, fan_out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Dense<T> {
    /// Glorot-uniform weight, zero bias.
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Dense {
            weight: Param::new(Tensor::uniform(&[fan_in, fan_out], bound, rng)),
            bias: Param::new(Tensor::zeros(&[fan_out])),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        dense(x, &self.weight.value, &self.bias.value)
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        dense_backward_into(x, &self.weight.value, dy, self.weight.grad.data_mut(), self.bias.grad.data_mut())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_map() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0f64, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap();
        let w = Tensor::from_vec(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap();
        let y = dense(&x, &w, &b).unwrap();
        assert_eq!(y.data(), [4.5, 4.5, 0.5, 0.5]);
    }

    #[test]
    fn backward_shapes_and_values() {
        let x = Tensor::from_vec(&[1, 2], vec![2.0f64, 3.0]).unwrap();
        let w = Tensor::from_vec(&[2, 1], vec![4.0, 5.0]).unwrap();
        let dy = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
        let (dx, dw, db) = dense_backward(&x, &w, &dy).unwrap();
        assert_eq!(dx.data(), [4.0, 5.0]);
        assert_eq!(dw.data(), [2.0, 3.0]);
        assert_eq!(db.data(), [1.0]);
    }

    #[test]
    fn mismatch_is_an_error() {
        let x = Tensor::<f32>::zeros(&[1, 3]);
        let w = Tensor::<f32>::zeros(&[2, 2]);
        assert!(matches!(dense(&x, &w, &Tensor::zeros(&[2])), Err(Error::Shape(_))));
    }
}
