use super::{Param, Real, Tensor};
use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch normalization over every axis except axis 1 (channels).
///
/// Running statistics start at mean 0 / variance 1 and are updated with
/// `running = (1 - momentum) * running + momentum * batch`, using the
/// unbiased batch variance.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T = f32> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

/// What the backward pass needs from a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    x_hat: Tensor<T>,
    inv_std: Vec<f64>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(Tensor::filled(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    fn layout(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let s = x.shape();
        if s.len() < 2 || s[1] != self.channels() {
            return Err(Error::shape(format!(
                "batchnorm over {} channels got input {s:?}",
                self.channels()
            )));
        }
        Ok((s[0], s[1], s[2..].iter().product()))
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, NormCache<T>)> {
        let (n, c, inner) = self.layout(x)?;
        let m = (n * inner) as f64;
        if m == 0.0 {
            return Err(Error::shape("batchnorm on an empty batch".to_string()));
        }
        let mut x_hat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let mut inv_std = vec![0.0; c];
        let xd = x.data();
        for ch in 0..c {
            let blocks = || (0..n).map(move |i| (i * c + ch) * inner);
            // shifted moments avoid cancellation when |mean| >> std
            let shift = xd[ch * inner].as_f64();
            let (s1, s2) = blocks()
                .map(|o| lane_sums(&xd[o..o + inner], shift))
                .fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
            let mean = shift + s1 / m;
            let var = (s2 / m - (s1 / m).powi(2)).max(0.0);
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = istd;
            let (g, b) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
            let (mean_t, istd_t) = (T::of(mean), T::of(istd));
            for o in blocks() {
                let src = &xd[o..o + inner];
                let xh = &mut x_hat.data_mut()[o..o + inner];
                for (h, v) in xh.iter_mut().zip(src) {
                    *h = (*v - mean_t) * istd_t;
                }
                let dst = &mut y.data_mut()[o..o + inner];
                for (d, h) in dst.iter_mut().zip(&x_hat.data()[o..o + inner]) {
                    *d = g * *h + b;
                }
            }
            let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
            let mo = self.momentum;
            self.running_mean[ch] = T::of((1.0 - mo) * self.running_mean[ch].as_f64() + mo * mean);
            self.running_var[ch] = T::of((1.0 - mo) * self.running_var[ch].as_f64() + mo * unbiased);
        }
        Ok((y, NormCache { x_hat, inv_std }))
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, inner) = self.layout(x)?;
        let mut y = x.clone();
        for ch in 0..c {
            let scale = self.gamma.value.data()[ch].as_f64()
                / (self.running_var[ch].as_f64() + self.eps).sqrt();
            let shift = self.beta.value.data()[ch].as_f64() - scale * self.running_mean[ch].as_f64();
            let (scale, shift) = (T::of(scale), T::of(shift));
            for i in 0..n {
                let o = (i * c + ch) * inner;
                for v in &mut y.data_mut()[o..o + inner] {
                    *v = *v * scale + shift;
                }
            }
        }
        Ok(y)
    }

    /// Accumulates gamma/beta gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &NormCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        if dy.shape() != cache.x_hat.shape() {
            return Err(Error::shape(format!(
                "batchnorm backward: gradient {:?} vs activation {:?}",
                dy.shape(),
                cache.x_hat.shape()
            )));
        }
        let (n, c, inner) = self.layout(dy)?;
        let m = (n * inner) as f64;
        let mut dx = Tensor::zeros(dy.shape());
        let (dyd, xh) = (dy.data(), cache.x_hat.data());
        for ch in 0..c {
            let blocks = || (0..n).map(move |i| (i * c + ch) * inner);
            let (mut sum_dy, mut sum_dy_xh) = (0.0f64, 0.0f64);
            for o in blocks() {
                let (a, b) = lane_sums_pair(&dyd[o..o + inner], &xh[o..o + inner]);
                sum_dy += a;
                sum_dy_xh += b;
            }
            self.gamma.grad.data_mut()[ch] += T::of(sum_dy_xh);
            self.beta.grad.data_mut()[ch] += T::of(sum_dy);
            let k = self.gamma.value.data()[ch].as_f64() * cache.inv_std[ch] / m;
            let (k_t, m_t) = (T::of(k), T::of(m));
            let (sum_dy_t, sum_dy_xh_t) = (T::of(sum_dy), T::of(sum_dy_xh));
            for o in blocks() {
                let dst = &mut dx.data_mut()[o..o + inner];
                for ((d, g), h) in dst.iter_mut().zip(&dyd[o..o + inner]).zip(&xh[o..o + inner]) {
                    *d = k_t * (m_t * *g - sum_dy_t - *h * sum_dy_xh_t);
                }
            }
        }
        Ok(dx)
    }
}

const LANES: usize = 8;

/// `(Σ (x - shift), Σ (x - shift)²)` in f64 with independent lane accumulators.
#[inline]
fn lane_sums<T: Real>(xs: &[T], shift: f64) -> (f64, f64) {
    let (mut a, mut b) = ([0.0f64; LANES], [0.0f64; LANES]);
    let mut chunks = xs.chunks_exact(LANES);
    for ch in &mut chunks {
        for l in 0..LANES {
            let v = ch[l].as_f64() - shift;
            a[l] += v;
            b[l] += v * v;
        }
    }
    let (mut sa, mut sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
    for v in chunks.remainder() {
        let v = v.as_f64() - shift;
        sa += v;
        sb += v * v;
    }
    (sa, sb)
}

/// `(Σ a, Σ a·b)` in f64.
#[inline]
fn lane_sums_pair<T: Real>(xs: &[T], ys: &[T]) -> (f64, f64) {
    let (mut a, mut b) = ([0.0f64; LANES], [0.0f64; LANES]);
    let mut cx = xs.chunks_exact(LANES);
    let mut cy = ys.chunks_exact(LANES);
    for (x, y) in (&mut cx).zip(&mut cy) {
        for l in 0..LANES {
            let v = x[l].as_f64();
            a[l] += v;
            b[l] += v * y[l].as_f64();
        }
    }
    let (mut sa, mut sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
    for (x, y) in cx.remainder().iter().zip(cy.remainder()) {
        sa += x.as_f64();
        sb += x.as_f64() * y.as_f64();
    }
    (sa, sb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn channel_moments(t: &Tensor<f64>, ch: usize) -> (f64, f64) {
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let inner: usize = t.shape()[2..].iter().product();
        let vals: Vec<f64> = (0..n)
            .flat_map(|i| t.data()[(i * c + ch) * inner..][..inner].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        (mean, var)
    }

    #[test]
    fn training_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x = Tensor::<f64>::uniform(&[4, 3, 6, 5], 2.0, &mut rng);
        x.data_mut().iter_mut().for_each(|v| *v = *v * 3.0 + 7.0);
        let mut bn = BatchNorm::new(3);
        let (y, _) = bn.forward_train(&x).unwrap();
        for ch in 0..3 {
            let (mean, var) = channel_moments(&y, ch);
            assert!(mean.abs() < 1e-3);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn identity_affine_with_unit_running_stats() {
        let bn = BatchNorm::<f64>::new(2);
        let x = Tensor::from_vec(&[1, 2, 1, 2], vec![0.5, -1.0, 3.0, 0.0]).unwrap();
        let y = bn.forward_eval(&x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            // scale is 1/sqrt(1 + eps)
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_variance_channel_stays_finite() {
        let mut bn = BatchNorm::<f32>::new(1);
        let (y, cache) = bn.forward_train(&Tensor::filled(&[1, 1, 1, 1], 4.0)).unwrap();
        assert!(y.data()[0].is_finite());
        let dx = bn.backward(&cache, &Tensor::filled(&[1, 1, 1, 1], 1.0)).unwrap();
        assert!(dx.data()[0].is_finite());
    }

    #[test]
    fn running_statistics_follow_momentum() {
        let mut bn = BatchNorm::<f64>::new(1);
        let x = Tensor::from_vec(&[2, 1], vec![1.0, 3.0]).unwrap();
        bn.forward_train(&x).unwrap();
        assert!((bn.running_mean[0] - 0.2).abs() < 1e-12);
        // unbiased variance of {1, 3} is 2
        assert!((bn.running_var[0] - (0.9 + 0.2)).abs() < 1e-12);
    }
}
