use rand::Rng;
use rayon::prelude::*;

use super::{Param, Real, Tensor};

const LANES: usize = 8;
const GROUP: usize = 4;
use crate::error::{Error, Result};

/// Valid (unpadded) stride-1 convolution.
///
/// `x` is `[n, cin, h, w]`, `kernel` is `[k, k, cin, cout]`, `bias` is
/// `[cout]`; the result is `[n, cout, h - k + 1, w - k + 1]`.
pub fn conv2d<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let geo = Geometry::of(x, kernel, bias)?;
    let mut out = Tensor::zeros(&[geo.n, geo.cout, geo.oh, geo.ow]);
    if geo.n == 0 {
        return Ok(out);
    }
    let (k, b) = (kernel.data(), bias.data());
    out.data_mut()
        .par_chunks_mut(geo.out_len())
        .zip(x.data().par_chunks(geo.in_len()))
        .for_each(|(o, xi)| geo.forward_item(xi, k, b, o));
    Ok(out)
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dkernel: Vec<T>,
    pub dbias: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let cout = kernel.shape().get(3).copied().unwrap_or(0);
    let geo = Geometry::of(x, kernel, &Tensor::zeros(&[cout]))?;
    if dy.shape() != [geo.n, geo.cout, geo.oh, geo.ow] {
        return Err(Error::shape(format!(
            "conv2d backward: gradient shape {:?} does not match output [{}, {}, {}, {}]",
            dy.shape(),
            geo.n,
            geo.cout,
            geo.oh,
            geo.ow
        )));
    }
    let k = kernel.data();
    // per-item gradients are summed in batch order so results do not depend
    // on how rayon splits the work
    let per_item: Vec<(Vec<T>, Vec<T>)>;
    let dx = if need_dx {
        let mut dx = Tensor::zeros(x.shape());
        per_item = dx
            .data_mut()
            .par_chunks_mut(geo.in_len())
            .zip(x.data().par_chunks(geo.in_len()))
            .zip(dy.data().par_chunks(geo.out_len()))
            .map(|((dxi, xi), dyi)| geo.backward_item(xi, dyi, k, Some(dxi)))
            .collect();
        Some(dx)
    } else {
        per_item = x
            .data()
            .par_chunks(geo.in_len())
            .zip(dy.data().par_chunks(geo.out_len()))
            .map(|(xi, dyi)| geo.backward_item(xi, dyi, k, None))
            .collect();
        None
    };
    let (mut dkernel, mut dbias) = (vec![T::zero(); k.len()], vec![T::zero(); geo.cout]);
    for (dk, db) in per_item {
        dkernel.iter_mut().zip(dk).for_each(|(a, b)| *a += b);
        dbias.iter_mut().zip(db).for_each(|(a, b)| *a += b);
    }
    Ok(ConvGrads {
        dx,
        dkernel,
        dbias,
    })
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    cout: usize,
    k: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn of<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Self> {
        x.expect_rank(4, "conv2d input")?;
        kernel.expect_rank(4, "conv2d kernel")?;
        let (n, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let ks = kernel.shape();
        let (k, kin, cout) = (ks[0], ks[2], ks[3]);
        if ks[1] != k || k == 0 {
            return Err(Error::shape(format!("conv2d kernel must be square, got {ks:?}")));
        }
        if kin != cin {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input has {cin} channels, kernel expects {kin}"
            )));
        }
        if bias.shape() != [cout] {
            return Err(Error::shape(format!(
                "conv2d bias shape {:?}, expected [{cout}]",
                bias.shape()
            )));
        }
        if h < k || w < k {
            return Err(Error::shape(format!(
                "conv2d input {h}x{w} is smaller than the {k}x{k} kernel"
            )));
        }
        Ok(Geometry {
            n,
            cin,
            cout,
            k,
            h,
            w,
            oh: h - k + 1,
            ow: w - k + 1,
        })
    }

    fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.cout * self.oh * self.ow
    }

    fn weight_index(&self, ky: usize, kx: usize, ci: usize, co: usize) -> usize {
        ((ky * self.k + kx) * self.cin + ci) * self.cout + co
    }

    /// Input offset of every kernel tap `(ci, ky, kx)` plus its weights for
    /// output channels `co0..co0 + G`.
    fn taps<T: Real, const G: usize>(&self, kernel: &[T], co0: usize) -> Vec<(usize, [T; G])> {
        let mut taps = Vec::with_capacity(self.cin * self.k * self.k);
        for ci in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let weights = std::array::from_fn(|g| kernel[self.weight_index(ky, kx, ci, co0 + g)]);
                    taps.push(((ci * self.h + ky) * self.w + kx, weights));
                }
            }
        }
        taps
    }

    /// Output channels are processed in groups of `GROUP` so every loaded
    /// input vector feeds several accumulators held in registers.
    fn groups(&self) -> impl Iterator<Item = (usize, usize)> {
        let cout = self.cout;
        let full = cout / GROUP * GROUP;
        (0..full).step_by(GROUP).map(|c| (c, GROUP)).chain((full..cout).map(|c| (c, 1)))
    }

    fn forward_item<T: Real>(&self, x: &[T], kernel: &[T], bias: &[T], out: &mut [T]) {
        for (co0, size) in self.groups() {
            if size == GROUP {
                self.forward_group::<T, GROUP>(x, kernel, bias, out, co0);
            } else {
                self.forward_group::<T, 1>(x, kernel, bias, out, co0);
            }
        }
    }

    #[inline(always)]
    fn forward_group<T: Real, const G: usize>(&self, x: &[T], kernel: &[T], bias: &[T], out: &mut [T], co0: usize) {
        let (w, oh, ow) = (self.w, self.oh, self.ow);
        let plane = oh * ow;
        let taps = self.taps::<T, G>(kernel, co0);
        for y in 0..oh {
            let mut x0 = 0;
            while x0 + LANES <= ow {
                let mut acc: [[T; LANES]; G] = std::array::from_fn(|g| [bias[co0 + g]; LANES]);
                for (off, wv) in &taps {
                    let s = &x[off + y * w + x0..][..LANES];
                    for g in 0..G {
                        for l in 0..LANES {
                            acc[g][l] += wv[g] * s[l];
                        }
                    }
                }
                for (g, a) in acc.iter().enumerate() {
                    out[(co0 + g) * plane + y * ow + x0..][..LANES].copy_from_slice(a);
                }
                x0 += LANES;
            }
            for xx in x0..ow {
                for g in 0..G {
                    let mut s = bias[co0 + g];
                    for (off, wv) in &taps {
                        s += wv[g] * x[off + y * w + xx];
                    }
                    out[(co0 + g) * plane + y * ow + xx] = s;
                }
            }
        }
    }

    fn backward_item<T: Real>(
        &self,
        x: &[T],
        dy: &[T],
        kernel: &[T],
        mut dx: Option<&mut [T]>,
    ) -> (Vec<T>, Vec<T>) {
        let mut dk = vec![T::zero(); kernel.len()];
        let mut db = vec![T::zero(); self.cout];
        let plane = self.oh * self.ow;
        for co in 0..self.cout {
            db[co] = dy[co * plane..][..plane].iter().copied().sum();
        }
        for (co0, size) in self.groups() {
            if size == GROUP {
                self.backward_group::<T, GROUP>(x, dy, kernel, dx.as_deref_mut(), co0, &mut dk);
            } else {
                self.backward_group::<T, 1>(x, dy, kernel, dx.as_deref_mut(), co0, &mut dk);
            }
        }
        (dk, db)
    }

    #[inline(always)]
    fn backward_group<T: Real, const G: usize>(
        &self,
        x: &[T],
        dy: &[T],
        kernel: &[T],
        mut dx: Option<&mut [T]>,
        co0: usize,
        dk: &mut [T],
    ) {
        let (w, oh, ow) = (self.w, self.oh, self.ow);
        let plane = oh * ow;
        let taps = self.taps::<T, G>(kernel, co0);
        // per-tap lane accumulators for the kernel gradient
        let mut dk_acc = vec![[[T::zero(); LANES]; G]; taps.len()];
        let mut dk_tail = vec![[T::zero(); G]; taps.len()];
        for y in 0..oh {
            let grad_row = |g: usize| &dy[(co0 + g) * plane + y * ow..][..ow];
            let full = ow / LANES * LANES;
            for (t, (off, _)) in taps.iter().enumerate() {
                let src = &x[off + y * w..][..ow];
                let mut acc = [[T::zero(); LANES]; G];
                for x0 in (0..full).step_by(LANES) {
                    let s = &src[x0..x0 + LANES];
                    for (g, a) in acc.iter_mut().enumerate() {
                        let gv = &grad_row(g)[x0..x0 + LANES];
                        for l in 0..LANES {
                            a[l] += gv[l] * s[l];
                        }
                    }
                }
                for g in 0..G {
                    for l in 0..LANES {
                        dk_acc[t][g][l] += acc[g][l];
                    }
                    for xx in full..ow {
                        dk_tail[t][g] += grad_row(g)[xx] * src[xx];
                    }
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                for x0 in (0..full).step_by(LANES) {
                    let gv: [[T; LANES]; G] = std::array::from_fn(|g| grad_row(g)[x0..x0 + LANES].try_into().unwrap());
                    for (off, wv) in &taps {
                        let dst = &mut dx[off + y * w + x0..][..LANES];
                        for l in 0..LANES {
                            let mut s = dst[l];
                            for g in 0..G {
                                s += wv[g] * gv[g][l];
                            }
                            dst[l] = s;
                        }
                    }
                }
                for xx in full..ow {
                    for (off, wv) in &taps {
                        let mut s = dx[off + y * w + xx];
                        for g in 0..G {
                            s += wv[g] * grad_row(g)[xx];
                        }
                        dx[off + y * w + xx] = s;
                    }
                }
            }
        }
        // tap t enumerates (ci, ky, kx) in the same order as weight_index
        for (t, acc) in dk_acc.iter().enumerate() {
            let (ci, ky, kx) = (t / (self.k * self.k), t / self.k % self.k, t % self.k);
            for g in 0..G {
                let lanes = acc[g].iter().fold(T::zero(), |a, b| a + *b);
                dk[self.weight_index(ky, kx, ci, co0 + g)] += lanes + dk_tail[t][g];
            }
        }
    }
}

/// Convolution layer with a `[k, k, cin, cout]` kernel and per-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T = f32> {
    pub kernel: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Conv2d<T> {
    /// Glorot-uniform kernel, zero bias.
    pub fn new(cin: usize, cout: usize, k: usize, rng: &mut impl Rng) -> Self {
        let fan = (k * k * (cin + cout)) as f64;
        Conv2d {
            kernel: Param::new(Tensor::uniform(&[k, k, cin, cout], (6.0 / fan).sqrt(), rng)),
            bias: Param::new(Tensor::zeros(&[cout])),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.kernel.value, &self.bias.value)
    }

    /// Accumulates parameter gradients; returns the input gradient if asked.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Result<Option<Tensor<T>>> {
        let grads = conv2d_backward(x, &self.kernel.value, dy, need_dx)?;
        self.kernel.accumulate(&grads.dkernel);
        self.bias.accumulate(&grads.dbias);
        Ok(grads.dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dot;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct six-loop definition, used as the reference.
    fn naive(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let [n, cin, h, w] = x.shape().try_into().unwrap();
        let (ks, cout) = (k.shape()[0], k.shape()[3]);
        let (oh, ow) = (h - ks + 1, w - ks + 1);
        let mut out = vec![0.0; n * cout * oh * ow];
        for i in 0..n {
            for co in 0..cout {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut s = b.data()[co];
                        for ci in 0..cin {
                            for ky in 0..ks {
                                for kx in 0..ks {
                                    s += x.data()[((i * cin + ci) * h + y + ky) * w + xx + kx]
                                        * k.data()[((ky * ks + kx) * cin + ci) * cout + co];
                                }
                            }
                        }
                        out[((i * cout + co) * oh + y) * ow + xx] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::uniform(&[2, 3, 7, 9], 1.0, &mut rng);
        let k = Tensor::<f64>::uniform(&[3, 3, 3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[4], 1.0, &mut rng);
        let got = conv2d(&x, &k, &b).unwrap();
        assert_eq!(got.shape(), [2, 4, 5, 7]);
        for (a, e) in got.data().iter().zip(naive(&x, &k, &b)) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_on_wide_planes_and_odd_channel_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::uniform(&[2, 2, 5, 23], 1.0, &mut rng);
        let k = Tensor::<f64>::uniform(&[3, 3, 2, 5], 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[5], 1.0, &mut rng);
        let got = conv2d(&x, &k, &b).unwrap();
        for (a, e) in got.data().iter().zip(naive(&x, &k, &b)) {
            assert!((a - e).abs() < 1e-12);
        }
        let g = Tensor::<f64>::uniform(got.shape(), 1.0, &mut rng);
        let inner = dot(got.data(), g.data()) - dot(b.data(), &sum_planes(&g));
        let grads = conv2d_backward(&x, &k, &g, true).unwrap();
        assert!((inner - dot(grads.dx.unwrap().data(), x.data())).abs() < 1e-9);
        assert!((inner - dot(&grads.dkernel, k.data())).abs() < 1e-9);
        assert_eq!(grads.dbias, sum_planes(&g));
    }

    fn sum_planes(g: &Tensor<f64>) -> Vec<f64> {
        let [n, c, h, w] = g.shape().try_into().unwrap();
        (0..c)
            .map(|co| (0..n).map(|i| g.data()[(i * c + co) * h * w..][..h * w].iter().sum::<f64>()).sum())
            .collect()
    }

    #[test]
    fn zero_input_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = Conv2d::<f32>::new(3, 4, 3, &mut rng);
        let mut layer = layer;
        layer.bias.value = Tensor::from_vec(&[4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let y = layer.forward(&Tensor::zeros(&[1, 3, 5, 6])).unwrap();
        for (c, plane) in y.data().chunks(3 * 4).enumerate() {
            assert!(plane.iter().all(|v| *v == layer.bias.value.data()[c]));
        }
    }

    #[test]
    fn table_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c1 = Conv2d::<f32>::new(3, 4, 3, &mut rng);
        let y = c1.forward(&Tensor::zeros(&[1, 3, 320, 256])).unwrap();
        assert_eq!(y.shape(), [1, 4, 318, 254]);
        let c2 = Conv2d::<f32>::new(4, 4, 3, &mut rng);
        let y = c2.forward(&Tensor::zeros(&[1, 4, 159, 127])).unwrap();
        assert_eq!(y.shape(), [1, 4, 157, 125]);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Conv2d::<f32>::new(4, 4, 3, &mut rng);
        assert!(matches!(c.forward(&Tensor::zeros(&[1, 3, 8, 8])), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), g> is bilinear in (x, k): its gradients are dx and dk.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::uniform(&[2, 2, 6, 5], 1.0, &mut rng);
        let k = Tensor::<f64>::uniform(&[3, 3, 2, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::zeros(&[3]);
        let g = Tensor::<f64>::uniform(&[2, 3, 4, 3], 1.0, &mut rng);
        let y = conv2d(&x, &k, &b).unwrap();
        let inner: f64 = dot(y.data(), g.data());
        let grads = conv2d_backward(&x, &k, &g, true).unwrap();
        let via_dx = dot(grads.dx.unwrap().data(), x.data());
        let via_dk = dot(&grads.dkernel, k.data());
        assert!((inner - via_dx).abs() < 1e-9);
        assert!((inner - via_dk).abs() < 1e-9);
    }
}
