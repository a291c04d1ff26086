use rayon::prelude::*;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Winning position inside each 2×2 window (0..4, row-major) recorded by
/// the forward pass.
#[derive(Debug, Clone)]
pub struct PoolIndices {
    input_shape: Vec<usize>,
    argmax: Vec<u8>,
}

/// 2×2 max pooling with stride 2. Trailing odd rows/columns are dropped.
///
/// Ties resolve to the first maximum in row-major window order.
pub fn maxpool2<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    x.expect_rank(4, "maxpool2")?;
    let [n, c, h, w]: [usize; 4] = x.shape().try_into().unwrap();
    if h < 2 || w < 2 {
        return Err(Error::shape(format!("maxpool2 needs at least 2x2 planes, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0u8; n * c * oh * ow];
    out.data_mut()
        .par_chunks_mut(oh * ow)
        .zip(argmax.par_chunks_mut(oh * ow))
        .zip(x.data().par_chunks(h * w))
        .for_each(|((o, idx), plane)| {
            for y in 0..oh {
                let top = &plane[2 * y * w..][..2 * ow];
                let bottom = &plane[(2 * y + 1) * w..][..2 * ow];
                let (o, idx) = (&mut o[y * ow..][..ow], &mut idx[y * ow..][..ow]);
                for xx in 0..ow {
                    let cands = [top[2 * xx], top[2 * xx + 1], bottom[2 * xx], bottom[2 * xx + 1]];
                    // strict comparisons keep the first maximum
                    let (mut best, mut at) = (cands[0], 0u8);
                    for (i, v) in cands.into_iter().enumerate().skip(1) {
                        let better = v > best;
                        best = if better { v } else { best };
                        at = if better { i as u8 } else { at };
                    }
                    o[xx] = best;
                    idx[xx] = at;
                }
            }
        });
    Ok((
        out,
        PoolIndices {
            input_shape: x.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool2_backward<T: Real>(dy: &Tensor<T>, indices: &PoolIndices) -> Result<Tensor<T>> {
    if dy.len() != indices.argmax.len() {
        return Err(Error::shape(format!(
            "maxpool2 backward: gradient has {} values, forward produced {}",
            dy.len(),
            indices.argmax.len()
        )));
    }
    let s = &indices.input_shape;
    let (w, oh, ow) = (s[3], s[2] / 2, s[3] / 2);
    let mut dx = Tensor::zeros(s);
    dx.data_mut()
        .par_chunks_mut(s[2] * w)
        .zip(dy.data().par_chunks(oh * ow))
        .zip(indices.argmax.par_chunks(oh * ow))
        .for_each(|((d, g), idx)| {
            for y in 0..oh {
                for xx in 0..ow {
                    let at = idx[y * ow + xx] as usize;
                    d[(2 * y + at / 2) * w + 2 * xx + at % 2] = g[y * ow + xx];
                }
            }
        });
    Ok(dx)
}
