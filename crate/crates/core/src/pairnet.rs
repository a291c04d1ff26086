//! Pairwise comparison model: two patches in, five class probabilities out.
//!
//! Only the border stripes of each patch are used. For a (source, target)
//! pair, four junction blocks are built, one per candidate placement of the
//! target, each holding the two stripes that would touch if that placement
//! were right. Blocks are `2·stripe × patch` and stacked vertically in the
//! order above, below, left, right; the left/right blocks are rotated 90°
//! clockwise so every seam runs horizontally through the middle of its block.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Patch, DEFAULT_PATCH_SIZE, NUM_CLASSES};
use crate::tensor::{
    maxpool2, maxpool2_backward, read_checkpoint, relu_backward_in_place, relu_in_place, softmax_rows,
    write_checkpoint, BatchNorm, Conv2d, Dense, NamedArray, NormCache, Param, PoolIndices,
    Precision, Real, Tensor,
};

pub const STRIPE_DEPTH: usize = 40;
pub const CONV_CHANNELS: usize = 4;
pub const DENSE_SIZES: [usize; 4] = [512, 128, 32, NUM_CLASSES];

/// Patch size and stripe depth the junction tensor is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JunctionGeometry {
    pub patch: usize,
    pub stripe: usize,
}

impl Default for JunctionGeometry {
    fn default() -> Self {
        JunctionGeometry {
            patch: DEFAULT_PATCH_SIZE,
            stripe: STRIPE_DEPTH,
        }
    }
}

impl JunctionGeometry {
    pub fn new(patch: usize, stripe: usize) -> Result<Self> {
        if stripe == 0 || 2 * stripe > patch {
            return Err(Error::invalid(format!(
                "stripe depth {stripe} does not fit a {patch}px patch"
            )));
        }
        Ok(JunctionGeometry { patch, stripe })
    }

    /// `(height, width)` of the stacked junction tensor.
    pub fn junction_dims(&self) -> (usize, usize) {
        (8 * self.stripe, self.patch)
    }

    pub fn junction_len(&self) -> usize {
        let (h, w) = self.junction_dims();
        h * w * 3
    }

    fn check(&self, p: &Patch) -> Result<()> {
        if p.size() != self.patch {
            return Err(Error::shape(format!(
                "patch {} is {}x{}, expected {}x{}",
                p.node_id(),
                p.size(),
                p.size(),
                self.patch,
                self.patch
            )));
        }
        Ok(())
    }

    pub fn extract(&self, p: &Patch) -> Result<StripeSet> {
        self.check(p)?;
        let (n, d) = (self.patch, self.stripe);
        let rows = |r0: usize| p.pixels()[r0 * n * 3..(r0 + d) * n * 3].to_vec();
        let cols = |c0: usize| {
            let mut v = Vec::with_capacity(n * d * 3);
            for y in 0..n {
                v.extend_from_slice(&p.pixels()[(y * n + c0) * 3..(y * n + c0 + d) * 3]);
            }
            v
        };
        Ok(StripeSet {
            geometry: *self,
            up: rows(0),
            down: rows(n - d),
            left: cols(0),
            right: cols(n - d),
        })
    }
}

/// The four border stripes of one patch.
///
/// `up`/`down` are `stripe × patch × 3`; `left`/`right` are `patch × stripe × 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct StripeSet {
    geometry: JunctionGeometry,
    pub up: Vec<f32>,
    pub down: Vec<f32>,
    pub left: Vec<f32>,
    pub right: Vec<f32>,
}

impl StripeSet {
    pub fn geometry(&self) -> JunctionGeometry {
        self.geometry
    }

    /// RGB value of the junction tensor at `(row, col)` for the pair
    /// (`self` = source, `target`).
    #[inline]
    fn junction_pixel<'a>(&'a self, target: &'a StripeSet, row: usize, col: usize) -> &'a [f32] {
        let (n, d) = (self.geometry.patch, self.geometry.stripe);
        let (block, r) = (row / (2 * d), row % (2 * d));
        let horizontal = |r: usize| (r * n + col) * 3;
        let vertical = |r: usize| -> usize { ((n - 1 - col) * d + r) * 3 };
        let (buf, at) = match (block, r < d) {
            // target above source: target.down on top of source.up
            (0, true) => (&target.down, horizontal(r)),
            (0, false) => (&self.up, horizontal(r - d)),
            // target below source: source.down on top of target.up
            (1, true) => (&self.down, horizontal(r)),
            (1, false) => (&target.up, horizontal(r - d)),
            // target left of source: [target.right | source.left], rotated clockwise
            (2, true) => (&target.right, vertical(r)),
            (2, false) => (&self.left, vertical(r - d)),
            // target right of source: [source.right | target.left], rotated clockwise
            (_, true) => (&self.right, vertical(r)),
            (_, false) => (&target.left, vertical(r - d)),
        };
        &buf[at..at + 3]
    }

    /// Writes the junction tensor in planar `[3, H, W]` layout.
    pub fn write_junctions_planar<T: Real>(&self, target: &StripeSet, out: &mut [T]) {
        let (h, w) = self.geometry.junction_dims();
        debug_assert_eq!(out.len(), 3 * h * w);
        let plane = h * w;
        for r in 0..h {
            for c in 0..w {
                let px = self.junction_pixel(target, r, c);
                for ch in 0..3 {
                    out[ch * plane + r * w + c] = T::of(px[ch] as f64);
                }
            }
        }
    }
}

pub fn extract_stripes(p: &Patch) -> Result<StripeSet> {
    JunctionGeometry::default().extract(p)
}

/// Junction tensor `[8·stripe, patch, 3]` (320×256×3 by default) for an ordered pair.
pub fn assemble_junctions(source: &Patch, target: &Patch) -> Result<Tensor<f32>> {
    assemble_junctions_with(JunctionGeometry::default(), source, target)
}

pub fn assemble_junctions_with(geo: JunctionGeometry, source: &Patch, target: &Patch) -> Result<Tensor<f32>> {
    let (s, t) = (geo.extract(source)?, geo.extract(target)?);
    let (h, w) = geo.junction_dims();
    let mut data = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for c in 0..w {
            data.extend_from_slice(s.junction_pixel(&t, r, c));
        }
    }
    Tensor::from_vec(&[h, w, 3], data)
}

/// Stacks `[H, W, 3]` junction tensors into a planar `[n, 3, H, W]` batch.
pub fn planar_batch<T: Real>(junctions: &[Tensor<f32>]) -> Result<Tensor<T>> {
    let first = junctions
        .first()
        .ok_or_else(|| Error::shape("empty junction batch"))?
        .shape()
        .to_vec();
    if first.len() != 3 || first[2] != 3 {
        return Err(Error::shape(format!("junction tensors must be [H, W, 3], got {first:?}")));
    }
    let (h, w) = (first[0], first[1]);
    let mut out = Tensor::zeros(&[junctions.len(), 3, h, w]);
    for (j, dst) in junctions.iter().zip(out.data_mut().chunks_mut(3 * h * w)) {
        if j.shape() != first.as_slice() {
            return Err(Error::shape(format!("mixed junction shapes {first:?} and {:?}", j.shape())));
        }
        for (i, px) in j.data().chunks(3).enumerate() {
            for ch in 0..3 {
                dst[ch * h * w + i] = T::of(px[ch] as f64);
            }
        }
    }
    Ok(out)
}

/// Architecture of the pairwise network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub conv_channels: usize,
    /// Output sizes of the dense chain; the last one is the class count.
    pub dense: Vec<usize>,
    #[serde(default)]
    pub precision: Precision,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig::for_geometry(JunctionGeometry::default())
    }
}

impl NetConfig {
    pub fn for_geometry(geo: JunctionGeometry) -> Self {
        let (h, w) = geo.junction_dims();
        NetConfig {
            input_h: h,
            input_w: w,
            conv_channels: CONV_CHANNELS,
            dense: DENSE_SIZES.to_vec(),
            precision: Precision::Full,
        }
    }

    /// `(label, [h, w, c])` after every layer of the convolutional stack.
    pub fn shape_trace(&self) -> Result<Vec<(&'static str, [usize; 3])>> {
        let c = self.conv_channels;
        let (mut h, mut w) = (self.input_h, self.input_w);
        let mut trace = vec![("BatchNorm", [h, w, 3])];
        for _ in 0..2 {
            if h < 4 || w < 4 {
                return Err(Error::shape(format!(
                    "input {}x{} too small for two conv/pool stages",
                    self.input_h, self.input_w
                )));
            }
            h -= 2;
            w -= 2;
            trace.push(("Convolution", [h, w, c]));
            trace.push(("ReLU", [h, w, c]));
            h /= 2;
            w /= 2;
            trace.push(("MaxPooling", [h, w, c]));
            trace.push(("BatchNorm", [h, w, c]));
        }
        Ok(trace)
    }

    pub fn flat_len(&self) -> Result<usize> {
        let last = *self.shape_trace()?.last().expect("trace is never empty");
        Ok(last.1.iter().product())
    }

    pub fn validate(&self) -> Result<()> {
        self.flat_len()?;
        if self.dense.last() != Some(&NUM_CLASSES) {
            return Err(Error::invalid(format!(
                "dense chain {:?} must end in {NUM_CLASSES} classes",
                self.dense
            )));
        }
        if self.dense.contains(&0) {
            return Err(Error::invalid("dense layer of width 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// All learnable state of the pairwise network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    config: NetConfig,
    pub bn0: BatchNorm<T>,
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm<T>,
    pub dense: Vec<Dense<T>>,
}

/// Activations kept from a training-mode forward pass.
pub struct ForwardTrace<T> {
    bn0: NormCache<T>,
    conv1_in: Tensor<T>,
    relu1: Tensor<T>,
    pool1: PoolIndices,
    bn1: NormCache<T>,
    conv2_in: Tensor<T>,
    relu2: Tensor<T>,
    pool2: PoolIndices,
    bn2: NormCache<T>,
    pooled2_shape: Vec<usize>,
    /// Inputs of each dense layer (the first is the flattened conv output).
    dense_in: Vec<Tensor<T>>,
    pub probs: Tensor<T>,
}

impl<T: Real> ModelParams<T> {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.conv_channels;
        let conv1 = Conv2d::new(3, c, 3, &mut rng);
        let conv2 = Conv2d::new(c, c, 3, &mut rng);
        let mut fan_in = config.flat_len()?;
        let dense = config
            .dense
            .iter()
            .map(|&out| {
                let layer = Dense::new(fan_in, out, &mut rng);
                fan_in = out;
                layer
            })
            .collect();
        Ok(ModelParams {
            bn0: BatchNorm::new(3),
            conv1,
            bn1: BatchNorm::new(c),
            conv2,
            bn2: BatchNorm::new(c),
            dense,
            config,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn set_precision(&mut self, precision: Precision) {
        self.config.precision = precision;
    }

    /// Patch size and stripe depth the input layer was built for; fails for
    /// inputs that are not four stacked junctions of two stripes.
    pub fn geometry(&self) -> Result<JunctionGeometry> {
        if self.config.input_h % 8 != 0 {
            return Err(Error::shape(format!(
                "input height {} is not four stacked junctions of two stripes",
                self.config.input_h
            )));
        }
        JunctionGeometry::new(self.config.input_w, self.config.input_h / 8)
    }

    pub fn input_dims(&self) -> [usize; 3] {
        [3, self.config.input_h, self.config.input_w]
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.input_dims() {
            return Err(Error::shape(format!(
                "network expects [n, 3, {}, {}] input, got {s:?}",
                self.config.input_h, self.config.input_w
            )));
        }
        if s[0] == 0 {
            return Err(Error::shape("empty batch"));
        }
        Ok(())
    }

    fn store(&self, mut t: Tensor<T>) -> Tensor<T> {
        self.config.precision.apply(t.data_mut());
        t
    }

    /// Eval-mode class probabilities for a planar `[n, 3, H, W]` batch.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = self.store(self.bn0.forward_eval(x)?);
        h = self.store(relu_in_place(self.conv1.forward(&h)?));
        h = self.store(maxpool2(&h)?.0);
        h = self.store(self.bn1.forward_eval(&h)?);
        h = self.store(relu_in_place(self.conv2.forward(&h)?));
        h = self.store(maxpool2(&h)?.0);
        h = self.store(self.bn2.forward_eval(&h)?);
        let n = h.shape()[0];
        let flat = h.data().len() / n;
        let mut h = h.reshape(&[n, flat])?;
        let last = self.dense.len() - 1;
        for (i, layer) in self.dense.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = self.store(relu_in_place(h));
            }
        }
        softmax_rows(&h)
    }

    /// Forward pass in the given mode. Training mode updates batch-norm
    /// running statistics.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Eval => self.predict(x),
            Mode::Train => Ok(self.forward_train(x)?.probs),
        }
    }

    /// Training-mode forward pass keeping what `backward` needs.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<ForwardTrace<T>> {
        self.check_input(x)?;
        let (y0, bn0) = self.bn0.forward_train(x)?;
        let conv1_in = self.store(y0);
        let relu1 = self.store(relu_in_place(self.conv1.forward(&conv1_in)?));
        let (p1, pool1) = maxpool2(&relu1)?;
        let (y1, bn1) = self.bn1.forward_train(&p1)?;
        let conv2_in = self.store(y1);
        let relu2 = self.store(relu_in_place(self.conv2.forward(&conv2_in)?));
        let (p2, pool2) = maxpool2(&relu2)?;
        let pooled2_shape = p2.shape().to_vec();
        let (y2, bn2) = self.bn2.forward_train(&p2)?;
        let n = pooled2_shape[0];
        let mut h = self.store(y2.reshape(&[n, pooled2_shape[1..].iter().product()])?);
        let mut dense_in = Vec::with_capacity(self.dense.len());
        let last = self.dense.len() - 1;
        for (i, layer) in self.dense.iter().enumerate() {
            let z = layer.forward(&h)?;
            dense_in.push(h);
            h = if i < last { self.store(relu_in_place(z)) } else { z };
        }
        let probs = softmax_rows(&h)?;
        Ok(ForwardTrace {
            bn0,
            conv1_in,
            relu1,
            pool1,
            bn1,
            conv2_in,
            relu2,
            pool2,
            bn2,
            pooled2_shape,
            dense_in,
            probs,
        })
    }

    /// Accumulates parameter gradients given dLoss/dLogits.
    pub fn backward(&mut self, trace: ForwardTrace<T>, dlogits: &Tensor<T>) -> Result<()> {
        if dlogits.shape() != trace.probs.shape() {
            return Err(Error::shape(format!(
                "logit gradient {:?} vs output {:?}",
                dlogits.shape(),
                trace.probs.shape()
            )));
        }
        let mut g = dlogits.clone();
        for (i, layer) in self.dense.iter_mut().enumerate().rev() {
            let input = &trace.dense_in[i];
            g = layer.backward(input, &g)?;
            if i > 0 {
                // input of layer i is relu output of layer i-1
                g = relu_backward_in_place(input, g);
            }
        }
        let g = g.reshape(&trace.pooled2_shape)?;
        let g = self.bn2.backward(&trace.bn2, &g)?;
        let g = maxpool2_backward(&g, &trace.pool2)?;
        let g = relu_backward_in_place(&trace.relu2, g);
        let g = self
            .conv2
            .backward(&trace.conv2_in, &g, true)?
            .expect("requested input gradient");
        let g = self.bn1.backward(&trace.bn1, &g)?;
        let g = maxpool2_backward(&g, &trace.pool1)?;
        let g = relu_backward_in_place(&trace.relu1, g);
        let g = self
            .conv1
            .backward(&trace.conv1_in, &g, true)?
            .expect("requested input gradient");
        self.bn0.backward(&trace.bn0, &g)?;
        Ok(())
    }

    /// Learnable parameters in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![
            &mut self.bn0.gamma,
            &mut self.bn0.beta,
            &mut self.conv1.kernel,
            &mut self.conv1.bias,
            &mut self.bn1.gamma,
            &mut self.bn1.beta,
            &mut self.conv2.kernel,
            &mut self.conv2.bias,
            &mut self.bn2.gamma,
            &mut self.bn2.beta,
        ];
        for d in &mut self.dense {
            v.push(&mut d.weight);
            v.push(&mut d.bias);
        }
        v
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut v: Vec<String> = [
            "bn0.gamma",
            "bn0.beta",
            "conv1.kernel",
            "conv1.bias",
            "bn1.gamma",
            "bn1.beta",
            "conv2.kernel",
            "conv2.bias",
            "bn2.gamma",
            "bn2.beta",
        ]
        .map(String::from)
        .to_vec();
        for i in 1..=self.dense.len() {
            v.push(format!("dense{i}.weight"));
            v.push(format!("dense{i}.bias"));
        }
        v
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    pub fn parameter_count(&self) -> usize {
        let mut copy = self.clone();
        copy.params_mut().iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        fn p<T: Real, U: Real>(p: &Param<T>) -> Param<U> {
            Param::new(p.value.cast())
        }
        fn bn<T: Real, U: Real>(b: &BatchNorm<T>) -> BatchNorm<U> {
            BatchNorm {
                gamma: p(&b.gamma),
                beta: p(&b.beta),
                running_mean: b.running_mean.iter().map(|v| U::of(v.as_f64())).collect(),
                running_var: b.running_var.iter().map(|v| U::of(v.as_f64())).collect(),
                momentum: b.momentum,
                eps: b.eps,
            }
        }
        ModelParams {
            config: self.config.clone(),
            bn0: bn(&self.bn0),
            conv1: Conv2d {
                kernel: p(&self.conv1.kernel),
                bias: p(&self.conv1.bias),
            },
            bn1: bn(&self.bn1),
            conv2: Conv2d {
                kernel: p(&self.conv2.kernel),
                bias: p(&self.conv2.bias),
            },
            bn2: bn(&self.bn2),
            dense: self
                .dense
                .iter()
                .map(|d| Dense {
                    weight: p(&d.weight),
                    bias: p(&d.bias),
                })
                .collect(),
        }
    }
}

impl ModelParams<f32> {
    pub fn to_named_arrays(&self) -> Vec<NamedArray> {
        let arr = |name: &str, t: &Tensor<f32>| NamedArray {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        };
        let vec = |name: &str, v: &[f32]| NamedArray {
            name: name.to_string(),
            shape: vec![v.len()],
            data: v.to_vec(),
        };
        let mut out = vec![NamedArray {
            name: "meta.input".into(),
            shape: vec![3],
            data: vec![
                self.config.input_h as f32,
                self.config.input_w as f32,
                self.config.conv_channels as f32,
            ],
        }];
        let names = self.param_names();
        let mut copy = self.clone();
        for (name, param) in names.iter().zip(copy.params_mut()) {
            out.push(arr(name, &param.value));
        }
        for (i, bn) in [&self.bn0, &self.bn1, &self.bn2].into_iter().enumerate() {
            out.push(vec(&format!("bn{i}.running_mean"), &bn.running_mean));
            out.push(vec(&format!("bn{i}.running_var"), &bn.running_var));
        }
        out
    }

    pub fn from_named_arrays(arrays: &[NamedArray]) -> Result<Self> {
        let find = |name: &str| {
            arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| Error::Malformed(format!("checkpoint lacks array {name:?}")))
        };
        let meta = find("meta.input")?;
        if meta.data.len() != 3 {
            return Err(Error::Malformed("meta.input must hold 3 values".into()));
        }
        let mut dense = Vec::new();
        for i in 1.. {
            match arrays.iter().find(|a| a.name == format!("dense{i}.weight")) {
                Some(a) if a.shape.len() == 2 => dense.push(a.shape[1]),
                Some(_) => return Err(Error::Malformed(format!("dense{i}.weight is not a matrix"))),
                None => break,
            }
        }
        let config = NetConfig {
            input_h: meta.data[0] as usize,
            input_w: meta.data[1] as usize,
            conv_channels: meta.data[2] as usize,
            dense,
            precision: Precision::Full,
        };
        let mut model = ModelParams::<f32>::new(config, 0)?;
        let names = model.param_names();
        for (name, param) in names.iter().zip(model.params_mut()) {
            let a = find(name)?;
            if a.shape != param.value.shape() {
                return Err(Error::shape(format!(
                    "{name}: checkpoint shape {:?}, model expects {:?}",
                    a.shape,
                    param.value.shape()
                )));
            }
            *param = Param::new(Tensor::from_vec(&a.shape, a.data.clone())?);
        }
        for (i, bn) in [&mut model.bn0, &mut model.bn1, &mut model.bn2].into_iter().enumerate() {
            for (suffix, dst) in [("running_mean", &mut bn.running_mean), ("running_var", &mut bn.running_var)] {
                let a = find(&format!("bn{i}.{suffix}"))?;
                if a.data.len() != dst.len() {
                    return Err(Error::shape(format!("bn{i}.{suffix} has {} values", a.data.len())));
                }
                dst.copy_from_slice(&a.data);
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        write_checkpoint(path, &self.to_named_arrays())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_named_arrays(&read_checkpoint(path)?)
    }
}
