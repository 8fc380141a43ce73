//! Layers with hand-written forward and backward passes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, Tensor};
use super::NeuralError;

/// A named tensor owned by a layer, with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Buffers such as batch-norm running statistics are saved with the
    /// parameters but never updated by the optimizer.
    pub trainable: bool,
}

impl Param {
    pub fn new(name: &str, value: Tensor, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { name: name.to_string(), value, grad, trainable }
    }
}

pub struct ForwardCtx<'a> {
    pub training: bool,
    pub rng: &'a mut ChaCha8Rng,
}

pub trait Layer: Send {
    fn kind(&self) -> &'static str;

    /// Output shape for one sample (batch axis excluded).
    fn output_shape(&self) -> Vec<usize>;

    fn forward(&mut self, x: &Tensor, ctx: &mut ForwardCtx<'_>) -> Result<Tensor, NeuralError>;

    /// Accumulates parameter gradients and returns the input gradient when
    /// `need_input_grad` is set.
    fn backward(&mut self, grad: &Tensor, need_input_grad: bool) -> Result<Option<Tensor>, NeuralError>;

    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }
}

fn check_input(kind: &str, x: &Tensor, expected: &[usize]) -> Result<(), NeuralError> {
    if &x.shape()[1..] != expected {
        return Err(NeuralError::Shape(format!(
            "{kind} expects per-sample shape {expected:?}, got {:?}",
            &x.shape()[1..]
        )));
    }
    Ok(())
}

fn no_forward(kind: &str) -> NeuralError {
    NeuralError::NoForward(kind.to_string())
}

pub(crate) fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-limit..limit))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Same,
    Valid,
}

/// 2-D convolution, stride 1, with optional channel groups.
pub struct Conv2d {
    in_shape: [usize; 3],
    out_ch: usize,
    kernel: [usize; 2],
    groups: usize,
    /// Top and left zero padding; bottom and right follow from the output size.
    pad: [usize; 2],
    out_hw: [usize; 2],
    weight: Param,
    bias: Option<Param>,
    input: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        in_shape: [usize; 3],
        out_ch: usize,
        kernel: [usize; 2],
        groups: usize,
        padding: Padding,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NeuralError> {
        let [c, h, w] = in_shape;
        if groups == 0 || c % groups != 0 || out_ch % groups != 0 || out_ch == 0 {
            return Err(NeuralError::Shape(format!("{c} in / {out_ch} out channels not divisible into {groups} groups")));
        }
        let [kh, kw] = kernel;
        let (pad, out_hw) = match padding {
            Padding::Same => ([(kh - 1) / 2, (kw - 1) / 2], [h, w]),
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(NeuralError::Shape(format!("kernel {kernel:?} larger than input {h}x{w}")));
                }
                ([0, 0], [h - kh + 1, w - kw + 1])
            }
        };
        let cin_g = c / groups;
        let cout_g = out_ch / groups;
        let wshape = [out_ch, cin_g, kh, kw];
        let weight = Param::new("weight", glorot(rng, &wshape, cin_g * kh * kw, cout_g * kh * kw), true);
        let bias = bias.then(|| Param::new("bias", Tensor::zeros(&[out_ch]), true));
        Ok(Conv2d { in_shape, out_ch, kernel, groups, pad, out_hw, weight, bias, input: None })
    }

    pub fn weight_mut(&mut self) -> &mut Tensor {
        &mut self.weight.value
    }

    /// Calls `f([b, oc, ic, oh, ih, ow_lo, ow_hi, iw_lo], weight_index)` for
    /// every kernel tap and output row; output columns `ow_lo..ow_hi` line up
    /// with input columns starting at `iw_lo`.
    fn for_each_tap(&self, batch: usize, mut f: impl FnMut([usize; 8], usize)) {
        let [_, h, w] = self.in_shape;
        let [kh, kw] = self.kernel;
        let [ho, wo] = self.out_hw;
        let [pt, pl] = self.pad;
        let cin_g = self.in_shape[0] / self.groups;
        let cout_g = self.out_ch / self.groups;
        for b in 0..batch {
            for oc in 0..self.out_ch {
                let g = oc / cout_g;
                for icg in 0..cin_g {
                    let ic = g * cin_g + icg;
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let widx = ((oc * cin_g + icg) * kh + ki) * kw + kj;
                            let ow_lo = pl.saturating_sub(kj);
                            let ow_hi = wo.min((w + pl).saturating_sub(kj));
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            for oh in 0..ho {
                                let ih = oh + ki;
                                if ih < pt || ih - pt >= h {
                                    continue;
                                }
                                f([b, oc, ic, oh, ih - pt, ow_lo, ow_hi, ow_lo + kj - pl], widx);
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Layer for Conv2d {
    fn kind(&self) -> &'static str {
        "conv2d"
    }

    fn output_shape(&self) -> Vec<usize> {
        vec![self.out_ch, self.out_hw[0], self.out_hw[1]]
    }

    fn forward(&mut self, x: &Tensor, _ctx: &mut ForwardCtx<'_>) -> Result<Tensor, NeuralError> {
        check_input(self.kind(), x, &self.in_shape)?;
        let batch = x.batch();
        let [c, h, w] = self.in_shape;
        let [ho, wo] = self.out_hw;
        let mut y = Tensor::zeros(&[batch, self.out_ch, ho, wo]);
        {
            let (xd, wd) = (x.data(), self.weight.value.data());
            let yd = y.data_mut();
            self.for_each_tap(batch, |[b, oc, ic, oh, ih, lo, hi, iw], widx| {
                let wv = wd[widx];
                let yo = ((b * self.out_ch + oc) * ho + oh) * wo;
                let xo = ((b * c + ic) * h + ih) * w + iw;
                for (yv, xv) in yd[yo + lo..yo + hi].iter_mut().zip(&xd[xo..xo + hi - lo]) {
                    *yv += wv * xv;
                }
            });
            if let Some(bias) = &self.bias {
                for (i, chunk) in yd.chunks_mut(ho * wo).enumerate() {
                    let bv = bias.value.data()[i % self.out_ch];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor, need_input_grad: bool) -> Result<Option<Tensor>, NeuralError> {
        let x = self.input.take().ok_or_else(|| no_forward(self.kind()))?;
        let batch = x.batch();
        let [c, h, w] = self.in_shape;
        let [ho, wo] = self.out_hw;
        let gd = grad.data();
        let mut dx = need_input_grad.then(|| Tensor::zeros(x.shape()));
        {
            let xd = x.data();
            let wd = self.weight.value.data().to_vec();
            let mut dw = std::mem::replace(&mut self.weight.grad, Tensor::zeros(&[1]));
            let dwd = dw.data_mut();
            let mut dxd = dx.as_mut().map(|t| t.data_mut());
            self.for_each_tap(batch, |[b, oc, ic, oh, ih, lo, hi, iw], widx| {
                let yo = ((b * self.out_ch + oc) * ho + oh) * wo;
                let xo = ((b * c + ic) * h + ih) * w + iw;
                let g = &gd[yo + lo..yo + hi];
                dwd[widx] += g.iter().zip(&xd[xo..xo + hi - lo]).map(|(a, b)| a * b).sum::<f64>();
                if let Some(dxd) = dxd.as_deref_mut() {
                    let wv = wd[widx];
                    for (d, gv) in dxd[xo..xo + hi - lo].iter_mut().zip(g) {
                        *d += wv * gv;
                    }
                }
            });
            self.weight.grad = dw;
        }
        if let Some(bias) = &mut self.bias {
            for (i, chunk) in gd.chunks(ho * wo).enumerate() {
                bias.grad.data_mut()[i % self.out_ch] += chunk.iter().sum::<f64>();
            }
        }
        Ok(dx)
    }

    fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

/// Depthwise convolution over each input map followed by a 1×1 pointwise
/// convolution.
pub struct SeparableConv2d {
    depthwise: Conv2d,
    pointwise: Conv2d,
}

impl SeparableConv2d {
    pub fn new(
        in_shape: [usize; 3],
        out_ch: usize,
        kernel: [usize; 2],
        padding: Padding,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NeuralError> {
        let c = in_shape[0];
        let mut depthwise = Conv2d::new(in_shape, c, kernel, c, padding, false, rng)?;
        depthwise.weight.name = "depthwise.weight".into();
        let [_, ho, wo] = <[usize; 3]>::try_from(depthwise.output_shape()).expect("rank 3");
        let mut pointwise = Conv2d::new([c, ho, wo], out_ch, [1, 1], 1, Padding::Valid, bias, rng)?;
        pointwise.weight.name = "pointwise.weight".into();
        if let Some(b) = &mut pointwise.bias {
            b.name = "pointwise.bias".into();
        }
        Ok(SeparableConv2d { depthwise, pointwise })
    }

    pub fn parts_mut(&mut self) -> (&mut Conv2d, &mut Conv2d) {
        (&mut self.depthwise, &mut self.pointwise)
    }
}

impl Layer for SeparableConv2d {
    fn kind(&self) -> &'static str {
        "separable_conv2d"
    }

    fn output_shape(&self) -> Vec<usize> {
        self.pointwise.output_shape()
    }

    fn forward(&mut self, x: &Tensor, ctx: &mut ForwardCtx<'_>) -> Result<Tensor, NeuralError> {
        let mid = self.depthwise.forward(x, ctx)?;
        self.pointwise.forward(&mid, ctx)
    }

    fn backward(&mut self, grad: &Tensor, need_input_grad: bool) -> Result<Option<Tensor>, NeuralError> {
        let mid = self.pointwise.backward(grad, true)?.expect("requested");
        self.depthwise.backward(&mid, need_input_grad)
    }

    fn params(&self) -> Vec<&Param> {
        self.depthwise.params().into_iter().chain(self.pointwise.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.depthwise.params_mut().into_iter().chain(self.pointwise.params_mut()).collect()
    }
}

/// Batch normalisation over axis 1 of rank-2 or rank-4 input.
pub struct BatchNorm {
    in_shape: Vec<usize>,
    eps: f64,
    momentum: f64,
    gamma: Param,
    beta: Param,
    running_mean: Param,
    running_var: Param,
    cache: Option<BnCache>,
}

struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch: usize,
    training: bool,
}

impl BatchNorm {
    pub fn new(in_shape: &[usize], eps: f64, momentum: f64) -> Result<Self, NeuralError> {
        if in_shape.len() != 1 && in_shape.len() != 3 {
            return Err(NeuralError::Shape(format!("batch norm needs rank 2 or 4 input, got per-sample {in_shape:?}")));
        }
        let c = in_shape[0];
        Ok(BatchNorm {
            in_shape: in_shape.to_vec(),
            eps,
            momentum,
            gamma: Param::new("gamma", Tensor::filled(&[c], 1.0), true),
            beta: Param::new("beta", Tensor::zeros(&[c]), true),
            running_mean: Param::new("running_mean", Tensor::zeros(&[c]), false),
            running_var: Param::new("running_var", Tensor::filled(&[c], 1.0), false),
            cache: None,
        })
    }

    fn inner(&self) -> usize {
        self.in_shape[1..].iter().product()
    }
}

impl Layer for BatchNorm {
    fn kind(&self) -> &'static str {
        "batch_norm"
    }

    fn output_shape(&self) -> Vec<usize> {
        self.in_shape.clone()
    }

    fn forward(&mut self, x: &Tensor, ctx: &mut ForwardCtx<'_>) -> Result<Tensor, NeuralError> {
        check_input(self.kind(), x, &self.in_shape)?;
        let (batch, c, inner) = (x.batch(), self.in_shape[0], self.inner());
        let n = (batch * inner) as f64;
        let xd = x.data();
        let idx = |b: usize, ch: usize| (b * c + ch) * inner;
        let (mean, var): (Vec<f64>, Vec<f64>) = if ctx.training {
            (0..c)
                .map(|ch| {
                    let vals = (0..batch).flat_map(|b| &xd[idx(b, ch)..idx(b, ch) + inner]);
                    let m = vals.clone().sum::<f64>() / n;
                    let v = vals.map(|x| (x - m) * (x - m)).sum::<f64>() / n;
                    (m, v)
                })
                .unzip()
        } else {
            (self.running_mean.value.data().to_vec(), self.running_var.value.data().to_vec())
        };
        if ctx.training {
            let mo = self.momentum;
            for ch in 0..c {
                let rm = &mut self.running_mean.value.data_mut()[ch];
                *rm = (1.0 - mo) * *rm + mo * mean[ch];
                let rv = &mut self.running_var.value.data_mut()[ch];
                *rv = (1.0 - mo) * *rv + mo * var[ch];
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut y = Tensor::zeros(x.shape());
        let (g, bt) = (self.gamma.value.data(), self.beta.value.data());
        for b in 0..batch {
            for ch in 0..c {
                let o = idx(b, ch);
                for i in o..o + inner {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    y.data_mut()[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        self.cache = Some(BnCache { xhat, inv_std, batch, training: ctx.training });
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor, need_input_grad: bool) -> Result<Option<Tensor>, NeuralError> {
        let cache = self.cache.take().ok_or_else(|| no_forward(self.kind()))?;
        let (batch, c, inner) = (cache.batch, self.in_shape[0], self.inner());
        let n = (batch * inner) as f64;
        let gd = grad.data();
        let idx = |b: usize, ch: usize| (b * c + ch) * inner;
        let mut dx = need_input_grad.then(|| Tensor::zeros(grad.shape()));
        for ch in 0..c {
            let (mut sum_g, mut sum_gx) = (0.0, 0.0);
            for b in 0..batch {
                let o = idx(b, ch);
                for i in o..o + inner {
                    sum_g += gd[i];
                    sum_gx += gd[i] * cache.xhat[i];
                }
            }
            self.gamma.grad.data_mut()[ch] += sum_gx;
            self.beta.grad.data_mut()[ch] += sum_g;
            if let Some(dx) = dx.as_mut() {
                let scale = self.gamma.value.data()[ch] * cache.inv_std[ch];
                let dxd = dx.data_mut();
                for b in 0..batch {
                    let o = idx(b, ch);
                    for i in o..o + inner {
                        dxd[i] = if cache.training {
                            scale * (gd[i] - sum_g / n - cache.xhat[i] * sum_gx / n)
                        } else {
                            scale * gd[i]
                        };
                    }
                }
            }
        }
        Ok(dx)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta, &mut self.running_mean, &mut self.running_var]
    }
}

pub struct Elu {
    shape: Vec<usize>,
    alpha: f64,
    output: Option<Tensor>,
}

impl Elu {
    pub fn new(shape: &[usize], alpha: f64) -> Self {
        Elu { shape: shape.to_vec(), alpha, output: None }
    }
}

impl Layer for Elu {
    fn kind(&self) -> &'static str {
        "elu"
    }

    fn output_shape(&self) -> Vec<usize> {
        self.shape.clone()
    }

    fn forward(&mut self, x: &Tensor, _ctx: &mut ForwardCtx<'_>) -> Result<Tensor, NeuralError> {
        check_input(self.kind(), x, &self.shape)?;
        let a = self.alpha;
        let y = x.map(|v| if v > 0.0 { v } else { a * v.exp_m1() });
        self.output = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor, need_input_grad: bool) -> Result<Option<Tensor>, NeuralError> {
        let y = self.output.take().ok_or_else(|| no_forward(self.kind()))?;
        if !need_input_grad {
            return Ok(None);
        }
        let a = self.alpha;
        let data = y.data().iter().zip(grad.data()).map(|(&y, &g)| if y > 0.0 { g } else { g * (y + a) }).collect();
        Ok(Some(Tensor::new(grad.shape().to_vec(), data)?))
    }
}

/// Non-overlapping average pooling; trailing rows/columns that do not fill a
/// window are dropped.
pub struct AvgPool2d {
    in_shape: [usize; 3],
    kernel: [usize; 2],
    batch: Option<usize>,
}

impl AvgPool2d {
    pub fn new(in_shape: [usize; 3], kernel: [usize; 2]) -> Result<Self, NeuralError> {
        if kernel[0] == 0 || kernel[1] == 0 || kernel[0] > in_shape[1] || kernel[1] > in_shape[2] {
            return Err(NeuralError::Shape(format!("pool {kernel:?} does not fit input {in_shape:?}")));
        }
        Ok(AvgPool2d { in_shape, kernel, batch: None })
    }

    fn out_hw(&self) -> [usize; 2] {
        [self.in_shape[1] / self.kernel[0], self.in_shape[2] / self.kernel[1]]
    }
}

impl Layer for AvgPool2d {
    fn kind(&self) -> &'static str {
        "avg_pool2d"
    }

    fn output_shape(&self) -> Vec<usize> {
        let [ho, wo] = self.out_hw();
        vec![self.in_shape[0], ho, wo]
    }

    fn forward(&mut self, x: &Tensor, _ctx: &mut ForwardCtx<'_>) -> Result<Tensor, NeuralError> {
        check_input(self.kind(), x, &self.in_shape)?;
        let [c, h, w] = self.in_shape;
        let [kh, kw] = self.kernel;
        let [ho, wo] = self.out_hw();
        let batch = x.batch();
        let scale = 1.0 / (kh * kw) as f64;
        let mut y = Tensor::zeros(&[batch, c, ho, wo]);
        let (xd, yd) = (x.data(), y.data_mut());
        for bc in 0..batch * c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut s = 0.0;
                    for i in 0..kh {
                        let row = (bc * h + oh * kh + i) * w + ow * kw;
                        s += xd[row..row + kw].iter().sum::<f64>();
                    }
                    yd[(bc * ho + oh) * wo + ow] = s * scale;
                }
            }
        }
        self.batch = Some(batch);
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor, need_input_grad: bool) -> Result<Option<Tensor>, NeuralError> {
        let batch = self.batch.take().ok_or_else(|| no_forward(self.kind()))?;
        if !need_input_grad {
            return Ok(None);
        }
        let [c, h, w] = self.in_shape;
        let [kh, kw] = self.kernel;
        let [ho, wo] = self.out_hw();
        let scale = 1.0 / (kh * kw) as f64;
        let mut dx = Tensor::zeros(&[batch, c, h, w]);
        let (gd, dxd) = (grad.data(), dx.data_mut());
        for bc in 0..batch * c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let g = gd[(bc * ho + oh) * wo + ow] * scale;
                    for i in 0..kh {
                        let row = (bc * h + oh * kh + i) * w + ow * kw;
                        dxd[row..row + kw].iter_mut().for_each(|v| *v += g);
                    }
                }
            }
        }
        Ok(Some(dx))
    }
}

/// Inverted dropout: kept units are scaled by `1 / (1 - rate)` during
/// training so inference is the identity.
pub struct Dropout {
    shape: Vec<usize>,
    rate: f64,
    mask: Option<Option<Vec<f64>>>,
}

impl Dropout {
    pub fn new(shape: &[usize], rate: f64) -> Result<Self, NeuralError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NeuralError::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Dropout { shape: shape.to_vec(), rate, mask: None })
    }
}

impl Layer for Dropout {
    fn kind(&self) -> &'static str {
        "dropout"
    }

    fn output_shape(&self) -> Vec<usize> {
        self.shape.clone()
    }

    fn forward(&mut self, x: &Tensor, ctx: &mut ForwardCtx<'_>) -> Result<Tensor, NeuralError> {
        check_input(self.kind(), x, &self.shape)?;
        if !ctx.training || self.rate == 0.0 {
            self.mask = Some(None);
            return Ok(x.clone());
        }
        let keep = 1.0 / (1.0 - self.rate);
        let mask: Vec<f64> =
            (0..x.len()).map(|_| if ctx.rng.random::<f64>() < self.rate { 0.0 } else { keep }).collect();
        let data = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        self.mask = Some(Some(mask));
        Tensor::new(x.shape().to_vec(), data)
    }

    fn backward(&mut self, grad: &Tensor, need_input_grad: bool) -> Result<Option<Tensor>, NeuralError> {
        let mask = self.mask.take().ok_or_else(|| no_forward(self.kind()))?;
        if !need_input_grad {
            return Ok(None);
        }
        Ok(Some(match mask {
            None => grad.clone(),
            Some(m) => Tensor::new(grad.shape().to_vec(), grad.data().iter().zip(&m).map(|(g, m)| g * m).collect())?,
        }))
    }
}

/// Reshapes without moving data.
pub struct Reshape {
    kind: &'static str,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
}

impl Reshape {
    pub fn flatten(in_shape: &[usize]) -> Self {
        Reshape { kind: "flatten", in_shape: in_shape.to_vec(), out_shape: vec![in_shape.iter().product()] }
    }
}

impl Layer for Reshape {
    fn kind(&self) -> &'static str {
        self.kind
    }

    fn output_shape(&self) -> Vec<usize> {
        self.out_shape.clone()
    }

    fn forward(&mut self, x: &Tensor, _ctx: &mut ForwardCtx<'_>) -> Result<Tensor, NeuralError> {
        check_input(self.kind, x, &self.in_shape)?;
        let mut shape = vec![x.batch()];
        shape.extend(&self.out_shape);
        x.clone().reshape(&shape)
    }

    fn backward(&mut self, grad: &Tensor, need_input_grad: bool) -> Result<Option<Tensor>, NeuralError> {
        if !need_input_grad {
            return Ok(None);
        }
        let mut shape = vec![grad.batch()];
        shape.extend(&self.in_shape);
        Ok(Some(grad.clone().reshape(&shape)?))
    }
}

/// `[B, F, 1, L]` feature maps to a `[B, L, F]` sequence.
pub struct ToSequence {
    features: usize,
    length: usize,
}

impl ToSequence {
    pub fn new(in_shape: [usize; 3]) -> Result<Self, NeuralError> {
        if in_shape[1] != 1 {
            return Err(NeuralError::Shape(format!("to_sequence needs height 1, got {in_shape:?}")));
        }
        Ok(ToSequence { features: in_shape[0], length: in_shape[2] })
    }

    fn transpose(x: &[f64], batch: usize, rows: usize, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for b in 0..batch {
            let o = b * rows * cols;
            for r in 0..rows {
                for c in 0..cols {
                    out[o + c * rows + r] = x[o + r * cols + c];
                }
            }
        }
        out
    }
}

impl Layer for ToSequence {
    fn kind(&self) -> &'static str {
        "to_sequence"
    }

    fn output_shape(&self) -> Vec<usize> {
        vec![self.length, self.features]
    }

    fn forward(&mut self, x: &Tensor, _ctx: &mut ForwardCtx<'_>) -> Result<Tensor, NeuralError> {
        check_input(self.kind(), x, &[self.features, 1, self.length])?;
        let b = x.batch();
        Tensor::new(vec![b, self.length, self.features], Self::transpose(x.data(), b, self.features, self.length))
    }

    fn backward(&mut self, grad: &Tensor, need_input_grad: bool) -> Result<Option<Tensor>, NeuralError> {
        if !need_input_grad {
            return Ok(None);
        }
        let b = grad.batch();
        let data = Self::transpose(grad.data(), b, self.length, self.features);
        Ok(Some(Tensor::new(vec![b, self.features, 1, self.length], data)?))
    }
}

/// Mean over the sequence axis: `[B, L, d]` to `[B, d]`.
pub struct SequenceMeanPool {
    length: usize,
    width: usize,
}

impl SequenceMeanPool {
    pub fn new(in_shape: [usize; 2]) -> Self {
        SequenceMeanPool { length: in_shape[0], width: in_shape[1] }
    }
}

impl Layer for SequenceMeanPool {
    fn kind(&self) -> &'static str {
        "sequence_mean_pool"
    }

    fn output_shape(&self) -> Vec<usize> {
        vec![self.width]
    }

    fn forward(&mut self, x: &Tensor, _ctx: &mut ForwardCtx<'_>) -> Result<Tensor, NeuralError> {
        check_input(self.kind(), x, &[self.length, self.width])?;
        let b = x.batch();
        let mut y = Tensor::zeros(&[b, self.width]);
        let scale = 1.0 / self.length as f64;
        for (i, row) in x.data().chunks(self.width).enumerate() {
            let dst = &mut y.data_mut()[(i / self.length) * self.width..][..self.width];
            dst.iter_mut().zip(row).for_each(|(d, v)| *d += v * scale);
        }
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor, need_input_grad: bool) -> Result<Option<Tensor>, NeuralError> {
        if !need_input_grad {
            return Ok(None);
        }
        let b = grad.batch();
        let scale = 1.0 / self.length as f64;
        let dx = Tensor::from_fn(&[b, self.length, self.width], |i| {
            let (bi, j) = (i / (self.length * self.width), i % self.width);
            grad.data()[bi * self.width + j] * scale
        });
        Ok(Some(dx))
    }
}

/// Fully connected layer, `y = x W + b` with `W` stored `[in, out]`.
pub struct Dense {
    inputs: usize,
    units: usize,
    weight: Param,
    bias: Param,
    input: Option<Tensor>,
}

impl Dense {
    pub fn new(inputs: usize, units: usize, rng: &mut ChaCha8Rng) -> Self {
        Dense {
            inputs,
            units,
            weight: Param::new("weight", glorot(rng, &[inputs, units], inputs, units), true),
            bias: Param::new("bias", Tensor::zeros(&[units]), true),
            input: None,
        }
    }

    pub fn weight_mut(&mut self) -> &mut Tensor {
        &mut self.weight.value
    }
}

impl Layer for Dense {
    fn kind(&self) -> &'static str {
        "dense"
    }

    fn output_shape(&self) -> Vec<usize> {
        vec![self.units]
    }

    fn forward(&mut self, x: &Tensor, _ctx: &mut ForwardCtx<'_>) -> Result<Tensor, NeuralError> {
        check_input(self.kind(), x, &[self.inputs])?;
        let b = x.batch();
        let mut y = Tensor::from_fn(&[b, self.units], |i| self.bias.value.data()[i % self.units]);
        matmul_acc(x.data(), self.weight.value.data(), y.data_mut(), b, self.inputs, self.units);
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor, need_input_grad: bool) -> Result<Option<Tensor>, NeuralError> {
        let x = self.input.take().ok_or_else(|| no_forward(self.kind()))?;
        let b = x.batch();
        matmul_at_b_acc(x.data(), grad.data(), self.weight.grad.data_mut(), self.inputs, b, self.units);
        for row in grad.data().chunks(self.units) {
            self.bias.grad.data_mut().iter_mut().zip(row).for_each(|(d, g)| *d += g);
        }
        if !need_input_grad {
            return Ok(None);
        }
        let mut dx = Tensor::zeros(&[b, self.inputs]);
        matmul_a_bt_acc(grad.data(), self.weight.value.data(), dx.data_mut(), b, self.units, self.inputs);
        Ok(Some(dx))
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(layer: &mut dyn Layer, x: &Tensor, training: bool) -> Tensor {
        let mut rng = crate::rng::stream(0, "layers");
        layer.forward(x, &mut ForwardCtx { training, rng: &mut rng }).unwrap()
    }

    #[test]
    fn conv_same_padding_matches_hand_computation() {
        let mut rng = crate::rng::stream(1, "conv");
        let mut conv = Conv2d::new([1, 1, 4], 1, [1, 3], 1, Padding::Same, false, &mut rng).unwrap();
        conv.weight_mut().data_mut().copy_from_slice(&[1.0, 2.0, 3.0]);
        let y = run(&mut conv, &Tensor::new(vec![1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
        // y[j] = x[j-1] + 2 x[j] + 3 x[j+1] with zeros outside.
        assert_eq!(y.data(), &[8.0, 14.0, 20.0, 11.0]);
    }

    #[test]
    fn valid_padding_shrinks_output() {
        let mut rng = crate::rng::stream(1, "conv");
        let conv = Conv2d::new([2, 3, 10], 4, [3, 5], 1, Padding::Valid, true, &mut rng).unwrap();
        assert_eq!(conv.output_shape(), vec![4, 1, 6]);
        assert!(Conv2d::new([2, 3, 10], 3, [1, 1], 2, Padding::Same, false, &mut rng).is_err());
    }

    #[test]
    fn separable_equals_materialised_full_conv() {
        let mut rng = crate::rng::stream(2, "sep");
        let (c, f, kh, kw) = (3, 4, 2, 3);
        let mut sep = SeparableConv2d::new([c, 3, 6], f, [kh, kw], Padding::Same, false, &mut rng).unwrap();
        let (dw, pw) = {
            let (d, p) = sep.parts_mut();
            (d.weight_mut().clone(), p.weight_mut().clone())
        };
        // Full kernel K[o, i, a, b] = P[o, i] D[i, a, b].
        let mut full = Conv2d::new([c, 3, 6], f, [kh, kw], 1, Padding::Same, false, &mut rng).unwrap();
        let k = Tensor::from_fn(&[f, c, kh, kw], |idx| {
            let (o, rest) = (idx / (c * kh * kw), idx % (c * kh * kw));
            let i = rest / (kh * kw);
            pw.data()[o * c + i] * dw.data()[i * kh * kw + rest % (kh * kw)]
        });
        *full.weight_mut() = k;
        let x = Tensor::from_fn(&[2, c, 3, 6], |i| ((i * 37) % 11) as f64 - 5.0);
        let (a, b) = (run(&mut sep, &x, false), run(&mut full, &x, false));
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_inference_with_fresh_statistics_is_identity() {
        let mut bn = BatchNorm::new(&[2, 1, 3], 0.0, 0.1).unwrap();
        let x = Tensor::from_fn(&[4, 2, 1, 3], |i| i as f64 - 7.0);
        let y = run(&mut bn, &x, false);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn batch_norm_training_standardises_each_channel() {
        let mut bn = BatchNorm::new(&[2], 1e-12, 0.1).unwrap();
        let x = Tensor::new(vec![4, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]).unwrap();
        let y = run(&mut bn, &x, true);
        for ch in 0..2 {
            let col: Vec<f64> = y.data().iter().skip(ch).step_by(2).copied().collect();
            let mean = col.iter().sum::<f64>() / 4.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
        }
        // Running mean moved 10% of the way from 0 towards the batch mean.
        let running = &bn.params()[2].value;
        assert!((running.data()[0] - 0.25).abs() < 1e-12 && (running.data()[1] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn elu_pool_and_sequence_layers() {
        let mut elu = Elu::new(&[3], 1.0);
        let y = run(&mut elu, &Tensor::new(vec![1, 3], vec![-1.0, 0.0, 2.0]).unwrap(), false);
        assert!((y.data()[0] - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
        assert_eq!(&y.data()[1..], &[0.0, 2.0]);

        let mut pool = AvgPool2d::new([1, 1, 5], [1, 2]).unwrap();
        let y = run(&mut pool, &Tensor::new(vec![1, 1, 1, 5], vec![1.0, 3.0, 5.0, 7.0, 100.0]).unwrap(), false);
        assert_eq!(y.data(), &[2.0, 6.0]);

        let mut seq = ToSequence::new([2, 1, 3]).unwrap();
        let y = run(&mut seq, &Tensor::new(vec![1, 2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(), false);
        assert_eq!(y.shape(), &[1, 3, 2]);
        assert_eq!(y.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);

        let mut mean = SequenceMeanPool::new([3, 2]);
        assert_eq!(run(&mut mean, &y, false).data(), &[2.0, 5.0]);
    }

    #[test]
    fn dropout_is_identity_at_inference_and_unbiased_in_training() {
        let mut d = Dropout::new(&[1000], 0.25).unwrap();
        let x = Tensor::filled(&[4, 1000], 1.0);
        assert_eq!(run(&mut d, &x, false).data(), x.data());
        let y = run(&mut d, &x, true);
        let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 4000.0;
        assert!((kept - 0.75).abs() < 0.03);
        assert!(y.data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
    }

    #[test]
    fn backward_without_forward_is_an_error() {
        let mut rng = crate::rng::stream(3, "d");
        let mut dense = Dense::new(2, 2, &mut rng);
        assert!(matches!(dense.backward(&Tensor::zeros(&[1, 2]), true), Err(NeuralError::NoForward(_))));
    }
}
