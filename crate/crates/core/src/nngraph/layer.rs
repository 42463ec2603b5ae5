use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Fully connected layer, `weight` is `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// 2-D convolution over `[channels, height, width]` inputs,
/// `weight` is `[out_channels, in_channels, kernel_h, kernel_w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

/// Frozen per-channel affine transform (an inference-mode batch norm folded
/// into `scale * x + shift`). Channel is the leading dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl Affine {
    /// Folds inference-mode batch-norm statistics into a single affine map.
    pub fn fold_batch_norm(
        mean: &[f64],
        var: &[f64],
        gamma: &[f64],
        beta: &[f64],
        eps: f64,
    ) -> Result<Self> {
        let c = mean.len();
        if var.len() != c || gamma.len() != c || beta.len() != c {
            return Err(Error::arg("batch-norm statistics have mismatched lengths"));
        }
        let scale: Vec<f64> = (0..c).map(|i| gamma[i] / (var[i] + eps).sqrt()).collect();
        let shift = (0..c).map(|i| beta[i] - mean[i] * scale[i]).collect();
        Ok(Affine { scale, shift })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2D(Conv2d),
    Relu,
    MaxPool2D { size: usize, stride: usize },
    AvgPool2D { size: usize, stride: usize },
    Flatten,
    /// Adds the output of the (strictly earlier) layer `source`.
    ResidualAdd { source: usize },
    BatchNormAffine(Affine),
}

/// Which derivative a backward sweep propagates. The second-order sweep
/// squares every linear coefficient and drops cross terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Order {
    First,
    Second,
}

impl Order {
    #[inline]
    fn coef(self, x: f64) -> f64 {
        match self {
            Order::First => x,
            Order::Second => x * x,
        }
    }
}

fn pool_out(len: usize, size: usize, stride: usize) -> Option<usize> {
    if size == 0 || stride == 0 || len < size {
        None
    } else {
        Some((len - size) / stride + 1)
    }
}

impl Layer {
    pub fn dense(weight: Tensor, bias: Option<Tensor>) -> Self {
        Layer::Dense(Dense { weight, bias })
    }

    pub fn conv2d(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Self {
        Layer::Conv2D(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "Dense",
            Layer::Conv2D(_) => "Conv2D",
            Layer::Relu => "ReLU",
            Layer::MaxPool2D { .. } => "MaxPool2D",
            Layer::AvgPool2D { .. } => "AvgPool2D",
            Layer::Flatten => "Flatten",
            Layer::ResidualAdd { .. } => "ResidualAdd",
            Layer::BatchNormAffine(_) => "BatchNormAffine",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Dense(_) | Layer::Conv2D(_))
    }

    /// Number of trainable values (weights followed by biases).
    pub fn param_len(&self) -> usize {
        match self {
            Layer::Dense(d) => d.weight.len() + d.bias.as_ref().map_or(0, Tensor::len),
            Layer::Conv2D(c) => c.weight.len() + c.bias.as_ref().map_or(0, Tensor::len),
            _ => 0,
        }
    }

    pub(crate) fn weight_bias(&self) -> Option<(&Tensor, Option<&Tensor>)> {
        match self {
            Layer::Dense(d) => Some((&d.weight, d.bias.as_ref())),
            Layer::Conv2D(c) => Some((&c.weight, c.bias.as_ref())),
            _ => None,
        }
    }

    pub(crate) fn weight_bias_mut(&mut self) -> Option<(&mut Tensor, Option<&mut Tensor>)> {
        match self {
            Layer::Dense(d) => Some((&mut d.weight, d.bias.as_mut())),
            Layer::Conv2D(c) => Some((&mut c.weight, c.bias.as_mut())),
            _ => None,
        }
    }

    pub(crate) fn param_get(&self, offset: usize) -> f64 {
        let (w, b) = self.weight_bias().expect("parameterized layer");
        if offset < w.len() {
            w.data()[offset]
        } else {
            b.expect("bias present").data()[offset - w.len()]
        }
    }

    pub(crate) fn param_set(&mut self, offset: usize, value: f64) {
        let (w, b) = self.weight_bias_mut().expect("parameterized layer");
        if offset < w.len() {
            w.data_mut()[offset] = value;
        } else {
            let wl = w.len();
            b.expect("bias present").data_mut()[offset - wl] = value;
        }
    }

    /// Output shape for a given input shape; `index` is only used in errors.
    pub fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let err = |message: String| Error::Shape {
            layer: index,
            kind: self.kind_name(),
            message,
        };
        match self {
            Layer::Dense(d) => {
                let ws = d.weight.shape();
                if ws.len() != 2 {
                    return Err(err(format!("weight must be 2-D, got {ws:?}")));
                }
                if input.len() != 1 || input[0] != ws[1] {
                    return Err(err(format!(
                        "expects input [{}], got {input:?}",
                        ws[1]
                    )));
                }
                if let Some(b) = &d.bias {
                    if b.shape() != [ws[0]] {
                        return Err(err(format!("bias shape {:?} != [{}]", b.shape(), ws[0])));
                    }
                }
                Ok(vec![ws[0]])
            }
            Layer::Conv2D(c) => {
                let ws = c.weight.shape();
                if ws.len() != 4 {
                    return Err(err(format!("weight must be 4-D, got {ws:?}")));
                }
                if input.len() != 3 || input[0] != ws[1] {
                    return Err(err(format!(
                        "expects input [{}, H, W], got {input:?}",
                        ws[1]
                    )));
                }
                if let Some(b) = &c.bias {
                    if b.shape() != [ws[0]] {
                        return Err(err(format!("bias shape {:?} != [{}]", b.shape(), ws[0])));
                    }
                }
                let oh = pool_out(input[1] + 2 * c.padding, ws[2], c.stride);
                let ow = pool_out(input[2] + 2 * c.padding, ws[3], c.stride);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => Ok(vec![ws[0], oh, ow]),
                    _ => Err(err(format!(
                        "kernel {}x{} stride {} does not fit input {input:?}",
                        ws[2], ws[3], c.stride
                    ))),
                }
            }
            Layer::Relu | Layer::ResidualAdd { .. } => Ok(input.to_vec()),
            Layer::MaxPool2D { size, stride } | Layer::AvgPool2D { size, stride } => {
                if input.len() != 3 {
                    return Err(err(format!("expects [C, H, W], got {input:?}")));
                }
                match (
                    pool_out(input[1], *size, *stride),
                    pool_out(input[2], *size, *stride),
                ) {
                    (Some(oh), Some(ow)) => Ok(vec![input[0], oh, ow]),
                    _ => Err(err(format!(
                        "window {size} stride {stride} does not fit input {input:?}"
                    ))),
                }
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::BatchNormAffine(a) => {
                if input.is_empty() || a.scale.len() != input[0] || a.shift.len() != input[0] {
                    return Err(err(format!(
                        "{} channels do not match input {input:?}",
                        a.scale.len()
                    )));
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Forward for every layer kind except `ResidualAdd`, which the network
    /// handles because it needs another layer's output.
    pub(crate) fn forward(&self, input: &Tensor, macs: &mut u64) -> (Tensor, Option<Vec<usize>>) {
        match self {
            Layer::Dense(d) => {
                let (out_n, in_n) = (d.weight.shape()[0], d.weight.shape()[1]);
                let w = d.weight.data();
                let x = input.data();
                let mut out = Vec::with_capacity(out_n);
                for j in 0..out_n {
                    let row = &w[j * in_n..(j + 1) * in_n];
                    let mut acc = d.bias.as_ref().map_or(0.0, |b| b.data()[j]);
                    for (wi, xi) in row.iter().zip(x) {
                        acc += wi * xi;
                    }
                    out.push(acc);
                }
                *macs += (out_n * in_n) as u64;
                (Tensor::vector(out), None)
            }
            Layer::Conv2D(c) => (conv_forward(c, input, macs), None),
            Layer::Relu => {
                let data = input.data().iter().map(|&v| v.max(0.0)).collect();
                (Tensor::new(input.shape().to_vec(), data).unwrap(), None)
            }
            Layer::MaxPool2D { size, stride } => {
                let (out, idx) = pool_forward(input, *size, *stride, true);
                (out, Some(idx))
            }
            Layer::AvgPool2D { size, stride } => {
                let (out, _) = pool_forward(input, *size, *stride, false);
                (out, None)
            }
            Layer::Flatten => (Tensor::vector(input.data().to_vec()), None),
            Layer::BatchNormAffine(a) => {
                let c = input.shape()[0];
                let inner = input.len() / c;
                let mut data = input.data().to_vec();
                for (ch, chunk) in data.chunks_mut(inner).enumerate() {
                    for v in chunk {
                        *v = a.scale[ch] * *v + a.shift[ch];
                    }
                }
                *macs += input.len() as u64;
                (Tensor::new(input.shape().to_vec(), data).unwrap(), None)
            }
            Layer::ResidualAdd { .. } => unreachable!("residual add is evaluated by the network"),
        }
    }

    /// Propagates `upstream` (first derivatives or diagonal second
    /// derivatives w.r.t. this layer's output) back to the layer input.
    /// Parameter contributions are accumulated into `param_acc`.
    pub(crate) fn backward(
        &self,
        order: Order,
        input: &Tensor,
        argmax: Option<&[usize]>,
        upstream: &[f64],
        param_acc: &mut [f64],
        macs: &mut u64,
    ) -> Vec<f64> {
        match self {
            Layer::Dense(d) => {
                let (out_n, in_n) = (d.weight.shape()[0], d.weight.shape()[1]);
                let w = d.weight.data();
                let p: Vec<f64> = input.data().iter().map(|&x| order.coef(x)).collect();
                let (gw, gb) = param_acc.split_at_mut(out_n * in_n);
                let mut down = vec![0.0; in_n];
                for j in 0..out_n {
                    let u = upstream[j];
                    let row = &w[j * in_n..(j + 1) * in_n];
                    let grow = &mut gw[j * in_n..(j + 1) * in_n];
                    for i in 0..in_n {
                        grow[i] += u * p[i];
                        down[i] += order.coef(row[i]) * u;
                    }
                    if d.bias.is_some() {
                        gb[j] += u;
                    }
                }
                *macs += match order {
                    Order::First => 2 * out_n * in_n,
                    Order::Second => in_n + 3 * out_n * in_n,
                } as u64;
                down
            }
            Layer::Conv2D(c) => conv_backward(c, order, input, upstream, param_acc, macs),
            Layer::Relu => input
                .data()
                .iter()
                .zip(upstream)
                .map(|(&x, &u)| if x > 0.0 { u } else { 0.0 })
                .collect(),
            Layer::MaxPool2D { .. } => {
                let mut down = vec![0.0; input.len()];
                for (&src, &u) in argmax.expect("max-pool argmax on tape").iter().zip(upstream) {
                    down[src] += u;
                }
                down
            }
            Layer::AvgPool2D { size, stride } => {
                avg_pool_backward(input.shape(), *size, *stride, order, upstream)
            }
            Layer::Flatten => upstream.to_vec(),
            Layer::BatchNormAffine(a) => {
                let c = input.shape()[0];
                let inner = input.len() / c;
                *macs += (input.len() * if order == Order::Second { 2 } else { 1 }) as u64;
                upstream
                    .iter()
                    .enumerate()
                    .map(|(i, &u)| order.coef(a.scale[i / inner]) * u)
                    .collect()
            }
            Layer::ResidualAdd { .. } => upstream.to_vec(),
        }
    }
}

fn conv_geometry(c: &Conv2d, input: &[usize]) -> (usize, usize, usize, usize, usize, usize, usize, usize) {
    let ws = c.weight.shape();
    let (oc, ic, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let (h, w) = (input[1], input[2]);
    let oh = (h + 2 * c.padding - kh) / c.stride + 1;
    let ow = (w + 2 * c.padding - kw) / c.stride + 1;
    (oc, ic, kh, kw, h, w, oh, ow)
}

fn conv_forward(c: &Conv2d, input: &Tensor, macs: &mut u64) -> Tensor {
    let (oc, ic, kh, kw, h, w, oh, ow) = conv_geometry(c, input.shape());
    let x = input.data();
    let wt = c.weight.data();
    let mut out = vec![0.0; oc * oh * ow];
    let pad = c.padding as isize;
    for o in 0..oc {
        let b = c.bias.as_ref().map_or(0.0, |b| b.data()[o]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b;
                for ch in 0..ic {
                    for ky in 0..kh {
                        let iy = (oy * c.stride + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * c.stride + kx) as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += wt[((o * ic + ch) * kh + ky) * kw + kx]
                                * x[(ch * h + iy as usize) * w + ix as usize];
                            *macs += 1;
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::new(vec![oc, oh, ow], out).unwrap()
}

fn conv_backward(
    c: &Conv2d,
    order: Order,
    input: &Tensor,
    upstream: &[f64],
    param_acc: &mut [f64],
    macs: &mut u64,
) -> Vec<f64> {
    let (oc, ic, kh, kw, h, w, oh, ow) = conv_geometry(c, input.shape());
    let x = input.data();
    let wt = c.weight.data();
    let (gw, gb) = param_acc.split_at_mut(wt.len());
    let mut down = vec![0.0; x.len()];
    let pad = c.padding as isize;
    let per_mac = if order == Order::Second { 4 } else { 2 };
    for o in 0..oc {
        for oy in 0..oh {
            for ox in 0..ow {
                let u = upstream[(o * oh + oy) * ow + ox];
                if c.bias.is_some() {
                    gb[o] += u;
                }
                for ch in 0..ic {
                    for ky in 0..kh {
                        let iy = (oy * c.stride + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * c.stride + kx) as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let wi = ((o * ic + ch) * kh + ky) * kw + kx;
                            let xi = (ch * h + iy as usize) * w + ix as usize;
                            gw[wi] += u * order.coef(x[xi]);
                            down[xi] += order.coef(wt[wi]) * u;
                            *macs += per_mac;
                        }
                    }
                }
            }
        }
    }
    down
}

fn pool_forward(input: &Tensor, size: usize, stride: usize, max: bool) -> (Tensor, Vec<usize>) {
    let s = input.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let oh = (h - size) / stride + 1;
    let ow = (w - size) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::new();
    let norm = (size * size) as f64;
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = usize::MAX;
                let mut sum = 0.0;
                for ky in 0..size {
                    for kx in 0..size {
                        let i = (ch * h + oy * stride + ky) * w + ox * stride + kx;
                        if best == usize::MAX || x[i] > x[best] {
                            best = i;
                        }
                        sum += x[i];
                    }
                }
                if max {
                    out.push(x[best]);
                    idx.push(best);
                } else {
                    out.push(sum / norm);
                }
            }
        }
    }
    (Tensor::new(vec![c, oh, ow], out).unwrap(), idx)
}

fn avg_pool_backward(shape: &[usize], size: usize, stride: usize, order: Order, upstream: &[f64]) -> Vec<f64> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let oh = (h - size) / stride + 1;
    let ow = (w - size) / stride + 1;
    let k = order.coef(1.0 / (size * size) as f64);
    let mut down = vec![0.0; c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let u = upstream[(ch * oh + oy) * ow + ox] * k;
                for ky in 0..size {
                    for kx in 0..size {
                        down[(ch * h + oy * stride + ky) * w + ox * stride + kx] += u;
                    }
                }
            }
        }
    }
    down
}
