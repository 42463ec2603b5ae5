use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layer::{Layer, Order};
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_NETWORK_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NETWORK_ID.fetch_add(1, AtomicOrdering::Relaxed)
}

/// Rounds to the nearest `f32`. Latent weights live on the single-precision
/// grid so checkpoints reproduce them exactly.
#[inline]
pub(crate) fn snap_f32(v: f64) -> f64 {
    v as f32 as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    SoftmaxCrossEntropy,
    L2,
}

/// Per-example supervision.
#[derive(Clone, Copy, Debug)]
pub enum TargetRef<'a> {
    Class(usize),
    Values(&'a [f64]),
}

#[derive(Clone, Copy, Debug)]
pub enum Labels<'a> {
    Classes(&'a [usize]),
    Values(&'a [Tensor]),
}

impl<'a> Labels<'a> {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(c) => c.len(),
            Labels::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> TargetRef<'a> {
        match self {
            Labels::Classes(c) => TargetRef::Class(c[i]),
            Labels::Values(v) => TargetRef::Values(v[i].data()),
        }
    }
}

/// A non-empty set of examples with matching labels.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub inputs: &'a [Tensor],
    pub labels: Labels<'a>,
}

impl<'a> Batch<'a> {
    pub fn new(inputs: &'a [Tensor], labels: Labels<'a>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::arg("batch is empty"));
        }
        if inputs.len() != labels.len() {
            return Err(Error::arg(format!(
                "batch has {} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn classes(inputs: &'a [Tensor], classes: &'a [usize]) -> Result<Self> {
        Batch::new(inputs, Labels::Classes(classes))
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Stamp {
    id: u64,
    version: u64,
}

/// Activations recorded by one forward pass. Only valid for the exact weight
/// state that produced it.
#[derive(Clone, Debug)]
pub struct BackwardTape {
    acts: Vec<Tensor>,
    argmax: Vec<Option<Vec<usize>>>,
    stamp: Stamp,
    forward_macs: u64,
}

impl BackwardTape {
    /// Input of layer `i`; index `layers.len()` is the network output.
    pub fn activation(&self, i: usize) -> &Tensor {
        &self.acts[i]
    }

    pub fn activations(&self) -> &[Tensor] {
        &self.acts
    }

    pub fn argmax(&self, layer: usize) -> Option<&[usize]> {
        self.argmax[layer].as_deref()
    }

    pub fn output(&self) -> &Tensor {
        self.acts.last().expect("tape holds the output")
    }
}

/// Contiguous range of flat parameter ids owned by one layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroup {
    pub layer: usize,
    pub range: Range<usize>,
}

#[derive(Clone, Debug)]
pub struct GradientResult {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub macs: u64,
}

/// Per-weight diagonal second derivatives, flat in parameter-id order.
#[derive(Clone, Debug)]
pub struct DiagHessian {
    pub values: Vec<f64>,
    pub macs: u64,
}

/// Per-example loss plus first- and second-derivative seeds at the logits.
pub(crate) fn loss_terms(loss: LossKind, logits: &[f64], target: TargetRef<'_>) -> (f64, Vec<f64>, Vec<f64>) {
    match (loss, target) {
        (LossKind::SoftmaxCrossEntropy, TargetRef::Class(y)) => {
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&o| (o - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let p: Vec<f64> = exps.iter().map(|e| e / sum).collect();
            let loss = -(p[y].max(f64::MIN_POSITIVE)).ln();
            let grad = p
                .iter()
                .enumerate()
                .map(|(j, &pj)| if j == y { pj - 1.0 } else { pj })
                .collect();
            let seed = p.iter().map(|&pj| pj * (1.0 - pj)).collect();
            (loss, grad, seed)
        }
        (LossKind::L2, TargetRef::Values(t)) => {
            let diff: Vec<f64> = logits.iter().zip(t).map(|(o, t)| o - t).collect();
            let loss = diff.iter().map(|d| d * d).sum();
            let grad = diff.iter().map(|d| 2.0 * d).collect();
            (loss, grad, vec![2.0; logits.len()])
        }
        (LossKind::L2, TargetRef::Class(y)) => {
            let t: Vec<f64> = (0..logits.len()).map(|j| if j == y { 1.0 } else { 0.0 }).collect();
            loss_terms(loss, logits, TargetRef::Values(&t))
        }
        (LossKind::SoftmaxCrossEntropy, TargetRef::Values(_)) => {
            panic!("cross-entropy loss needs class labels")
        }
    }
}

/// Layered feed-forward network with flat parameter addressing.
///
/// Parameters of every `Dense`/`Conv2D` layer are numbered consecutively in
/// layer order, weights (row-major) before biases. Gradients, diagonal
/// Hessians and quantized weights all share this numbering.
#[derive(Debug)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    shapes: Vec<Vec<usize>>,
    offsets: Vec<usize>,
    param_count: usize,
    loss: LossKind,
    quant_bits: u32,
    scales: Vec<Option<f64>>,
    stamp: Stamp,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Network {
            input_shape: self.input_shape.clone(),
            layers: self.layers.clone(),
            shapes: self.shapes.clone(),
            offsets: self.offsets.clone(),
            param_count: self.param_count,
            loss: self.loss,
            quant_bits: self.quant_bits,
            scales: self.scales.clone(),
            stamp: Stamp {
                id: fresh_id(),
                version: 0,
            },
        }
    }
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.input_shape == other.input_shape
            && self.layers == other.layers
            && self.loss == other.loss
            && self.quant_bits == other.quant_bits
            && self.scales == other.scales
    }
}

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>, loss: LossKind, quant_bits: u32) -> Result<Self> {
        if !(2..=24).contains(&quant_bits) {
            return Err(Error::config(format!("quantization bits must be in 2..=24, got {quant_bits}")));
        }
        let mut shapes = vec![input_shape.clone()];
        let mut offsets = Vec::with_capacity(layers.len());
        let mut offset = 0;
        for (i, layer) in layers.iter().enumerate() {
            let input = &shapes[i];
            let out = match layer {
                Layer::ResidualAdd { source } => {
                    if *source >= i {
                        return Err(Error::Shape {
                            layer: i,
                            kind: layer.kind_name(),
                            message: format!("source {source} is not a strictly earlier layer"),
                        });
                    }
                    if shapes[source + 1] != *input {
                        return Err(Error::Shape {
                            layer: i,
                            kind: layer.kind_name(),
                            message: format!(
                                "source output {:?} differs from input {input:?}",
                                shapes[source + 1]
                            ),
                        });
                    }
                    input.clone()
                }
                _ => layer.output_shape(i, input)?,
            };
            offsets.push(offset);
            offset += layer.param_len();
            shapes.push(out);
        }
        let mut net = Network {
            input_shape,
            layers,
            shapes,
            offsets,
            param_count: offset,
            loss,
            quant_bits,
            scales: Vec::new(),
            stamp: Stamp {
                id: fresh_id(),
                version: 0,
            },
        };
        net.refresh_scales();
        Ok(net)
    }

    /// Fully connected ReLU network with He-uniform weights and zero biases.
    pub fn mlp(sizes: &[usize], loss: LossKind, quant_bits: u32, seed: u64) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::config("an MLP needs at least input and output sizes"));
        }
        let mut layers = Vec::new();
        for (k, pair) in sizes.windows(2).enumerate() {
            layers.push(Layer::dense(
                Tensor::zeros(vec![pair[1], pair[0]]),
                Some(Tensor::zeros(vec![pair[1]])),
            ));
            if k + 2 < sizes.len() {
                layers.push(Layer::Relu);
            }
        }
        let mut net = Network::new(vec![sizes[0]], layers, loss, quant_bits)?;
        net.init_params(seed);
        Ok(net)
    }

    /// Re-draws every weight uniformly in `±sqrt(6 / fan_in)`; biases start at zero.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut self.layers {
            if let Some((w, b)) = layer.weight_bias_mut() {
                let fan_in: usize = w.shape()[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                for v in w.data_mut() {
                    *v = snap_f32(rng.random_range(-bound..bound));
                }
                if let Some(b) = b {
                    b.data_mut().iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        self.touch();
        self.refresh_scales();
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("at least the input shape")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Input shape of layer `i` (`i == layers().len()` gives the output shape).
    pub fn shape_at(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn quant_bits(&self) -> u32 {
        self.quant_bits
    }

    /// Largest magnitude code, `2^M - 1`.
    pub fn max_code(&self) -> u32 {
        (1u32 << self.quant_bits) - 1
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn param_groups(&self) -> Vec<ParamGroup> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.has_params())
            .map(|(i, l)| ParamGroup {
                layer: i,
                range: self.offsets[i]..self.offsets[i] + l.param_len(),
            })
            .collect()
    }

    /// Layer owning flat parameter `id`.
    pub fn layer_of_param(&self, id: usize) -> Option<usize> {
        if id >= self.param_count {
            return None;
        }
        self.layers
            .iter()
            .enumerate()
            .find(|(i, l)| l.has_params() && id >= self.offsets[*i] && id < self.offsets[*i] + l.param_len())
            .map(|(i, _)| i)
    }

    pub fn param(&self, id: usize) -> Result<f64> {
        let layer = self
            .layer_of_param(id)
            .ok_or_else(|| Error::arg(format!("weight id {id} out of range (n = {})", self.param_count)))?;
        Ok(self.layers[layer].param_get(id - self.offsets[layer]))
    }

    pub fn set_param(&mut self, id: usize, value: f64) -> Result<()> {
        let layer = self
            .layer_of_param(id)
            .ok_or_else(|| Error::arg(format!("weight id {id} out of range (n = {})", self.param_count)))?;
        let off = self.offsets[layer];
        self.layers[layer].param_set(id - off, value);
        self.touch();
        Ok(())
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count);
        for layer in &self.layers {
            if let Some((w, b)) = layer.weight_bias() {
                out.extend_from_slice(w.data());
                if let Some(b) = b {
                    out.extend_from_slice(b.data());
                }
            }
        }
        out
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count {
            return Err(Error::arg(format!(
                "expected {} parameters, got {}",
                self.param_count,
                values.len()
            )));
        }
        let mut k = 0;
        for layer in &mut self.layers {
            if let Some((w, b)) = layer.weight_bias_mut() {
                let n = w.len();
                w.data_mut().copy_from_slice(&values[k..k + n]);
                k += n;
                if let Some(b) = b {
                    let n = b.len();
                    b.data_mut().copy_from_slice(&values[k..k + n]);
                    k += n;
                }
            }
        }
        self.touch();
        Ok(())
    }

    /// `w -= lr * g`, leaving weights with a zero step untouched.
    pub fn apply_step(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        let mut params = self.params();
        if grad.len() != params.len() {
            return Err(Error::arg("gradient length does not match parameter count"));
        }
        for (w, g) in params.iter_mut().zip(grad) {
            let step = lr * g;
            if step != 0.0 {
                *w = snap_f32(*w - step);
            }
        }
        self.set_params(&params)
    }

    fn touch(&mut self) {
        self.stamp.version += 1;
    }

    /// Per-layer quantization scale (`None` for layers without parameters).
    pub fn scales(&self) -> &[Option<f64>] {
        &self.scales
    }

    pub fn scale_of_layer(&self, layer: usize) -> Option<f64> {
        self.scales.get(layer).copied().flatten()
    }

    pub fn set_scales(&mut self, scales: Vec<Option<f64>>) -> Result<()> {
        if scales.len() != self.layers.len() {
            return Err(Error::arg("one scale entry per layer is required"));
        }
        for (i, (s, l)) in scales.iter().zip(&self.layers).enumerate() {
            match (s, l.has_params()) {
                (Some(v), true) if *v > 0.0 && v.is_finite() => {}
                (None, false) => {}
                _ => return Err(Error::config(format!("layer {i}: invalid quantization scale {s:?}"))),
            }
        }
        self.scales = scales;
        Ok(())
    }

    /// Recomputes every layer scale as `max|w| / (2^M - 1)` over weights and
    /// biases; an all-zero layer gets scale 1.
    pub fn refresh_scales(&mut self) {
        let max_code = self.max_code() as f64;
        self.scales = self
            .layers
            .iter()
            .map(|l| {
                l.weight_bias().map(|(w, b)| {
                    let m = w
                        .data()
                        .iter()
                        .chain(b.map(|b| b.data()).unwrap_or(&[]))
                        .fold(0.0f64, |m, v| m.max(v.abs()));
                    if m > 0.0 {
                        m / max_code
                    } else {
                        1.0
                    }
                })
            })
            .collect();
    }

    /// Copy whose weights are rounded onto the M-bit grid of the current
    /// weights (`sign * round(|w| / s) * s` with `s = max|w| / (2^M - 1)`).
    pub fn quantized_copy(&self) -> Network {
        let mut src = self.clone();
        src.refresh_scales();
        let max_code = self.max_code() as f64;
        let mut out = src.clone();
        let groups = src.param_groups();
        let mut params = src.params();
        for g in groups {
            let s = src.scales[g.layer].expect("parameterized layer has a scale");
            for w in &mut params[g.range] {
                let q = (w.abs() / s).round().min(max_code);
                *w = w.signum() * q * s;
                if *w == 0.0 {
                    *w = 0.0;
                }
            }
        }
        out.set_params(&params).expect("same layout");
        out.scales = src.scales;
        out
    }

    /// Runs layers `start..` given the activations `prefix[0..=start]`.
    fn run(
        &self,
        start: usize,
        prefix: &[&Tensor],
        record_argmax: bool,
        macs: &mut u64,
    ) -> (Vec<Tensor>, Vec<Option<Vec<usize>>>) {
        debug_assert_eq!(prefix.len(), start + 1);
        let mut tail: Vec<Tensor> = Vec::with_capacity(self.layers.len() - start);
        let mut argmax = Vec::new();
        for i in start..self.layers.len() {
            let input = activation(prefix, &tail, i);
            let (out, idx) = match &self.layers[i] {
                Layer::ResidualAdd { source } => {
                    let other = activation(prefix, &tail, source + 1);
                    let data = input.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
                    (Tensor::new(input.shape().to_vec(), data).unwrap(), None)
                }
                layer => layer.forward(input, macs),
            };
            if record_argmax {
                argmax.push(idx);
            }
            tail.push(out);
        }
        (tail, argmax)
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(Error::Shape {
                layer: 0,
                kind: self.layers.first().map_or("Input", Layer::kind_name),
                message: format!(
                    "network expects input {:?}, got {:?}",
                    self.input_shape,
                    input.shape()
                ),
            });
        }
        Ok(())
    }

    /// Forward pass returning the final-layer logits and a tape for backward passes.
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, BackwardTape)> {
        self.check_input(input)?;
        let mut macs = 0;
        let (tail, argmax) = self.run(0, &[input], true, &mut macs);
        let mut acts = Vec::with_capacity(tail.len() + 1);
        acts.push(input.clone());
        acts.extend(tail);
        let tape = BackwardTape {
            acts,
            argmax,
            stamp: self.stamp,
            forward_macs: macs,
        };
        Ok((tape.output().clone(), tape))
    }

    /// Logits without keeping a tape.
    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let mut macs = 0;
        let (mut tail, _) = self.run(0, &[input], false, &mut macs);
        Ok(tail.pop().unwrap_or_else(|| input.clone()))
    }

    /// Logits computed from cached activations `prefix[0..=start]`.
    /// Entries that no remaining layer reads may be placeholders.
    pub fn logits_from(&self, start: usize, prefix: &[&Tensor]) -> Tensor {
        let mut macs = 0;
        let (mut tail, _) = self.run(start, prefix, false, &mut macs);
        tail.pop().unwrap_or_else(|| prefix[start].clone())
    }

    pub fn predict(&self, input: &Tensor) -> Result<usize> {
        Ok(self.logits(input)?.argmax())
    }

    /// Fraction of correctly classified examples.
    pub fn accuracy(&self, inputs: &[Tensor], labels: &[usize]) -> Result<f64> {
        if inputs.is_empty() || inputs.len() != labels.len() {
            return Err(Error::arg("accuracy needs a non-empty, labelled set"));
        }
        let mut correct = 0usize;
        for (x, &y) in inputs.iter().zip(labels) {
            if self.predict(x)? == y {
                correct += 1;
            }
        }
        Ok(correct as f64 / inputs.len() as f64)
    }

    fn backward(&self, order: Order, tape: &BackwardTape, seed: Vec<f64>, acc: &mut [f64], macs: &mut u64) -> Result<()> {
        if tape.stamp != self.stamp {
            return Err(Error::StaleTape);
        }
        let n = self.layers.len();
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; n + 1];
        pending[n] = Some(seed);
        for i in (0..n).rev() {
            let up = match pending[i + 1].take() {
                Some(u) => u,
                None => vec![0.0; tape.acts[i + 1].len()],
            };
            if let Layer::ResidualAdd { source } = self.layers[i] {
                add_into(&mut pending[source + 1], &up);
            }
            let layer = &self.layers[i];
            let range = self.offsets[i]..self.offsets[i] + layer.param_len();
            let down = layer.backward(order, &tape.acts[i], tape.argmax[i].as_deref(), &up, &mut acc[range], macs);
            add_into(&mut pending[i], &down);
        }
        Ok(())
    }

    /// Per-example gradient of the loss w.r.t. all parameters.
    pub fn gradient_from_tape(&self, tape: &BackwardTape, target: TargetRef<'_>) -> Result<(f64, Vec<f64>)> {
        let (loss, grad_out, _) = loss_terms(self.loss, tape.output().data(), target);
        let mut acc = vec![0.0; self.param_count];
        let mut macs = 0;
        self.backward(Order::First, tape, grad_out, &mut acc, &mut macs)?;
        Ok((loss, acc))
    }

    /// Per-example diagonal second derivatives w.r.t. all parameters.
    pub fn diag_hessian_from_tape(&self, tape: &BackwardTape, target: TargetRef<'_>) -> Result<Vec<f64>> {
        let (_, _, seed) = loss_terms(self.loss, tape.output().data(), target);
        let mut acc = vec![0.0; self.param_count];
        let mut macs = 0;
        self.backward(Order::Second, tape, seed, &mut acc, &mut macs)?;
        Ok(acc)
    }

    /// Mean per-example loss over the batch.
    pub fn loss(&self, batch: &Batch<'_>) -> Result<f64> {
        let mut total = 0.0;
        for (i, x) in batch.inputs.iter().enumerate() {
            let logits = self.logits(x)?;
            total += loss_terms(self.loss, logits.data(), batch.labels.get(i)).0;
        }
        Ok(total / batch.len() as f64)
    }

    /// Mean loss and batch-averaged gradient.
    pub fn loss_and_gradient(&self, batch: &Batch<'_>) -> Result<GradientResult> {
        let mut grad = vec![0.0; self.param_count];
        let mut loss = 0.0;
        let mut macs = 0;
        for (i, x) in batch.inputs.iter().enumerate() {
            let (logits, tape) = self.forward(x)?;
            macs += tape.forward_macs;
            let (l, g, _) = loss_terms(self.loss, logits.data(), batch.labels.get(i));
            loss += l;
            self.backward(Order::First, &tape, g, &mut grad, &mut macs)?;
        }
        let n = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        Ok(GradientResult {
            loss: loss / n,
            grad,
            macs,
        })
    }

    /// Batch-averaged diagonal second derivatives from one forward and one
    /// backward sweep per example.
    pub fn diag_hessian(&self, batch: &Batch<'_>) -> Result<DiagHessian> {
        let mut values = vec![0.0; self.param_count];
        let mut macs = 0;
        for (i, x) in batch.inputs.iter().enumerate() {
            let (logits, tape) = self.forward(x)?;
            macs += tape.forward_macs;
            let (_, _, seed) = loss_terms(self.loss, logits.data(), batch.labels.get(i));
            self.backward(Order::Second, &tape, seed, &mut values, &mut macs)?;
        }
        let n = batch.len() as f64;
        values.iter_mut().for_each(|h| *h /= n);
        Ok(DiagHessian { values, macs })
    }
}

fn activation<'a>(prefix: &[&'a Tensor], tail: &'a [Tensor], k: usize) -> &'a Tensor {
    if k < prefix.len() {
        prefix[k]
    } else {
        &tail[k - prefix.len()]
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, v: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(v).for_each(|(a, b)| *a += b),
        None => *slot = Some(v.to_vec()),
    }
}
