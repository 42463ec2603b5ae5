use super::layer::Layer;
use super::network::Network;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Scores a network on a fixed labelled set when exactly one parameter is
/// shifted, without redoing the full forward pass.
///
/// Activations are cached once. A shift of one dense weight changes a single
/// output unit, and that sparse change is pushed through any following
/// ReLU, Flatten, affine and Dense layers; other layer kinds fall back to
/// recomputing the tail.
#[derive(Clone, Debug)]
pub struct WeightProbe {
    net: Network,
    start: usize,
    // Per sample, activations 0..=layers; None where never read.
    acts: Vec<Vec<Option<Tensor>>>,
    labels: Vec<usize>,
    base_correct: usize,
    placeholder: Tensor,
}

enum Delta {
    Sparse(Vec<(usize, f64)>),
    Fallback,
}

impl WeightProbe {
    pub fn new(net: &Network, inputs: &[Tensor], labels: &[usize]) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != labels.len() {
            return Err(Error::arg("probe set must be non-empty and fully labelled"));
        }
        let layers = net.layers();
        let start = layers.iter().take_while(|l| !l.has_params()).count().min(layers.len());
        let mut needed = vec![false; layers.len() + 1];
        needed[start..].fill(true);
        for l in layers {
            if let Layer::ResidualAdd { source } = l {
                needed[source + 1] = true;
            }
        }
        let mut acts = Vec::with_capacity(inputs.len());
        let mut base_correct = 0;
        for (x, &y) in inputs.iter().zip(labels) {
            let (out, tape) = net.forward(x)?;
            if out.argmax() == y {
                base_correct += 1;
            }
            acts.push(
                (0..=layers.len())
                    .map(|k| needed[k].then(|| tape.activation(k).clone()))
                    .collect(),
            );
        }
        Ok(WeightProbe {
            net: net.clone(),
            start,
            acts,
            labels: labels.to_vec(),
            base_correct,
            placeholder: Tensor::zeros(vec![0]),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Correct predictions of the unmodified network.
    pub fn base_correct(&self) -> usize {
        self.base_correct
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    /// Correct predictions with parameter `weight_id` shifted by `delta`.
    pub fn correct_with(&self, weight_id: usize, delta: f64) -> Result<usize> {
        let layer = self
            .net
            .layer_of_param(weight_id)
            .ok_or_else(|| Error::arg(format!("weight id {weight_id} out of range")))?;
        let offset = weight_id - self.net.param_groups().iter().find(|g| g.layer == layer).expect("group").range.start;
        let sparse_ok = matches!(self.net.layers()[layer], Layer::Dense(_))
            && self.net.layers()[layer + 1..]
                .iter()
                .all(|l| matches!(l, Layer::Dense(_) | Layer::Relu | Layer::Flatten | Layer::BatchNormAffine(_)));
        let shifted = if sparse_ok {
            None
        } else {
            let mut n = self.net.clone();
            n.set_param(weight_id, self.net.param(weight_id)? + delta)?;
            Some(n)
        };
        let last = self.net.layers().len();
        let mut correct = 0;
        for (acts, &y) in self.acts.iter().zip(&self.labels) {
            let logits = match &shifted {
                None => match self.propagate(layer, offset, delta, acts) {
                    Delta::Sparse(d) => {
                        let mut out = acts[last].as_ref().expect("output cached").clone();
                        for (i, v) in d {
                            out.data_mut()[i] += v;
                        }
                        out
                    }
                    Delta::Fallback => unreachable!("sparse path checked up front"),
                },
                Some(n) => {
                    let refs: Vec<&Tensor> = acts[..=self.start]
                        .iter()
                        .map(|a| a.as_ref().unwrap_or(&self.placeholder))
                        .collect();
                    n.logits_from(self.start, &refs)
                }
            };
            if logits.argmax() == y {
                correct += 1;
            }
        }
        Ok(correct)
    }

    fn propagate(&self, layer: usize, offset: usize, delta: f64, acts: &[Option<Tensor>]) -> Delta {
        let layers = self.net.layers();
        let Layer::Dense(d) = &layers[layer] else {
            return Delta::Fallback;
        };
        let (out, inp) = (d.weight.shape()[0], d.weight.shape()[1]);
        let x = acts[layer].as_ref().expect("layer input cached");
        let mut cur = if offset < out * inp {
            vec![(offset / inp, delta * x.data()[offset % inp])]
        } else {
            vec![(offset - out * inp, delta)]
        };
        for (k, l) in layers.iter().enumerate().skip(layer + 1) {
            if cur.is_empty() {
                break;
            }
            let input = acts[k].as_ref().expect("cached");
            cur = match l {
                Layer::Flatten => cur,
                Layer::Relu => cur
                    .into_iter()
                    .map(|(i, v)| {
                        let pre = input.data()[i];
                        (i, (pre + v).max(0.0) - pre.max(0.0))
                    })
                    .filter(|&(_, v)| v != 0.0)
                    .collect(),
                Layer::BatchNormAffine(a) => {
                    let per = input.len() / a.scale.len();
                    cur.into_iter().map(|(i, v)| (i, v * a.scale[i / per])).collect()
                }
                Layer::Dense(d) => {
                    let (o, n) = (d.weight.shape()[0], d.weight.shape()[1]);
                    let w = d.weight.data();
                    (0..o)
                        .map(|r| (r, cur.iter().map(|&(i, v)| w[r * n + i] * v).sum()))
                        .collect()
                }
                _ => return Delta::Fallback,
            };
        }
        Delta::Sparse(cur)
    }
}
