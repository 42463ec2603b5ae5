use super::layer::Layer;
use super::network::Network;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Classification accuracy over a fixed labelled set, with the activations
/// of the leading parameter-free layers computed once. Any network with the
/// same architecture can then be scored without redoing that prefix.
#[derive(Clone, Debug)]
pub struct Evaluator {
    start: usize,
    layer_count: usize,
    param_count: usize,
    // Per sample, activations 0..=start; entries never read later are None.
    prefixes: Vec<Vec<Option<Tensor>>>,
    labels: Vec<usize>,
    placeholder: Tensor,
}

impl Evaluator {
    pub fn new(net: &Network, inputs: &[Tensor], labels: &[usize]) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != labels.len() {
            return Err(Error::arg("evaluation set must be non-empty and fully labelled"));
        }
        let layers = net.layers();
        let start = layers.iter().take_while(|l| !l.has_params()).count().min(layers.len());
        let mut needed = vec![false; start + 1];
        needed[start] = true;
        for l in &layers[start..] {
            if let Layer::ResidualAdd { source } = l {
                if *source < start {
                    needed[source + 1] = true;
                }
            }
        }
        let mut prefixes = Vec::with_capacity(inputs.len());
        for x in inputs {
            let (_, tape) = net.forward(x)?;
            prefixes.push(
                (0..=start)
                    .map(|k| needed[k].then(|| tape.activation(k).clone()))
                    .collect(),
            );
        }
        Ok(Evaluator {
            start,
            layer_count: layers.len(),
            param_count: net.param_count(),
            prefixes,
            labels: labels.to_vec(),
            placeholder: Tensor::zeros(vec![0]),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn check(&self, net: &Network) {
        assert!(
            net.layers().len() == self.layer_count && net.param_count() == self.param_count,
            "evaluator built for a different architecture"
        );
    }

    /// Number of correctly classified examples.
    pub fn correct(&self, net: &Network) -> usize {
        self.check(net);
        self.prefixes
            .iter()
            .zip(&self.labels)
            .filter(|(prefix, &y)| {
                let refs: Vec<&Tensor> = prefix.iter().map(|p| p.as_ref().unwrap_or(&self.placeholder)).collect();
                net.logits_from(self.start, &refs).argmax() == y
            })
            .count()
    }

    /// Accuracy in percent.
    pub fn accuracy(&self, net: &Network) -> f64 {
        100.0 * self.correct(net) as f64 / self.len() as f64
    }
}
