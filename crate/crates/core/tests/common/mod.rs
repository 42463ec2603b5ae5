#![allow(dead_code)]

use rand::Rng;
use swv::nngraph::{Affine, Layer, LossKind, Network, Tensor};
use swv::rng::seeded;

pub fn zeros_dense(out: usize, inp: usize) -> Layer {
    Layer::dense(Tensor::zeros(vec![out, inp]), Some(Tensor::zeros(vec![out])))
}

/// Random parameters (including biases) so no bias starts at zero. Values
/// are single-precision like trained latent weights.
pub fn randomize(net: &mut Network, seed: u64) {
    let mut rng = seeded(seed);
    let p: Vec<f64> = (0..net.param_count()).map(|_| rng.random_range(-1.0f32..1.0) as f64).collect();
    net.set_params(&p).unwrap();
}

pub fn mlp_352(seed: u64) -> Network {
    let mut net = Network::mlp(&[3, 5, 2], LossKind::SoftmaxCrossEntropy, 4, seed).unwrap();
    randomize(&mut net, seed ^ 0x5eed);
    net
}

/// Conv -> ReLU -> MaxPool -> Flatten -> Dense on `[1, 6, 6]` inputs.
pub fn conv_pool_dense(seed: u64) -> Network {
    let layers = vec![
        Layer::conv2d(Tensor::zeros(vec![2, 1, 3, 3]), Some(Tensor::zeros(vec![2])), 1, 0),
        Layer::Relu,
        Layer::MaxPool2D { size: 2, stride: 2 },
        Layer::Flatten,
        zeros_dense(3, 8),
    ];
    let mut net = Network::new(vec![1, 6, 6], layers, LossKind::SoftmaxCrossEntropy, 4).unwrap();
    randomize(&mut net, seed);
    net
}

/// Conv (padded, strided) -> AvgPool -> Flatten -> affine -> Dense.
pub fn conv_avg_affine(seed: u64) -> Network {
    let layers = vec![
        Layer::conv2d(Tensor::zeros(vec![2, 1, 3, 3]), Some(Tensor::zeros(vec![2])), 2, 1),
        Layer::AvgPool2D { size: 2, stride: 1 },
        Layer::BatchNormAffine(Affine {
            scale: vec![1.5, -0.7],
            shift: vec![0.1, 0.2],
        }),
        Layer::Flatten,
        zeros_dense(3, 8),
    ];
    let mut net = Network::new(vec![1, 6, 6], layers, LossKind::SoftmaxCrossEntropy, 4).unwrap();
    randomize(&mut net, seed);
    net
}

/// Dense -> ReLU -> Dense -> ResidualAdd(ReLU output) -> Dense.
pub fn residual_mlp(seed: u64, loss: LossKind) -> Network {
    let layers = vec![
        zeros_dense(4, 3),
        Layer::Relu,
        zeros_dense(4, 4),
        Layer::ResidualAdd { source: 1 },
        zeros_dense(2, 4),
    ];
    let mut net = Network::new(vec![3], layers, loss, 4).unwrap();
    randomize(&mut net, seed);
    net
}

pub fn random_inputs(shape: &[usize], n: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = seeded(seed);
    let len: usize = shape.iter().product();
    (0..n)
        .map(|_| Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
        .collect()
}

pub fn random_labels(classes: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = seeded(seed);
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Ids of the parameters owned by the last layer of `net`.
pub fn last_layer_ids(net: &Network) -> std::ops::Range<usize> {
    net.param_groups().last().unwrap().range.clone()
}
