//! Per-weight sensitivity metrics and the global ranking they induce.
//!
//! The U-SWIM metric is `h_i * E[dw_i^2]`: the diagonal second derivative
//! of the loss times the pre-verify variance of the weight in real units
//! (`scale^2 * std_int^2`). SWIM drops the variance term.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::device::{noise_std_integer_units, quantize_network, DeviceSpec, QuantizedNetwork, QuantizedWeight};
use crate::error::{Error, Result};
use crate::nngraph::{Batch, Network};
use crate::rng::seeded;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricKind {
    Uswim,
    Swim,
    Magnitude,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSensitivity {
    pub weight_id: usize,
    pub layer: usize,
    pub metric: f64,
    pub h: f64,
    pub var: f64,
    pub magnitude: f64,
    /// Position in the global descending order.
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub kind: MetricKind,
    /// Indexed by weight id.
    pub entries: Vec<WeightSensitivity>,
    /// Weight ids, most sensitive first.
    pub order: Vec<usize>,
}

/// Pre-verify variance of a weight in real weight units.
pub fn weight_variance(qw: &QuantizedWeight, spec: &DeviceSpec) -> f64 {
    let s = noise_std_integer_units(qw, spec) * qw.scale;
    s * s
}

/// Descending by `metric`, then by `magnitude`, then ascending id.
pub fn rank_order(metric: &[f64], magnitude: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..metric.len()).collect();
    order.sort_by(|&a, &b| {
        metric[b]
            .total_cmp(&metric[a])
            .then(magnitude[b].total_cmp(&magnitude[a]))
            .then(a.cmp(&b))
    });
    order
}

impl SensitivityReport {
    /// Ranks precomputed per-weight values.
    pub fn from_parts(
        kind: MetricKind,
        metric: Vec<f64>,
        h: Vec<f64>,
        var: Vec<f64>,
        magnitude: Vec<f64>,
        layer: Vec<usize>,
    ) -> Result<Self> {
        let n = metric.len();
        if [h.len(), var.len(), magnitude.len(), layer.len()].iter().any(|&l| l != n) {
            return Err(Error::arg("per-weight vectors differ in length"));
        }
        if metric.iter().any(|m| m.is_nan()) {
            return Err(Error::arg("sensitivity metric contains NaN"));
        }
        let order = rank_order(&metric, &magnitude);
        Ok(Self::with_order(kind, order, metric, h, var, magnitude, layer))
    }

    fn with_order(
        kind: MetricKind,
        order: Vec<usize>,
        metric: Vec<f64>,
        h: Vec<f64>,
        var: Vec<f64>,
        magnitude: Vec<f64>,
        layer: Vec<usize>,
    ) -> Self {
        let mut entries: Vec<WeightSensitivity> = (0..metric.len())
            .map(|i| WeightSensitivity {
                weight_id: i,
                layer: layer[i],
                metric: metric[i],
                h: h[i],
                var: var[i],
                magnitude: magnitude[i],
                rank: 0,
            })
            .collect();
        for (pos, &id) in order.iter().enumerate() {
            entries[id].rank = pos;
        }
        SensitivityReport { kind, entries, order }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.rank).collect()
    }

    pub fn metrics(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.metric).collect()
    }

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        self.entries
            .iter()
            .map(|e| {
                vec![
                    e.weight_id.to_string(),
                    e.layer.to_string(),
                    e.metric.to_string(),
                    e.h.to_string(),
                    e.var.to_string(),
                    e.magnitude.to_string(),
                    e.rank.to_string(),
                ]
            })
            .collect()
    }
}

pub const CSV_HEADER: [&str; 7] = ["weight_id", "layer", "metric", "h", "var", "magnitude", "rank"];

fn layers_of(net: &Network) -> Vec<usize> {
    let mut out = vec![0; net.param_count()];
    for g in net.param_groups() {
        out[g.range].fill(g.layer);
    }
    out
}

/// Diagonal second derivatives averaged over every example of the
/// calibration batches.
pub fn calibrated_diag_hessian(net: &Network, batches: &[Batch<'_>]) -> Result<Vec<f64>> {
    if batches.is_empty() {
        return Err(Error::arg("calibration data is empty"));
    }
    let mut acc = vec![0.0; net.param_count()];
    let mut total = 0usize;
    for b in batches {
        let h = net.diag_hessian(b)?;
        let k = b.len() as f64;
        for (a, v) in acc.iter_mut().zip(&h.values) {
            *a += v * k;
        }
        total += b.len();
    }
    acc.iter_mut().for_each(|a| *a /= total as f64);
    Ok(acc)
}

/// U-SWIM ranking from precomputed second derivatives.
pub fn uswim_from_hessian(net: &Network, h: Vec<f64>, qnet: &QuantizedNetwork, spec: &DeviceSpec) -> Result<SensitivityReport> {
    if h.len() != qnet.len() || h.len() != net.param_count() {
        return Err(Error::arg("second derivatives do not cover every weight"));
    }
    let var: Vec<f64> = qnet.weights.iter().map(|qw| weight_variance(qw, spec)).collect();
    let metric = h.iter().zip(&var).map(|(h, v)| h * v).collect();
    let magnitude = net.params().iter().map(|w| w.abs()).collect();
    SensitivityReport::from_parts(MetricKind::Uswim, metric, h, var, magnitude, layers_of(net))
}

/// SWIM ranking from precomputed second derivatives.
pub fn swim_from_hessian(net: &Network, h: Vec<f64>) -> Result<SensitivityReport> {
    if h.len() != net.param_count() {
        return Err(Error::arg("second derivatives do not cover every weight"));
    }
    let n = h.len();
    let magnitude = net.params().iter().map(|w| w.abs()).collect();
    SensitivityReport::from_parts(MetricKind::Swim, h.clone(), h, vec![0.0; n], magnitude, layers_of(net))
}

pub fn uswim_metric(net: &Network, batches: &[Batch<'_>], spec: &DeviceSpec) -> Result<SensitivityReport> {
    let qnet = quantize_network(net, spec.bits)?;
    let h = calibrated_diag_hessian(net, batches)?;
    uswim_from_hessian(net, h, &qnet, spec)
}

pub fn swim_metric(net: &Network, batches: &[Batch<'_>]) -> Result<SensitivityReport> {
    let h = calibrated_diag_hessian(net, batches)?;
    swim_from_hessian(net, h)
}

pub fn magnitude_metric(net: &Network) -> SensitivityReport {
    let magnitude: Vec<f64> = net.params().iter().map(|w| w.abs()).collect();
    let n = magnitude.len();
    SensitivityReport::from_parts(
        MetricKind::Magnitude,
        magnitude.clone(),
        vec![0.0; n],
        vec![0.0; n],
        magnitude,
        layers_of(net),
    )
    .expect("magnitudes are never NaN")
}

/// Uniformly random permutation, deterministic per seed.
pub fn random_order(n: usize, seed: u64) -> SensitivityReport {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed));
    SensitivityReport::with_order(
        MetricKind::Random,
        order,
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
        vec![0; n],
    )
}
