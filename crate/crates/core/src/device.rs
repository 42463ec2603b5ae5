//! Weight quantization, multi-device splitting and the programming-noise
//! model.
//!
//! An M-bit magnitude code `q` is split into `M/K` device levels
//! `g_i` (base `2^K` digits, least significant first). Programming a device
//! targeting level `g` lands at `g + N(0, (sigma * beta * Dm(g))^2)`, so the
//! whole weight lands at `q + sum_i 2^(iK) * N(0, sigma_i^2)`. The sign is
//! exact: positive and negative weights live in separate arrays.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nngraph::Network;
use crate::rng::Lineage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub name: String,
    /// Bits per device, K; levels are `0..2^K`.
    pub bits: u32,
    /// Base standard deviation in device-level units.
    pub sigma: f64,
    /// Normalization factor.
    pub beta: f64,
    /// Per-level multiplier `Dm(g)`, one entry per level.
    pub dm_table: Vec<f64>,
}

pub const BUILTIN_DEVICES: [&str; 4] = ["Uniform", "F2", "R4", "F6"];

impl DeviceSpec {
    pub fn new(name: impl Into<String>, bits: u32, sigma: f64, beta: f64, dm_table: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if bits == 0 || bits > 8 {
            return Err(Error::config(format!("device {name}: bits per device must be in 1..=8, got {bits}")));
        }
        if dm_table.len() != 1usize << bits {
            return Err(Error::config(format!(
                "device {name}: Dm table needs {} entries for K = {bits}, got {}",
                1usize << bits,
                dm_table.len()
            )));
        }
        if dm_table.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(Error::config(format!("device {name}: Dm entries must be positive")));
        }
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::config(format!("device {name}: sigma must be non-negative, got {sigma}")));
        }
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::config(format!("device {name}: beta must be positive, got {beta}")));
        }
        Ok(DeviceSpec {
            name,
            bits,
            sigma,
            beta,
            dm_table,
        })
    }

    /// Level-independent noise (`Dm = 1`, `beta = 1`).
    pub fn uniform(bits: u32, sigma: f64) -> Self {
        DeviceSpec::new("Uniform", bits, sigma, 1.0, vec![1.0; 1 << bits]).expect("valid uniform device")
    }

    /// 4-level FeFET with mid levels twice as noisy.
    pub fn f2(sigma: f64) -> Self {
        DeviceSpec::new("F2", 2, sigma, 0.8, vec![1.0, 2.0, 2.0, 1.0]).expect("valid F2")
    }

    /// 4-level RRAM with mid levels four times as noisy.
    pub fn r4(sigma: f64) -> Self {
        DeviceSpec::new("R4", 2, sigma, 0.57, vec![1.0, 4.0, 4.0, 1.0]).expect("valid R4")
    }

    /// Extrapolated 4-level FeFET with mid levels six times as noisy.
    pub fn f6(sigma: f64) -> Self {
        DeviceSpec::new("F6", 2, sigma, 0.43, vec![1.0, 6.0, 6.0, 1.0]).expect("valid F6")
    }

    /// Looks up a built-in device by (case-insensitive) name. `Uniform`
    /// takes `bits` per device; the others are fixed at K = 2.
    pub fn builtin(name: &str, bits: u32, sigma: f64) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "uniform" => Some(DeviceSpec::uniform(bits, sigma)),
            "f2" => Some(DeviceSpec::f2(sigma)),
            "r4" => Some(DeviceSpec::r4(sigma)),
            "f6" => Some(DeviceSpec::f6(sigma)),
            _ => None,
        }
    }

    pub fn with_sigma(&self, sigma: f64) -> Self {
        DeviceSpec {
            sigma,
            ..self.clone()
        }
    }

    pub fn level_count(&self) -> u32 {
        1 << self.bits
    }

    /// `sigma * beta * Dm(level)`.
    pub fn level_std(&self, level: u32) -> f64 {
        self.sigma * self.beta * self.dm_table[level as usize]
    }

    /// Short label used in reports, e.g. `R4@0.1`.
    pub fn label(&self) -> String {
        format!("{}@{}", self.name, self.sigma)
    }
}

/// Sign-magnitude quantized weight split across devices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedWeight {
    /// `+1` or `-1`; zero weights are `+1`.
    pub sign: i8,
    /// Magnitude code in `0..=2^M - 1`.
    pub code: u32,
    /// Device levels, least significant first.
    pub levels: Vec<u32>,
    /// Real weight units per unit of `code`.
    pub scale: f64,
}

pub fn split_levels(code: u32, m_bits: u32, k_bits: u32) -> Vec<u32> {
    let mask = (1u32 << k_bits) - 1;
    (0..m_bits / k_bits).map(|i| (code >> (i * k_bits)) & mask).collect()
}

pub fn merge_levels(levels: &[u32], k_bits: u32) -> u32 {
    levels.iter().enumerate().map(|(i, &g)| g << (i as u32 * k_bits)).sum()
}

fn check_bits(m_bits: u32, k_bits: u32) -> Result<()> {
    if m_bits < 2 || k_bits == 0 || !m_bits.is_multiple_of(k_bits) {
        return Err(Error::config(format!(
            "weight bits M = {m_bits} must be >= 2 and a multiple of device bits K = {k_bits}"
        )));
    }
    Ok(())
}

/// `q = round(|w| / scale)` clamped to `2^M - 1`.
pub fn quantize_value(w: f64, scale: f64, m_bits: u32, k_bits: u32) -> QuantizedWeight {
    let max_code = (1u32 << m_bits) - 1;
    let code = if scale > 0.0 {
        ((w.abs() / scale).round() as u64).min(max_code as u64) as u32
    } else {
        0
    };
    QuantizedWeight {
        sign: if w < 0.0 && code > 0 { -1 } else { 1 },
        code,
        levels: split_levels(code, m_bits, k_bits),
        scale,
    }
}

pub fn dequantize(qw: &QuantizedWeight) -> f64 {
    if qw.code == 0 {
        0.0
    } else {
        qw.sign as f64 * qw.code as f64 * qw.scale
    }
}

/// Standard deviation of the programmed magnitude in integer (code) units:
/// `sqrt(sum_i (sigma beta Dm(g_i))^2 * 2^(2iK))`.
pub fn noise_std_integer_units(qw: &QuantizedWeight, spec: &DeviceSpec) -> f64 {
    qw.levels
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            let s = spec.level_std(g) * (1u64 << (i as u32 * spec.bits)) as f64;
            s * s
        })
        .sum::<f64>()
        .sqrt()
}

/// One programming event of all devices of a weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseDraw {
    /// Per-device perturbations in level units.
    pub perturbations: Vec<f64>,
    /// Combined deviation in integer units, `sum_i perturbation_i * 2^(iK)`.
    pub deviation: f64,
    pub lineage: Lineage,
}

pub fn sample_programmed_value(qw: &QuantizedWeight, spec: &DeviceSpec, lineage: Lineage) -> NoiseDraw {
    let mut rng = lineage.rng();
    let perturbations: Vec<f64> = qw
        .levels
        .iter()
        .map(|&g| {
            let z: f64 = rng.sample(StandardNormal);
            spec.level_std(g) * z
        })
        .collect();
    let deviation = perturbations
        .iter()
        .enumerate()
        .map(|(i, p)| p * (1u64 << (i as u32 * spec.bits)) as f64)
        .sum();
    NoiseDraw {
        perturbations,
        deviation,
        lineage,
    }
}

/// Combined deviation only; identical to `sample_programmed_value(..).deviation`.
pub fn sample_deviation(qw: &QuantizedWeight, spec: &DeviceSpec, lineage: Lineage) -> f64 {
    let mut rng = lineage.rng();
    let mut dev = 0.0;
    for (i, &g) in qw.levels.iter().enumerate() {
        let z: f64 = rng.sample(StandardNormal);
        dev += spec.level_std(g) * z * (1u64 << (i as u32 * spec.bits)) as f64;
    }
    dev
}

/// Quantized view of every parameter of a network, in flat parameter order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedNetwork {
    pub m_bits: u32,
    pub k_bits: u32,
    pub weights: Vec<QuantizedWeight>,
    /// Owning layer of each weight.
    pub layer_of: Vec<usize>,
}

/// Quantizes every weight and bias with its layer's stored scale.
pub fn quantize_network(net: &Network, k_bits: u32) -> Result<QuantizedNetwork> {
    let m_bits = net.quant_bits();
    check_bits(m_bits, k_bits)?;
    let params = net.params();
    let mut weights = Vec::with_capacity(params.len());
    let mut layer_of = Vec::with_capacity(params.len());
    for g in net.param_groups() {
        let scale = net
            .scale_of_layer(g.layer)
            .ok_or_else(|| Error::config(format!("layer {} has no quantization scale", g.layer)))?;
        for &w in &params[g.range] {
            weights.push(quantize_value(w, scale, m_bits, k_bits));
            layer_of.push(g.layer);
        }
    }
    Ok(QuantizedNetwork {
        m_bits,
        k_bits,
        weights,
        layer_of,
    })
}

impl QuantizedNetwork {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dequantized_params(&self) -> Vec<f64> {
        self.weights.iter().map(dequantize).collect()
    }

    /// Copy of `net` carrying the noise-free quantized weights.
    pub fn dequantized_network(&self, net: &Network) -> Result<Network> {
        let mut out = net.clone();
        out.set_params(&self.dequantized_params())?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn endpoint_maps_to_full_code() {
        let qw = quantize_value(1.5, 1.5 / 15.0, 4, 2);
        assert_eq!((qw.sign, qw.code), (1, 15));
        assert!((qw.scale - 0.1).abs() < 1e-12);
        let z = quantize_value(0.0, 0.37, 4, 2);
        assert_eq!((z.sign, z.code), (1, 0));
        let negz = quantize_value(-0.01, 0.37, 4, 2);
        assert_eq!((negz.sign, negz.code), (1, 0));
    }

    #[test]
    fn base4_split() {
        assert_eq!(split_levels(13, 4, 2), vec![1, 3]);
        assert_eq!(merge_levels(&[1, 3], 2), 13);
    }

    #[test]
    fn dequantize_examples() {
        let qw = QuantizedWeight {
            sign: -1,
            code: 15,
            levels: vec![3, 3],
            scale: 0.1,
        };
        assert!((dequantize(&qw) + 1.5).abs() < 1e-12);
        let zero = QuantizedWeight { code: 0, levels: vec![0, 0], ..qw };
        assert_eq!(dequantize(&zero), 0.0);
    }

    #[test]
    fn noise_std_closed_form() {
        let qw = quantize_value(13.0, 1.0, 4, 2);
        let u = noise_std_integer_units(&qw, &DeviceSpec::uniform(2, 0.1));
        assert!((u - (0.01f64 * 17.0).sqrt()).abs() < 1e-12);
        assert!((u - 0.41231).abs() < 1e-5);
        let r = noise_std_integer_units(&qw, &DeviceSpec::r4(0.1));
        let expect = ((0.1f64 * 0.57 * 4.0).powi(2) + (0.1f64 * 0.57).powi(2) * 16.0).sqrt();
        assert!((r - expect).abs() < 1e-12);
        assert!((r - 0.32244).abs() < 1e-5);
        assert_eq!(noise_std_integer_units(&qw, &DeviceSpec::uniform(2, 0.0)), 0.0);
    }

    #[test]
    fn builtin_betas() {
        assert_eq!(DeviceSpec::builtin("F2", 2, 0.1).unwrap().beta, 0.8);
        assert_eq!(DeviceSpec::builtin("r4", 2, 0.1).unwrap().beta, 0.57);
        assert_eq!(DeviceSpec::builtin("F6", 2, 0.1).unwrap().beta, 0.43);
        assert_eq!(DeviceSpec::builtin("F6", 2, 0.1).unwrap().dm_table, vec![1.0, 6.0, 6.0, 1.0]);
        assert!(DeviceSpec::builtin("X9", 2, 0.1).is_none());
    }

    #[test]
    fn spec_validation() {
        assert!(DeviceSpec::new("bad", 2, 0.1, 1.0, vec![1.0; 3]).is_err());
        assert!(DeviceSpec::new("bad", 2, 0.1, 0.0, vec![1.0; 4]).is_err());
        assert!(DeviceSpec::new("bad", 2, 0.1, 1.0, vec![1.0, 0.0, 1.0, 1.0]).is_err());
        assert!(DeviceSpec::new("bad", 2, -0.1, 1.0, vec![1.0; 4]).is_err());
    }

    #[test]
    fn zero_sigma_draw_is_exact() {
        let qw = quantize_value(7.0, 1.0, 4, 2);
        let d = sample_programmed_value(&qw, &DeviceSpec::uniform(2, 0.0), Lineage::new(1, 2, 3));
        assert_eq!(d.deviation, 0.0);
    }

    #[test]
    fn draw_is_deterministic_and_consistent() {
        let qw = quantize_value(9.0, 1.0, 4, 2);
        let spec = DeviceSpec::r4(0.1);
        let lin = Lineage::new(11, 5, 2);
        let a = sample_programmed_value(&qw, &spec, lin);
        let b = sample_programmed_value(&qw, &spec, lin);
        assert_eq!(a, b);
        let combined = a.perturbations[0] + 4.0 * a.perturbations[1];
        assert!((a.deviation - combined).abs() < 1e-15);
        assert_eq!(sample_deviation(&qw, &spec, lin), a.deviation);
    }

    #[test]
    fn bits_must_divide() {
        let net = Network::mlp(&[2, 2], crate::nngraph::LossKind::SoftmaxCrossEntropy, 5, 0).unwrap();
        assert!(quantize_network(&net, 2).is_err());
    }

    proptest! {
        #[test]
        fn split_merge_lossless(code in 0u32..(1 << 12), kidx in 0usize..3) {
            let k = [1u32, 2, 3][kidx];
            let m = 12;
            let levels = split_levels(code, m, k);
            prop_assert_eq!(levels.len() as u32, m / k);
            prop_assert!(levels.iter().all(|&g| g < (1 << k)));
            prop_assert_eq!(merge_levels(&levels, k), code);
        }

        #[test]
        fn round_trip_within_half_step(w in -1.0f64..1.0, max in 0.5f64..2.0) {
            let scale = max.max(w.abs()) / 63.0;
            let qw = quantize_value(w, scale, 6, 2);
            prop_assert!((dequantize(&qw) - w).abs() <= scale / 2.0 + 1e-12);
        }
    }
}
