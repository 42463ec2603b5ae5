//! Program-and-verify simulation with write-cycle accounting.
//!
//! One attempt rewrites every device of a weight with fresh noise and costs
//! one write cycle. A write-verify loop starts with a fresh attempt and
//! repeats until `|realized - q| <= tau` (integer weight units) or the
//! attempt cap is hit.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::device::{noise_std_integer_units, quantize_value, sample_deviation, DeviceSpec, QuantizedNetwork, QuantizedWeight};
use crate::error::{Error, Result};
use crate::nngraph::Network;
use crate::rng::{seeded, Lineage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WriteVerifyConfig {
    /// Acceptance tolerance in integer weight units.
    pub tolerance: f64,
    pub max_attempts: u64,
}

impl Default for WriteVerifyConfig {
    fn default() -> Self {
        WriteVerifyConfig {
            tolerance: 0.06,
            max_attempts: 1000,
        }
    }
}

impl WriteVerifyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::config(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if self.max_attempts == 0 {
            return Err(Error::config("max_attempts must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightState {
    /// Target magnitude code.
    pub desired: u32,
    /// Realized magnitude in integer units (unclipped).
    pub realized: f64,
    pub verified: bool,
    pub attempts: u64,
}

/// Programming state of every weight of a quantized network under one
/// noise lineage.
#[derive(Clone, Debug)]
pub struct ProgrammedState {
    quantized: QuantizedNetwork,
    spec: DeviceSpec,
    config: WriteVerifyConfig,
    run_seed: u64,
    stds: Vec<f64>,
    weights: Vec<WeightState>,
    programmed: Vec<bool>,
    total_cycles: u64,
    verify_cycles: u64,
    exhausted: Vec<usize>,
}

/// Result of one `write_verify` call.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyOutcome {
    pub cycles: u64,
    /// Weights that hit the attempt cap without verifying.
    pub exhausted: Vec<usize>,
}

impl ProgrammedState {
    pub fn new(quantized: QuantizedNetwork, spec: DeviceSpec, config: WriteVerifyConfig, run_seed: u64) -> Result<Self> {
        config.validate()?;
        if spec.bits != quantized.k_bits {
            return Err(Error::config(format!(
                "device {} has K = {} but weights were split with K = {}",
                spec.name, spec.bits, quantized.k_bits
            )));
        }
        let stds = quantized.weights.iter().map(|w| noise_std_integer_units(w, &spec)).collect();
        let weights = quantized
            .weights
            .iter()
            .map(|w| WeightState {
                desired: w.code,
                realized: 0.0,
                verified: false,
                attempts: 0,
            })
            .collect();
        let n = quantized.len();
        Ok(ProgrammedState {
            quantized,
            spec,
            config,
            run_seed,
            stds,
            weights,
            programmed: vec![false; n],
            total_cycles: 0,
            verify_cycles: 0,
            exhausted: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn quantized(&self) -> &QuantizedNetwork {
        &self.quantized
    }

    pub fn spec(&self) -> &DeviceSpec {
        &self.spec
    }

    pub fn config(&self) -> &WriteVerifyConfig {
        &self.config
    }

    pub fn run_seed(&self) -> u64 {
        self.run_seed
    }

    pub fn weights(&self) -> &[WeightState] {
        &self.weights
    }

    /// Noise std of each weight in integer units.
    pub fn noise_stds(&self) -> &[f64] {
        &self.stds
    }

    /// All write cycles so far, bulk programming included.
    pub fn total_cycles(&self) -> u64 {
        self.total_cycles
    }

    /// Cycles spent inside write-verify loops.
    pub fn verify_cycles(&self) -> u64 {
        self.verify_cycles
    }

    /// Weights that ever exhausted the attempt cap.
    pub fn exhausted(&self) -> &[usize] {
        &self.exhausted
    }

    pub fn verified_count(&self) -> usize {
        self.weights.iter().filter(|w| w.verified).count()
    }

    fn attempt(&mut self, id: usize) {
        let qw = &self.quantized.weights[id];
        let st = &mut self.weights[id];
        let dev = sample_deviation(qw, &self.spec, Lineage::new(self.run_seed, id as u64, st.attempts));
        st.realized = st.desired as f64 + dev;
        st.attempts += 1;
        st.verified = (st.realized - st.desired as f64).abs() <= self.config.tolerance;
        self.programmed[id] = true;
        self.total_cycles += 1;
    }

    /// Rewrites every device of one weight with fresh noise.
    pub fn program_once(&mut self, id: usize) -> Result<()> {
        if id >= self.weights.len() {
            return Err(Error::arg(format!("weight id {id} out of range (n = {})", self.weights.len())));
        }
        self.attempt(id);
        Ok(())
    }

    /// Replaces the target of one weight; it must be programmed again before
    /// it counts as verified.
    pub fn retarget(&mut self, id: usize, qw: QuantizedWeight) -> Result<()> {
        if id >= self.weights.len() {
            return Err(Error::arg(format!("weight id {id} out of range (n = {})", self.weights.len())));
        }
        if qw.levels.len() != self.quantized.weights[id].levels.len() {
            return Err(Error::arg("new target has a different device split"));
        }
        self.stds[id] = noise_std_integer_units(&qw, &self.spec);
        self.weights[id].desired = qw.code;
        self.weights[id].verified = false;
        self.quantized.weights[id] = qw;
        Ok(())
    }

    /// Bulk write: programs every weight exactly once, no verification.
    pub fn program_all_unverified(&mut self) {
        for id in 0..self.weights.len() {
            self.attempt(id);
        }
    }

    /// Program-and-verify each listed weight.
    pub fn write_verify(&mut self, ids: &[usize]) -> Result<VerifyOutcome> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.weights.len()) {
            return Err(Error::arg(format!("weight id {bad} out of range (n = {})", self.weights.len())));
        }
        let mut out = VerifyOutcome::default();
        for &id in ids {
            let mut tries = 0;
            loop {
                self.attempt(id);
                tries += 1;
                if self.weights[id].verified {
                    break;
                }
                if tries >= self.config.max_attempts {
                    out.exhausted.push(id);
                    if !self.exhausted.contains(&id) {
                        self.exhausted.push(id);
                    }
                    break;
                }
            }
            out.cycles += tries;
        }
        self.verify_cycles += out.cycles;
        Ok(out)
    }

    /// Real-valued weights `sign * realized * scale` in parameter order.
    pub fn realized_params(&self) -> Result<Vec<f64>> {
        if let Some(id) = self.programmed.iter().position(|p| !p) {
            return Err(Error::arg(format!("weight {id} has never been programmed")));
        }
        Ok(self
            .quantized
            .weights
            .iter()
            .zip(&self.weights)
            .map(|(qw, st)| qw.sign as f64 * st.realized * qw.scale)
            .collect())
    }

    pub fn realized_network(&self, net: &Network) -> Result<Network> {
        let mut out = net.clone();
        out.set_params(&self.realized_params()?)?;
        Ok(out)
    }

    /// Analytic expected cycles of write-verifying every weight once.
    pub fn full_verify_expected_cycles(&self) -> f64 {
        self.stds
            .iter()
            .map(|&s| expected_attempts(s, self.config.tolerance, self.config.max_attempts))
            .sum()
    }
}

/// Probability that one attempt lands within `tau`: `P(|N(0, s^2)| <= tau)`.
pub fn success_probability(std: f64, tau: f64) -> f64 {
    if std <= 0.0 {
        return 1.0;
    }
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    2.0 * n.cdf(tau / std) - 1.0
}

/// Mean of a geometric number of attempts truncated at `max_attempts`.
pub fn expected_attempts(std: f64, tau: f64, max_attempts: u64) -> f64 {
    let p = success_probability(std, tau);
    if p >= 1.0 {
        return 1.0;
    }
    if p <= 0.0 {
        return max_attempts as f64;
    }
    (1.0 - (1.0 - p).powf(max_attempts as f64)) / p
}

/// Std of `N(0, s^2)` truncated to `[-tau, tau]`.
pub fn truncated_normal_std(std: f64, tau: f64) -> f64 {
    if std <= 0.0 {
        return 0.0;
    }
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    let a = tau / std;
    let mass = 2.0 * n.cdf(a) - 1.0;
    let var = std * std * (1.0 - 2.0 * a * n.pdf(a) / mass);
    var.max(0.0).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub device: String,
    pub sigma: f64,
    pub m_bits: u32,
    pub k_bits: u32,
    pub tolerance: f64,
    pub weights: usize,
    pub mean_attempts: f64,
    pub oracle_mean_attempts: f64,
    pub residual_std: f64,
    pub oracle_residual_std: f64,
    pub exhausted: usize,
}

/// Write-verifies `n` synthetic weights with uniformly random codes and
/// compares attempts and residual spread against the analytic oracles.
pub fn calibrate(
    spec: &DeviceSpec,
    m_bits: u32,
    config: &WriteVerifyConfig,
    n: usize,
    seed: u64,
) -> Result<CalibrationReport> {
    if n == 0 {
        return Err(Error::arg("calibration needs at least one weight"));
    }
    let k = spec.bits;
    if m_bits < 2 || !m_bits.is_multiple_of(k) {
        return Err(Error::config(format!("M = {m_bits} must be >= 2 and a multiple of K = {k}")));
    }
    let mut rng = seeded(seed);
    let max_code = (1u32 << m_bits) - 1;
    let weights: Vec<_> = (0..n)
        .map(|_| quantize_value(rng.random_range(0..=max_code) as f64, 1.0, m_bits, k))
        .collect();
    let qnet = QuantizedNetwork {
        m_bits,
        k_bits: k,
        layer_of: vec![0; n],
        weights,
    };
    let mut state = ProgrammedState::new(qnet, spec.clone(), config.clone(), seed)?;
    let ids: Vec<usize> = (0..n).collect();
    let outcome = state.write_verify(&ids)?;
    let residuals: Vec<f64> = state
        .weights
        .iter()
        .map(|w| w.realized - w.desired as f64)
        .collect();
    let residual_std = (residuals.iter().map(|r| r * r).sum::<f64>() / n as f64).sqrt();
    let oracle_mean = state.full_verify_expected_cycles() / n as f64;
    let oracle_var = state
        .stds
        .iter()
        .map(|&s| truncated_normal_std(s, config.tolerance).powi(2))
        .sum::<f64>()
        / n as f64;
    Ok(CalibrationReport {
        device: spec.name.clone(),
        sigma: spec.sigma,
        m_bits,
        k_bits: k,
        tolerance: config.tolerance,
        weights: n,
        mean_attempts: outcome.cycles as f64 / n as f64,
        oracle_mean_attempts: oracle_mean,
        residual_std,
        oracle_residual_std: oracle_var.sqrt(),
        exhausted: outcome.exhausted.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::quantize_network;
    use crate::nngraph::LossKind;

    fn tiny_state(sigma: f64) -> (Network, ProgrammedState) {
        let net = Network::mlp(&[3, 5, 2], LossKind::SoftmaxCrossEntropy, 4, 9).unwrap();
        let q = quantize_network(&net, 2).unwrap();
        let st = ProgrammedState::new(q, DeviceSpec::uniform(2, sigma), WriteVerifyConfig::default(), 17).unwrap();
        (net, st)
    }

    #[test]
    fn analytic_oracles() {
        let s = (0.01f64 * 17.0).sqrt();
        let p = success_probability(s, 0.06);
        assert!((p - 0.1157).abs() < 1e-4, "{p}");
        assert!((expected_attempts(s, 0.06, 1000) - 1.0 / p).abs() < 1e-9);
        let r = truncated_normal_std(s, 0.06);
        assert!((r - 0.06 / 3f64.sqrt()).abs() < 5e-4, "{r}");
        assert_eq!(success_probability(0.0, 0.06), 1.0);
    }

    #[test]
    fn zero_sigma_verifies_in_one() {
        let (net, mut st) = tiny_state(0.0);
        let n = st.len();
        let ids: Vec<usize> = (0..n).collect();
        let out = st.write_verify(&ids).unwrap();
        assert_eq!(out.cycles, n as u64);
        assert_eq!(st.total_cycles(), n as u64);
        assert!(st.weights().iter().all(|w| w.verified && w.attempts == 1));
        let q = quantize_network(&net, 2).unwrap().dequantized_network(&net).unwrap();
        assert_eq!(st.realized_network(&net).unwrap().params(), q.params());
    }

    #[test]
    fn bulk_write_counts_and_redraws() {
        let (_, mut st) = tiny_state(0.1);
        let n = st.len() as u64;
        st.program_all_unverified();
        assert_eq!(st.total_cycles(), n);
        assert_eq!(st.verify_cycles(), 0);
        let first: Vec<f64> = st.weights().iter().map(|w| w.realized).collect();
        st.program_all_unverified();
        assert_eq!(st.total_cycles(), 2 * n);
        let second: Vec<f64> = st.weights().iter().map(|w| w.realized).collect();
        assert_ne!(first, second);
    }

    #[test]
    fn verified_bound_and_accounting() {
        let (_, mut st) = tiny_state(0.2);
        st.program_all_unverified();
        let ids: Vec<usize> = (0..st.len()).step_by(2).collect();
        let before: Vec<u64> = st.weights().iter().map(|w| w.attempts).collect();
        st.write_verify(&ids).unwrap();
        let tau = st.config().tolerance;
        for (i, w) in st.weights().iter().enumerate() {
            assert!(w.attempts >= before[i]);
            if w.verified {
                assert!((w.realized - w.desired as f64).abs() <= tau);
            }
        }
        let sum: u64 = st.weights().iter().map(|w| w.attempts).sum();
        assert_eq!(sum, st.total_cycles());
        assert!(st.program_once(st.len()).is_err());
    }

    #[test]
    fn unprogrammed_state_has_no_network() {
        let (net, st) = tiny_state(0.1);
        assert!(st.realized_network(&net).is_err());
    }

    #[test]
    fn cap_records_exhaustion() {
        let net = Network::mlp(&[2, 2], LossKind::SoftmaxCrossEntropy, 4, 1).unwrap();
        let q = quantize_network(&net, 2).unwrap();
        let cfg = WriteVerifyConfig {
            tolerance: 1e-6,
            max_attempts: 3,
        };
        let mut st = ProgrammedState::new(q, DeviceSpec::uniform(2, 0.5), cfg, 1).unwrap();
        let out = st.write_verify(&[0, 1]).unwrap();
        assert_eq!(out.cycles, 6);
        assert_eq!(out.exhausted, vec![0, 1]);
        assert!(!st.weights()[0].verified);
    }

    #[test]
    fn large_tolerance_needs_one_attempt() {
        let cfg = WriteVerifyConfig {
            tolerance: 1e9,
            max_attempts: 1000,
        };
        let r = calibrate(&DeviceSpec::uniform(2, 0.1), 4, &cfg, 500, 3).unwrap();
        assert_eq!(r.mean_attempts, 1.0);
    }
}
