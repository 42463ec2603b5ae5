//! Selective write-verify driver and the in-situ training baseline.
//!
//! Selective flow: bulk-program every weight once, rank the weights, then
//! write-verify consecutive rank batches of `ceil(p * n)` weights, scoring
//! the mapped network after each batch. Write cycles are normalized by the
//! analytic expected cost of write-verifying every weight (NWC); the bulk
//! write is not counted, so NWC 0 means "no write-verify".

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::device::{quantize_network, quantize_value, DeviceSpec, QuantizedNetwork};
use crate::error::{Error, Result};
use crate::nngraph::{Batch, Evaluator, Network};
use crate::rng::{derive_seed, label_tag, seeded};
use crate::sensitivity::{
    calibrated_diag_hessian, magnitude_metric, random_order, swim_from_hessian, uswim_from_hessian, SensitivityReport,
};
use crate::writeverify::{ProgrammedState, WriteVerifyConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "USWIM")]
    Uswim,
    #[serde(rename = "SWIM")]
    Swim,
    Magnitude,
    Random,
    InSitu,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Uswim,
        Strategy::Swim,
        Strategy::Magnitude,
        Strategy::Random,
        Strategy::InSitu,
    ];

    pub fn parse(name: &str) -> std::result::Result<Self, String> {
        match name.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "uswim" => Ok(Strategy::Uswim),
            "swim" => Ok(Strategy::Swim),
            "magnitude" => Ok(Strategy::Magnitude),
            "random" => Ok(Strategy::Random),
            "insitu" => Ok(Strategy::InSitu),
            _ => Err(format!(
                "unknown strategy `{name}` (expected USWIM, SWIM, Magnitude, Random or InSitu)"
            )),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Uswim => "USWIM",
            Strategy::Swim => "SWIM",
            Strategy::Magnitude => "Magnitude",
            Strategy::Random => "Random",
            Strategy::InSitu => "InSitu",
        }
    }

    /// Whether the strategy write-verifies weights (everything but in-situ).
    pub fn is_selective(self) -> bool {
        self != Strategy::InSitu
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InSituConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
}

impl Default for InSituConfig {
    fn default() -> Self {
        InSituConfig {
            lr: 0.01,
            batch_size: 64,
            max_iterations: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriverConfig {
    /// Fraction of all weights verified per batch.
    pub granularity: f64,
    /// Allowed accuracy drop in percentage points; `None` never stops early.
    pub delta_a: Option<f64>,
    pub strategy: Strategy,
    pub device: DeviceSpec,
    pub write_verify: WriteVerifyConfig,
    pub insitu: InSituConfig,
    pub run_seed: u64,
}

impl DriverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.granularity > 0.0 && self.granularity <= 1.0) {
            return Err(Error::config(format!("granularity must be in (0, 1], got {}", self.granularity)));
        }
        if let Some(d) = self.delta_a {
            if !(d >= 0.0) {
                return Err(Error::config(format!("delta_a must be >= 0, got {d}")));
            }
        }
        self.write_verify.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub strategy: String,
    pub run: usize,
    /// 0 is the state right after the bulk write.
    pub batch: usize,
    /// Weights verified so far (in-situ: weights rewritten in the last iteration).
    pub verified: usize,
    /// Write cycles after the bulk write.
    pub cycles: u64,
    pub nwc: f64,
    pub acc_train: Option<f64>,
    pub acc_eval: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Accuracy came within the allowed drop.
    DeltaA,
    /// Every weight verified (or the iteration cap hit) without meeting the drop.
    Exhausted,
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub records: Vec<TrajectoryRecord>,
    pub termination: Termination,
    /// Expected cycles of a full write-verify (NWC denominator).
    pub denominator: f64,
    pub bulk_cycles: u64,
    pub diagnostics: Vec<String>,
}

pub fn nwc(cycles: f64, denominator: f64) -> Result<f64> {
    if !(denominator > 0.0) {
        return Err(Error::config(format!("NWC denominator must be positive, got {denominator}")));
    }
    Ok(cycles / denominator)
}

/// Result of a budgeted run at one NWC budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetPoint {
    pub budget: f64,
    /// NWC actually spent (at most the budget).
    pub nwc: f64,
    pub cycles: u64,
    pub verified: usize,
    pub accuracy: f64,
}

/// A quantized network bound to a device, plus the scoring sets.
///
/// `train` is the set the stopping rule scores against;
/// `eval` is held-out data recorded for reporting only.
pub struct Mapper<'a> {
    net: Network,
    qnet: QuantizedNetwork,
    spec: DeviceSpec,
    wv: WriteVerifyConfig,
    granularity: f64,
    denominator: f64,
    train: Option<&'a Evaluator>,
    eval: Option<&'a Evaluator>,
}

impl<'a> Mapper<'a> {
    /// `net` carries the trained weights and layer scales; the mapper works
    /// on its quantized copy.
    pub fn new(
        net: &Network,
        spec: DeviceSpec,
        wv: WriteVerifyConfig,
        granularity: f64,
        train: Option<&'a Evaluator>,
        eval: Option<&'a Evaluator>,
    ) -> Result<Self> {
        wv.validate()?;
        if !(granularity > 0.0 && granularity <= 1.0) {
            return Err(Error::config(format!("granularity must be in (0, 1], got {granularity}")));
        }
        let qnet = quantize_network(net, spec.bits)?;
        let dq = qnet.dequantized_network(net)?;
        let probe = ProgrammedState::new(qnet.clone(), spec.clone(), wv.clone(), 0)?;
        let denominator = probe.full_verify_expected_cycles();
        Ok(Mapper {
            net: dq,
            qnet,
            spec,
            wv,
            granularity,
            denominator,
            train,
            eval,
        })
    }

    /// The noise-free quantized network.
    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn quantized(&self) -> &QuantizedNetwork {
        &self.qnet
    }

    pub fn spec(&self) -> &DeviceSpec {
        &self.spec
    }

    pub fn denominator(&self) -> f64 {
        self.denominator
    }

    pub fn len(&self) -> usize {
        self.qnet.len()
    }

    pub fn is_empty(&self) -> bool {
        self.qnet.is_empty()
    }

    /// Weights per write-verify batch, `ceil(p * n)`.
    pub fn batch_size(&self) -> usize {
        ((self.granularity * self.len() as f64).ceil() as usize).clamp(1, self.len().max(1))
    }

    /// Accuracy (percent) of the noise-free quantized network.
    pub fn baseline(&self) -> (Option<f64>, Option<f64>) {
        (
            self.train.map(|e| e.accuracy(&self.net)),
            self.eval.map(|e| e.accuracy(&self.net)),
        )
    }

    fn bulk(&self, run_seed: u64) -> Result<ProgrammedState> {
        let mut st = ProgrammedState::new(self.qnet.clone(), self.spec.clone(), self.wv.clone(), run_seed)?;
        st.program_all_unverified();
        Ok(st)
    }

    fn realized(&self, params: &[f64]) -> Result<Network> {
        let mut n = self.net.clone();
        n.set_params(params)?;
        Ok(n)
    }

    fn check_order(&self, order: &[usize]) -> Result<()> {
        let mut seen = vec![false; self.len()];
        if order.len() != self.len() {
            return Err(Error::arg(format!("ranking covers {} of {} weights", order.len(), self.len())));
        }
        for &i in order {
            if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::arg("ranking is not a permutation of the weight ids"));
            }
        }
        Ok(())
    }

    /// Selective write-verify with an explicit ranking. With `delta_a` set, stops after
    /// the first batch whose training-set accuracy is within `delta_a`
    /// points of the noise-free quantized accuracy.
    pub fn run_selective(&self, order: &[usize], delta_a: Option<f64>, run_seed: u64, label: &str, run: usize) -> Result<Trajectory> {
        self.check_order(order)?;
        if delta_a.is_some() && self.train.is_none() {
            return Err(Error::arg("accuracy-drop stopping needs a training evaluator"));
        }
        let baseline = self.train.map(|e| e.accuracy(&self.net));
        let mut st = self.bulk(run_seed)?;
        let bulk_cycles = st.total_cycles();
        let mut records = Vec::new();
        let mut diagnostics = Vec::new();
        let score = |st: &ProgrammedState| -> Result<(Option<f64>, Option<f64>)> {
            let net = self.realized(&st.realized_params()?)?;
            Ok((self.train.map(|e| e.accuracy(&net)), self.eval.map(|e| e.accuracy(&net))))
        };
        let (acc_train, acc_eval) = score(&st)?;
        records.push(TrajectoryRecord {
            strategy: label.to_string(),
            run,
            batch: 0,
            verified: 0,
            cycles: 0,
            nwc: 0.0,
            acc_train,
            acc_eval,
        });
        let mut termination = Termination::Exhausted;
        let mut verified = 0;
        for (b, chunk) in order.chunks(self.batch_size()).enumerate() {
            let out = st.write_verify(chunk)?;
            if !out.exhausted.is_empty() {
                diagnostics.push(format!(
                    "batch {}: {} weights hit the attempt cap",
                    b + 1,
                    out.exhausted.len()
                ));
            }
            verified += chunk.len();
            let (acc_train, acc_eval) = score(&st)?;
            records.push(TrajectoryRecord {
                strategy: label.to_string(),
                run,
                batch: b + 1,
                verified,
                cycles: st.verify_cycles(),
                nwc: nwc(st.verify_cycles() as f64, self.denominator)?,
                acc_train,
                acc_eval,
            });
            if let (Some(d), Some(a), Some(t)) = (delta_a, baseline, acc_train) {
                if a - t <= d {
                    termination = Termination::DeltaA;
                    break;
                }
            }
        }
        Ok(Trajectory {
            records,
            termination,
            denominator: self.denominator,
            bulk_cycles,
            diagnostics,
        })
    }

    /// Selective write-verify under each NWC budget: accuracy of the state
    /// at the last batch boundary whose cycle count fits the budget.
    /// `budgets` must be sorted ascending; scores use `eval`.
    pub fn run_budgeted(&self, order: &[usize], budgets: &[f64], run_seed: u64) -> Result<Vec<BudgetPoint>> {
        self.check_order(order)?;
        let eval = self.eval.ok_or_else(|| Error::arg("budgeted runs need an evaluation set"))?;
        if budgets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::arg("NWC budgets must be sorted ascending"));
        }
        let mut st = self.bulk(run_seed)?;
        let mut points = Vec::with_capacity(budgets.len());
        let mut prev = (st.realized_params()?, 0u64, 0usize);
        let mut prev_acc: Option<f64> = None;
        let mut verified = 0;
        for chunk in order.chunks(self.batch_size()) {
            if points.len() == budgets.len() {
                break;
            }
            st.write_verify(chunk)?;
            verified += chunk.len();
            let cycles = st.verify_cycles();
            // Budgets the new state overshoots are settled by the previous one.
            while points.len() < budgets.len() && cycles as f64 > budgets[points.len()] * self.denominator {
                let acc = match prev_acc {
                    Some(a) => a,
                    None => *prev_acc.insert(eval.accuracy(&self.realized(&prev.0)?)),
                };
                points.push(BudgetPoint {
                    budget: budgets[points.len()],
                    nwc: prev.1 as f64 / self.denominator,
                    cycles: prev.1,
                    verified: prev.2,
                    accuracy: acc,
                });
            }
            prev = (st.realized_params()?, cycles, verified);
            prev_acc = None;
        }
        while points.len() < budgets.len() {
            let acc = match prev_acc {
                Some(a) => a,
                None => *prev_acc.insert(eval.accuracy(&self.realized(&prev.0)?)),
            };
            points.push(BudgetPoint {
                budget: budgets[points.len()],
                nwc: prev.1 as f64 / self.denominator,
                cycles: prev.1,
                verified: prev.2,
                accuracy: acc,
            });
        }
        Ok(points)
    }

    /// In-situ training: each iteration computes the gradient on the noisy
    /// mapped network, updates latent weights, re-quantizes them with the
    /// fixed layer scales and rewrites every weight once without verify.
    /// `on_iteration` sees `(iteration, cycles, network)` after each rewrite
    /// and returns `false` to stop.
    pub fn insitu_loop(
        &self,
        train_data: &Dataset,
        cfg: &InSituConfig,
        run_seed: u64,
        mut on_iteration: impl FnMut(usize, u64, &Network) -> Result<bool>,
    ) -> Result<Option<String>> {
        if train_data.is_empty() {
            return Err(Error::arg("in-situ training needs training data"));
        }
        if cfg.batch_size == 0 {
            return Err(Error::arg("in-situ batch size must be positive"));
        }
        let mut st = self.bulk(run_seed)?;
        let mut latent = self.net.params();
        let mut rng = seeded(derive_seed(run_seed, &[label_tag("insitu-batches")]));
        let n = self.len();
        let m = self.qnet.m_bits;
        let k = self.qnet.k_bits;
        let bs = cfg.batch_size.min(train_data.len());
        for it in 1..=cfg.max_iterations {
            let noisy = self.realized(&st.realized_params()?)?;
            let idx: Vec<usize> = (0..bs).map(|_| rng.random_range(0..train_data.len())).collect();
            let xs: Vec<_> = idx.iter().map(|&i| train_data.inputs[i].clone()).collect();
            let ys: Vec<usize> = idx.iter().map(|&i| train_data.labels[i]).collect();
            let g = noisy.loss_and_gradient(&Batch::classes(&xs, &ys)?)?;
            if !g.loss.is_finite() || g.grad.iter().any(|v| !v.is_finite()) {
                return Ok(Some(format!("iteration {it}: loss became {}", g.loss)));
            }
            #[allow(clippy::needless_range_loop)]
            for id in 0..n {
                latent[id] -= cfg.lr * g.grad[id];
                let scale = self.qnet.weights[id].scale;
                st.retarget(id, quantize_value(latent[id], scale, m, k))?;
                st.program_once(id)?;
            }
            let cycles = st.total_cycles() - n as u64;
            let net = self.realized(&st.realized_params()?)?;
            if !on_iteration(it, cycles, &net)? {
                break;
            }
        }
        Ok(None)
    }

    pub fn run_insitu(&self, train_data: &Dataset, cfg: &InSituConfig, delta_a: Option<f64>, run_seed: u64, run: usize) -> Result<Trajectory> {
        if delta_a.is_some() && self.train.is_none() {
            return Err(Error::arg("accuracy-drop stopping needs a training evaluator"));
        }
        let baseline = self.train.map(|e| e.accuracy(&self.net));
        let n = self.len();
        let bulk = self.bulk(run_seed)?;
        let start = self.realized(&bulk.realized_params()?)?;
        let mut records = vec![TrajectoryRecord {
            strategy: Strategy::InSitu.name().to_string(),
            run,
            batch: 0,
            verified: 0,
            cycles: 0,
            nwc: 0.0,
            acc_train: self.train.map(|e| e.accuracy(&start)),
            acc_eval: self.eval.map(|e| e.accuracy(&start)),
        }];
        let mut termination = Termination::Exhausted;
        let denominator = self.denominator;
        let diverged = self.insitu_loop(train_data, cfg, run_seed, |it, cycles, net| {
            let acc_train = self.train.map(|e| e.accuracy(net));
            records.push(TrajectoryRecord {
                strategy: Strategy::InSitu.name().to_string(),
                run,
                batch: it,
                verified: n,
                cycles,
                nwc: nwc(cycles as f64, denominator)?,
                acc_train,
                acc_eval: self.eval.map(|e| e.accuracy(net)),
            });
            if let (Some(d), Some(a), Some(t)) = (delta_a, baseline, acc_train) {
                if a - t <= d {
                    termination = Termination::DeltaA;
                    return Ok(false);
                }
            }
            Ok(true)
        })?;
        let mut diagnostics = Vec::new();
        if let Some(msg) = diverged {
            termination = Termination::Diverged;
            diagnostics.push(msg);
        }
        Ok(Trajectory {
            records,
            termination,
            denominator,
            bulk_cycles: n as u64,
            diagnostics,
        })
    }

    /// In-situ accuracy at each NWC budget: the state after the largest
    /// iteration count whose rewrites fit the budget.
    pub fn insitu_budgeted(&self, train_data: &Dataset, cfg: &InSituConfig, budgets: &[f64], run_seed: u64) -> Result<Vec<BudgetPoint>> {
        let eval = self.eval.ok_or_else(|| Error::arg("budgeted runs need an evaluation set"))?;
        let n = self.len() as f64;
        let iters: Vec<usize> = budgets
            .iter()
            .map(|b| ((b * self.denominator / n).floor() as usize).min(cfg.max_iterations))
            .collect();
        let max_it = iters.iter().copied().max().unwrap_or(0);
        let mut acc_at = vec![None; max_it + 1];
        let bulk = self.bulk(run_seed)?;
        if iters.contains(&0) {
            acc_at[0] = Some(eval.accuracy(&self.realized(&bulk.realized_params()?)?));
        }
        if max_it > 0 {
            let capped = InSituConfig {
                max_iterations: max_it,
                ..cfg.clone()
            };
            if let Some(msg) = self.insitu_loop(train_data, &capped, run_seed, |it, _, net| {
                if iters.contains(&it) {
                    acc_at[it] = Some(eval.accuracy(net));
                }
                Ok(true)
            })? {
                return Err(Error::Config(format!("in-situ run diverged: {msg}")));
            }
        }
        Ok(budgets
            .iter()
            .zip(&iters)
            .map(|(&budget, &it)| BudgetPoint {
                budget,
                nwc: it as f64 * n / self.denominator,
                cycles: it as u64 * n as u64,
                verified: 0,
                accuracy: acc_at[it].expect("scored iteration"),
            })
            .collect())
    }
}

/// Ranking for a selective strategy. `h` is the calibrated diagonal second
/// derivative of the noise-free quantized network (ignored by Magnitude and
/// Random).
pub fn ranking(strategy: Strategy, mapper: &Mapper<'_>, h: &[f64], random_seed: u64) -> Result<SensitivityReport> {
    let net = mapper.network();
    match strategy {
        Strategy::Uswim => uswim_from_hessian(net, h.to_vec(), mapper.quantized(), mapper.spec()),
        Strategy::Swim => swim_from_hessian(net, h.to_vec()),
        Strategy::Magnitude => Ok(magnitude_metric(net)),
        Strategy::Random => Ok(random_order(mapper.len(), random_seed)),
        Strategy::InSitu => Err(Error::arg("in-situ training has no weight ranking")),
    }
}

/// Seed of the random baseline's ordering for one run.
pub fn random_order_seed(run_seed: u64) -> u64 {
    derive_seed(run_seed, &[label_tag("random-order")])
}

/// One complete run of the configured strategy: builds evaluators, ranks
/// (second derivatives averaged over `train_data` in batches of
/// `calibration_batch_size`) and drives selective write-verify or in-situ training.
pub fn run_strategy(
    net: &Network,
    cfg: &DriverConfig,
    train_data: &Dataset,
    eval_data: Option<&Dataset>,
    calibration_batch_size: usize,
) -> Result<Trajectory> {
    cfg.validate()?;
    let train_ev = Evaluator::new(net, &train_data.inputs, &train_data.labels)?;
    let eval_ev = eval_data
        .map(|d| Evaluator::new(net, &d.inputs, &d.labels))
        .transpose()?;
    let mapper = Mapper::new(
        net,
        cfg.device.clone(),
        cfg.write_verify.clone(),
        cfg.granularity,
        Some(&train_ev),
        eval_ev.as_ref(),
    )?;
    if cfg.strategy == Strategy::InSitu {
        return mapper.run_insitu(train_data, &cfg.insitu, cfg.delta_a, cfg.run_seed, 0);
    }
    let h = match cfg.strategy {
        Strategy::Uswim | Strategy::Swim => {
            calibrated_diag_hessian(mapper.network(), &train_data.batches(calibration_batch_size)?)?
        }
        _ => vec![0.0; mapper.len()],
    };
    let report = ranking(cfg.strategy, &mapper, &h, random_order_seed(cfg.run_seed))?;
    mapper.run_selective(&report.order, cfg.delta_a, cfg.run_seed, cfg.strategy.name(), 0)
}
