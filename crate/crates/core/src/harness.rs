//! Monte Carlo experiment orchestration: NWC-budgeted sweeps over
//! (strategy, device, sigma) cells, mean/std aggregation, invariant checks,
//! and the per-weight perturbation study behind the correlation plot.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::device::{quantize_network, sample_deviation, DeviceSpec};
use crate::error::{Error, Result};
use crate::nngraph::{Batch, Evaluator, Network, WeightProbe};
use crate::rng::{derive_seed, label_tag, seeded, Lineage};
use crate::sensitivity::{calibrated_diag_hessian, uswim_from_hessian};
use crate::stats::{aggregate, pearson, spearman, variance_greater_p, welch_less_p, Summary};
use crate::strategy::{random_order_seed, ranking, BudgetPoint, InSituConfig, Mapper, Strategy};
use crate::writeverify::WriteVerifyConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub strategy: Strategy,
    pub device: DeviceSpec,
}

impl Cell {
    pub fn label(&self) -> String {
        format!("{}/{}", self.strategy, self.device.label())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub cells: Vec<Cell>,
    pub nwc_grid: Vec<f64>,
    pub runs: usize,
    pub base_seed: u64,
    pub granularity: f64,
    pub write_verify: WriteVerifyConfig,
    pub insitu: InSituConfig,
    /// Worker threads; 0 uses every core. Results do not depend on it.
    pub workers: usize,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::config("runs must be >= 1"));
        }
        if self.cells.is_empty() {
            return Err(Error::config("experiment plan has no cells"));
        }
        if self.nwc_grid.is_empty()
            || self.nwc_grid.iter().any(|v| !(*v >= 0.0) || !v.is_finite())
            || self.nwc_grid.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Error::config("NWC grid must be non-empty, finite, >= 0 and ascending"));
        }
        if !(self.granularity > 0.0 && self.granularity <= 1.0) {
            return Err(Error::config("granularity must be in (0, 1]"));
        }
        self.write_verify.validate()
    }
}

/// Model and data a sweep runs against.
pub struct SweepInputs<'a> {
    /// Trained network with layer scales.
    pub net: &'a Network,
    /// Training set (in-situ minibatches).
    pub train: &'a Dataset,
    /// Accuracy is reported on this set.
    pub eval: &'a Dataset,
    /// Calibration batches for the second-derivative pass.
    pub calibration: Vec<Batch<'a>>,
}

/// Seed shared by every strategy for run `run` on one device setting, so
/// strategies see the same bulk-write noise.
pub fn run_seed(base: u64, device: &DeviceSpec, run: usize) -> u64 {
    derive_seed(base, &[label_tag(&device.label()), run as u64])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub nwc: f64,
    /// `None` when every run failed.
    pub summary: Option<Summary>,
    pub failed: usize,
    /// Mean NWC actually spent under this budget.
    pub mean_spent: f64,
    /// Largest NWC spent by any run.
    pub max_spent: f64,
}

impl PointResult {
    pub fn single_sample(&self) -> bool {
        self.summary.is_some_and(|s| s.single_sample())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Cell,
    pub denominator: f64,
    pub points: Vec<PointResult>,
    /// `accuracy[point][run]`, `None` for failed runs.
    pub accuracy: Vec<Vec<Option<f64>>>,
    pub failures: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub nwc_grid: Vec<f64>,
    pub runs: usize,
    pub base_seed: u64,
    /// Size of the evaluation set; one example is `100 / eval_examples` points.
    pub eval_examples: usize,
    pub cells: Vec<CellResult>,
}

pub const SWEEP_CSV_HEADER: [&str; 10] = ["cell", "strategy", "device", "sigma", "nwc", "mean", "std", "runs", "failed", "single_sample"];

impl SweepResult {
    pub fn cell(&self, strategy: Strategy, device: &str, sigma: f64) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.cell.strategy == strategy && c.cell.device.name == device && c.cell.device.sigma == sigma)
    }

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        let mut rows = Vec::new();
        for (ci, c) in self.cells.iter().enumerate() {
            for p in &c.points {
                let (mean, std, n) = p
                    .summary
                    .map_or((String::new(), String::new(), 0), |s| (format!("{:.6}", s.mean), format!("{:.6}", s.std), s.count));
                rows.push(vec![
                    ci.to_string(),
                    c.cell.strategy.name().to_string(),
                    c.cell.device.name.clone(),
                    c.cell.device.sigma.to_string(),
                    p.nwc.to_string(),
                    mean,
                    std,
                    n.to_string(),
                    p.failed.to_string(),
                    p.single_sample().to_string(),
                ]);
            }
        }
        rows
    }
}

impl CellResult {
    /// Per-run accuracies at one grid point, failed runs dropped.
    pub fn samples(&self, point: usize) -> Vec<f64> {
        self.accuracy[point].iter().flatten().copied().collect()
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("cannot start {workers} workers: {e}")))
}

pub fn run_sweep(plan: &ExperimentPlan, inputs: &SweepInputs<'_>) -> Result<SweepResult> {
    plan.validate()?;
    let needs_h = plan
        .cells
        .iter()
        .any(|c| matches!(c.strategy, Strategy::Uswim | Strategy::Swim));
    let needs_train = plan.cells.iter().any(|c| c.strategy == Strategy::InSitu);
    if needs_train && inputs.train.is_empty() {
        return Err(Error::config("in-situ cells need training data"));
    }
    let eval = Evaluator::new(inputs.net, &inputs.eval.inputs, &inputs.eval.labels)?;
    let workers = pool(plan.workers)?;

    // Second derivatives depend only on the quantized weights, shared by
    // every device with the same split width.
    let mut hessians: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    if needs_h {
        for c in &plan.cells {
            if let std::collections::btree_map::Entry::Vacant(e) = hessians.entry(c.device.bits) {
                let dq = quantize_network(inputs.net, c.device.bits)?.dequantized_network(inputs.net)?;
                let h = workers.install(|| par_diag_hessian(&dq, &inputs.calibration))?;
                e.insert(h);
            }
        }
    }

    let mut cells = Vec::with_capacity(plan.cells.len());
    for cell in &plan.cells {
        let mapper = Mapper::new(
            inputs.net,
            cell.device.clone(),
            plan.write_verify.clone(),
            plan.granularity,
            None,
            Some(&eval),
        )?;
        let fixed_order = match cell.strategy {
            Strategy::Uswim | Strategy::Swim | Strategy::Magnitude => {
                let h = hessians.get(&cell.device.bits).map(Vec::as_slice).unwrap_or(&[]);
                let h = if h.is_empty() { vec![0.0; mapper.len()] } else { h.to_vec() };
                Some(ranking(cell.strategy, &mapper, &h, 0)?.order)
            }
            _ => None,
        };
        let outcomes: Vec<Result<Vec<BudgetPoint>>> = workers.install(|| {
            (0..plan.runs)
                .into_par_iter()
                .map(|r| {
                    let seed = run_seed(plan.base_seed, &cell.device, r);
                    match cell.strategy {
                        Strategy::InSitu => mapper.insitu_budgeted(inputs.train, &plan.insitu, &plan.nwc_grid, seed),
                        Strategy::Random => {
                            let order = ranking(Strategy::Random, &mapper, &[], random_order_seed(seed))?.order;
                            mapper.run_budgeted(&order, &plan.nwc_grid, seed)
                        }
                        _ => mapper.run_budgeted(fixed_order.as_deref().expect("fixed order"), &plan.nwc_grid, seed),
                    }
                })
                .collect()
        });
        let mut accuracy = vec![vec![None; plan.runs]; plan.nwc_grid.len()];
        let mut spent = vec![Vec::new(); plan.nwc_grid.len()];
        let mut failures = Vec::new();
        for (r, out) in outcomes.into_iter().enumerate() {
            match out {
                Ok(points) => {
                    for (k, p) in points.iter().enumerate() {
                        accuracy[k][r] = Some(p.accuracy);
                        spent[k].push(p.nwc);
                    }
                }
                Err(e) => failures.push(format!("run {r}: {e}")),
            }
        }
        let points = plan
            .nwc_grid
            .iter()
            .enumerate()
            .map(|(k, &nwc)| {
                let vals: Vec<f64> = accuracy[k].iter().flatten().copied().collect();
                PointResult {
                    nwc,
                    summary: aggregate(&vals).ok(),
                    failed: plan.runs - vals.len(),
                    mean_spent: if spent[k].is_empty() {
                        0.0
                    } else {
                        spent[k].iter().sum::<f64>() / spent[k].len() as f64
                    },
                    max_spent: spent[k].iter().copied().fold(0.0, f64::max),
                }
            })
            .collect();
        cells.push(CellResult {
            cell: cell.clone(),
            denominator: mapper.denominator(),
            points,
            accuracy,
            failures,
        });
    }
    Ok(SweepResult {
        nwc_grid: plan.nwc_grid.clone(),
        runs: plan.runs,
        base_seed: plan.base_seed,
        eval_examples: inputs.eval.len(),
        cells,
    })
}

/// Batch-weighted average of per-batch diagonal second derivatives,
/// batches processed in parallel and reduced in order.
pub fn par_diag_hessian(net: &Network, batches: &[Batch<'_>]) -> Result<Vec<f64>> {
    if batches.is_empty() {
        return Err(Error::arg("calibration data is empty"));
    }
    let parts: Vec<Result<(Vec<f64>, usize)>> = batches
        .par_iter()
        .map(|b| calibrated_diag_hessian(net, std::slice::from_ref(b)).map(|h| (h, b.len())))
        .collect();
    let mut acc = vec![0.0; net.param_count()];
    let mut total = 0;
    for p in parts {
        let (h, k) = p?;
        for (a, v) in acc.iter_mut().zip(&h) {
            *a += v * k as f64;
        }
        total += k;
    }
    acc.iter_mut().for_each(|a| *a /= total as f64);
    Ok(acc)
}

/// Harness invariants over a finished sweep; returns one message per
/// violation. A mean accuracy decrease along the NWC grid counts only when
/// it is significant at `alpha` and larger than one evaluation example. A USWIM
/// std above its NWC-0 std counts only when an F-test rejects at `alpha`.
pub fn check_invariants(result: &SweepResult, alpha: f64) -> Vec<String> {
    let mut out = Vec::new();
    let resolution = 100.0 / result.eval_examples.max(1) as f64;
    for c in &result.cells {
        let label = c.cell.label();
        for p in &c.points {
            if p.max_spent > p.nwc + 1e-9 {
                out.push(format!("{label}: spent NWC {} exceeds budget {}", p.max_spent, p.nwc));
            }
        }
        if c.cell.strategy.is_selective() {
            for i in 0..c.points.len() {
                for j in i + 1..c.points.len() {
                    if let (Some(a), Some(b)) = (c.points[i].summary, c.points[j].summary) {
                        if a.count > 1 && b.count > 1 && a.mean - b.mean > resolution && welch_less_p(&b, &a) < alpha {
                            out.push(format!(
                                "{label}: mean accuracy drops from {:.3} at NWC {} to {:.3} at NWC {}",
                                a.mean, c.points[i].nwc, b.mean, c.points[j].nwc
                            ));
                        }
                    }
                }
            }
        }
        if c.cell.strategy == Strategy::Uswim {
            if let Some(base) = c.points.iter().find(|p| p.nwc == 0.0).and_then(|p| p.summary) {
                for p in c.points.iter().filter(|p| p.nwc >= 0.1) {
                    if let Some(s) = p.summary {
                        if s.std > base.std && variance_greater_p(&s, &base) < alpha {
                            out.push(format!(
                                "{label}: accuracy std {:.4} at NWC {} exceeds {:.4} at NWC 0",
                                s.std, p.nwc, base.std
                            ));
                        }
                    }
                }
            }
        }
        for f in &c.failures {
            out.push(format!("{label}: {f}"));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub weight_id: usize,
    pub layer: usize,
    pub metric: f64,
    pub h: f64,
    pub var: f64,
    pub magnitude: f64,
    /// Mean accuracy drop in percentage points.
    pub drop: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub device: String,
    pub sigma: f64,
    pub samples_per_weight: usize,
    pub base_accuracy: f64,
    /// `None` when either vector has zero variance.
    pub pcc_uswim: Option<f64>,
    pub pcc_magnitude: Option<f64>,
    pub spearman_uswim: Option<f64>,
    pub spearman_magnitude: Option<f64>,
    pub rows: Vec<CorrelationRow>,
}

pub const CORRELATION_CSV_HEADER: [&str; 7] = ["weight_id", "layer", "metric", "h", "var", "magnitude", "drop"];

impl CorrelationResult {
    pub fn degenerate(&self) -> bool {
        self.pcc_uswim.is_none() || self.pcc_magnitude.is_none()
    }

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    r.weight_id.to_string(),
                    r.layer.to_string(),
                    r.metric.to_string(),
                    r.h.to_string(),
                    r.var.to_string(),
                    r.magnitude.to_string(),
                    format!("{:.6}", r.drop),
                ]
            })
            .collect()
    }
}

/// Correlations of per-weight drops against the U-SWIM metric and against
/// magnitude.
pub fn correlate_rows(rows: &[CorrelationRow]) -> (Option<f64>, Option<f64>, Option<f64>, Option<f64>) {
    let drop: Vec<f64> = rows.iter().map(|r| r.drop).collect();
    let metric: Vec<f64> = rows.iter().map(|r| r.metric).collect();
    let mag: Vec<f64> = rows.iter().map(|r| r.magnitude).collect();
    (
        pearson(&metric, &drop),
        pearson(&mag, &drop),
        spearman(&metric, &drop),
        spearman(&mag, &drop),
    )
}

/// `k` distinct weight ids out of `n`, sorted, deterministic per seed.
pub fn weight_subset(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::arg("weight subset must contain at least one weight"));
    }
    let mut ids = sample(&mut seeded(seed), n, k.min(n)).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

pub struct StudyInputs<'a> {
    /// Trained network with layer scales.
    pub net: &'a Network,
    pub calibration: &'a [Batch<'a>],
    /// Accuracy drops are measured on this set.
    pub probe: &'a Dataset,
}

/// Perturbs one weight at a time with its own programming noise and
/// measures the mean accuracy drop over `samples_per_weight` draws.
pub fn correlation_study(
    inputs: &StudyInputs<'_>,
    spec: &DeviceSpec,
    samples_per_weight: usize,
    weights: &[usize],
    seed: u64,
    workers: usize,
) -> Result<CorrelationResult> {
    if weights.is_empty() {
        return Err(Error::arg("weight subset is empty"));
    }
    if samples_per_weight == 0 {
        return Err(Error::arg("samples_per_weight must be >= 1"));
    }
    let qnet = quantize_network(inputs.net, spec.bits)?;
    let dq = qnet.dequantized_network(inputs.net)?;
    if let Some(&bad) = weights.iter().find(|&&w| w >= qnet.len()) {
        return Err(Error::arg(format!("weight id {bad} out of range (n = {})", qnet.len())));
    }
    let pool = pool(workers)?;
    let h = pool.install(|| par_diag_hessian(&dq, inputs.calibration))?;
    let report = uswim_from_hessian(&dq, h, &qnet, spec)?;
    let probe = WeightProbe::new(&dq, &inputs.probe.inputs, &inputs.probe.labels)?;
    let total = probe.len() as f64;
    let base = probe.base_correct() as f64;
    let study_seed = derive_seed(seed, &[label_tag("correlation"), label_tag(&spec.label())]);
    let rows: Vec<Result<CorrelationRow>> = pool.install(|| {
        weights
            .par_iter()
            .map(|&id| {
                let qw = &qnet.weights[id];
                let mut drop = 0.0;
                for s in 0..samples_per_weight {
                    let dev = sample_deviation(qw, spec, Lineage::new(study_seed, id as u64, s as u64));
                    let correct = probe.correct_with(id, qw.sign as f64 * dev * qw.scale)? as f64;
                    drop += 100.0 * (base - correct) / total;
                }
                let e = &report.entries[id];
                Ok(CorrelationRow {
                    weight_id: id,
                    layer: e.layer,
                    metric: e.metric,
                    h: e.h,
                    var: e.var,
                    magnitude: e.magnitude,
                    drop: drop / samples_per_weight as f64,
                })
            })
            .collect()
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let (pu, pm, su, sm) = correlate_rows(&rows);
    Ok(CorrelationResult {
        device: spec.name.clone(),
        sigma: spec.sigma,
        samples_per_weight,
        base_accuracy: 100.0 * base / total,
        pcc_uswim: pu,
        pcc_magnitude: pm,
        spearman_uswim: su,
        spearman_magnitude: sm,
        rows,
    })
}
