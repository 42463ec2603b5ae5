//! Command-line workflows: train, quantize, rank, calibrate, simulate,
//! sweep, correlate and report. Every command is a pure function of the
//! config, overrides and seed; outputs go through the report writer.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dataio::checkpoint::{encode_checkpoint, load_checkpoint, TrainingMeta};
use crate::dataio::config::{load_config, RunConfig, CONFIG_KEYS};
use crate::dataio::idx::load_mnist_dir;
use crate::dataio::reports::{csv_bytes, jsonl_bytes, write_atomic, ReportSet};
use crate::dataio::synth::two_moons;
use crate::dataio::{Dataset, Split};
use crate::device::{dequantize, quantize_network};
use crate::error::{Error, Result};
use crate::harness::{
    check_invariants, correlation_study, par_diag_hessian, run_sweep, weight_subset, Cell, ExperimentPlan, StudyInputs,
    SweepInputs, SweepResult, CORRELATION_CSV_HEADER, SWEEP_CSV_HEADER,
};
use crate::nngraph::{train_sgd, Batch, Evaluator, Layer, LossKind, Network, Tensor, TrainConfig, TrainLog};
use crate::rng::{derive_seed, label_tag};
use crate::sensitivity::{uswim_from_hessian, CSV_HEADER as SENSITIVITY_CSV_HEADER};
use crate::strategy::{run_strategy, DriverConfig, InSituConfig, Strategy};
use crate::writeverify::calibrate;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;

/// Significance level of the sweep's monotone-trend check.
pub const TREND_ALPHA: f64 = 0.01;

fn bundled_mnist() -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/data/mnist-subset"))
}

fn config_help() -> String {
    let mut s = String::from("Config keys (TOML file via --config, or --set KEY=VALUE):\n");
    for (key, default, desc) in CONFIG_KEYS {
        let _ = writeln!(s, "  {key:<24} default {default:<12} {desc}");
    }
    s
}

#[derive(Debug, Parser)]
#[command(name = "swv", version, about = "Selective write-verify simulator for quantized networks on noisy NVM devices")]
#[command(after_long_help = config_help(), after_help = config_help())]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set sigma=0.15`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Output directory (same as `--set out=DIR`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Base seed (same as `--set seed=N`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads, 0 for every core (same as `--set workers=N`).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Train the configured model and save a checkpoint.
    Train {
        /// Training epochs (same as `--set epochs=N`).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Quantize the checkpoint and export per-weight codes.
    Quantize,
    /// Rank weights by the U-SWIM metric for the configured device.
    Sensitivity,
    /// Simulate write-verify on synthetic weights and compare with the analytic oracles.
    WriteverifyCalibrate,
    /// Run one mapping with the configured strategy, stopping on `delta_a`.
    Simulate,
    /// Monte Carlo sweep over strategies, devices, sigmas and NWC budgets.
    Sweep,
    /// Per-weight perturbation study against the sensitivity metric.
    Correlate,
    /// Render a markdown table from a finished sweep.
    Report,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Quantize => "quantize",
            Command::Sensitivity => "sensitivity",
            Command::WriteverifyCalibrate => "writeverify-calibrate",
            Command::Simulate => "simulate",
            Command::Sweep => "sweep",
            Command::Correlate => "correlate",
            Command::Report => "report",
        }
    }
}

/// Resolved config: file, then `--set` overrides, then dedicated flags.
pub fn resolve_config(common: &CommonArgs, extra: &[String]) -> Result<RunConfig> {
    let mut overrides = common.set.clone();
    overrides.extend_from_slice(extra);
    if let Some(out) = &common.out {
        overrides.push(format!("out = {}", toml_string(&out.to_string_lossy())));
    }
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(w) = common.workers {
        overrides.push(format!("workers={w}"));
    }
    match &common.config {
        Some(path) => load_config(path, &overrides),
        None => Ok(RunConfig::from_toml("", &overrides)?),
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

/// Train and test splits for the configured dataset.
pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    match cfg.dataset.as_str() {
        "two-moons" => {
            let train = two_moons(
                cfg.two_moons_samples,
                cfg.two_moons_noise,
                derive_seed(cfg.seed, &[label_tag("two-moons-train")]),
                Split::Train,
            )?;
            let test = two_moons(
                cfg.two_moons_test_samples,
                cfg.two_moons_noise,
                derive_seed(cfg.seed, &[label_tag("two-moons-test")]),
                Split::Test,
            )?;
            Ok((train, test))
        }
        "mnist" => {
            let dir = cfg.mnist_dir.clone().unwrap_or_else(bundled_mnist);
            load_mnist_dir(&dir)
        }
        other => Err(Error::config(format!("unknown dataset `{other}` (expected two-moons or mnist)"))),
    }
}

/// Untrained model for the configured dataset: an MLP on vector inputs, or
/// average pooling, flatten and an MLP on images.
pub fn build_model(cfg: &RunConfig, input_shape: &[usize], classes: usize) -> Result<Network> {
    let image = input_shape.len() == 3;
    let hidden = if cfg.hidden.is_empty() {
        vec![if image { 24 } else { 16 }]
    } else {
        cfg.hidden.clone()
    };
    let pool = match (image, cfg.input_pool) {
        (true, 0) => 4,
        (true, p) => p,
        (false, _) => 1,
    };
    let mut layers = Vec::new();
    let mut width: usize = input_shape.iter().product();
    if image {
        if pool > 1 {
            layers.push(Layer::AvgPool2D { size: pool, stride: pool });
            width = input_shape[0] * (input_shape[1] / pool) * (input_shape[2] / pool);
        }
        layers.push(Layer::Flatten);
    }
    let mut sizes = vec![width];
    sizes.extend(&hidden);
    sizes.push(classes);
    for (k, pair) in sizes.windows(2).enumerate() {
        layers.push(Layer::dense(
            Tensor::zeros(vec![pair[1], pair[0]]),
            Some(Tensor::zeros(vec![pair[1]])),
        ));
        if k + 2 < sizes.len() {
            layers.push(Layer::Relu);
        }
    }
    let mut net = Network::new(input_shape.to_vec(), layers, LossKind::SoftmaxCrossEntropy, cfg.quant_bits)?;
    net.init_params(derive_seed(cfg.seed, &[label_tag("init")]));
    Ok(net)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub dataset: String,
    pub params: usize,
    pub epochs: usize,
    /// Final-epoch training accuracy (fraction).
    pub train_accuracy: Option<f64>,
    /// Held-out accuracy of the M-bit quantized model (percent).
    pub test_accuracy_quantized: f64,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub log: TrainLog,
}

/// Builds and trains the configured model.
pub fn train_model(cfg: &RunConfig, train: &Dataset) -> Result<(Network, TrainLog)> {
    let shape = train.input_shape().ok_or_else(|| Error::arg("training set is empty"))?.to_vec();
    let mut net = build_model(cfg, &shape, train.classes)?;
    let log = train_sgd(
        &mut net,
        &train.batch()?,
        &TrainConfig {
            epochs: cfg.epochs,
            lr: cfg.lr,
            batch_size: cfg.batch_size,
            quant_aware: cfg.quant_aware,
            seed: derive_seed(cfg.seed, &[label_tag("train")]),
        },
    )?;
    Ok((net, log))
}

/// Calibration batches for the second-derivative pass.
pub fn calibration_batches<'a>(cfg: &RunConfig, train: &'a Dataset) -> Result<Vec<Batch<'a>>> {
    let mut b = train.batches(cfg.calibration_batch_size)?;
    if cfg.calibration_batches > 0 {
        b.truncate(cfg.calibration_batches);
    }
    Ok(b)
}

fn load_model(cfg: &RunConfig) -> Result<Network> {
    let path = cfg.model_path();
    if !path.exists() {
        return Err(Error::config(format!(
            "model checkpoint {} not found; run `swv train` first or set `model`",
            path.display()
        )));
    }
    Ok(load_checkpoint(&path)?.0)
}

fn parse_strategies(cfg: &RunConfig) -> Result<Vec<Strategy>> {
    cfg.strategies
        .iter()
        .map(|s| Strategy::parse(s).map_err(|e| Error::config(format!("strategies: {e}"))))
        .collect()
}

fn insitu_config(cfg: &RunConfig) -> InSituConfig {
    InSituConfig {
        lr: cfg.insitu_lr,
        batch_size: cfg.insitu_batch,
        max_iterations: cfg.insitu_iterations,
    }
}

/// Sweep plan from the config: strategies x devices x sigmas.
pub fn sweep_plan(cfg: &RunConfig) -> Result<ExperimentPlan> {
    let strategies = parse_strategies(cfg)?;
    let mut cells = Vec::new();
    for device in cfg.sweep_devices() {
        for &sigma in &cfg.sweep_sigmas() {
            let spec = cfg.device_spec(&device, sigma)?;
            for &strategy in &strategies {
                cells.push(Cell {
                    strategy,
                    device: spec.clone(),
                });
            }
        }
    }
    let plan = ExperimentPlan {
        cells,
        nwc_grid: cfg.nwc_grid.clone(),
        runs: cfg.runs,
        base_seed: cfg.seed,
        granularity: cfg.granularity,
        write_verify: cfg.write_verify(),
        insitu: insitu_config(cfg),
        workers: cfg.workers,
    };
    plan.validate()?;
    Ok(plan)
}

/// Exit status and the messages printed on stdout.
pub struct Outcome {
    pub code: i32,
    pub lines: Vec<String>,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Argument(_) | Error::Idx(_) | Error::Checkpoint(_) | Error::RunConfig(_) | Error::Io { .. } => {
            EXIT_INPUT
        }
        _ => EXIT_FAILURE,
    }
}

/// Runs one parsed invocation.
pub fn execute(cli: &Cli) -> Result<Outcome> {
    let extra = match &cli.command {
        Command::Train { epochs: Some(e) } => vec![format!("epochs={e}")],
        _ => Vec::new(),
    };
    let cfg = resolve_config(&cli.common, &extra)?;
    let name = cli.command.name();
    let manifest = match cli.command {
        Command::Sweep => "manifest.json".to_string(),
        _ => format!("{name}.manifest.json"),
    };
    let mut reports = ReportSet::new(&cfg.out, name, &cfg.hash(), vec![cfg.seed]).with_manifest_name(&manifest);
    let mut lines = Vec::new();
    let mut code = EXIT_OK;
    match &cli.command {
        Command::Train { .. } => cmd_train(&cfg, &mut reports, &mut lines)?,
        Command::Quantize => cmd_quantize(&cfg, &mut reports, &mut lines)?,
        Command::Sensitivity => cmd_sensitivity(&cfg, &mut reports, &mut lines)?,
        Command::WriteverifyCalibrate => cmd_calibrate(&cfg, &mut reports, &mut lines)?,
        Command::Simulate => cmd_simulate(&cfg, &mut reports, &mut lines)?,
        Command::Sweep => {
            if !cmd_sweep(&cfg, &mut reports, &mut lines)? {
                code = EXIT_INVARIANT;
            }
        }
        Command::Correlate => cmd_correlate(&cfg, &mut reports, &mut lines)?,
        Command::Report => cmd_report(&cfg, &mut reports, &mut lines)?,
    }
    let manifest = reports.finish()?;
    lines.push(format!("wrote {} files to {}", manifest.files.len() + 1, cfg.out.display()));
    Ok(Outcome { code, lines })
}

/// Parses `args` (including the program name) and runs; returns the exit
/// code after printing.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(out) => {
            let mut stdout = std::io::stdout().lock();
            for l in &out.lines {
                if writeln!(stdout, "{l}").is_err() {
                    break;
                }
            }
            out.code
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn cmd_train(cfg: &RunConfig, reports: &mut ReportSet, lines: &mut Vec<String>) -> Result<()> {
    let (train, test) = load_datasets(cfg)?;
    let (net, log) = train_model(cfg, &train)?;
    let test_acc = Evaluator::new(&net, &test.inputs, &test.labels)?.accuracy(&net.quantized_copy());
    let meta = TrainingMeta {
        dataset: cfg.dataset.clone(),
        seed: cfg.seed,
        epochs: cfg.epochs,
        lr: cfg.lr,
        quant_aware: cfg.quant_aware,
        accuracy: log.final_accuracy(),
        batch_norm_folded: false,
    };
    let bytes = encode_checkpoint(&net, &meta)?;
    let path = cfg.model_path();
    let summary = TrainSummary {
        dataset: cfg.dataset.clone(),
        params: net.param_count(),
        epochs: cfg.epochs,
        train_accuracy: log.final_accuracy(),
        test_accuracy_quantized: test_acc,
        checkpoint: path.to_string_lossy().into_owned(),
        checkpoint_sha256: crate::dataio::reports::sha256_hex(&bytes),
        log,
    };
    match path.strip_prefix(&cfg.out).ok().and_then(|p| p.to_str()).filter(|p| !p.contains('/')) {
        Some(file) => reports.add(file, bytes),
        None => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            write_atomic(&path, &bytes)?;
        }
    }
    lines.push(format!(
        "trained {} weights: train accuracy {:.4}, quantized test accuracy {:.2}%",
        summary.params,
        summary.train_accuracy.unwrap_or(f64::NAN),
        summary.test_accuracy_quantized
    ));
    lines.push(format!("checkpoint {}", path.display()));
    reports.add_json("train.json", &summary)
}

fn cmd_quantize(cfg: &RunConfig, reports: &mut ReportSet, lines: &mut Vec<String>) -> Result<()> {
    let net = load_model(cfg)?;
    let (_, test) = load_datasets(cfg)?;
    let qnet = quantize_network(&net, cfg.device_bits)?;
    let dq = qnet.dequantized_network(&net)?;
    let acc = Evaluator::new(&net, &test.inputs, &test.labels)?.accuracy(&dq);
    let rows: Vec<Vec<String>> = qnet
        .weights
        .iter()
        .enumerate()
        .map(|(i, w)| {
            vec![
                i.to_string(),
                qnet.layer_of[i].to_string(),
                w.sign.to_string(),
                w.code.to_string(),
                w.levels.iter().map(u32::to_string).collect::<Vec<_>>().join(" "),
                w.scale.to_string(),
                dequantize(w).to_string(),
            ]
        })
        .collect();
    reports.add(
        "quantized.csv",
        csv_bytes(&["weight_id", "layer", "sign", "code", "levels", "scale", "value"], &rows)?,
    );
    lines.push(format!(
        "quantized {} weights to M = {} over K = {} devices: test accuracy {:.2}%",
        qnet.len(),
        qnet.m_bits,
        qnet.k_bits,
        acc
    ));
    Ok(())
}

fn cmd_sensitivity(cfg: &RunConfig, reports: &mut ReportSet, lines: &mut Vec<String>) -> Result<()> {
    let net = load_model(cfg)?;
    let (train, _) = load_datasets(cfg)?;
    let spec = cfg.device_spec(&cfg.device, cfg.sigma)?;
    let qnet = quantize_network(&net, spec.bits)?;
    let dq = qnet.dequantized_network(&net)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::config(format!("cannot start workers: {e}")))?;
    let h = pool.install(|| par_diag_hessian(&dq, &calibration_batches(cfg, &train)?))?;
    let report = uswim_from_hessian(&dq, h, &qnet, &spec)?;
    reports.add("sensitivity.csv", csv_bytes(&SENSITIVITY_CSV_HEADER, &report.csv_rows())?);
    let top: Vec<String> = report.order.iter().take(5).map(usize::to_string).collect();
    lines.push(format!("ranked {} weights for {}; most sensitive: {}", report.len(), spec.label(), top.join(", ")));
    Ok(())
}

fn cmd_calibrate(cfg: &RunConfig, reports: &mut ReportSet, lines: &mut Vec<String>) -> Result<()> {
    let spec = cfg.device_spec(&cfg.device, cfg.sigma)?;
    let r = calibrate(
        &spec,
        cfg.quant_bits,
        &cfg.write_verify(),
        cfg.calibrate_weights,
        derive_seed(cfg.seed, &[label_tag("calibrate")]),
    )?;
    lines.push(format!(
        "{}: mean attempts {:.4} (oracle {:.4}), residual std {:.5} (oracle {:.5}), exhausted {}",
        spec.label(),
        r.mean_attempts,
        r.oracle_mean_attempts,
        r.residual_std,
        r.oracle_residual_std,
        r.exhausted
    ));
    reports.add_json("calibration.json", &r)
}

fn cmd_simulate(cfg: &RunConfig, reports: &mut ReportSet, lines: &mut Vec<String>) -> Result<()> {
    let strategy = Strategy::parse(&cfg.strategy).map_err(|e| Error::config(format!("strategy: {e}")))?;
    let net = load_model(cfg)?;
    let (train, test) = load_datasets(cfg)?;
    let device = cfg.device_spec(&cfg.device, cfg.sigma)?;
    let driver = DriverConfig {
        granularity: cfg.granularity,
        delta_a: cfg.delta_a,
        strategy,
        device: device.clone(),
        write_verify: cfg.write_verify(),
        insitu: insitu_config(cfg),
        run_seed: derive_seed(cfg.seed, &[label_tag(&device.label()), 0]),
    };
    let traj = run_strategy(&net, &driver, &train, Some(&test), cfg.calibration_batch_size)?;
    reports.add("trajectories.jsonl", jsonl_bytes(&traj.records)?);
    for d in &traj.diagnostics {
        reports.warn(d.clone());
    }
    let last = traj.records.last().expect("trajectory has the post-bulk record");
    lines.push(format!(
        "{} on {}: stopped ({:?}) after {} batches, NWC {:.4}, train accuracy {:.2}%, test accuracy {:.2}%",
        strategy,
        device.label(),
        traj.termination,
        last.batch,
        last.nwc,
        last.acc_train.unwrap_or(f64::NAN),
        last.acc_eval.unwrap_or(f64::NAN)
    ));
    Ok(())
}

#[derive(Serialize)]
struct RunRecord<'a> {
    cell: usize,
    strategy: &'a str,
    device: &'a str,
    sigma: f64,
    run: usize,
    nwc: f64,
    accuracy: f64,
}

fn sweep_records(result: &SweepResult) -> Vec<RunRecord<'_>> {
    let mut out = Vec::new();
    for (ci, c) in result.cells.iter().enumerate() {
        for run in 0..result.runs {
            for (k, &nwc) in result.nwc_grid.iter().enumerate() {
                if let Some(accuracy) = c.accuracy[k][run] {
                    out.push(RunRecord {
                        cell: ci,
                        strategy: c.cell.strategy.name(),
                        device: &c.cell.device.name,
                        sigma: c.cell.device.sigma,
                        run,
                        nwc,
                        accuracy,
                    });
                }
            }
        }
    }
    out
}

/// Returns whether every harness invariant held.
fn cmd_sweep(cfg: &RunConfig, reports: &mut ReportSet, lines: &mut Vec<String>) -> Result<bool> {
    let plan = sweep_plan(cfg)?;
    let net = load_model(cfg)?;
    let (train, test) = load_datasets(cfg)?;
    let inputs = SweepInputs {
        net: &net,
        train: &train,
        eval: &test,
        calibration: calibration_batches(cfg, &train)?,
    };
    let result = run_sweep(&plan, &inputs)?;
    reports.add("sweep.csv", csv_bytes(&SWEEP_CSV_HEADER, &result.csv_rows())?);
    reports.add("trajectories.jsonl", jsonl_bytes(&sweep_records(&result))?);
    reports.add_json("sweep.json", &result)?;
    if plan.runs == 1 {
        reports.warn("runs = 1: standard deviations are reported as 0 (single sample)");
    }
    let violations = check_invariants(&result, TREND_ALPHA);
    for v in &violations {
        reports.fail(v.clone());
    }
    for c in &result.cells {
        let cells: Vec<String> = c
            .points
            .iter()
            .map(|p| match p.summary {
                Some(s) => format!("{:.2}±{:.2}", s.mean, s.std),
                None => "failed".into(),
            })
            .collect();
        lines.push(format!("{:<28} {}", c.cell.label(), cells.join("  ")));
    }
    if violations.is_empty() {
        lines.push("all sweep invariants held".into());
    } else {
        lines.push(format!("{} invariant violations (see manifest.json)", violations.len()));
    }
    Ok(violations.is_empty())
}

fn cmd_correlate(cfg: &RunConfig, reports: &mut ReportSet, lines: &mut Vec<String>) -> Result<()> {
    let net = load_model(cfg)?;
    let (train, test) = load_datasets(cfg)?;
    let n = net.param_count();
    let ids = match cfg.weight_subset {
        Some(k) => weight_subset(n, k, derive_seed(cfg.seed, &[label_tag("weight-subset")]))?,
        None if n > cfg.max_study_weights => {
            return Err(Error::config(format!(
                "model has {n} weights, more than max_study_weights = {}; set weight_subset to sample a subset",
                cfg.max_study_weights
            )))
        }
        None => (0..n).collect(),
    };
    if cfg.samples_per_weight == 1 {
        reports.warn("samples_per_weight = 1: per-weight drops are single draws and highly variable");
        lines.push("warning: samples_per_weight = 1 gives high-variance drops".into());
    }
    let sigma = cfg.correlate_sigma.unwrap_or(cfg.sigma);
    let spec = cfg.device_spec(&cfg.device, sigma)?;
    let calibration = calibration_batches(cfg, &train)?;
    let result = correlation_study(
        &StudyInputs {
            net: &net,
            calibration: &calibration,
            probe: if cfg.correlate_split == "train" { &train } else { &test },
        },
        &spec,
        cfg.samples_per_weight,
        &ids,
        cfg.seed,
        cfg.workers,
    )?;
    if result.degenerate() {
        reports.warn("a correlation is undefined (zero-variance vector)");
    }
    reports.add("correlation.csv", csv_bytes(&CORRELATION_CSV_HEADER, &result.csv_rows())?);
    reports.add_json("correlation.json", &result)?;
    let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    lines.push(format!(
        "{} weights, {} draws each on {}: PCC(uswim) = {}, PCC(magnitude) = {}",
        result.rows.len(),
        result.samples_per_weight,
        spec.label(),
        fmt(result.pcc_uswim),
        fmt(result.pcc_magnitude)
    ));
    Ok(())
}

/// Markdown table of mean ± std per cell and NWC budget.
pub fn render_table(result: &SweepResult) -> String {
    let mut s = String::from("| cell |");
    for nwc in &result.nwc_grid {
        let _ = write!(s, " NWC {nwc} |");
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(result.nwc_grid.len()));
    s.push('\n');
    for c in &result.cells {
        let _ = write!(s, "| {} |", c.cell.label());
        for p in &c.points {
            match p.summary {
                Some(sm) => {
                    let _ = write!(s, " {:.2} ± {:.2} |", sm.mean, sm.std);
                }
                None => s.push_str(" n/a |"),
            }
        }
        s.push('\n');
    }
    s
}

fn cmd_report(cfg: &RunConfig, reports: &mut ReportSet, lines: &mut Vec<String>) -> Result<()> {
    let path: &Path = &cfg.out.join("sweep.json");
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::config(format!("{} not found; run `swv sweep` first", path.display())))?;
    let result: SweepResult =
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let table = render_table(&result);
    lines.extend(table.lines().map(str::to_string));
    reports.add("report.md", table.into_bytes());
    Ok(())
}
