use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;
use wsdc_core::codebook::{activation_pmf, perplexity};
use wsdc_core::container::{Block, Container};
use wsdc_core::data::Dataset;
use wsdc_core::metrics::{self, MetricsRecord, OtCostOptions, SymbolTarget};
use wsdc_core::modem::{self, ChannelConfig, Constellation};
use wsdc_core::nn::{self, derive_seed, EpochMetrics, GradCheckOptions, ModelState, TrainConfig};

use crate::config::{format_snr, ExperimentConfig, Snr};
use crate::output::{ensure_dir, fmt_f64, hash_inputs, CsvOut, Manifest};
use crate::CliError;

pub const MODEL_FILE: &str = "model.wsdc";
pub const TRAIN_CSV: &str = "metrics.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const CHANNEL_CSV: &str = "channel_report.csv";
pub const GRAD_CHECK_JSON: &str = "grad_check.json";

pub const TRAIN_COLUMNS: [&str; 9] =
    ["epoch", "steps", "task_loss", "ws_value", "distortion", "perplexity", "train_accuracy", "index_error_rate", "wall_time_s"];
pub const SWEEP_COLUMNS: [&str; 7] =
    ["snr_db", "accuracy", "index_error_rate", "delta_mi_bits", "ot_cost", "perplexity", "symbol_ws"];
pub const CHANNEL_COLUMNS: [&str; 6] =
    ["K", "snr_db", "capacity_bits", "ser_theoretical", "ser_simulated", "uniform_entropy_bits"];

const TAG_EVAL_CHANNEL: u64 = 101;
const TAG_OT_COST: u64 = 102;
const TAG_CHANNEL_REPORT: u64 = 103;

/// Loads and validates a config, applying CLI overrides.
pub fn load_config(path: &Path, seed: Option<u64>) -> Result<(ExperimentConfig, Vec<u8>), CliError> {
    let (mut cfg, bytes) = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.resolve();
    cfg.validate()?;
    Ok((cfg, bytes))
}

/// Model parameters plus the transport settings they were trained with.
pub fn model_container(state: &ModelState, cfg: &TrainConfig) -> Container {
    let mut c = state.to_container();
    c.push(Block::vector("meta.train", vec![cfg.alpha, cfg.lambda, cfg.gaussian_std]));
    c
}

pub fn load_model(path: &Path, lr: f64) -> Result<(ModelState, Option<[f64; 3]>), CliError> {
    let c = Container::load(path).map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))?;
    let state = ModelState::from_container(&c, lr).map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))?;
    let meta = c.get("meta.train").ok().and_then(|b| <[f64; 3]>::try_from(b.values.as_slice()).ok());
    Ok((state, meta))
}

fn epoch_row(m: &EpochMetrics) -> Vec<String> {
    vec![
        m.epoch.to_string(),
        m.steps.to_string(),
        fmt_f64(m.task_loss),
        fmt_f64(m.ws_value),
        fmt_f64(m.distortion),
        fmt_f64(m.perplexity),
        fmt_f64(m.train_accuracy),
        fmt_f64(m.index_error_rate),
        fmt_f64(m.wall_time_s),
    ]
}

fn write_history(path: &Path, history: &[EpochMetrics]) -> Result<(), CliError> {
    let mut csv = CsvOut::create(path, &TRAIN_COLUMNS)?;
    for m in history {
        csv.row(&epoch_row(m))?;
    }
    csv.finish()
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub history: Vec<EpochMetrics>,
    pub model_path: PathBuf,
}

/// Trains a model and writes the container, per-epoch CSV and manifest.
pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome, CliError> {
    let (mut cfg, bytes) = load_config(&args.config, args.seed)?;
    if let Some(a) = args.alpha {
        cfg.alpha = a;
        cfg.validate()?;
    }
    ensure_dir(&args.out)?;
    let (train, _) = cfg.datasets()?;
    let tcfg = cfg.train_config();
    let (state, history) = nn::train(&tcfg, &train)?;
    let model_path = args.out.join(MODEL_FILE);
    model_container(&state, &tcfg).save(&model_path)?;
    write_history(&args.out.join(TRAIN_CSV), &history)?;
    let inputs = hash_inputs(vec![(args.config.clone(), bytes)], &cfg.input_files())?;
    let outputs = vec![MODEL_FILE.to_string(), TRAIN_CSV.to_string()];
    Manifest::new("train", cfg.seed, &cfg, inputs, outputs).write(&args.out)?;
    Ok(TrainOutcome { state, history, model_path })
}

/// SNR-independent statistics of a model on a test set.
struct Baseline {
    sent: Array2<usize>,
    perplexity: f64,
    ot_cost: f64,
    symbol_ws: f64,
}

fn baseline(state: &ModelState, test: &Dataset, alpha: f64, gaussian_std: f64, cfg: &ExperimentConfig, target: SymbolTarget) -> Result<Baseline, CliError> {
    let ev = nn::evaluate(state, test.inputs.view(), None)?;
    let k = state.codebook.k();
    let pmf = activation_pmf(ev.sent_indices.view(), k)?;
    let (n, q, d) = ev.latents.dim();
    let pooled = ev.latents.to_shape((n * q, d)).map_err(|e| CliError::Internal(e.to_string()))?.to_owned();
    let opts = OtCostOptions { gaussian_std, max_points: cfg.ot_cost_points, seed: derive_seed(cfg.seed, TAG_OT_COST) };
    Ok(Baseline {
        perplexity: perplexity(pmf.view())?,
        ot_cost: metrics::latent_ot_cost(pooled.view(), alpha, &opts)?,
        symbol_ws: metrics::symbol_ws_diagnostic(pmf.view(), &state.constellation, target)?,
        sent: ev.sent_indices,
    })
}

/// Evaluation channel for one SNR; the seed depends only on the run seed and
/// the SNR value.
pub fn eval_channel(seed: u64, snr: Snr) -> ChannelConfig {
    ChannelConfig::new(snr.0, derive_seed(derive_seed(seed, TAG_EVAL_CHANNEL), snr.0.to_bits()))
}

fn record_at(state: &ModelState, test: &Dataset, base: &Baseline, cfg: &ExperimentConfig, alpha: f64, lambda: f64, snr: Snr) -> Result<MetricsRecord, CliError> {
    let t0 = Instant::now();
    let ch = eval_channel(cfg.seed, snr);
    let ev = nn::evaluate(state, test.inputs.view(), Some(&ch))?;
    let rec = MetricsRecord {
        k: state.codebook.k(),
        d: state.codebook.d(),
        q: state.codebook.q(),
        alpha,
        lambda,
        snr_db: snr.0,
        seed: cfg.seed,
        accuracy: metrics::accuracy(&ev.predictions, &test.labels)?,
        ot_cost: base.ot_cost,
        perplexity: base.perplexity,
        delta_mi_bits: metrics::delta_mi(base.sent.view(), ev.received_indices.view(), &test.labels)?,
        index_error_rate: metrics::index_error_rate(base.sent.view(), ev.received_indices.view())?,
        symbol_ws: base.symbol_ws,
        wall_time_s: t0.elapsed().as_secs_f64(),
    };
    rec.validate()?;
    Ok(rec)
}

/// Ascending, with `inf` last.
pub fn sorted_snrs(list: &[Snr]) -> Vec<Snr> {
    let mut v = list.to_vec();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    v
}

fn evaluate_model(state: &ModelState, test: &Dataset, cfg: &ExperimentConfig, alpha: f64, lambda: f64, gaussian_std: f64, snrs: &[Snr]) -> Result<Vec<MetricsRecord>, CliError> {
    let base = baseline(state, test, alpha, gaussian_std, cfg, cfg.symbol_target())?;
    snrs.par_iter().map(|&s| record_at(state, test, &base, cfg, alpha, lambda, s)).collect()
}

fn sweep_row(r: &MetricsRecord) -> Vec<String> {
    vec![
        format_snr(Snr(r.snr_db)),
        fmt_f64(r.accuracy),
        fmt_f64(r.index_error_rate),
        fmt_f64(r.delta_mi_bits),
        fmt_f64(r.ot_cost),
        fmt_f64(r.perplexity),
        fmt_f64(r.symbol_ws),
    ]
}

#[derive(Debug, Clone)]
pub struct SweepArgs {
    pub config: PathBuf,
    /// Defaults to `<out>/model.wsdc`.
    pub model: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub snr: Option<Vec<Snr>>,
}

/// Evaluates a trained model on the test split at every SNR.
pub fn cmd_sweep_snr(args: &SweepArgs) -> Result<Vec<MetricsRecord>, CliError> {
    let (mut cfg, bytes) = load_config(&args.config, args.seed)?;
    if let Some(list) = &args.snr {
        cfg.snr_test_list = list.clone();
        cfg.validate()?;
    }
    let model_path = args.model.clone().unwrap_or_else(|| args.out.join(MODEL_FILE));
    let model_bytes = std::fs::read(&model_path).map_err(|e| CliError::Artifact(format!("cannot read model {}: {e}", model_path.display())))?;
    let (state, meta) = load_model(&model_path, cfg.lr)?;
    let (alpha, lambda, std) = meta.map(|m| (m[0], m[1], m[2])).unwrap_or((cfg.alpha, cfg.lambda, cfg.gaussian_std));
    ensure_dir(&args.out)?;
    let (_, test) = cfg.datasets()?;
    if test.input_dim() != state.input_dim() || test.n_classes != state.n_classes() {
        return Err(CliError::Config(format!(
            "dataset ({} features, {} classes) does not match the model ({} features, {} classes)",
            test.input_dim(),
            test.n_classes,
            state.input_dim(),
            state.n_classes()
        )));
    }
    let snrs = sorted_snrs(&cfg.snr_test_list);
    let records = evaluate_model(&state, &test, &cfg, alpha, lambda, std, &snrs)?;
    let mut csv = CsvOut::create(&args.out.join(SWEEP_CSV), &SWEEP_COLUMNS)?;
    for r in &records {
        csv.row(&sweep_row(r))?;
    }
    csv.finish()?;
    let inputs = hash_inputs(vec![(args.config.clone(), bytes), (model_path, model_bytes)], &cfg.input_files())?;
    Manifest::new("sweep-snr", cfg.seed, &cfg, inputs, vec![SWEEP_CSV.into()]).write(&args.out)?;
    Ok(records)
}

#[derive(Debug, Clone)]
pub struct AblateArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub alpha: Option<Vec<f64>>,
    pub snr: Option<Vec<Snr>>,
}

/// Trains one model per mixing weight under the shared seed and evaluates
/// each over the SNR list. Rows are keyed by `(alpha, snr_db)` in input order.
pub fn cmd_ablate_alpha(args: &AblateArgs) -> Result<Vec<MetricsRecord>, CliError> {
    let (mut cfg, bytes) = load_config(&args.config, args.seed)?;
    if let Some(a) = &args.alpha {
        cfg.alpha_list = a.clone();
    }
    if let Some(s) = &args.snr {
        cfg.snr_test_list = s.clone();
    }
    cfg.validate()?;
    let models_dir = args.out.join("models");
    ensure_dir(&models_dir)?;
    let (train, test) = cfg.datasets()?;
    let snrs = sorted_snrs(&cfg.snr_test_list);
    let per_alpha: Vec<Vec<MetricsRecord>> = cfg
        .alpha_list
        .par_iter()
        .enumerate()
        .map(|(i, &alpha)| -> Result<Vec<MetricsRecord>, CliError> {
            let tcfg = TrainConfig { alpha, ..cfg.train_config() };
            let (state, history) = nn::train(&tcfg, &train)?;
            model_container(&state, &tcfg).save(models_dir.join(format!("alpha_{i}.wsdc")))?;
            write_history(&models_dir.join(format!("alpha_{i}_metrics.csv")), &history)?;
            evaluate_model(&state, &test, &cfg, alpha, tcfg.lambda, tcfg.gaussian_std, &snrs)
        })
        .collect::<Result<_, _>>()?;
    let mut columns = vec!["alpha"];
    columns.extend(SWEEP_COLUMNS);
    let mut csv = CsvOut::create(&args.out.join(ABLATION_CSV), &columns)?;
    let records: Vec<MetricsRecord> = per_alpha.into_iter().flatten().collect();
    for r in &records {
        let mut row = vec![fmt_f64(r.alpha)];
        row.extend(sweep_row(r));
        csv.row(&row)?;
    }
    csv.finish()?;
    let inputs = hash_inputs(vec![(args.config.clone(), bytes)], &cfg.input_files())?;
    let mut outputs = vec![ABLATION_CSV.to_string()];
    for i in 0..cfg.alpha_list.len() {
        outputs.push(format!("models/alpha_{i}.wsdc"));
        outputs.push(format!("models/alpha_{i}_metrics.csv"));
    }
    Manifest::new("ablate-alpha", cfg.seed, &cfg, inputs, outputs).write(&args.out)?;
    Ok(records)
}

#[derive(Debug, Clone)]
pub struct ChannelReportArgs {
    pub ks: Vec<usize>,
    pub snr: Vec<Snr>,
    pub n_symbols: usize,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelRow {
    pub k: usize,
    pub snr_db: f64,
    pub capacity_bits: f64,
    pub ser_theoretical: f64,
    pub ser_simulated: f64,
    pub uniform_entropy_bits: f64,
}

/// Capacity, theoretical and simulated SER, and uniform-input entropy for
/// every `(K, snr)` pair. Capacity is the real-channel form at unit power.
pub fn cmd_channel_report(args: &ChannelReportArgs) -> Result<Vec<ChannelRow>, CliError> {
    if args.ks.is_empty() || args.snr.is_empty() {
        return Err(CliError::Config("channel-report needs at least one K and one SNR".into()));
    }
    if args.n_symbols == 0 {
        return Err(CliError::Config("n_symbols must be >= 1".into()));
    }
    if args.snr.iter().any(|s| s.0.is_nan()) {
        return Err(CliError::Config("SNR list contains NaN".into()));
    }
    let constellations = args.ks.iter().map(|&k| Constellation::new(k)).collect::<Result<Vec<_>, _>>()?;
    ensure_dir(&args.out)?;
    let snrs = sorted_snrs(&args.snr);
    let jobs: Vec<(usize, Snr)> = (0..constellations.len()).flat_map(|ci| snrs.iter().map(move |&s| (ci, s))).collect();
    let rows = jobs
        .par_iter()
        .map(|&(ci, snr)| -> Result<ChannelRow, CliError> {
            let c = &constellations[ci];
            let k = c.order();
            let ch = ChannelConfig::new(snr.0, 0);
            let seed = derive_seed(derive_seed(args.seed, TAG_CHANNEL_REPORT), (k as u64) << 32 ^ snr.0.to_bits());
            let errors = modem::simulate_symbol_errors(c, snr.0, args.n_symbols, seed);
            let uniform = ndarray::Array1::from_elem(k, 1.0 / k as f64);
            Ok(ChannelRow {
                k,
                snr_db: snr.0,
                capacity_bits: modem::capacity_awgn(ch.signal_power(), ch.noise_variance())?,
                ser_theoretical: modem::ser_theoretical(k, snr.0)?,
                ser_simulated: errors as f64 / args.n_symbols as f64,
                uniform_entropy_bits: modem::discrete_entropy(uniform.view())?,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut csv = CsvOut::create(&args.out.join(CHANNEL_CSV), &CHANNEL_COLUMNS)?;
    for r in &rows {
        csv.row(&[
            r.k.to_string(),
            format_snr(Snr(r.snr_db)),
            fmt_f64(r.capacity_bits),
            fmt_f64(r.ser_theoretical),
            fmt_f64(r.ser_simulated),
            fmt_f64(r.uniform_entropy_bits),
        ])?;
    }
    csv.finish()?;
    #[derive(Serialize)]
    struct Echo<'a> {
        k_list: &'a [usize],
        snr_list: &'a [Snr],
        n_symbols: usize,
    }
    let echo = Echo { k_list: &args.ks, snr_list: &snrs, n_symbols: args.n_symbols };
    Manifest::new("channel-report", args.seed, echo, Vec::new(), vec![CHANNEL_CSV.into()]).write(&args.out)?;
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct GradCheckArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckSummary {
    pub max_rel_error: f64,
    pub threshold: f64,
    pub checked: usize,
    pub n_params: usize,
    pub passed: bool,
}

/// Tolerance for the gradient check: tighter when the transport term is off.
pub fn grad_check_threshold(lambda: f64) -> f64 {
    if lambda == 0.0 {
        1e-6
    } else {
        1e-3
    }
}

/// Gradient check of a freshly initialized model on the first training
/// batch. A result above tolerance is a numerical failure.
pub fn cmd_grad_check(args: &GradCheckArgs) -> Result<GradCheckSummary, CliError> {
    let (cfg, _) = load_config(&args.config, args.seed)?;
    let (train, _) = cfg.datasets()?;
    let tcfg = cfg.train_config();
    let batch = &nn::epoch_batches(train.len(), tcfg.batch_size, tcfg.seed, 0)[0];
    let (x, y) = train.batch(batch);
    let state = ModelState::new(&tcfg, train.input_dim(), train.n_classes, Some(x.view()))?;
    let report = nn::grad_check(&state, x.view(), &y, &tcfg, &GradCheckOptions::default())?;
    let threshold = grad_check_threshold(tcfg.lambda);
    let summary = GradCheckSummary {
        max_rel_error: report.max_rel_error,
        threshold,
        checked: report.checked,
        n_params: state.n_params(),
        passed: report.max_rel_error < threshold,
    };
    if let Some(out) = &args.out {
        ensure_dir(out)?;
        let text = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Internal(e.to_string()))?;
        std::fs::write(out.join(GRAD_CHECK_JSON), text + "\n")?;
    }
    if !summary.passed {
        return Err(CliError::Numerical(format!(
            "gradient check failed: max relative error {} >= {threshold}",
            summary.max_rel_error
        )));
    }
    Ok(summary)
}
