//! Experiment driver: run configuration, the training loop, sweeps, and the
//! smoothing-direction ablation.
//!
//! A run is fully determined by `(RunConfig, seed)`. Each seed is an
//! independent trial: its own initialization, its own shuffle stream, its
//! own optimizer state. Trials may execute on separate threads; the outputs
//! are identical to sequential execution because nothing is shared beyond
//! the read-only dataset.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::analysis::{correlation_curve, emit_report, trial_stats, ReportPaths, TrialReport};
use crate::data::{inverted_split, load_idx, shuffled_indices, synthetic_quadratic, Dataset};
use crate::error::{Error, Result};
use crate::nn::{
    backward_into, forward_into, init_params, predictions, Batch, ModelArrays, ModelParams,
    NnWorkspace, Real,
};
use crate::optim::{adam_step, lr_schedule, sgd_step, AdamConfig, OptimState, SgdConfig};
use crate::precondition::{Axis, Metric, PrecondConfig};
use crate::tensor::Tensor4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Mnist,
    FashionMnist,
    Synthetic,
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(Task::Mnist),
            "fashion_mnist" => Ok(Task::FashionMnist),
            "synthetic" => Ok(Task::Synthetic),
            other => Err(Error::invalid(format!("unknown task '{}'", other))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::invalid(format!("unknown optimizer '{}'", other))),
        }
    }
}

/// Which weight tensors the preconditioner touches. Biases are always
/// skipped; the dense layer is treated as a `(O, I, 1, 1)` tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothScope {
    All,
    ConvOnly,
}

impl std::str::FromStr for SmoothScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(SmoothScope::All),
            "conv_only" => Ok(SmoothScope::ConvOnly),
            other => Err(Error::invalid(format!("unknown scope '{}'", other))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::invalid(format!("unknown precision '{}'", other))),
        }
    }
}

/// Full description of a run. Parsed from a flat `key = value` config file;
/// every CLI flag overrides its key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    #[serde(skip)]
    pub data_dir: Option<PathBuf>,
    /// IDX file names inside `data_dir`. The defaults implement the
    /// inverted protocol: training draws from the `t10k-*` pair and testing
    /// from the (larger) `train-*` pair.
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
    /// Training subset size drawn from the training pool (0 = whole pool).
    pub train_n: usize,
    /// Held-out subset size drawn from the test pool (0 = whole pool).
    pub test_n: usize,
    /// Seed of the subset selection, shared by all trials so every seed
    /// trains on the same data.
    pub split_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub sgd: SgdConfig,
    pub adam: AdamConfig,
    pub precond: PrecondConfig,
    /// Smoothness weight; 0 selects plain SGD (identity preconditioner).
    pub lambda: f64,
    pub scope: SmoothScope,
    /// Learning-rate decay period in epochs (0 = constant).
    pub lr_period: usize,
    pub seeds: Vec<u64>,
    #[serde(skip)]
    pub out_dir: PathBuf,
    pub synthetic_dims: [usize; 4],
    pub precision: Precision,
    /// Largest slice distance in the final correlation curves.
    pub max_corr_d: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Mnist,
            data_dir: None,
            train_images: "t10k-images-idx3-ubyte".into(),
            train_labels: "t10k-labels-idx1-ubyte".into(),
            test_images: "train-images-idx3-ubyte".into(),
            test_labels: "train-labels-idx1-ubyte".into(),
            train_n: 2000,
            test_n: 10000,
            split_seed: 12345,
            epochs: 20,
            batch_size: 100,
            optimizer: OptimizerKind::Sgd,
            sgd: SgdConfig::default(),
            adam: AdamConfig::default(),
            precond: PrecondConfig::default(),
            lambda: 1.0,
            scope: SmoothScope::All,
            lr_period: 40,
            seeds: vec![1, 2, 3, 4, 5],
            out_dir: PathBuf::from("runs/out"),
            synthetic_dims: [8, 4, 3, 3],
            precision: Precision::F32,
            max_corr_d: 16,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::invalid("seeds list is empty"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        self.effective_precond().validate()?;
        self.sgd.validate()?;
        self.adam.validate()?;
        Ok(())
    }

    /// The preconditioner this run actually applies. A zero smoothness
    /// weight degenerates to vanilla SGD, so it maps to the identity metric.
    pub fn effective_precond(&self) -> PrecondConfig {
        let mut pre = self.precond;
        if self.lambda == 0.0 {
            pre.metric = Metric::Identity;
            pre.lambda = 1.0;
        } else {
            pre.lambda = self.lambda;
            pre.sigma = self.lambda;
        }
        pre
    }

    /// Label used in report rows.
    pub fn metric_label(&self) -> String {
        self.effective_precond().metric.name().to_string()
    }

    /// Configuration echo embedded in the summary JSON (paths excluded so
    /// moving the output directory leaves report bytes unchanged).
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn data_dir(&self) -> Result<PathBuf> {
        if let Some(dir) = &self.data_dir {
            return Ok(dir.clone());
        }
        if let Ok(env) = std::env::var("CDG_DATA_DIR") {
            if !env.is_empty() {
                return Ok(PathBuf::from(env));
            }
        }
        Err(Error::invalid(
            "no data directory: set data_dir in the config, pass --data-dir, or export CDG_DATA_DIR",
        ))
    }
}

// ---------------------------------------------------------------------------
// Flat key = value config files
// ---------------------------------------------------------------------------

/// Parses the flat `key = value` format. Unknown keys are rejected; `#`
/// starts a comment line.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::invalid(format!("config line {}: expected key = value", lineno + 1))
        })?;
        apply_key(&mut cfg, key.trim(), value.trim())
            .map_err(|e| Error::invalid(format!("config line {}: {}", lineno + 1, e)))?;
    }
    Ok(cfg)
}

pub fn parse_config_file(path: impl AsRef<Path>) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path.as_ref())?;
    parse_config_str(&text)
}

/// Applies one `key = value` pair; shared by the file parser and the CLI
/// flag overrides.
pub fn apply_key(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
        value
            .parse()
            .map_err(|_| Error::invalid(format!("bad value '{}' for {}", value, key)))
    }
    match key {
        "task" => cfg.task = value.parse()?,
        "data_dir" => cfg.data_dir = Some(PathBuf::from(value)),
        "train_images" => cfg.train_images = value.into(),
        "train_labels" => cfg.train_labels = value.into(),
        "test_images" => cfg.test_images = value.into(),
        "test_labels" => cfg.test_labels = value.into(),
        "train_n" => cfg.train_n = num(key, value)?,
        "test_n" => cfg.test_n = num(key, value)?,
        "split_seed" => cfg.split_seed = num(key, value)?,
        "epochs" => cfg.epochs = num(key, value)?,
        "batch_size" => cfg.batch_size = num(key, value)?,
        "optimizer" => cfg.optimizer = value.parse()?,
        "lr" => {
            let lr: f64 = num(key, value)?;
            cfg.sgd.lr = lr;
            cfg.adam.lr = lr;
        }
        "momentum" => cfg.sgd.momentum = num(key, value)?,
        "weight_decay" => {
            let wd: f64 = num(key, value)?;
            cfg.sgd.weight_decay = wd;
            cfg.adam.weight_decay = wd;
        }
        "beta1" => cfg.adam.beta1 = num(key, value)?,
        "beta2" => cfg.adam.beta2 = num(key, value)?,
        "epsilon" => cfg.adam.epsilon = num(key, value)?,
        "lr_period" => cfg.lr_period = num(key, value)?,
        "metric" => cfg.precond.metric = value.parse()?,
        "lambda" => cfg.lambda = num(key, value)?,
        "beta" => cfg.precond.blend_beta = num(key, value)?,
        "axis" => cfg.precond.axis = value.parse()?,
        "rasterize" => cfg.precond.rasterize = num(key, value)?,
        "sigma" => cfg.precond.sigma = num(key, value)?,
        "scope" => cfg.scope = value.parse()?,
        "seeds" => {
            cfg.seeds = value
                .split(',')
                .map(|s| num::<u64>("seeds", s.trim()))
                .collect::<Result<_>>()?;
        }
        "out_dir" => cfg.out_dir = PathBuf::from(value),
        "synthetic_dims" => {
            let dims: Vec<usize> = value
                .split(',')
                .map(|s| num::<usize>("synthetic_dims", s.trim()))
                .collect::<Result<_>>()?;
            cfg.synthetic_dims = dims
                .try_into()
                .map_err(|_| Error::invalid("synthetic_dims needs exactly 4 entries"))?;
        }
        "precision" => cfg.precision = value.parse()?,
        "max_corr_d" => cfg.max_corr_d = num(key, value)?,
        other => return Err(Error::invalid(format!("unknown config key '{}'", other))),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Dataset pair for classification tasks; the synthetic task needs none.
pub enum TaskData {
    Digits { train: Dataset, test: Dataset },
    Quadratic,
}

/// Loads and subsets the task data once per run; fails with an I/O-class
/// error before any compute when files are missing.
pub fn load_task_data(cfg: &RunConfig) -> Result<TaskData> {
    match cfg.task {
        Task::Synthetic => Ok(TaskData::Quadratic),
        Task::Mnist | Task::FashionMnist => {
            let dir = cfg.data_dir()?;
            let train_pool = load_idx(dir.join(&cfg.train_images), dir.join(&cfg.train_labels))?;
            let test_pool = load_idx(dir.join(&cfg.test_images), dir.join(&cfg.test_labels))?;
            let train = if cfg.train_n == 0 || cfg.train_n == train_pool.len() {
                train_pool
            } else {
                inverted_split(&train_pool, cfg.train_n, cfg.split_seed)?.0
            };
            let test = if cfg.test_n == 0 || cfg.test_n == test_pool.len() {
                test_pool
            } else {
                inverted_split(&test_pool, cfg.test_n, cfg.split_seed.wrapping_add(1))?.0
            };
            Ok(TaskData::Digits { train, test })
        }
    }
}

struct ParamOptim {
    state: OptimState,
    pre: PrecondConfig,
}

/// Runs one seed to completion.
pub fn run_trial(cfg: &RunConfig, seed: u64, data: &TaskData) -> Result<TrialReport> {
    match data {
        TaskData::Quadratic => run_quadratic_trial(cfg, seed),
        TaskData::Digits { train, test } => match cfg.precision {
            Precision::F32 => run_digits_trial::<f32>(cfg, seed, train, test),
            Precision::F64 => run_digits_trial::<f64>(cfg, seed, train, test),
        },
    }
}

fn run_quadratic_trial(cfg: &RunConfig, seed: u64) -> Result<TrialReport> {
    let task = synthetic_quadratic(cfg.synthetic_dims, cfg.split_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor4::from_fn(cfg.synthetic_dims, |_, _, _, _| {
        use rand::Rng;
        rng.gen_range(-1.0..1.0)
    })?;
    let mut state = OptimState::new(cfg.synthetic_dims)?;
    let pre = cfg.effective_precond();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mult = lr_schedule(epoch, cfg.lr_period);
        let grad = task.grad(&x)?;
        match cfg.optimizer {
            OptimizerKind::Sgd => {
                let mut hyper = cfg.sgd;
                hyper.lr *= mult;
                sgd_step(&mut x, &grad, &mut state, &hyper, &pre)?;
            }
            OptimizerKind::Adam => {
                let mut hyper = cfg.adam;
                hyper.lr *= mult;
                adam_step(&mut x, &grad, &mut state, &hyper, &pre)?;
            }
        }
        losses.push(task.loss(&x)?);
    }
    Ok(TrialReport {
        seed,
        metric: cfg.metric_label(),
        train_acc: losses.clone(),
        test_acc: losses,
        correlations: Vec::new(),
        config: cfg.echo(),
    })
}

fn run_digits_trial<T: Real>(
    cfg: &RunConfig,
    seed: u64,
    train: &Dataset,
    test: &Dataset,
) -> Result<TrialReport> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("empty train or test set"));
    }
    let pre = cfg.effective_precond();
    let identity = PrecondConfig::default();
    let fc_pre = match cfg.scope {
        SmoothScope::All => pre,
        SmoothScope::ConvOnly => identity,
    };

    let mut params = init_params(seed);
    let mut optim = [
        ParamOptim { state: OptimState::new(params.conv1_w.dims())?, pre },
        ParamOptim { state: OptimState::new(params.conv1_b.dims())?, pre: identity },
        ParamOptim { state: OptimState::new(params.conv2_w.dims())?, pre },
        ParamOptim { state: OptimState::new(params.conv2_b.dims())?, pre: identity },
        ParamOptim { state: OptimState::new(params.fc_w.dims())?, pre: fc_pre },
        ParamOptim { state: OptimState::new(params.fc_b.dims())?, pre: identity },
    ];

    let mut arrays = ModelArrays::<T>::from_params(&params);
    let mut grads = ModelArrays::<T>::zeros();
    let mut ws = NnWorkspace::<T>::new();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5f5f_5f5f);

    let mut train_acc = Vec::with_capacity(cfg.epochs);
    let mut test_acc = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mult = lr_schedule(epoch, cfg.lr_period);
        let order = shuffled_indices(train.len(), &mut shuffle_rng);
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch::gather(train, chunk)?;
            forward_into(&arrays, &batch, &mut ws);
            // Pre-update accuracy over the epoch's batches.
            correct += predictions(&ws)
                .iter()
                .zip(batch.labels())
                .filter(|(p, l)| p == l)
                .count();
            backward_into(&arrays, &batch, &mut ws, &mut grads);
            let g = grads.to_params();
            step_all(cfg, mult, &mut params, &g, &mut optim)?;
            arrays.refresh(&params);
        }
        train_acc.push(correct as f64 / train.len() as f64);
        test_acc.push(evaluate::<T>(&arrays, test, cfg.batch_size, &mut ws)?);
    }

    let mut correlations = Vec::new();
    for (layer, tensor) in [("conv1", &params.conv1_w), ("conv2", &params.conv2_w)] {
        for axis in [Axis::Output, Axis::Input] {
            correlations.extend(correlation_curve(tensor, layer, axis, cfg.max_corr_d));
        }
    }
    Ok(TrialReport {
        seed,
        metric: cfg.metric_label(),
        train_acc,
        test_acc,
        correlations,
        config: cfg.echo(),
    })
}

fn step_all(
    cfg: &RunConfig,
    lr_mult: f64,
    params: &mut ModelParams,
    grads: &ModelParams,
    optim: &mut [ParamOptim; 6],
) -> Result<()> {
    let tensors: [(&mut Tensor4, &Tensor4); 6] = [
        (&mut params.conv1_w, &grads.conv1_w),
        (&mut params.conv1_b, &grads.conv1_b),
        (&mut params.conv2_w, &grads.conv2_w),
        (&mut params.conv2_b, &grads.conv2_b),
        (&mut params.fc_w, &grads.fc_w),
        (&mut params.fc_b, &grads.fc_b),
    ];
    for ((param, grad), slot) in tensors.into_iter().zip(optim.iter_mut()) {
        match cfg.optimizer {
            OptimizerKind::Sgd => {
                let mut hyper = cfg.sgd;
                hyper.lr *= lr_mult;
                sgd_step(param, grad, &mut slot.state, &hyper, &slot.pre)?;
            }
            OptimizerKind::Adam => {
                let mut hyper = cfg.adam;
                hyper.lr *= lr_mult;
                adam_step(param, grad, &mut slot.state, &hyper, &slot.pre)?;
            }
        }
    }
    Ok(())
}

fn evaluate<T: Real>(
    arrays: &ModelArrays<T>,
    ds: &Dataset,
    batch_size: usize,
    ws: &mut NnWorkspace<T>,
) -> Result<f64> {
    let indices: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size) {
        let batch = Batch::gather(ds, chunk)?;
        forward_into(arrays, &batch, ws);
        correct += predictions(ws)
            .iter()
            .zip(batch.labels())
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Trials of one run plus the emitted report files.
#[derive(Debug)]
pub struct TrainOutcome {
    pub trials: Vec<TrialReport>,
    pub paths: ReportPaths,
}

fn worker_count(trials: usize) -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(trials)
        .max(1)
}

/// Runs every seed of the config (trials in parallel when cores allow) and
/// emits the reports into `out_dir`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_task_data(cfg)?;
    let trials = run_all_trials(cfg, &data)?;
    let paths = emit_report(&trials, &cfg.out_dir)?;
    Ok(TrainOutcome { trials, paths })
}

/// Runs the config's seeds against already-loaded data.
pub fn run_all_trials(cfg: &RunConfig, data: &TaskData) -> Result<Vec<TrialReport>> {
    let seeds = &cfg.seeds;
    let n_workers = worker_count(seeds.len());
    if n_workers <= 1 {
        return seeds.iter().map(|&s| run_trial(cfg, s, data)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<TrialReport>>>> =
        Mutex::new((0..seeds.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..n_workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= seeds.len() {
                    break;
                }
                let result = run_trial(cfg, seeds[i], data);
                slots.lock().unwrap()[i] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|slot| slot.expect("worker filled every slot"))
        .collect()
}

// ---------------------------------------------------------------------------
// Sweep and ablation
// ---------------------------------------------------------------------------

fn fmt_full(v: f64) -> String {
    format!("{:.16e}", v)
}

/// One aggregated row of a sweep or ablation table.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub label: String,
    pub metric: String,
    pub lambda: f64,
    pub mean_final_test_acc: f64,
    pub std_final_test_acc: f64,
    pub n_trials: usize,
}

fn summarize(label: &str, metric: &str, lambda: f64, trials: &[TrialReport]) -> Result<SummaryRow> {
    let finals: Vec<f64> = trials.iter().map(|t| t.final_test_acc()).collect();
    let stats = trial_stats(&finals)?;
    Ok(SummaryRow {
        label: label.to_string(),
        metric: metric.to_string(),
        lambda,
        mean_final_test_acc: stats.mean,
        std_final_test_acc: stats.std,
        n_trials: trials.len(),
    })
}

fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(b"label,metric,lambda,mean_final_test_acc,std_final_test_acc,n_trials\n")?;
    for row in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            row.label,
            row.metric,
            fmt_full(row.lambda),
            fmt_full(row.mean_final_test_acc),
            fmt_full(row.std_final_test_acc),
            row.n_trials
        )?;
    }
    Ok(())
}

pub struct SweepOutcome {
    pub rows: Vec<SummaryRow>,
    pub csv: PathBuf,
}

/// Trains every (metric, lambda) cell and aggregates final test accuracy.
/// Lambda 0 degenerates to the plain-SGD baseline for any metric.
pub fn cmd_sweep(cfg: &RunConfig, metrics: &[Metric], lambdas: &[f64]) -> Result<SweepOutcome> {
    if lambdas.is_empty() {
        return Err(Error::invalid("sweep needs a non-empty lambda list"));
    }
    if metrics.is_empty() {
        return Err(Error::invalid("sweep needs a non-empty metric list"));
    }
    cfg.validate()?;
    let data = load_task_data(cfg)?;
    let mut rows = Vec::new();
    for &metric in metrics {
        for &lambda in lambdas {
            let mut cell = cfg.clone();
            cell.precond.metric = metric;
            cell.lambda = lambda;
            cell.out_dir = cfg
                .out_dir
                .join(format!("sweep_{}_lambda_{}", metric.name(), lambda));
            cell.validate()?;
            let trials = run_all_trials(&cell, &data)?;
            emit_report(&trials, &cell.out_dir)?;
            let label = format!("{}@lambda={}", metric.name(), lambda);
            rows.push(summarize(&label, metric.name(), lambda, &trials)?);
        }
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    let csv = cfg.out_dir.join("sweep.csv");
    write_summary_csv(&csv, &rows)?;
    Ok(SweepOutcome { rows, csv })
}

pub struct AblateOutcome {
    pub rows: Vec<SummaryRow>,
    pub csv: PathBuf,
}

/// Smoothing-direction ablation: output-axis and input-axis Sobolev
/// smoothing, the rasterized Laplacian baseline, the re-weighted gradient
/// on the output axis, and the plain-SGD identity row, all on convolution
/// tensors only.
pub fn cmd_ablate_direction(cfg: &RunConfig) -> Result<AblateOutcome> {
    cfg.validate()?;
    let data = load_task_data(cfg)?;
    let cells: [(&str, Metric, Axis, bool); 5] = [
        ("output_sobolev", Metric::SobolevTildeH1, Axis::Output, false),
        ("input_sobolev", Metric::SobolevTildeH1, Axis::Input, false),
        ("rasterized_ls", Metric::LaplacianRasterized, Axis::Output, true),
        ("output_reweighted", Metric::ReweightedH0CodeVariant, Axis::Output, false),
        ("identity", Metric::Identity, Axis::Output, false),
    ];
    let mut rows = Vec::new();
    for (label, metric, axis, rasterize) in cells {
        let mut cell = cfg.clone();
        cell.precond.metric = metric;
        cell.precond.axis = axis;
        cell.precond.rasterize = rasterize;
        cell.scope = SmoothScope::ConvOnly;
        if cell.lambda == 0.0 {
            cell.lambda = 1.0;
        }
        if metric == Metric::Identity {
            cell.lambda = 0.0;
        }
        cell.out_dir = cfg.out_dir.join(format!("ablate_{}", label));
        cell.validate()?;
        let trials = run_all_trials(&cell, &data)?;
        emit_report(&trials, &cell.out_dir)?;
        rows.push(summarize(label, metric.name(), cell.lambda, &trials)?);
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    let csv = cfg.out_dir.join("ablate.csv");
    write_summary_csv(&csv, &rows)?;
    Ok(AblateOutcome { rows, csv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixture;

    #[test]
    fn config_parsing_round_trip() {
        let text = "\
# sample config
task = synthetic
epochs = 12
batch_size = 7
optimizer = adam
lr = 0.25
metric = sobolev_tilde_h1
lambda = 2.5
beta = 0.5
axis = input
seeds = 3, 4
synthetic_dims = 4,3,2,2
precision = f64
";
        let cfg = parse_config_str(text).unwrap();
        assert_eq!(cfg.task, Task::Synthetic);
        assert_eq!(cfg.epochs, 12);
        assert_eq!(cfg.batch_size, 7);
        assert_eq!(cfg.optimizer, OptimizerKind::Adam);
        assert_eq!(cfg.adam.lr, 0.25);
        assert_eq!(cfg.precond.metric, Metric::SobolevTildeH1);
        assert_eq!(cfg.lambda, 2.5);
        assert_eq!(cfg.precond.blend_beta, 0.5);
        assert_eq!(cfg.precond.axis, Axis::Input);
        assert_eq!(cfg.seeds, vec![3, 4]);
        assert_eq!(cfg.synthetic_dims, [4, 3, 2, 2]);
        assert_eq!(cfg.precision, Precision::F64);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = parse_config_str("no_such_key = 1").unwrap_err();
        assert!(err.to_string().contains("no_such_key"));
    }

    #[test]
    fn lambda_zero_degenerates_to_identity() {
        let mut cfg = RunConfig::default();
        cfg.precond.metric = Metric::SobolevTildeH1;
        cfg.lambda = 0.0;
        assert_eq!(cfg.effective_precond().metric, Metric::Identity);
        assert_eq!(cfg.metric_label(), "identity");
    }

    fn quick_synthetic_config(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.task = Task::Synthetic;
        cfg.epochs = 400;
        cfg.seeds = vec![1];
        cfg.sgd = SgdConfig {
            lr: 0.5,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        cfg.lr_period = 0;
        cfg.out_dir = dir.join("out");
        cfg
    }

    #[test]
    fn synthetic_identity_run_converges() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_synthetic_config(dir.path());
        let outcome = cmd_train(&cfg).unwrap();
        let final_loss = outcome.trials[0].final_test_acc();
        assert!(final_loss <= 1e-6, "final loss {}", final_loss);
        assert!(outcome.paths.accuracy_csv.exists());
        assert!(outcome.paths.summary_json.exists());
    }

    #[test]
    fn identical_runs_emit_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_synthetic_config(dir.path());
        cfg.epochs = 50;
        cfg.out_dir = dir.path().join("a");
        let a = cmd_train(&cfg).unwrap();
        cfg.out_dir = dir.path().join("b");
        let b = cmd_train(&cfg).unwrap();
        let bytes = |p: &Path| std::fs::read(p).unwrap();
        assert_eq!(bytes(&a.paths.accuracy_csv), bytes(&b.paths.accuracy_csv));
        assert_eq!(bytes(&a.paths.summary_json), bytes(&b.paths.summary_json));
    }

    #[test]
    fn sweep_lambda_zero_equals_identity_baseline() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_synthetic_config(dir.path());
        cfg.epochs = 30;
        let sweep = cmd_sweep(&cfg, &[Metric::SobolevTildeH1], &[0.0]).unwrap();
        assert_eq!(sweep.rows.len(), 1);
        let mut base = cfg.clone();
        base.lambda = 0.0;
        base.out_dir = dir.path().join("base");
        let baseline = cmd_train(&base).unwrap();
        assert_eq!(
            sweep.rows[0].mean_final_test_acc,
            baseline.trials[0].final_test_acc()
        );
        assert!(sweep.csv.exists());
    }

    #[test]
    fn trials_are_independent_of_grouping() {
        // Seeds {1, 2} together equal seeds {1} and {2} run separately.
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_synthetic_config(dir.path());
        cfg.epochs = 40;
        cfg.seeds = vec![1, 2];
        cfg.out_dir = dir.path().join("both");
        let both = cmd_train(&cfg).unwrap();
        let mut lone = Vec::new();
        for seed in [1u64, 2] {
            let mut single = cfg.clone();
            single.seeds = vec![seed];
            single.out_dir = dir.path().join(format!("solo{}", seed));
            lone.extend(cmd_train(&single).unwrap().trials);
        }
        // The config echo records the seed list, so compare trial outputs.
        assert_eq!(both.trials.len(), lone.len());
        for (a, b) in both.trials.iter().zip(&lone) {
            assert_eq!(a.seed, b.seed);
            assert_eq!(a.metric, b.metric);
            assert_eq!(a.train_acc, b.train_acc);
            assert_eq!(a.test_acc, b.test_acc);
            assert_eq!(a.correlations, b.correlations);
        }
    }

    #[test]
    fn sweep_scales_linearly_in_cells() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_synthetic_config(dir.path());
        cfg.epochs = 2000;
        let t1 = std::time::Instant::now();
        let one = cmd_sweep(&cfg, &[Metric::SobolevTildeH1], &[1.0]).unwrap();
        let t1 = t1.elapsed();
        let t2 = std::time::Instant::now();
        let two = cmd_sweep(&cfg, &[Metric::SobolevTildeH1], &[0.5, 1.0]).unwrap();
        let t2 = t2.elapsed();
        assert_eq!(one.rows.len(), 1);
        assert_eq!(two.rows.len(), 2);
        // Twice the cells must not cost an order of magnitude more.
        assert!(
            t2.as_secs_f64() <= 6.0 * t1.as_secs_f64().max(1e-3),
            "1 cell {:?} vs 2 cells {:?}",
            t1,
            t2
        );
    }

    #[test]
    fn ablation_emits_one_row_per_cell_and_matches_sgd_on_identity() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_synthetic_config(dir.path());
        cfg.epochs = 60;
        cfg.out_dir = dir.path().join("ablate");
        let outcome = cmd_ablate_direction(&cfg).unwrap();
        assert_eq!(outcome.rows.len(), 5);
        let labels: Vec<&str> = outcome.rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(
            labels,
            [
                "output_sobolev",
                "input_sobolev",
                "rasterized_ls",
                "output_reweighted",
                "identity"
            ]
        );
        let mut sgd = cfg.clone();
        sgd.lambda = 0.0;
        sgd.scope = SmoothScope::ConvOnly;
        sgd.out_dir = dir.path().join("sgd");
        let baseline = cmd_train(&sgd).unwrap();
        let identity_row = &outcome.rows[4];
        assert_eq!(
            identity_row.mean_final_test_acc,
            baseline.trials[0].final_test_acc()
        );
        assert!(outcome.csv.exists());
    }

    #[test]
    fn tiny_digits_run_produces_reports() {
        let dir = tempfile::tempdir().unwrap();
        let data_dir = dir.path().join("data");
        fixture::write_idx_fixture(&data_dir, 60, 40, 3).unwrap();
        let mut cfg = RunConfig::default();
        cfg.task = Task::Mnist;
        cfg.data_dir = Some(data_dir);
        cfg.train_n = 30;
        cfg.test_n = 20;
        cfg.epochs = 1;
        cfg.batch_size = 10;
        cfg.seeds = vec![1];
        cfg.precond.metric = Metric::SobolevTildeH1;
        cfg.lambda = 1.0;
        cfg.out_dir = dir.path().join("digits");
        let outcome = cmd_train(&cfg).unwrap();
        assert_eq!(outcome.trials[0].train_acc.len(), 1);
        assert!(!outcome.trials[0].correlations.is_empty());
        let csv = std::fs::read_to_string(&outcome.paths.accuracy_csv).unwrap();
        assert!(csv.lines().count() >= 2);
    }

    #[test]
    fn missing_data_fails_before_compute() {
        let mut cfg = RunConfig::default();
        cfg.data_dir = Some(PathBuf::from("/definitely/not/here"));
        cfg.out_dir = PathBuf::from("/tmp/unused");
        let err = cmd_train(&cfg).unwrap_err();
        assert!(matches!(err, Error::Io(_)), "{:?}", err);
    }
}
