//! Sequential task training, the accuracy matrix and derived metrics.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::datasets::{load_cifar, load_mnist, split_classes, LabeledSet, Source, TaskSpec};
use crate::error::{config_err, usage_err, Result};
use crate::nets::{predict, train_step, Architecture, Model, ModelSpec, TrainMode};
use crate::neuromod::{write_atomic, write_checkpoint, ContextStore};
use crate::optim::{cosine_lr, OptimizerConfig, OptimizerState};
use crate::rngcore::{random_permutation, Purpose, RngStream};
use crate::scalar::Scalar;

/// Benchmark task sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSequence {
    /// Task `k` (0-based) rotates MNIST by `10·k` degrees.
    RotatedMnist { tasks: usize },
    /// Task 0 is plain MNIST, later tasks use seeded pixel permutations.
    PermutedMnist { tasks: usize },
    /// Disjoint `ways`-class subsets of CIFAR-100.
    SplitCifar100 { tasks: usize, ways: usize },
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        match *self {
            Self::RotatedMnist { tasks }
            | Self::PermutedMnist { tasks }
            | Self::SplitCifar100 { tasks, .. } => tasks,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn set_len(&mut self, n: usize) {
        match self {
            Self::RotatedMnist { tasks }
            | Self::PermutedMnist { tasks }
            | Self::SplitCifar100 { tasks, .. } => *tasks = n,
        }
    }

    pub fn source(&self) -> Source {
        match self {
            Self::SplitCifar100 { .. } => Source::Cifar100,
            _ => Source::Mnist,
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        match self.source() {
            Source::Mnist => [1, 28, 28],
            Source::Cifar100 => [3, 32, 32],
        }
    }

    pub fn classes_per_task(&self) -> usize {
        match *self {
            Self::SplitCifar100 { ways, .. } => ways,
            _ => 10,
        }
    }

    /// Per-task transforms; `data_seed` drives permutations and class splits.
    pub fn task_specs(&self, data_seed: u64) -> Result<Vec<TaskSpec>> {
        match *self {
            Self::RotatedMnist { tasks } => {
                if tasks > 36 {
                    return Err(config_err("rotated MNIST has at most 36 tasks"));
                }
                Ok((0..tasks as u32).map(TaskSpec::rotated).collect())
            }
            Self::PermutedMnist { tasks } => Ok((0..tasks as u32)
                .map(|t| TaskSpec::permuted(t, data_seed))
                .collect()),
            Self::SplitCifar100 { tasks, ways } => Ok(split_classes(100, ways, tasks, data_seed)?
                .into_iter()
                .enumerate()
                .map(|(t, c)| TaskSpec::split(t as u32, c))
                .collect()),
        }
    }
}

/// Training length per task (exactly one of `batches`, `epochs`) and
/// learning-rate shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    #[serde(default)]
    pub batches: Option<usize>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub cosine: bool,
}

impl Schedule {
    pub fn batches(n: usize) -> Self {
        Self {
            batches: Some(n),
            epochs: None,
            cosine: false,
        }
    }

    pub fn epochs(n: usize, cosine: bool) -> Self {
        Self {
            batches: None,
            epochs: Some(n),
            cosine,
        }
    }

    fn validate(&self) -> Result<()> {
        match (self.batches, self.epochs) {
            (Some(n), None) | (None, Some(n)) if n > 0 => Ok(()),
            (Some(_), Some(_)) => Err(config_err("schedule sets both batches and epochs")),
            _ => Err(config_err("schedule needs a positive batches or epochs count")),
        }
    }

    /// Optimizer steps for a task of `n` samples.
    pub fn steps(&self, n: usize, batch: usize) -> usize {
        match (self.batches, self.epochs) {
            (Some(b), _) => b,
            (None, Some(e)) => e * n.div_ceil(batch),
            (None, None) => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub model: u64,
    pub data: u64,
    pub shuffle: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self {
            model: seed,
            data: seed,
            shuffle: seed,
        }
    }
}

fn one() -> f64 {
    1.0
}

fn default_eval_batch() -> usize {
    1000
}

fn default_log_every() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub arch: Architecture,
    pub tasks: TaskSequence,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub mode: TrainMode,
    pub seeds: Seeds,
    #[serde(default = "one")]
    pub alpha0: f64,
    #[serde(default = "one")]
    pub v0: f64,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Use only the first `n` training samples of each task.
    #[serde(default)]
    pub train_limit: Option<usize>,
    /// Use only the first `n` test samples of each task.
    #[serde(default)]
    pub test_limit: Option<usize>,
}

impl ExperimentConfig {
    /// The appendix MNIST protocol: 1000 batches of 128, RMSProp at 0.01.
    pub fn mnist_protocol(arch: Architecture, tasks: TaskSequence, seed: u64) -> Self {
        Self {
            arch,
            tasks,
            schedule: Schedule::batches(1000),
            batch_size: 128,
            optimizer: OptimizerConfig::rmsprop(0.01),
            mode: TrainMode::LocalGlobal,
            seeds: Seeds::all(seed),
            alpha0: 1.0,
            v0: 1.0,
            eval_batch: default_eval_batch(),
            log_every: default_log_every(),
            train_limit: None,
            test_limit: None,
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            arch: self.arch.clone(),
            input_shape: self.tasks.input_shape(),
            d_out: self.tasks.classes_per_task(),
            seed: self.seeds.model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(config_err("at least one task is required"));
        }
        if matches!(self.arch, Architecture::Cnn { .. }) != (self.tasks.source() == Source::Cifar100) {
            return Err(config_err(
                "convolutional models run on CIFAR tasks, dense models on MNIST tasks",
            ));
        }
        self.validate_training()
    }

    /// Checks that do not depend on the benchmark.
    pub fn validate_training(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch == 0 || self.log_every == 0 {
            return Err(config_err("batch sizes and log interval must be positive"));
        }
        self.schedule.validate()?;
        if !self.alpha0.is_finite() || !self.v0.is_finite() {
            return Err(config_err("initial context values must be finite"));
        }
        self.optimizer.validate()
    }
}

/// Per-task train/test data.
pub trait TaskSource {
    fn tasks(&self) -> &[TaskSpec];
    fn train(&self, index: usize) -> Result<LabeledSet>;
    fn test(&self, index: usize) -> Result<LabeledSet>;
}

/// Derives each task from a shared base dataset on demand.
pub struct TransformedSource {
    base_train: LabeledSet,
    base_test: LabeledSet,
    specs: Vec<TaskSpec>,
}

impl TransformedSource {
    pub fn new(base_train: LabeledSet, base_test: LabeledSet, specs: Vec<TaskSpec>) -> Self {
        Self {
            base_train,
            base_test,
            specs,
        }
    }
}

impl TaskSource for TransformedSource {
    fn tasks(&self) -> &[TaskSpec] {
        &self.specs
    }

    fn train(&self, index: usize) -> Result<LabeledSet> {
        self.specs[index].apply(&self.base_train)
    }

    fn test(&self, index: usize) -> Result<LabeledSet> {
        self.specs[index].apply(&self.base_test)
    }
}

/// Ready-made task data, mostly for tests and synthetic runs.
pub struct InMemorySource {
    specs: Vec<TaskSpec>,
    data: Vec<(LabeledSet, LabeledSet)>,
}

impl InMemorySource {
    pub fn new(specs: Vec<TaskSpec>, data: Vec<(LabeledSet, LabeledSet)>) -> Result<Self> {
        if specs.len() != data.len() {
            return Err(config_err("one train/test pair per task is required"));
        }
        Ok(Self { specs, data })
    }
}

impl TaskSource for InMemorySource {
    fn tasks(&self) -> &[TaskSpec] {
        &self.specs
    }

    fn train(&self, index: usize) -> Result<LabeledSet> {
        Ok(self.data[index].0.clone())
    }

    fn test(&self, index: usize) -> Result<LabeledSet> {
        Ok(self.data[index].1.clone())
    }
}

/// Loads the base dataset for `cfg` from `data_dir`.
pub fn load_source(cfg: &ExperimentConfig, data_dir: &Path) -> Result<TransformedSource> {
    let (mut train, mut test) = match cfg.tasks.source() {
        Source::Mnist => load_mnist(data_dir)?,
        Source::Cifar100 => load_cifar(data_dir)?,
    };
    // class subsets are cut after limiting, so limits apply to the base split
    if let Some(n) = cfg.train_limit {
        if cfg.tasks.source() == Source::Mnist {
            train = train.truncate(n)?;
        }
    }
    if let Some(n) = cfg.test_limit {
        if cfg.tasks.source() == Source::Mnist {
            test = test.truncate(n)?;
        }
    }
    Ok(TransformedSource::new(
        train,
        test,
        cfg.tasks.task_specs(cfg.seeds.data)?,
    ))
}

/// `a[i][j]`: accuracy on task `j` after training task `i`, both in training order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub task_ids: Vec<u32>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(task_ids: Vec<u32>) -> Self {
        let t = task_ids.len();
        Self {
            task_ids,
            rows: vec![vec![None; t]; t],
        }
    }

    pub fn len(&self) -> usize {
        self.task_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.task_ids.is_empty()
    }

    pub fn set(&mut self, i: usize, j: usize, acc: f64) {
        self.rows[i][j] = Some(acc);
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows[i][j]
    }

    pub fn final_row(&self) -> Result<Vec<f64>> {
        let last = self
            .rows
            .last()
            .ok_or_else(|| usage_err("empty accuracy matrix"))?;
        last.iter()
            .map(|a| a.ok_or_else(|| usage_err("final row of the accuracy matrix is incomplete")))
            .collect()
    }

    /// CSV with rows and columns ordered by task id.
    pub fn to_csv(&self) -> String {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&i| self.task_ids[i]);
        let mut out = String::from("after_task");
        for &j in &order {
            write!(out, ",task_{}", self.task_ids[j]).unwrap();
        }
        out.push('\n');
        for &i in &order {
            write!(out, "{}", self.task_ids[i]).unwrap();
            for &j in &order {
                out.push(',');
                if let Some(a) = self.rows[i][j] {
                    write!(out, "{a}").unwrap();
                }
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub forgetting: f64,
    /// Learned values per task; in pretrained mode this includes the shared
    /// bases spread over all tasks.
    pub params_per_task: f64,
    pub context_params: usize,
    pub task_ids: Vec<u32>,
    pub final_row: Vec<f64>,
    pub wall_clock_per_task: Vec<f64>,
}

/// ACC, forgetting and parameter counts from a finished matrix.
pub fn metrics<T: Scalar>(m: &AccuracyMatrix, store: &ContextStore<T>) -> Result<Metrics> {
    let final_row = m.final_row()?;
    let t = final_row.len();
    let acc = final_row.iter().sum::<f64>() / t as f64;
    let mut forgetting = 0.0;
    for (j, &last) in final_row.iter().enumerate().take(t - 1) {
        let peak = (j..t)
            .filter_map(|i| m.get(i, j))
            .fold(f64::NEG_INFINITY, f64::max);
        forgetting += peak - last;
    }
    if t > 1 {
        forgetting /= (t - 1) as f64;
    }
    let context_params = 1 + store.layer_dims().iter().sum::<usize>();
    let shared: usize = store
        .trained_bases()
        .map(|b| b.iter().map(|r| r.len()).sum())
        .unwrap_or(0);
    Ok(Metrics {
        acc,
        forgetting,
        params_per_task: context_params as f64 + shared as f64 / t as f64,
        context_params,
        task_ids: m.task_ids.clone(),
        final_row,
        wall_clock_per_task: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub task: u32,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn runlog_csv(log: &[LogEntry]) -> String {
    let mut out = String::from("task,step,loss,lr\n");
    for e in log {
        writeln!(out, "{},{},{},{}", e.task, e.step, e.loss, e.lr).unwrap();
    }
    out
}

pub struct RunResult<T> {
    pub model: Model<T>,
    pub store: ContextStore<T>,
    pub matrix: AccuracyMatrix,
    pub metrics: Metrics,
    pub log: Vec<LogEntry>,
}

fn to_batch<T: Scalar>(set: &LabeledSet, idx: &[usize]) -> Array2<T> {
    let d = set.images().ncols();
    let mut out = Array2::zeros((idx.len(), d));
    for (mut row, &i) in out.axis_iter_mut(Axis(0)).zip(idx) {
        for (o, &p) in row.iter_mut().zip(set.image(i)) {
            *o = T::of_f32(p);
        }
    }
    out
}

/// Logits of every sample of `set` under task `task_id`'s context.
pub fn task_logits<T: Scalar>(
    model: &Model<T>,
    store: &ContextStore<T>,
    task_id: u32,
    set: &LabeledSet,
    eval_batch: usize,
) -> Result<Array2<T>> {
    let ctx = store.get(task_id)?;
    let mut out = Array2::zeros((set.len(), model.spec().d_out));
    let idx: Vec<usize> = (0..set.len()).collect();
    for (c, chunk) in idx.chunks(eval_batch.max(1)).enumerate() {
        let x = to_batch::<T>(set, chunk);
        let logits = model.logits(x.view(), ctx)?;
        let start = c * eval_batch;
        out.slice_mut(ndarray::s![start..start + chunk.len(), ..])
            .assign(&logits);
    }
    Ok(out)
}

/// Fraction of argmax-correct samples (ties go to the lowest class index).
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    store: &ContextStore<T>,
    task_id: u32,
    set: &LabeledSet,
    eval_batch: usize,
) -> Result<f64> {
    let ctx = store.get(task_id)?;
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(eval_batch.max(1)) {
        let x = to_batch::<T>(set, chunk);
        let logits = model.logits(x.view(), ctx)?;
        correct += predict(logits.view())
            .iter()
            .zip(chunk)
            .filter(|(p, &i)| **p == set.labels()[i])
            .count();
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Trains one task's context from scratch; returns its log entries.
#[allow(clippy::too_many_arguments)]
pub fn train_task<T: Scalar>(
    cfg: &ExperimentConfig,
    model: &mut Model<T>,
    store: &mut ContextStore<T>,
    task_id: u32,
    position: usize,
    data: &LabeledSet,
) -> Result<Vec<LogEntry>> {
    if data.classes() > model.spec().d_out || data.images().ncols() != model.spec().d_in() {
        return Err(config_err(format!(
            "task {task_id} data ({} inputs, {} classes) does not fit the model ({} inputs, {} outputs)",
            data.images().ncols(),
            data.classes(),
            model.spec().d_in(),
            model.spec().d_out
        )));
    }
    let mode = match cfg.mode {
        TrainMode::Pretrained if position > 0 => TrainMode::LocalGlobal,
        m => m,
    };
    let mut ctx = model.new_context(task_id, cfg.alpha0, cfg.v0)?;
    let mut opt = OptimizerState::<T>::new(cfg.optimizer)?;
    let mut rng = RngStream::derive(cfg.seeds.shuffle, Purpose::Shuffle, 0, task_id);
    let n = data.len();
    let bs = cfg.batch_size.min(n);
    let total = cfg.schedule.steps(n, bs);
    let mut log = Vec::new();
    let mut order = random_permutation(n, &mut rng)?;
    let mut cursor = 0;
    for step in 0..total {
        if cursor >= n {
            order = random_permutation(n, &mut rng)?;
            cursor = 0;
        }
        let end = (cursor + bs).min(n);
        let idx = &order[cursor..end];
        cursor = end;
        let x = to_batch::<T>(data, idx);
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
        let lr = if cfg.schedule.cosine {
            cosine_lr(step, total, cfg.optimizer.lr)?
        } else {
            cfg.optimizer.lr
        };
        let loss = train_step(model, &mut ctx, &mut opt, x.view(), &labels, mode, position, lr)?;
        if step % cfg.log_every == 0 || step + 1 == total {
            log.push(LogEntry {
                task: task_id,
                step,
                loss: loss.as_f64(),
                lr,
            });
        }
    }
    store.put(model.fingerprint(), ctx)?;
    if cfg.mode == TrainMode::Pretrained && position == 0 {
        store.set_trained_bases(Some(model.basis_values()));
    }
    Ok(log)
}

/// Trains every task in sequence (or in `order`, a permutation of task
/// indices) and fills the accuracy matrix after each one.
pub fn run_continual<T: Scalar>(
    cfg: &ExperimentConfig,
    source: &dyn TaskSource,
    order: Option<&[usize]>,
) -> Result<RunResult<T>> {
    cfg.validate()?;
    run_sequence(cfg, cfg.model_spec(), source, order)
}

/// As [`run_continual`], with an explicit model spec for sources whose
/// data shape differs from the configured benchmark.
pub fn run_sequence<T: Scalar>(
    cfg: &ExperimentConfig,
    spec: ModelSpec,
    source: &dyn TaskSource,
    order: Option<&[usize]>,
) -> Result<RunResult<T>> {
    run_observed(cfg, spec, source, order, &mut |_, _, _| Ok(()))
}

/// Called after each task with its position, the model and the store.
pub type TaskObserver<'a, T> = dyn FnMut(usize, &Model<T>, &ContextStore<T>) -> Result<()> + 'a;

/// As [`run_sequence`], calling `observe` once each task is trained and
/// evaluated.
pub fn run_observed<T: Scalar>(
    cfg: &ExperimentConfig,
    spec: ModelSpec,
    source: &dyn TaskSource,
    order: Option<&[usize]>,
    observe: &mut TaskObserver<'_, T>,
) -> Result<RunResult<T>> {
    cfg.validate_training()?;
    let specs = source.tasks();
    let default_order: Vec<usize> = (0..specs.len()).collect();
    let order = order.unwrap_or(&default_order);
    let mut seen = vec![false; specs.len()];
    if order.is_empty() || order.iter().any(|&i| i >= specs.len() || std::mem::replace(&mut seen[i], true)) {
        return Err(config_err("task order must list distinct task indices"));
    }
    let mut model = Model::<T>::build(spec)?;
    let mut store = model.new_store();
    let task_ids: Vec<u32> = order.iter().map(|&i| specs[i].task_id).collect();
    let mut matrix = AccuracyMatrix::new(task_ids.clone());
    let mut log = Vec::new();
    let mut wall = Vec::with_capacity(order.len());
    for (pos, &index) in order.iter().enumerate() {
        let started = Instant::now();
        let train = source.train(index)?;
        log.extend(train_task(cfg, &mut model, &mut store, task_ids[pos], pos, &train)?);
        drop(train);
        wall.push(started.elapsed().as_secs_f64());
        for (j, &earlier) in order.iter().enumerate().take(pos + 1) {
            let test = source.test(earlier)?;
            let acc = evaluate(&model, &store, task_ids[j], &test, cfg.eval_batch)?;
            matrix.set(pos, j, acc);
        }
        observe(pos, &model, &store)?;
    }
    let mut m = metrics(&matrix, &store)?;
    m.wall_clock_per_task = wall;
    Ok(RunResult {
        model,
        store,
        matrix,
        metrics: m,
        log,
    })
}

/// Same run twice, once with and once without the shared gain.
pub struct Ablation {
    pub local_global: Metrics,
    pub local_only: Metrics,
}

impl Ablation {
    /// Percentage-point difference, local+global minus local-only.
    pub fn delta_pp(&self) -> f64 {
        100.0 * (self.local_global.acc - self.local_only.acc)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,task,accuracy\n");
        for (name, m) in [("both", &self.local_global), ("local", &self.local_only)] {
            let mut rows: Vec<(u32, f64)> =
                m.task_ids.iter().copied().zip(m.final_row.iter().copied()).collect();
            rows.sort_by_key(|r| r.0);
            for (t, a) in rows {
                writeln!(out, "{name},{t},{a}").unwrap();
            }
        }
        out
    }
}

pub fn ablate_modulation<T: Scalar>(
    cfg: &ExperimentConfig,
    source: &dyn TaskSource,
) -> Result<Ablation> {
    let mut both = cfg.clone();
    both.mode = TrainMode::LocalGlobal;
    let mut local = cfg.clone();
    local.mode = TrainMode::LocalOnly;
    Ok(Ablation {
        local_global: run_continual::<T>(&both, source, None)?.metrics,
        local_only: run_continual::<T>(&local, source, None)?.metrics,
    })
}

/// Shared bases trained on the first task, then frozen.
pub fn run_pretrained<T: Scalar>(
    cfg: &ExperimentConfig,
    source: &dyn TaskSource,
) -> Result<RunResult<T>> {
    let mut cfg = cfg.clone();
    cfg.mode = TrainMode::Pretrained;
    run_continual(&cfg, source, None)
}

pub const MATRIX_FILE: &str = "accuracy_matrix.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const RUNLOG_FILE: &str = "runlog.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.crwn";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

/// Writes every run artifact into `dir`, each one atomically.
/// `resolved` is the fully defaulted configuration that produced the run.
pub fn write_artifacts<T: Scalar>(
    dir: &Path,
    resolved: &impl Serialize,
    run: &RunResult<T>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let resolved = serde_json::to_vec_pretty(resolved).expect("config serializes");
    write_atomic(&dir.join(RESOLVED_CONFIG_FILE), &resolved)?;
    write_atomic(&dir.join(MATRIX_FILE), run.matrix.to_csv().as_bytes())?;
    write_atomic(&dir.join(RUNLOG_FILE), runlog_csv(&run.log).as_bytes())?;
    write_checkpoint(&run.store, &dir.join(CHECKPOINT_FILE))?;
    let metrics = serde_json::to_vec_pretty(&run.metrics).expect("metrics serialize");
    write_atomic(&dir.join(METRICS_FILE), &metrics)?;
    Ok(())
}
