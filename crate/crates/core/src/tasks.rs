//! Task generators: sinusoid regression with an optional one-hot amplitude
//! hint, and synthetic N-way K-shot classification over Gaussian class
//! prototypes with fixed (non-mutually-exclusive) or shuffled labels.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::normals;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    MetaTrain,
    MetaTest,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::MetaTrain => "meta_train",
            Split::MetaTest => "meta_test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Label {
    Real(f64),
    Class(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: Label,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Real(Vec<f64>),
    Classes { labels: Vec<usize>, n_way: usize },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Real(v) => v.len(),
            Targets::Classes { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Network-ready encoding: a column of reals or one-hot rows.
    pub fn encode(&self) -> Tensor {
        match self {
            Targets::Real(v) => Tensor::matrix(v.len(), 1, v.clone()).expect("nonempty targets"),
            Targets::Classes { labels, n_way } => one_hot(labels, *n_way),
        }
    }

    fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Real(v) => Targets::Real(idx.iter().map(|&i| v[i]).collect()),
            Targets::Classes { labels, n_way } => Targets::Classes {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                n_way: *n_way,
            },
        }
    }
}

pub fn one_hot(labels: &[usize], n: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * n];
    for (r, &l) in labels.iter().enumerate() {
        data[r * n + l] = 1.0;
    }
    Tensor::matrix(labels.len(), n, data).expect("nonempty labels")
}

/// Inputs as an `[n, d]` matrix plus their targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Targets,
}

impl Dataset {
    pub fn new(x: Tensor, y: Targets) -> Result<Self> {
        if !x.is_matrix() || x.rows() != y.len() {
            return Err(Error::shape("dataset", format!("{} inputs for {} targets", x.rows(), y.len())));
        }
        if let Targets::Classes { labels, n_way } = &y {
            if let Some(&bad) = labels.iter().find(|&&l| l >= *n_way) {
                return Err(Error::invalid(format!("label {bad} out of range for {n_way}-way task")));
            }
        }
        if !x.is_finite() {
            return Err(Error::NonFinite { op: "dataset" });
        }
        Ok(Dataset { x, y })
    }

    pub fn from_examples(examples: &[Example], n_way: Option<usize>) -> Result<Self> {
        let first = examples.first().ok_or_else(|| Error::invalid("empty dataset"))?;
        let d = first.x.len();
        let mut data = Vec::with_capacity(examples.len() * d);
        for e in examples {
            if e.x.len() != d {
                return Err(Error::shape("dataset", "ragged inputs"));
            }
            data.extend_from_slice(&e.x);
        }
        let y = match n_way {
            None => Targets::Real(
                examples
                    .iter()
                    .map(|e| match e.y {
                        Label::Real(v) => Ok(v),
                        Label::Class(_) => Err(Error::invalid("class label in a regression dataset")),
                    })
                    .collect::<Result<_>>()?,
            ),
            Some(n_way) => Targets::Classes {
                labels: examples
                    .iter()
                    .map(|e| match e.y {
                        Label::Class(c) => Ok(c),
                        Label::Real(_) => Err(Error::invalid("real label in a classification dataset")),
                    })
                    .collect::<Result<_>>()?,
                n_way,
            },
        };
        Dataset::new(Tensor::matrix(examples.len(), d, data)?, y)
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn examples(&self) -> Vec<Example> {
        (0..self.len())
            .map(|r| Example {
                x: (0..self.dim()).map(|c| self.x.get(r, c)).collect(),
                y: match &self.y {
                    Targets::Real(v) => Label::Real(v[r]),
                    Targets::Classes { labels, .. } => Label::Class(labels[r]),
                },
            })
            .collect()
    }

    /// Rows reordered (or subset) by `idx`.
    pub fn select(&self, idx: &[usize]) -> Result<Dataset> {
        if idx.is_empty() {
            return Err(Error::invalid("empty selection"));
        }
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&self.x.data()[i * d..(i + 1) * d]);
        }
        Dataset::new(Tensor::matrix(idx.len(), d, data)?, self.y.select(idx))
    }

    pub fn n_way(&self) -> Option<usize> {
        match self.y {
            Targets::Classes { n_way, .. } => Some(n_way),
            Targets::Real(_) => None,
        }
    }
}

/// Hidden ground truth of a task, kept for diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskMeta {
    Sinusoid { amplitude: f64, hint: Option<usize> },
    Classification { classes: Vec<usize>, n_way: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub split: Split,
    train: Dataset,
    test: Dataset,
    meta: TaskMeta,
}

/// The part of a task a learner is allowed to see.
#[derive(Clone, Copy, Debug)]
pub struct TaskView<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
}

impl Task {
    pub fn new(split: Split, train: Dataset, test: Dataset, meta: TaskMeta) -> Result<Self> {
        if train.dim() != test.dim() || train.n_way() != test.n_way() {
            return Err(Error::shape("task", "train and test sets disagree on layout"));
        }
        Ok(Task { split, train, test, meta })
    }

    pub fn view(&self) -> TaskView<'_> {
        TaskView {
            train: &self.train,
            test: &self.test,
        }
    }

    pub fn meta(&self) -> &TaskMeta {
        &self.meta
    }

    pub fn train(&self) -> &Dataset {
        &self.train
    }

    pub fn test(&self) -> &Dataset {
        &self.test
    }

    /// The same task with a different test set.
    pub fn with_test(&self, test: Dataset) -> Result<Task> {
        Task::new(self.split, self.train.clone(), test, self.meta.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// `x = (u, one-hot amplitude index)`.
    NmeOnehot,
    /// `x = (u)`.
    NoHint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinusoidConfig {
    pub k_train: usize,
    pub k_test: usize,
    pub grid_size: usize,
    pub input: InputMode,
    pub split: Split,
    pub noise_sd: f64,
}

pub const AMPLITUDE_MIN: f64 = 0.1;
pub const AMPLITUDE_MAX: f64 = 4.0;
pub const U_RANGE: f64 = 5.0;

impl Default for SinusoidConfig {
    fn default() -> Self {
        SinusoidConfig {
            k_train: 5,
            k_test: 5,
            grid_size: 20,
            input: InputMode::NmeOnehot,
            split: Split::MetaTrain,
            noise_sd: 0.1,
        }
    }
}

impl SinusoidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 1 || self.k_train < 1 || self.k_test < 1 {
            return Err(Error::invalid("sinusoid grid size and shot counts must be at least 1"));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::invalid("noise scale must be nonnegative"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match self.input {
            InputMode::NmeOnehot => 1 + self.grid_size,
            InputMode::NoHint => 1,
        }
    }

    /// Equally spaced amplitudes from 0.1 to 4.0 inclusive.
    pub fn grid(&self) -> Vec<f64> {
        if self.grid_size == 1 {
            return vec![AMPLITUDE_MIN];
        }
        let step = (AMPLITUDE_MAX - AMPLITUDE_MIN) / (self.grid_size - 1) as f64;
        (0..self.grid_size).map(|i| AMPLITUDE_MIN + step * i as f64).collect()
    }

    /// Inputs for given `u` values under a hint index.
    pub fn inputs(&self, us: &[f64], hint: Option<usize>) -> Tensor {
        let d = self.input_dim();
        let mut data = vec![0.0; us.len() * d];
        for (r, &u) in us.iter().enumerate() {
            data[r * d] = u;
            if let (InputMode::NmeOnehot, Some(h)) = (self.input, hint) {
                data[r * d + 1 + h] = 1.0;
            }
        }
        Tensor::matrix(us.len(), d, data).expect("nonempty inputs")
    }
}

pub fn sample_sinusoid_task(cfg: &SinusoidConfig, rng: &mut impl Rng) -> Result<Task> {
    cfg.validate()?;
    let (amplitude, index) = match cfg.split {
        Split::MetaTrain => {
            let i = rng.random_range(0..cfg.grid_size);
            (cfg.grid()[i], i)
        }
        Split::MetaTest => {
            let a = rng.random_range(AMPLITUDE_MIN..AMPLITUDE_MAX);
            (a, rng.random_range(0..cfg.grid_size))
        }
    };
    let hint = match cfg.input {
        InputMode::NmeOnehot => Some(index),
        InputMode::NoHint => None,
    };
    let mut draw = |k: usize| -> Result<Dataset> {
        let us: Vec<f64> = (0..k).map(|_| rng.random_range(-U_RANGE..U_RANGE)).collect();
        let noise = normals(rng, k);
        let ys = us.iter().zip(&noise).map(|(u, e)| amplitude * u.sin() + cfg.noise_sd * e).collect();
        Dataset::new(cfg.inputs(&us, hint), Targets::Real(ys))
    };
    let train = draw(cfg.k_train)?;
    let test = draw(cfg.k_test)?;
    Task::new(cfg.split, train, test, TaskMeta::Sinusoid { amplitude, hint })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Each class keeps one label in every task.
    Nme,
    /// A fresh label permutation per task.
    Me,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassFamilyConfig {
    pub n_classes: usize,
    pub dim: usize,
    pub sigma: f64,
    pub n_way: usize,
    /// Meta-train classes per label; the rest of each label's classes are
    /// held out for meta-testing.
    pub train_per_label: usize,
    pub mode: LabelMode,
}

impl Default for ClassFamilyConfig {
    fn default() -> Self {
        ClassFamilyConfig {
            n_classes: 40,
            dim: 16,
            sigma: 0.35,
            n_way: 5,
            train_per_label: 6,
            mode: LabelMode::Nme,
        }
    }
}

/// Gaussian class prototypes with a class-to-label assignment and disjoint
/// meta-train / meta-test pools.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassFamily {
    pub config: ClassFamilyConfig,
    pub prototypes: Vec<Vec<f64>>,
    /// Label of each class.
    pub label_of: Vec<usize>,
    /// `pools[split][label]`: the classes eligible for that label.
    train_pools: Vec<Vec<usize>>,
    test_pools: Vec<Vec<usize>>,
}

impl ClassFamily {
    pub fn generate(config: ClassFamilyConfig, rng: &mut impl Rng) -> Result<Self> {
        let c = &config;
        if c.n_way < 1 || c.dim < 1 || !(c.sigma >= 0.0) {
            return Err(Error::invalid("class family needs n_way, dim >= 1 and sigma >= 0"));
        }
        let per_label = c.n_classes / c.n_way;
        if c.train_per_label < 1 || per_label <= c.train_per_label {
            return Err(Error::invalid(format!(
                "{} classes over {} labels leave no meta-test class with {} meta-train classes per label",
                c.n_classes, c.n_way, c.train_per_label
            )));
        }
        let prototypes: Vec<Vec<f64>> = (0..c.n_classes).map(|_| normals(rng, c.dim)).collect();
        let mut order: Vec<usize> = (0..c.n_classes).collect();
        order.shuffle(rng);
        let mut label_of = vec![0; c.n_classes];
        let mut train_pools = vec![Vec::new(); c.n_way];
        let mut test_pools = vec![Vec::new(); c.n_way];
        for (rank, &class) in order.iter().enumerate() {
            let label = rank % c.n_way;
            label_of[class] = label;
            if rank / c.n_way < c.train_per_label {
                train_pools[label].push(class);
            } else {
                test_pools[label].push(class);
            }
        }
        Ok(ClassFamily {
            config,
            prototypes,
            label_of,
            train_pools,
            test_pools,
        })
    }

    pub fn pool(&self, split: Split, label: usize) -> &[usize] {
        match split {
            Split::MetaTrain => &self.train_pools[label],
            Split::MetaTest => &self.test_pools[label],
        }
    }

    pub fn with_mode(&self, mode: LabelMode) -> ClassFamily {
        let mut f = self.clone();
        f.config.mode = mode;
        f
    }
}

pub fn sample_classification_task(
    fam: &ClassFamily,
    k_shot: usize,
    split: Split,
    rng: &mut impl Rng,
) -> Result<Task> {
    if k_shot < 1 {
        return Err(Error::invalid("k_shot must be at least 1"));
    }
    let n = fam.config.n_way;
    let mut classes = Vec::with_capacity(n);
    for slot in 0..n {
        let pool = fam.pool(split, slot);
        if pool.is_empty() {
            return Err(Error::invalid(format!("empty {} pool for label {slot}", split.as_str())));
        }
        classes.push(pool[rng.random_range(0..pool.len())]);
    }
    if fam.config.mode == LabelMode::Me {
        classes.shuffle(rng);
    }
    let d = fam.config.dim;
    let mut draw = || -> Result<Dataset> {
        let mut data = Vec::with_capacity(n * k_shot * d);
        let mut labels = Vec::with_capacity(n * k_shot);
        for (label, &class) in classes.iter().enumerate() {
            for _ in 0..k_shot {
                let noise = normals(rng, d);
                data.extend(fam.prototypes[class].iter().zip(&noise).map(|(p, e)| p + fam.config.sigma * e));
                labels.push(label);
            }
        }
        Dataset::new(Tensor::matrix(n * k_shot, d, data)?, Targets::Classes { labels, n_way: n })
    };
    let train = draw()?;
    let test = draw()?;
    Task::new(split, train, test, TaskMeta::Classification { classes, n_way: n })
}

/// A task distribution.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskSource {
    Sinusoid(SinusoidConfig),
    Classification {
        family: ClassFamily,
        k_shot: usize,
        split: Split,
    },
}

impl TaskSource {
    pub fn sample(&self, rng: &mut impl Rng) -> Result<Task> {
        match self {
            TaskSource::Sinusoid(cfg) => sample_sinusoid_task(cfg, rng),
            TaskSource::Classification { family, k_shot, split } => {
                sample_classification_task(family, *k_shot, *split, rng)
            }
        }
    }

    pub fn split(&self) -> Split {
        match self {
            TaskSource::Sinusoid(cfg) => cfg.split,
            TaskSource::Classification { split, .. } => *split,
        }
    }

    pub fn with_split(&self, split: Split) -> TaskSource {
        match self {
            TaskSource::Sinusoid(cfg) => TaskSource::Sinusoid(SinusoidConfig { split, ..cfg.clone() }),
            TaskSource::Classification { family, k_shot, .. } => TaskSource::Classification {
                family: family.clone(),
                k_shot: *k_shot,
                split,
            },
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            TaskSource::Sinusoid(cfg) => cfg.input_dim(),
            TaskSource::Classification { family, .. } => family.config.dim,
        }
    }

    /// Number of classes, or `None` for regression.
    pub fn n_way(&self) -> Option<usize> {
        match self {
            TaskSource::Sinusoid(_) => None,
            TaskSource::Classification { family, .. } => Some(family.config.n_way),
        }
    }

    pub fn shots(&self) -> usize {
        match self {
            TaskSource::Sinusoid(cfg) => cfg.k_train,
            TaskSource::Classification { k_shot, .. } => *k_shot,
        }
    }
}

pub fn meta_batch(source: &TaskSource, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<Task>> {
    if batch_size < 1 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    (0..batch_size).map(|_| source.sample(rng)).collect()
}

/// One JSON line per task. `x` and `y` list the training rows followed by
/// the test rows; `n_train` marks the boundary.
#[derive(Debug, Serialize, Deserialize)]
struct TaskRecord {
    split: Split,
    x: Vec<Vec<f64>>,
    y: Vec<serde_json::Value>,
    n_train: usize,
    meta: TaskMeta,
}

impl TaskRecord {
    fn from_task(task: &Task) -> TaskRecord {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for ds in [&task.train, &task.test] {
            for e in ds.examples() {
                x.push(e.x);
                y.push(match e.y {
                    Label::Real(v) => serde_json::json!(v),
                    Label::Class(c) => serde_json::json!(c),
                });
            }
        }
        TaskRecord {
            split: task.split,
            x,
            y,
            n_train: task.train.len(),
            meta: task.meta.clone(),
        }
    }

    fn into_task(self) -> Result<Task> {
        if self.x.len() != self.y.len() || self.n_train == 0 || self.n_train >= self.x.len() {
            return Err(Error::Format("task record has inconsistent row counts".into()));
        }
        let n_way = match &self.meta {
            TaskMeta::Classification { n_way, .. } => Some(*n_way),
            TaskMeta::Sinusoid { .. } => None,
        };
        let mut examples = Vec::with_capacity(self.x.len());
        for (x, y) in self.x.into_iter().zip(self.y) {
            let y = match n_way {
                Some(_) => Label::Class(
                    y.as_u64()
                        .ok_or_else(|| Error::Format(format!("class label expected, got {y}")))? as usize,
                ),
                None => Label::Real(y.as_f64().ok_or_else(|| Error::Format(format!("number expected, got {y}")))?),
            };
            examples.push(Example { x, y });
        }
        let train = Dataset::from_examples(&examples[..self.n_train], n_way)?;
        let test = Dataset::from_examples(&examples[self.n_train..], n_way)?;
        Task::new(self.split, train, test, self.meta)
    }
}

pub fn write_jsonl(tasks: &[Task], mut out: impl Write) -> Result<()> {
    for t in tasks {
        serde_json::to_writer(&mut out, &TaskRecord::from_task(t))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(input: impl BufRead) -> Result<Vec<Task>> {
    let mut tasks = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TaskRecord =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        tasks.push(record.into_task()?);
    }
    Ok(tasks)
}
