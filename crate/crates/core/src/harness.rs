//! Experiment runner: configuration files, seeded training runs, result
//! tables and plot data.
//!
//! A config is plain text with one `dotted.key = value` per line and `#`
//! comments:
//!
//! ```text
//! name = nme_sinusoid
//! seeds = 0, 1, 2
//! task.family = sinusoid
//! task.shots = 5
//! learner.variant = mr_cnp_w
//! learner.beta = 1e-4
//! train.steps = 30000
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{beta_sweep, diagnose, mean_sd, DiagnosticOptions, MemorizationReport, SweepRow};
use crate::error::{Error, Result};
use crate::learners::{evaluate, EvalReport, Learner, LearnerConfig, LearnerSpec, OutputKind, Placement, Variant, Widths};
use crate::nets::WeightCheckpoint;
use crate::rng::stream;
use crate::tasks::{
    meta_batch, ClassFamily, ClassFamilyConfig, InputMode, LabelMode, SinusoidConfig, Split, TaskSource,
};

/// Task family of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskConfig {
    Sinusoid(SinusoidConfig),
    Classification {
        family: ClassFamilyConfig,
        k_shot: usize,
        /// Seed of the class prototypes, shared by every run.
        family_seed: u64,
    },
}

impl TaskConfig {
    pub fn name(&self) -> &'static str {
        match self {
            TaskConfig::Sinusoid(c) if c.input == InputMode::NoHint => "sinusoid_no_hint",
            TaskConfig::Sinusoid(_) => "sinusoid",
            TaskConfig::Classification { family, .. } => match family.mode {
                LabelMode::Nme => "classification",
                LabelMode::Me => "classification_me",
            },
        }
    }

    pub fn source(&self, split: Split) -> Result<TaskSource> {
        Ok(match self {
            TaskConfig::Sinusoid(c) => {
                c.validate()?;
                TaskSource::Sinusoid(SinusoidConfig { split, ..c.clone() })
            }
            TaskConfig::Classification {
                family,
                k_shot,
                family_seed,
            } => TaskSource::Classification {
                family: ClassFamily::generate(family.clone(), &mut stream(*family_seed, "family"))?,
                k_shot: *k_shot,
                split,
            },
        })
    }

    pub fn output(&self) -> OutputKind {
        match self {
            TaskConfig::Sinusoid(_) => OutputKind::Regression,
            TaskConfig::Classification { family, .. } => OutputKind::Classes(family.n_way),
        }
    }

    pub fn shots(&self) -> usize {
        match self {
            TaskConfig::Sinusoid(c) => c.k_train,
            TaskConfig::Classification { k_shot, .. } => *k_shot,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub task: TaskConfig,
    pub learner: LearnerConfig,
    /// Outer steps per run.
    pub steps: usize,
    /// Meta-test tasks scored per run.
    pub eval_tasks: usize,
    pub diagnostics: DiagnosticOptions,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    /// Write every `log_every`-th step to the JSON log; 0 disables logging.
    pub log_every: usize,
    /// With `false`, `wall_time_s` is written as 0 so result files are
    /// byte-reproducible.
    pub record_wall_time: bool,
}

/// Parsed `key = value` lines with their line numbers.
struct Entries {
    map: HashMap<String, (usize, String)>,
}

impl Entries {
    fn parse(text: &str) -> Result<Entries> {
        let mut map = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                message: format!("expected `key = value`, got `{content}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() {
                return Err(Error::Config {
                    line,
                    message: "empty key or value".into(),
                });
            }
            if let Some((first, _)) = map.insert(k.to_string(), (line, v.to_string())) {
                return Err(Error::Config {
                    line,
                    message: format!("duplicate key `{k}` (first set on line {first})"),
                });
            }
        }
        Ok(Entries { map })
    }

    fn raw(&mut self, key: &str) -> Option<(usize, String)> {
        self.map.remove(key)
    }

    fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|e| Error::Config {
                line,
                message: format!("{key}: cannot parse `{v}`: {e}"),
            }),
        }
    }

    fn or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn choice<T>(&mut self, key: &str, options: &[(&str, T)]) -> Result<Option<T>>
    where
        T: Copy,
    {
        match self.raw(key) {
            None => Ok(None),
            Some((line, v)) => options.iter().find(|(n, _)| *n == v).map(|(_, t)| Some(*t)).ok_or_else(|| {
                let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
                Error::Config {
                    line,
                    message: format!("{key}: expected one of {}, got `{v}`", names.join(", ")),
                }
            }),
        }
    }

    fn required<T>(&mut self, key: &str, value: Option<T>) -> Result<T> {
        value.ok_or_else(|| Error::Config {
            line: 0,
            message: format!("missing required key `{key}`"),
        })
    }

    fn finish(self) -> Result<()> {
        let mut left: Vec<_> = self.map.into_iter().collect();
        left.sort_by_key(|(_, (line, _))| *line);
        match left.first() {
            None => Ok(()),
            Some((k, (line, _))) => Err(Error::Config {
                line: *line,
                message: format!("unknown key `{k}`"),
            }),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut e = Entries::parse(text)?;
        let name: Option<String> = e.get("name")?;
        let name = e.required("name", name)?;

        let family = e.choice("task.family", &[("sinusoid", 0u8), ("classification", 1u8)])?;
        let family = e.required("task.family", family)?;
        let task = if family == 0 {
            let d = SinusoidConfig::default();
            let k_train = e.or("task.shots", d.k_train)?;
            TaskConfig::Sinusoid(SinusoidConfig {
                k_train,
                k_test: e.or("task.k_test", k_train)?,
                grid_size: e.or("task.grid_size", d.grid_size)?,
                input: e
                    .choice("task.input", &[("nme_onehot", InputMode::NmeOnehot), ("no_hint", InputMode::NoHint)])?
                    .unwrap_or(d.input),
                split: Split::MetaTrain,
                noise_sd: e.or("task.noise_sd", d.noise_sd)?,
            })
        } else {
            let d = ClassFamilyConfig::default();
            TaskConfig::Classification {
                family: ClassFamilyConfig {
                    n_classes: e.or("task.classes", d.n_classes)?,
                    dim: e.or("task.dim", d.dim)?,
                    sigma: e.or("task.sigma", d.sigma)?,
                    n_way: e.or("task.n_way", d.n_way)?,
                    train_per_label: e.or("task.train_per_label", d.train_per_label)?,
                    mode: e.choice("task.labels", &[("nme", LabelMode::Nme), ("me", LabelMode::Me)])?.unwrap_or(d.mode),
                },
                k_shot: e.or("task.shots", 1)?,
                family_seed: e.or("task.family_seed", 0)?,
            }
        };

        let variant = match e.raw("learner.variant") {
            None => e.required("learner.variant", None)?,
            Some((line, v)) => Variant::parse(&v).map_err(|err| Error::Config {
                line,
                message: err.to_string(),
            })?,
        };
        let widths = match task {
            TaskConfig::Sinusoid(_) => Widths::sinusoid(),
            TaskConfig::Classification { .. } => Widths::classification(),
        };
        let d = LearnerConfig::new(variant, widths);
        let learner = LearnerConfig {
            variant,
            beta: e.or("learner.beta", d.beta)?,
            alpha: e.or("learner.alpha", d.alpha)?,
            inner_steps_train: e.or("learner.inner_steps_train", d.inner_steps_train)?,
            inner_steps_test: e.or("learner.inner_steps_test", d.inner_steps_test)?,
            outer_lr: e.or("learner.outer_lr", d.outer_lr)?,
            meta_batch: e.or("learner.meta_batch", d.meta_batch)?,
            samples: e.or("learner.samples", d.samples)?,
            placement: e
                .choice(
                    "learner.placement",
                    &[("encoder_only", Placement::EncoderOnly), ("all_weights", Placement::AllWeights)],
                )?
                .unwrap_or(d.placement),
            weight_decay: e.or("learner.weight_decay", d.weight_decay)?,
            widths: Widths {
                encoder: e.or("learner.width.encoder", widths.encoder)?,
                hidden: e.or("learner.width.hidden", widths.hidden)?,
                feature: e.or("learner.width.feature", widths.feature)?,
                decoder: e.or("learner.width.decoder", widths.decoder)?,
                bottleneck: e.or("learner.width.bottleneck", widths.bottleneck)?,
            },
            rho_init: e.or("learner.rho_init", d.rho_init)?,
            pin_sigma: e.or("learner.pin_sigma", d.pin_sigma)?,
        };

        let default_steps = match task {
            TaskConfig::Sinusoid(_) => 30_000,
            TaskConfig::Classification { .. } => 20_000,
        };
        let seeds = match e.raw("seeds") {
            None => vec![0],
            Some((line, v)) => v
                .split(',')
                .map(|s| s.trim().parse::<u64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|err| Error::Config {
                    line,
                    message: format!("seeds: {err}"),
                })?,
        };
        let dd = DiagnosticOptions::default();
        let cfg = ExperimentConfig {
            output: e.or("output", PathBuf::from("results").join(&name))?,
            name,
            task,
            learner,
            steps: e.or("train.steps", default_steps)?,
            eval_tasks: e.or("eval.tasks", 100)?,
            diagnostics: DiagnosticOptions {
                tasks: e.or("diag.tasks", dd.tasks)?,
                pairs: e.or("diag.pairs", dd.pairs)?,
                queries: e.or("diag.queries", dd.queries)?,
            },
            seeds,
            log_every: e.or("train.log_every", 1)?,
            record_wall_time: e.or("results.wall_time", true)?,
        };
        e.finish()?;
        cfg.validate().map_err(|err| Error::Config {
            line: 0,
            message: err.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.learner.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        if self.eval_tasks < 1 {
            return Err(Error::invalid("eval.tasks must be at least 1"));
        }
        let d = &self.diagnostics;
        if d.tasks < 1 || d.pairs < 1 || d.queries < 1 {
            return Err(Error::invalid("diagnostic task, pair and query counts must be at least 1"));
        }
        match &self.task {
            TaskConfig::Sinusoid(c) => c.validate(),
            TaskConfig::Classification { family, .. } => ClassFamily::generate(family.clone(), &mut stream(0, "check")).map(|_| ()),
        }
    }

    /// File stem of one run's artifacts.
    pub fn run_stem(&self, seed: u64) -> String {
        format!("{}_beta{:e}_seed{seed}", self.learner.variant.name(), self.learner.beta)
    }
}

/// One line of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub seed: u64,
    pub method: String,
    pub task_family: String,
    pub shots: usize,
    pub beta: f64,
    pub test_metric: f64,
    pub test_metric_se: f64,
    pub pre_update_metric: f64,
    pub d_swap_gap: f64,
    pub kl_final: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Serialize)]
struct LogLine<'a> {
    step: usize,
    nll: f64,
    kl: f64,
    total: f64,
    grad_norms: &'a BTreeMap<String, f64>,
}

/// Spec stored with harness checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub experiment: ExperimentConfig,
    pub seed: u64,
    pub learner: LearnerSpec,
}

pub type RunCheckpoint = WeightCheckpoint<RunSpec>;

pub fn save_checkpoint(path: &Path, learner: &Learner, experiment: &ExperimentConfig, seed: u64) -> Result<()> {
    let ck = learner.checkpoint();
    let run = RunCheckpoint {
        spec: RunSpec {
            experiment: experiment.clone(),
            seed,
            learner: ck.spec,
        },
        theta_mu: ck.theta_mu,
        rho: ck.rho,
        theta_tilde: ck.theta_tilde,
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &run)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Learner, RunSpec)> {
    let run: RunCheckpoint = serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?;
    let learner = Learner::from_checkpoint(&WeightCheckpoint {
        spec: run.spec.learner.clone(),
        theta_mu: run.theta_mu,
        rho: run.rho,
        theta_tilde: run.theta_tilde,
    })?;
    Ok((learner, run.spec))
}

pub struct RunOutcome {
    pub row: ResultRow,
    pub learner: Learner,
    pub eval: EvalReport,
    pub memorization: MemorizationReport,
}

/// Trains, evaluates and diagnoses one seed. With `out`, writes the step
/// log, checkpoint and memorization report there.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let train_src = cfg.task.source(Split::MetaTrain)?;
    let test_src = train_src.with_split(Split::MetaTest);
    let mut learner = Learner::new(cfg.learner.clone(), train_src.input_dim(), cfg.task.output(), &mut stream(seed, "init"))?;
    let stem = cfg.run_stem(seed);
    let mut log = match out {
        Some(dir) if cfg.log_every > 0 => Some(BufWriter::new(File::create(dir.join(format!("{stem}.log.jsonl")))?)),
        _ => None,
    };
    let mut task_rng = stream(seed, "train_tasks");
    let mut noise_rng = stream(seed, "train_noise");
    let mut last_kl = 0.0;
    for step in 0..cfg.steps {
        let tasks = meta_batch(&train_src, cfg.learner.meta_batch, &mut task_rng)?;
        let views: Vec<_> = tasks.iter().map(|t| t.view()).collect();
        let report = match learner.meta_train_step(&views, &mut noise_rng) {
            Ok(r) => r,
            Err(e) => {
                if let Some(w) = log.as_mut() {
                    w.flush()?;
                }
                return Err(e);
            }
        };
        last_kl = report.kl;
        if let Some(w) = log.as_mut() {
            if step % cfg.log_every == 0 {
                let line = LogLine {
                    step: report.step,
                    nll: report.nll,
                    kl: report.kl,
                    total: report.total,
                    grad_norms: &report.grad_norms,
                };
                serde_json::to_writer(&mut *w, &line)?;
                w.write_all(b"\n")?;
            }
        }
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    let samples = cfg.learner.samples;
    let eval = evaluate(&learner, &test_src, cfg.eval_tasks, samples, &mut stream(seed, "eval"))?;
    let memorization = diagnose(&learner, &train_src, &cfg.diagnostics, &mut stream(seed, "diagnose"))?;
    let kl_final = if cfg.learner.variant.regularizes_weights() { learner.weight_kl()? } else { last_kl };
    let row = ResultRow {
        seed,
        method: cfg.learner.variant.name().to_string(),
        task_family: cfg.task.name().to_string(),
        shots: cfg.task.shots(),
        beta: cfg.learner.beta,
        test_metric: eval.mean,
        test_metric_se: eval.se,
        pre_update_metric: memorization.pre_update_metric,
        d_swap_gap: memorization.d_swap_gap,
        kl_final,
        wall_time_s: if cfg.record_wall_time { start.elapsed().as_secs_f64() } else { 0.0 },
    };
    if let Some(dir) = out {
        save_checkpoint(&dir.join(format!("{stem}.checkpoint.json")), &learner, cfg, seed)?;
        fs::write(dir.join(format!("{stem}.memorization.json")), serde_json::to_string_pretty(&memorization)?)?;
    }
    Ok(RunOutcome {
        row,
        learner,
        eval,
        memorization,
    })
}

/// A run that stopped on a training fault.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fault {
    pub seed: u64,
    pub method: String,
    pub beta: f64,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub rows: Vec<ResultRow>,
    pub faults: Vec<Fault>,
}

fn fault_row(cfg: &ExperimentConfig, seed: u64) -> ResultRow {
    ResultRow {
        seed,
        method: cfg.learner.variant.name().to_string(),
        task_family: cfg.task.name().to_string(),
        shots: cfg.task.shots(),
        beta: cfg.learner.beta,
        test_metric: f64::NAN,
        test_metric_se: f64::NAN,
        pre_update_metric: f64::NAN,
        d_swap_gap: f64::NAN,
        kl_final: f64::NAN,
        wall_time_s: 0.0,
    }
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    r.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>().map_err(csv_error)
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

fn write_faults(dir: &Path, faults: &[Fault]) -> Result<()> {
    if faults.is_empty() {
        return Ok(());
    }
    let mut w = BufWriter::new(File::create(dir.join("faults.jsonl"))?);
    for f in faults {
        serde_json::to_writer(&mut w, f)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every seed of `cfg` into `cfg.output`. A seed that hits a training
/// fault gets a row of NaN metrics and an entry in `faults.jsonl`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output)?;
    let mut rows = Vec::new();
    let mut faults = Vec::new();
    for &seed in &cfg.seeds {
        match run_seed(cfg, seed, Some(&cfg.output)) {
            Ok(o) => rows.push(o.row),
            Err(e @ Error::TrainingFault { .. }) => {
                rows.push(fault_row(cfg, seed));
                faults.push(Fault {
                    seed,
                    method: cfg.learner.variant.name().to_string(),
                    beta: cfg.learner.beta,
                    message: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    write_results(&cfg.output.join("results.csv"), &rows)?;
    write_faults(&cfg.output, &faults)?;
    Ok(RunSummary { rows, faults })
}

#[derive(Debug, Serialize, Deserialize)]
struct SweepCsvRow {
    beta: f64,
    mean_metric: f64,
    sd_metric: f64,
    mean_pre_update: f64,
}

/// β sweep over `betas` with every seed of `cfg`. Writes `beta_sweep.csv`
/// and the per-run rows to `results.csv` in `cfg.output`.
pub fn sweep(cfg: &ExperimentConfig, betas: &[f64]) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let rows = beta_sweep(cfg, betas)?;
    fs::create_dir_all(&cfg.output)?;
    let mut w = csv::Writer::from_path(cfg.output.join("beta_sweep.csv")).map_err(csv_error)?;
    for r in &rows {
        w.serialize(SweepCsvRow {
            beta: r.beta,
            mean_metric: r.mean_metric,
            sd_metric: r.sd_metric,
            mean_pre_update: r.mean_pre_update,
        })
        .map_err(csv_error)?;
    }
    w.flush()?;
    let all: Vec<ResultRow> = rows.iter().flat_map(|r| r.runs.iter().cloned()).collect();
    write_results(&cfg.output.join("results.csv"), &all)?;
    Ok(rows)
}

/// Mean and sample standard deviation of a metric over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
}

impl Summary {
    pub fn of(v: &[f64]) -> Summary {
        let (mean, sd) = mean_sd(v);
        Summary { n: v.len(), mean, sd }
    }
}

/// Per-figure plot data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub yerr: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportGroup {
    pub method: String,
    pub task_family: String,
    pub shots: usize,
    pub beta: f64,
    pub test_metric: Summary,
    pub pre_update_metric: Summary,
    pub d_swap_gap: Summary,
    pub faulted: usize,
}

/// Groups the rows of `results.csv` by method, family, shots and β.
pub fn summarize_rows(rows: &[ResultRow]) -> Vec<ReportGroup> {
    let mut groups: BTreeMap<(String, usize, String, u64), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.task_family.clone(), r.shots, r.method.clone(), r.beta.to_bits()))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((task_family, shots, method, beta), rs)| {
            let ok: Vec<&&ResultRow> = rs.iter().filter(|r| r.test_metric.is_finite()).collect();
            let col = |f: fn(&ResultRow) -> f64| Summary::of(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
            ReportGroup {
                method,
                task_family,
                shots,
                beta: f64::from_bits(beta),
                test_metric: col(|r| r.test_metric),
                pre_update_metric: col(|r| r.pre_update_metric),
                d_swap_gap: col(|r| r.d_swap_gap),
                faulted: rs.len() - ok.len(),
            }
        })
        .collect()
}

/// Reads `dir/results.csv`, writes `dir/plots.json` and returns the
/// mean (sd) table.
pub fn report(dir: &Path) -> Result<String> {
    let path = dir.join("results.csv");
    if !path.is_file() {
        return Err(Error::Format(format!("no results.csv in {}", dir.display())));
    }
    let rows = read_results(&path)?;
    if rows.is_empty() {
        return Err(Error::Format(format!("{} has no rows", path.display())));
    }
    let groups = summarize_rows(&rows);
    let mut text = format!(
        "{:<10} {:<18} {:>5} {:>8} {:>5}  {:<20} {:<20} {:<20}\n",
        "method", "task", "shots", "beta", "runs", "test metric", "pre-update", "swap gap"
    );
    let ms = |s: &Summary| format!("{:.4} ({:.4})", s.mean, s.sd);
    let mut figures: BTreeMap<String, Series> = BTreeMap::new();
    for g in &groups {
        text.push_str(&format!(
            "{:<10} {:<18} {:>5} {:>8.0e} {:>5}  {:<20} {:<20} {:<20}",
            g.method,
            g.task_family,
            g.shots,
            g.beta,
            g.test_metric.n,
            ms(&g.test_metric),
            ms(&g.pre_update_metric),
            ms(&g.d_swap_gap),
        ));
        if g.faulted > 0 {
            text.push_str(&format!("  [{} faulted]", g.faulted));
        }
        text.push('\n');
        if g.test_metric.n == 0 {
            continue;
        }
        for (metric, s) in [
            ("test_metric", g.test_metric),
            ("pre_update_metric", g.pre_update_metric),
            ("d_swap_gap", g.d_swap_gap),
        ] {
            let f = figures
                .entry(format!("{metric}_vs_beta/{}/k{}/{}", g.task_family, g.shots, g.method))
                .or_default();
            f.x.push(g.beta);
            f.y.push(s.mean);
            f.yerr.push(s.sd);
        }
    }
    fs::write(dir.join("plots.json"), serde_json::to_string_pretty(&figures)?)?;
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "name = t\ntask.family = sinusoid\nlearner.variant = cnp\n";

    #[test]
    fn minimal_config_uses_defaults() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.steps, 30_000);
        assert_eq!(c.seeds, vec![0]);
        assert_eq!(c.learner, LearnerConfig::sinusoid(Variant::Cnp));
        assert_eq!(c.task, TaskConfig::Sinusoid(SinusoidConfig::default()));
        assert_eq!(c.output, PathBuf::from("results/t"));
        assert_eq!(c.diagnostics, DiagnosticOptions::default());
    }

    #[test]
    fn full_config_round_trips_every_key() {
        let text = "\
# classification run
name = c
seeds = 3, 4
output = /tmp/x
task.family = classification
task.shots = 2
task.classes = 30
task.dim = 8
task.sigma = 0.2
task.n_way = 3
task.train_per_label = 4
task.labels = me
task.family_seed = 9
learner.variant = mr_maml_w   # weights
learner.beta = 1e-6
learner.alpha = 0.1
learner.inner_steps_train = 3
learner.inner_steps_test = 7
learner.outer_lr = 0.002
learner.meta_batch = 4
learner.samples = 2
learner.placement = all_weights
learner.weight_decay = 0.5
learner.width.encoder = 7
learner.width.hidden = 6
learner.width.feature = 5
learner.width.decoder = 4
learner.width.bottleneck = 3
learner.rho_init = -4
learner.pin_sigma = true
train.steps = 11
train.log_every = 2
eval.tasks = 12
diag.tasks = 13
diag.pairs = 14
diag.queries = 15
results.wall_time = false
";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.seeds, vec![3, 4]);
        assert_eq!(
            c.task,
            TaskConfig::Classification {
                family: ClassFamilyConfig {
                    n_classes: 30,
                    dim: 8,
                    sigma: 0.2,
                    n_way: 3,
                    train_per_label: 4,
                    mode: LabelMode::Me,
                },
                k_shot: 2,
                family_seed: 9,
            }
        );
        let l = &c.learner;
        assert_eq!((l.variant, l.beta, l.alpha), (Variant::MrMamlW, 1e-6, 0.1));
        assert_eq!((l.inner_steps_train, l.inner_steps_test, l.meta_batch, l.samples), (3, 7, 4, 2));
        assert_eq!((l.outer_lr, l.weight_decay, l.rho_init, l.pin_sigma), (0.002, 0.5, -4.0, true));
        assert_eq!(l.placement, Placement::AllWeights);
        assert_eq!(l.widths, Widths { encoder: 7, hidden: 6, feature: 5, decoder: 4, bottleneck: 3 });
        assert_eq!((c.steps, c.log_every, c.eval_tasks), (11, 2, 12));
        assert_eq!(c.diagnostics, DiagnosticOptions { tasks: 13, pairs: 14, queries: 15 });
        assert!(!c.record_wall_time);
        assert_eq!(c.output, PathBuf::from("/tmp/x"));
    }

    fn line_of(text: &str) -> usize {
        match ExperimentConfig::parse(text) {
            Err(Error::Config { line, .. }) => line,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn config_errors_carry_line_numbers() {
        assert_eq!(line_of(&format!("{MINIMAL}learner.beta = lots\n")), 4);
        assert_eq!(line_of(&format!("{MINIMAL}\n\nbogus.key = 1\n")), 6);
        assert_eq!(line_of(&format!("{MINIMAL}name = again\n")), 4);
        assert_eq!(line_of("name = t\nno equals sign\n"), 2);
        assert_eq!(line_of("name = t\ntask.family = sinusoid\nlearner.variant = reptile\n"), 3);
        assert_eq!(line_of("name = t\ntask.family = images\n"), 2);
        assert_eq!(line_of("name = t\ntask.family = sinusoid\n"), 0);
        assert_eq!(line_of(&format!("{MINIMAL}learner.alpha = 0\n").replace("cnp", "maml")), 0);
        assert_eq!(line_of(&format!("{MINIMAL}seeds = 1, x\n")), 4);
    }

    fn row(method: &str, beta: f64, metric: f64) -> ResultRow {
        ResultRow {
            seed: 0,
            method: method.into(),
            task_family: "sinusoid".into(),
            shots: 5,
            beta,
            test_metric: metric,
            test_metric_se: 0.0,
            pre_update_metric: 1.0,
            d_swap_gap: 0.5,
            kl_final: 0.0,
            wall_time_s: 0.0,
        }
    }

    #[test]
    fn summaries_use_the_two_pass_sample_sd() {
        let v = [0.11, 0.13, 0.08, 0.12, 0.1];
        let rows: Vec<ResultRow> = v.iter().map(|&m| row("mr_cnp_w", 1e-4, m)).collect();
        let g = summarize_rows(&rows);
        assert_eq!(g.len(), 1);
        let mean = v.iter().sum::<f64>() / 5.0;
        let mut ss = 0.0;
        for x in v {
            ss += (x - mean) * (x - mean);
        }
        let sd = (ss / 4.0).sqrt();
        assert!((g[0].test_metric.mean - mean).abs() < 1e-12);
        assert!((g[0].test_metric.sd - sd).abs() < 1e-12);
        assert_eq!(g[0].test_metric.n, 5);
    }

    #[test]
    fn groups_split_by_method_and_beta_and_skip_faults() {
        let rows = vec![
            row("cnp", 0.0, 0.9),
            row("mr_cnp_w", 1e-4, 0.1),
            row("mr_cnp_w", 1e-2, 0.2),
            row("mr_cnp_w", 1e-2, f64::NAN),
        ];
        let g = summarize_rows(&rows);
        assert_eq!(g.len(), 3);
        let last = g.iter().find(|g| g.beta == 1e-2).unwrap();
        assert_eq!((last.test_metric.n, last.faulted), (1, 1));
    }

    #[test]
    fn report_needs_results() {
        let dir = tempfile::tempdir().unwrap();
        assert!(report(dir.path()).is_err());
    }

    #[test]
    fn report_writes_table_and_plot_data() {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<ResultRow> = (0..5).map(|i| row("mr_cnp_w", 1e-4, 0.1 + 0.01 * i as f64)).collect();
        write_results(&dir.path().join("results.csv"), &rows).unwrap();
        let text = report(dir.path()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().nth(1).unwrap().contains("0.1200 (0.0158)"), "{text}");
        let plots: BTreeMap<String, Series> =
            serde_json::from_str(&fs::read_to_string(dir.path().join("plots.json")).unwrap()).unwrap();
        let s = &plots["test_metric_vs_beta/sinusoid/k5/mr_cnp_w"];
        assert_eq!(s.x, vec![1e-4]);
        assert_eq!(s.y.len(), 1);
        assert_eq!(s.yerr.len(), 1);
    }

    #[test]
    fn results_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        let rows = vec![row("cnp", 0.0, 0.123456789012345), row("maml", 1e-8, 0.5)];
        write_results(&path, &rows).unwrap();
        assert_eq!(read_results(&path).unwrap(), rows);
        let header = fs::read_to_string(&path).unwrap();
        assert!(header.starts_with(
            "seed,method,task_family,shots,beta,test_metric,test_metric_se,pre_update_metric,d_swap_gap,kl_final,wall_time_s\n"
        ));
    }
}
