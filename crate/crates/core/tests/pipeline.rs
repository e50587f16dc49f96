use std::fs;
use std::path::Path;

use metareg::harness::{load_checkpoint, read_results, report, run, run_seed, sweep, ExperimentConfig};
use metareg::learners::evaluate;
use metareg::rng::stream;
use metareg::tasks::Split;

fn config(dir: &Path, variant: &str, extra: &str) -> ExperimentConfig {
    let text = format!(
        "name = tiny
output = {}
seeds = 7
task.family = sinusoid
learner.variant = {variant}
learner.width.encoder = 10
learner.width.hidden = 8
learner.width.feature = 8
learner.width.decoder = 8
learner.width.bottleneck = 3
learner.meta_batch = 3
learner.samples = 2
learner.inner_steps_test = 3
train.steps = 12
eval.tasks = 6
diag.tasks = 4
diag.pairs = 3
diag.queries = 5
results.wall_time = false
{extra}
",
        dir.display()
    );
    ExperimentConfig::parse(&text).unwrap()
}

#[test]
fn one_seed_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "mr_maml_w", "learner.beta = 1e-3");
    let summary = run(&cfg).unwrap();
    assert!(summary.faults.is_empty());
    let csv = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);

    let stem = cfg.run_stem(7);
    let log = fs::read_to_string(dir.path().join(format!("{stem}.log.jsonl"))).unwrap();
    assert_eq!(log.lines().count(), 12);
    for (i, line) in log.lines().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys.len(), 5);
        for k in ["step", "nll", "kl", "total", "grad_norms"] {
            assert!(keys.contains(&k), "{k} missing from {line}");
        }
        assert_eq!(v["step"], i);
    }
    let mem: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join(format!("{stem}.memorization.json"))).unwrap())
            .unwrap();
    assert!(mem["d_swap_gap"].as_f64().unwrap() >= 0.0);

    let (learner, spec) = load_checkpoint(&dir.path().join(format!("{stem}.checkpoint.json"))).unwrap();
    assert_eq!(spec.seed, 7);
    assert_eq!(spec.experiment, cfg);
    assert_eq!(learner.step(), 12);
    let row = &summary.rows[0];
    assert!((row.kl_final - learner.weight_kl().unwrap()).abs() == 0.0);

    // The checkpoint reproduces the run's meta-test score.
    let src = spec.experiment.task.source(Split::MetaTest).unwrap();
    let again = evaluate(&learner, &src, cfg.eval_tasks, cfg.learner.samples, &mut stream(7, "eval")).unwrap();
    assert_eq!(again.mean, row.test_metric);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for v in ["cnp", "mr_cnp_a"] {
        run(&config(a.path(), v, "")).unwrap();
        run(&config(b.path(), v, "")).unwrap();
        let ra = fs::read(a.path().join("results.csv")).unwrap();
        let rb = fs::read(b.path().join("results.csv")).unwrap();
        assert_eq!(ra, rb);
    }
}

#[test]
fn standard_error_is_sd_over_root_task_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "maml", "");
    let o = run_seed(&cfg, 7, None).unwrap();
    let n = o.eval.per_task.len() as f64;
    let mean = o.eval.per_task.iter().sum::<f64>() / n;
    let sd = (o.eval.per_task.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((o.row.test_metric_se - sd / n.sqrt()).abs() < 1e-12);
    assert_eq!(o.eval.per_task.len(), cfg.eval_tasks);
}

#[test]
fn training_faults_are_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "maml", "learner.outer_lr = 1e9");
    let summary = run(&cfg).unwrap();
    assert_eq!(summary.faults.len(), 1);
    let rows = read_results(&dir.path().join("results.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].test_metric.is_nan());
    let faults = fs::read_to_string(dir.path().join("faults.jsonl")).unwrap();
    assert!(faults.contains("training fault"));
    assert!(report(dir.path()).unwrap().contains("[1 faulted]"));
}

#[test]
fn sweep_sorts_and_deduplicates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "mr_cnp_w", "");
    let rows = sweep(&cfg, &[1e-2, 1e-6, 1e-2]).unwrap();
    assert_eq!(rows.iter().map(|r| r.beta).collect::<Vec<_>>(), vec![1e-6, 1e-2]);
    let text = fs::read_to_string(dir.path().join("beta_sweep.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("beta,mean_metric,sd_metric,mean_pre_update"));
    assert_eq!(lines.count(), 2);
    let all = read_results(&dir.path().join("results.csv")).unwrap();
    assert_eq!(all.len(), 2);
    assert_eq!(all[0].beta, 1e-6);
    // A run of the same (β, seed) alone gives the same row.
    let mut single = cfg.clone();
    single.learner.beta = 1e-2;
    assert_eq!(run_seed(&single, 7, None).unwrap().row, all[1]);
}

#[test]
fn classification_runs_report_accuracies() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "name = c
output = {}
task.family = classification
task.shots = 1
learner.variant = mr_maml_w
learner.beta = 1e-6
learner.width.encoder = 8
learner.width.hidden = 8
learner.meta_batch = 2
learner.samples = 2
learner.inner_steps_test = 2
train.steps = 5
eval.tasks = 4
diag.tasks = 3
diag.pairs = 2
diag.queries = 5
",
        dir.path().display()
    );
    let cfg = ExperimentConfig::parse(&text).unwrap();
    let summary = run(&cfg).unwrap();
    let r = &summary.rows[0];
    assert_eq!(r.task_family, "classification");
    assert!((0.0..=1.0).contains(&r.test_metric));
    assert!((0.0..=1.0).contains(&r.pre_update_metric));
    assert!((0.0..=1.0).contains(&r.d_swap_gap));
    assert!(r.wall_time_s > 0.0);
}
