use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;
use serde_json::json;

use crowd_cate::experiment::{dataset_hash, run_bench, BenchConfig};
use crowd_cate::metrics::{self, evaluate_with, oracle_predictions, paired_compare, EvaluationSplit, MetricsReport, PairedComparison};
use crowd_cate::model::{fit, Estimator, ModelKind, TrainedModel};
use crowd_cate::scenario::{generate_dataset, manifest_path, read_dataset, write_dataset, Dataset};
use crowd_cate::sim::{build_default_layout, SimConfig, Simulator};
use crowd_cate_serve::{ModelSet, Predictor, ServiceState};

use crate::config::RunConfig;
use crate::manifest::RunRecorder;
use crate::{BenchArgs, CliError, ConfigArgs, EvaluateArgs, GenerateArgs, ServeArgs, TrainArgs};

/// Generation and simulator keys.
const GEN_KEYS: &[&str] = &RunConfig::KEYS.split_at(13).0;
/// Training keys plus the outcome.
const FIT_KEYS: &[&str] = &RunConfig::KEYS.split_at(13).1.split_at(14).0;

fn load_config(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_overrides(&args.set)?;
    Ok(cfg)
}

fn source_name(args: &ConfigArgs) -> String {
    args.config.as_ref().map_or("configuration".into(), |p| p.display().to_string())
}

fn subset(snapshot: BTreeMap<String, String>, keys: &[&str]) -> BTreeMap<String, String> {
    snapshot.into_iter().filter(|(k, _)| keys.contains(&k.as_str())).collect()
}

fn simulator(config: SimConfig) -> Result<Simulator, CliError> {
    Ok(Simulator::new(Arc::new(build_default_layout()), config)?)
}

/// Simulator the dataset was generated with; refuses foreign layouts.
fn dataset_simulator(dataset: &Dataset) -> Result<Simulator, CliError> {
    let sim = simulator(dataset.manifest.sim_config)?;
    dataset.check_layout(&sim.layout().hash())?;
    Ok(sim)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

#[derive(Serialize)]
struct ReportLine<'a> {
    run: &'a str,
    #[serde(flatten)]
    report: &'a MetricsReport,
}

fn report_lines(run: &str, reports: &[MetricsReport]) -> String {
    reports
        .iter()
        .map(|report| serde_json::to_string(&ReportLine { run, report }).expect("report serializes") + "\n")
        .collect()
}

pub fn generate(args: GenerateArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.cfg)?;
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    if let Some(rates) = args.rates {
        cfg.gen.occupancy_rates = rates;
    }
    if let Some(combos) = args.combos {
        cfg.gen.max_combos = Some(combos);
    }
    if let Some(seeds) = args.seeds {
        cfg.gen.seeds_per_rate_combo = seeds;
    }
    cfg.validate(&source_name(&args.cfg))?;
    let sim = simulator(cfg.sim)?;
    let mut snapshot = subset(cfg.snapshot(), GEN_KEYS);
    snapshot.insert("ground_truth".into(), (!args.no_ground_truth).to_string());
    let run = RunRecorder::start("generate", snapshot, vec![cfg.master_seed], &[])?;

    let mut dataset = generate_dataset(&sim, &cfg.gen, cfg.master_seed)?;
    if args.no_ground_truth {
        dataset = dataset.without_ground_truth();
    }
    dataset.manifest.provenance = Some(run.hash().to_string());
    write_dataset(&args.out, &dataset)?;
    let sidecar = manifest_path(&args.out);
    let manifest = run.finish(&args.out, &[&args.out, &sidecar])?;
    println!("scenarios: {}", dataset.manifest.scenarios);
    println!("dropped: {}", dataset.manifest.dropped);
    println!("run: {}", manifest.hash);
    Ok(())
}

/// Unbalanced counterpart of a balanced estimator.
fn unbalanced(kind: ModelKind) -> ModelKind {
    match kind {
        ModelKind::Sccfr => ModelKind::Sctarnet,
        ModelKind::Cfr => ModelKind::Tarnet,
        other => other,
    }
}

pub fn train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.cfg)?;
    if let Some(epochs) = args.epochs {
        cfg.fit.train.epochs = epochs;
    }
    if let Some(outcome) = args.outcome {
        cfg.outcome = outcome;
    }
    if args.lambda.is_some() {
        cfg.fit.lambda = args.lambda;
    }
    cfg.fit.train.rng_seed = args.seed;
    cfg.validate(&source_name(&args.cfg))?;
    // A balanced model with λ = 0 is its unbalanced twin; normalizing here
    // makes both spellings produce the same run hash and checkpoint.
    let mut kind = args.model;
    if cfg.fit.lambda == Some(0.0) {
        kind = unbalanced(kind);
    }
    if !kind.balanced() {
        cfg.fit.lambda = None;
    }

    let dataset = read_dataset(&args.data)?;
    let sim = dataset_simulator(&dataset)?;
    let mut snapshot = subset(cfg.snapshot(), FIT_KEYS);
    snapshot.insert("model".into(), kind.as_str().into());
    let sidecar = manifest_path(&args.data);
    let run = RunRecorder::start("train", snapshot, vec![args.seed], &[&args.data, &sidecar])?;

    let split = EvaluationSplit::of(&dataset, args.seed);
    let (mut model, log) =
        fit(kind, sim.layout(), split.train_records(&dataset), cfg.outcome, &cfg.fit, &dataset_hash(&dataset))?;
    model.meta.provenance = json!({ "run": run.hash() });
    model.save(&args.out)?;
    let mut outputs = vec![args.out.clone()];
    if let Some(log) = &log {
        let path = with_suffix(&args.out, ".log.jsonl");
        std::fs::write(&path, log.to_jsonl())?;
        outputs.push(path);
    }
    let outputs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    let manifest = run.finish(&args.out, &outputs)?;
    match &model.meta.estimator {
        Estimator::Neural { train_config, best_epoch, .. } => println!(
            "{} on {}: lambda {}, best epoch {best_epoch}",
            model.method_name(),
            cfg.outcome,
            train_config.ipm_weight
        ),
        Estimator::Ridge { alpha, .. } => println!("{} on {}: alpha {alpha}", model.method_name(), cfg.outcome),
    }
    println!("run: {}", manifest.hash);
    Ok(())
}

/// Split seed a checkpoint was trained with.
fn split_seed(model: &TrainedModel) -> u64 {
    match &model.meta.estimator {
        Estimator::Neural { train_config, .. } => train_config.rng_seed,
        Estimator::Ridge { rng_seed, .. } => *rng_seed,
    }
}

/// Paired test when exactly two methods were evaluated on the same seeds.
fn paired_methods(reports: &[MetricsReport]) -> Option<(String, String, PairedComparison)> {
    let mut methods: Vec<&str> = Vec::new();
    for r in reports {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let [a, b] = methods[..] else { return None };
    let by_seed = |m: &str| {
        let mut v: Vec<(u64, f64)> =
            reports.iter().filter(|r| r.method == m).map(|r| (r.seed, r.out_of_sample.mpehe)).collect();
        v.sort_by_key(|&(s, _)| s);
        v
    };
    let (sa, sb) = (by_seed(a), by_seed(b));
    let seeds = |v: &[(u64, f64)]| v.iter().map(|&(s, _)| s).collect::<Vec<_>>();
    let unique = seeds(&sa).windows(2).all(|w| w[0] != w[1]);
    if !unique || seeds(&sa) != seeds(&sb) {
        return None;
    }
    let scores = |v: &[(u64, f64)]| v.iter().map(|&(_, x)| x).collect::<Vec<_>>();
    let cmp = paired_compare(&scores(&sa), &scores(&sb)).ok()?;
    Some((a.to_string(), b.to_string(), cmp))
}

/// One row per checkpoint, then `mean (sd)` over seeds when a method was
/// evaluated more than once.
fn render_evaluation(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:>6} {:>5} | {:>11} {:>12} {:>11} | {:>9} {:>10} {:>9}",
        "method", "outcome", "seed", "within RMSE", "within mPEHE", "within mATE", "out RMSE", "out mPEHE", "out mATE"
    );
    for r in reports {
        let (w, o) = (&r.within_sample, &r.out_of_sample);
        let _ = writeln!(
            out,
            "{:<10} {:>6} {:>5} | {:>11.3} {:>12.3} {:>11.3} | {:>9.3} {:>10.3} {:>9.3}",
            r.method, r.outcome, r.seed, w.rmse, w.mpehe, w.mate, o.rmse, o.mpehe, o.mate
        );
    }
    let repeated = reports.iter().any(|r| reports.iter().filter(|s| s.method == r.method).count() > 1);
    if !repeated {
        return out;
    }
    out.push_str("\nmean (sd) over seeds\n");
    let table = metrics::render_table(reports);
    let paired = paired_methods(reports);
    for (i, line) in table.lines().enumerate() {
        out.push_str(line);
        if let Some((a, b, c)) = &paired {
            let cell = match i {
                0 => "paired out mPEHE".to_string(),
                _ if line.starts_with(&format!("{a} ")) => format!(
                    "{a} - {b}: {:+.3}, t {}, p {}",
                    c.mean_difference,
                    c.t_statistic.map_or("degenerate".into(), |t| format!("{t:.3}")),
                    c.p_value.map_or("-".into(), |p| format!("{p:.4}"))
                ),
                _ => String::new(),
            };
            out.push_str(" | ");
            out.push_str(&cell);
        }
        out.push('\n');
    }
    out
}

pub fn evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    if args.checkpoints.is_empty() && !args.oracle {
        return Err(CliError::Usage("give at least one checkpoint or --oracle".into()));
    }
    let dataset = read_dataset(&args.data)?;
    let sim = dataset_simulator(&dataset)?;
    let mut models = Vec::new();
    for path in &args.checkpoints {
        let model = TrainedModel::load(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        if model.meta.layout_hash != dataset.manifest.layout_hash {
            return Err(CliError::Usage(format!(
                "{}: refusing to evaluate: model layout {} differs from dataset layout {}",
                path.display(),
                model.meta.layout_hash,
                dataset.manifest.layout_hash
            )));
        }
        if model.meta.data_hash != dataset_hash(&dataset) {
            eprintln!("warning: {} was trained on a different dataset file", path.display());
        }
        models.push(model);
    }

    let sidecar = manifest_path(&args.data);
    let mut inputs: Vec<&Path> = vec![&args.data, &sidecar];
    inputs.extend(args.checkpoints.iter().map(PathBuf::as_path));
    let mut seeds: Vec<u64> = models.iter().map(split_seed).collect();
    let mut snapshot = BTreeMap::from([("oracle".to_string(), args.oracle.to_string())]);
    if args.oracle {
        snapshot.insert("outcome".into(), args.outcome.to_string());
        seeds.push(args.seed);
    }
    let run = RunRecorder::start("evaluate", snapshot, seeds, &inputs)?;

    let mut reports = Vec::new();
    for model in &models {
        let split = EvaluationSplit::of(&dataset, split_seed(model));
        reports.push(metrics::evaluate(model, sim.layout(), &dataset, &split)?);
    }
    if args.oracle {
        let split = EvaluationSplit::of(&dataset, args.seed);
        let (within, out) = evaluate_with(&dataset, &split, args.outcome, |r| oracle_predictions(r, args.outcome))?;
        reports.push(MetricsReport {
            method: "Oracle".into(),
            outcome: args.outcome,
            seed: args.seed,
            within_sample: within,
            out_of_sample: out,
        });
    }
    print!("{}", render_evaluation(&reports));
    if let Some(out) = &args.out {
        std::fs::write(out, report_lines(run.hash(), &reports))?;
        let manifest = run.finish(out, &[out])?;
        println!("run: {}", manifest.hash);
    }
    Ok(())
}

pub fn bench(args: BenchArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.cfg)?;
    if let Some(seed) = args.master_seed {
        cfg.master_seed = seed;
    }
    if let Some(outcome) = args.outcome {
        cfg.outcome = outcome;
    }
    if let Some(methods) = args.methods {
        cfg.methods = methods;
    }
    if args.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    cfg.validate(&source_name(&args.cfg))?;
    let sim = simulator(cfg.sim)?;
    let config = BenchConfig {
        master_seed: cfg.master_seed,
        seeds: (0..args.seeds as u64).collect(),
        outcome: cfg.outcome,
        methods: cfg.methods.clone(),
        gen: cfg.gen.clone(),
        fit: cfg.fit.clone(),
    };
    let run = RunRecorder::start("bench", cfg.snapshot(), config.seeds.clone(), &[])?;
    let (_, outcome) = run_bench(&sim, &config)?;
    let text = format!("run: {}\n{}", run.hash(), outcome.render());
    print!("{text}");
    if let Some(out) = &args.out {
        std::fs::write(out, &text)?;
        let lines = with_suffix(out, ".jsonl");
        std::fs::write(&lines, report_lines(run.hash(), &outcome.reports))?;
        run.finish(out, &[out, &lines])?;
    }
    let failed = outcome.verdicts.iter().filter(|v| !v.pass).count();
    if failed > 0 {
        return Err(CliError::Verdicts(failed));
    }
    Ok(())
}

pub fn serve(args: ServeArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.cfg)?;
    cfg.validate(&source_name(&args.cfg))?;
    if !(args.sim_budget.is_finite() && args.sim_budget > 0.0) {
        return Err(CliError::Usage("--sim-budget must be a positive number of seconds".into()));
    }
    let sim = Arc::new(simulator(cfg.sim)?);
    let predictor = match (&args.max, &args.mean, &args.std) {
        _ if args.oracle => Some(Predictor::Oracle),
        (Some(max), Some(mean), Some(std)) => Some(Predictor::Models(
            ModelSet::load([max, mean, std], sim.layout()).map_err(|e| CliError::Runtime(e.to_string()))?,
        )),
        _ => None,
    };
    if predictor.is_none() {
        eprintln!("warning: no models given; /health and /whatif report unavailable");
    }
    let state = ServiceState::new(sim, predictor).with_sim_budget(Duration::from_secs_f64(args.sim_budget));
    let mut addr = args.addr;
    if let Some(port) = args.port {
        addr.set_port(port);
    }
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    eprintln!("listening on http://{addr}");
    runtime.block_on(crowd_cate_serve::serve(Arc::new(state), addr))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crowd_cate::metrics::SettingMetrics;
    use crowd_cate::scenario::OutcomeComponent;

    fn report(method: &str, seed: u64, mpehe: f64) -> MetricsReport {
        let m = SettingMetrics { rmse: 1.0, mpehe, mate: 0.5 };
        MetricsReport { method: method.into(), outcome: OutcomeComponent::Max, seed, within_sample: m, out_of_sample: m }
    }

    #[test]
    fn key_groups_partition_the_config() {
        assert_eq!(GEN_KEYS.last(), Some(&"agent_priority"));
        assert_eq!(FIT_KEYS.first(), Some(&"lambda"));
        assert_eq!(FIT_KEYS.last(), Some(&"outcome"));
    }

    #[test]
    fn paired_column_needs_two_methods_on_shared_seeds() {
        let two: Vec<_> = (0..5).flat_map(|s| [report("A", s, 2.0 + s as f64 * 0.1), report("B", s, 3.0)]).collect();
        let (a, b, c) = paired_methods(&two).unwrap();
        assert_eq!((a.as_str(), b.as_str()), ("A", "B"));
        assert!(c.mean_difference < 0.0);
        assert!(render_evaluation(&two).contains("paired out mPEHE"));

        let mut shifted = two.clone();
        shifted[1].seed = 9;
        assert!(paired_methods(&shifted).is_none());
        let mut three = two.clone();
        three.push(report("C", 0, 1.0));
        assert!(paired_methods(&three).is_none());
        assert!(!render_evaluation(&three).contains("paired"));
    }

    #[test]
    fn single_runs_have_no_summary() {
        let text = render_evaluation(&[report("A", 0, 1.0), report("B", 0, 2.0)]);
        assert_eq!(text.lines().count(), 3);
    }
}
