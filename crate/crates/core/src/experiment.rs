//! End-to-end benchmark: one dataset, every method trained over several
//! seeds, out-of-sample comparison and directional verdicts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::{self, mean_sd, paired_compare, EvaluationSplit, MetricsError, MetricsReport, PairedComparison};
use crate::model::{fit, FitOptions, ModelError, ModelKind, TrainedModel};
use crate::scenario::{generate_dataset, Dataset, GenConfig, OutcomeComponent, ScenarioError};
use crate::sim::Simulator;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid benchmark configuration: {0}")]
    Config(String),
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash identifying the generation settings of a dataset.
pub fn dataset_hash(dataset: &Dataset) -> String {
    sha256_hex(&serde_json::to_vec(&dataset.manifest).expect("manifest serializes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub master_seed: u64,
    pub seeds: Vec<u64>,
    pub outcome: OutcomeComponent,
    pub methods: Vec<ModelKind>,
    pub gen: GenConfig,
    pub fit: FitOptions,
}

impl BenchConfig {
    pub fn new(seed_count: usize) -> Self {
        Self {
            master_seed: 0,
            seeds: (0..seed_count as u64).collect(),
            outcome: OutcomeComponent::Max,
            methods: ModelKind::ALL.to_vec(),
            gen: GenConfig::default(),
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub criterion: String,
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn line(&self) -> String {
        format!("{}: {} ({})", self.criterion, if self.pass { "PASS" } else { "FAIL" }, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOutcome {
    pub scenarios: usize,
    pub dropped: usize,
    /// Method-major, seeds in configuration order.
    pub reports: Vec<MetricsReport>,
    pub comparisons: Vec<(String, String, PairedComparison)>,
    pub verdicts: Vec<Verdict>,
}

impl BenchOutcome {
    pub fn all_pass(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    /// Out-of-sample mPEHE of one method per seed.
    pub fn out_mpehe(&self, method: &str) -> Vec<f64> {
        self.reports.iter().filter(|r| r.method == method).map(|r| r.out_of_sample.mpehe).collect()
    }

    pub fn render(&self) -> String {
        let mut out = format!("scenarios: {} (dropped {})\n", self.scenarios, self.dropped);
        out.push_str(&metrics::render_table(&self.reports));
        for (a, b, c) in &self.comparisons {
            out.push_str(&format!(
                "paired t-test out-of-sample mPEHE {a} - {b}: mean {:.3}, t {}, p {}\n",
                c.mean_difference,
                c.t_statistic.map_or("degenerate".into(), |t| format!("{t:.3}")),
                c.p_value.map_or("-".into(), |p| format!("{p:.4}")),
            ));
        }
        for v in &self.verdicts {
            out.push_str(&v.line());
            out.push('\n');
        }
        out
    }
}

/// Trains and evaluates one (method, seed) job.
pub fn run_job(
    sim: &Simulator,
    dataset: &Dataset,
    kind: ModelKind,
    seed: u64,
    outcome: OutcomeComponent,
    fit_options: &FitOptions,
) -> Result<(TrainedModel, MetricsReport), ExperimentError> {
    let split = EvaluationSplit::of(dataset, seed);
    let mut options = fit_options.clone();
    options.train.rng_seed = seed;
    let train = split.train_records(dataset);
    let (model, _) = fit(kind, sim.layout(), train, outcome, &options, &dataset_hash(dataset))?;
    let report = metrics::evaluate(&model, sim.layout(), dataset, &split)?;
    Ok((model, report))
}

/// Trains every method on every seed of an existing dataset. Jobs run on the
/// current rayon pool; results are ordered by method, then seed.
pub fn evaluate_methods(sim: &Simulator, dataset: &Dataset, config: &BenchConfig) -> Result<Vec<MetricsReport>, ExperimentError> {
    let jobs: Vec<(ModelKind, u64)> =
        config.methods.iter().flat_map(|&m| config.seeds.iter().map(move |&s| (m, s))).collect();
    let results: Vec<Result<MetricsReport, ExperimentError>> = jobs
        .par_iter()
        .map(|&(kind, seed)| run_job(sim, dataset, kind, seed, config.outcome, &config.fit).map(|(_, r)| r))
        .collect();
    results.into_iter().collect()
}

fn method_name(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Sccfr => "SC-CFR",
        ModelKind::Sctarnet => "SC-TARNET",
        ModelKind::Cfr => "CFR",
        ModelKind::Tarnet => "TARNET",
        ModelKind::Mlp => "MLP",
        ModelKind::Ridge => "Ridge",
    }
}

fn mean_of(v: &[f64]) -> f64 {
    mean_sd(v).0
}

/// Directional verdicts from per-seed out-of-sample mPEHE.
pub fn verdicts(reports: &[MetricsReport]) -> Vec<Verdict> {
    let get = |k: ModelKind| -> Vec<f64> {
        reports.iter().filter(|r| r.method == method_name(k)).map(|r| r.out_of_sample.mpehe).collect()
    };
    let mut out = Vec::new();
    let sc = get(ModelKind::Sccfr);
    for base in [ModelKind::Ridge, ModelKind::Mlp] {
        let b = get(base);
        if sc.is_empty() || b.is_empty() {
            continue;
        }
        let reduction = 1.0 - mean_of(&sc) / mean_of(&b);
        out.push(Verdict {
            criterion: format!("SC-CFR vs {} mPEHE reduction >= 20%", method_name(base)),
            pass: reduction >= 0.20,
            detail: format!("{:.3} vs {:.3}, reduction {:.1}%", mean_of(&sc), mean_of(&b), 100.0 * reduction),
        });
    }
    let tar = get(ModelKind::Sctarnet);
    if !sc.is_empty() && !tar.is_empty() {
        let ratio = mean_of(&sc) / mean_of(&tar);
        out.push(Verdict {
            criterion: "SC-CFR within 2% of SC-TARNET mPEHE".into(),
            pass: ratio <= 1.02,
            detail: format!("{:.3} vs {:.3}, ratio {ratio:.4}", mean_of(&sc), mean_of(&tar)),
        });
    }
    for (spatial, dense) in [(ModelKind::Sccfr, ModelKind::Cfr), (ModelKind::Sctarnet, ModelKind::Tarnet)] {
        let (a, b) = (get(spatial), get(dense));
        if a.is_empty() || a.len() != b.len() {
            continue;
        }
        let wins = a.iter().zip(&b).filter(|(x, y)| x < y).count();
        let need = (a.len() * 8).div_ceil(10);
        out.push(Verdict {
            criterion: format!("{} beats {} in >= 80% of seeds", method_name(spatial), method_name(dense)),
            pass: wins >= need,
            detail: format!("{wins}/{} seeds", a.len()),
        });
    }
    out
}

fn comparisons(reports: &[MetricsReport]) -> Vec<(String, String, PairedComparison)> {
    let scores = |m: &str| -> Vec<f64> { reports.iter().filter(|r| r.method == m).map(|r| r.out_of_sample.mpehe).collect() };
    [("SC-CFR", "SC-TARNET"), ("CFR", "TARNET")]
        .into_iter()
        .filter_map(|(a, b)| {
            paired_compare(&scores(a), &scores(b)).ok().map(|c| (a.to_string(), b.to_string(), c))
        })
        .collect()
}

/// Generates the dataset once, trains every method on every seed and
/// evaluates the directional criteria.
pub fn run_bench(sim: &Simulator, config: &BenchConfig) -> Result<(Dataset, BenchOutcome), ExperimentError> {
    if config.seeds.is_empty() || config.methods.is_empty() {
        return Err(ExperimentError::Config("need at least one seed and one method".into()));
    }
    let dataset = generate_dataset(sim, &config.gen, config.master_seed)?;
    let reports = evaluate_methods(sim, &dataset, config)?;
    let outcome = BenchOutcome {
        scenarios: dataset.manifest.scenarios,
        dropped: dataset.manifest.dropped,
        comparisons: comparisons(&reports),
        verdicts: verdicts(&reports),
        reports,
    };
    Ok((dataset, outcome))
}
