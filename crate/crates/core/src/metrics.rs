//! Error metrics against noiseless outcome tables, evaluation splits and the
//! paired t-test used to compare methods across seeds.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::model::{ModelError, TrainedModel};
use crate::scenario::{Dataset, OutcomeComponent, ScenarioRecord};
use crate::sim::TheaterLayout;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("tables are misaligned: {0}")]
    Misaligned(String),
    #[error("treatment {0} is outside the table")]
    UnknownTreatment(usize),
    #[error("a treatment pair needs two different treatments")]
    SamePair,
    #[error("scenario {0} has no ground-truth table")]
    MissingGroundTruth(u64),
    #[error("need at least {0} values")]
    TooFew(usize),
    #[error("layout hash mismatch: {0}")]
    LayoutMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Scenario × treatment values.
pub type Table = [Vec<f64>];

fn check_aligned(pred: &Table, truth: &Table) -> Result<usize, MetricsError> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(MetricsError::Misaligned(format!("{} predicted rows, {} true rows", pred.len(), truth.len())));
    }
    let t = truth[0].len();
    if pred.iter().chain(truth).any(|r| r.len() != t) || t == 0 {
        return Err(MetricsError::Misaligned("rows differ in treatment count".into()));
    }
    Ok(t)
}

fn check_pair(t: usize, i: usize, j: usize) -> Result<(), MetricsError> {
    if i >= t {
        return Err(MetricsError::UnknownTreatment(i));
    }
    if j >= t {
        return Err(MetricsError::UnknownTreatment(j));
    }
    if i == j {
        return Err(MetricsError::SamePair);
    }
    Ok(())
}

/// Root mean squared error over every (scenario, treatment) cell.
pub fn rmse(pred: &Table, truth: &Table) -> Result<f64, MetricsError> {
    let t = check_aligned(pred, truth)?;
    let sse: f64 = pred.iter().zip(truth).flat_map(|(p, y)| p.iter().zip(y).map(|(a, b)| (a - b) * (a - b))).sum();
    Ok((sse / (pred.len() * t) as f64).sqrt())
}

fn effect_errors<'a>(pred: &'a Table, truth: &'a Table, i: usize, j: usize) -> impl Iterator<Item = f64> + 'a {
    pred.iter().zip(truth).map(move |(p, y)| (p[i] - p[j]) - (y[i] - y[j]))
}

/// Root mean squared error of the per-scenario effect of `i` over `j`.
pub fn pehe(pred: &Table, truth: &Table, i: usize, j: usize) -> Result<f64, MetricsError> {
    let t = check_aligned(pred, truth)?;
    check_pair(t, i, j)?;
    Ok((effect_errors(pred, truth, i, j).map(|e| e * e).sum::<f64>() / pred.len() as f64).sqrt())
}

/// Absolute error of the average effect of `i` over `j`.
pub fn ate_error(pred: &Table, truth: &Table, i: usize, j: usize) -> Result<f64, MetricsError> {
    let t = check_aligned(pred, truth)?;
    check_pair(t, i, j)?;
    Ok((effect_errors(pred, truth, i, j).sum::<f64>() / pred.len() as f64).abs())
}

/// Unordered treatment pairs `(i, j)`, `i < j`.
pub fn treatment_pairs(t: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..t).flat_map(move |i| (i + 1..t).map(move |j| (i, j)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiMetrics {
    pub mpehe: f64,
    pub mate: f64,
    pub pairs: usize,
}

/// Mean PEHE and mean absolute ATE error over every unordered pair.
pub fn multi_metrics(pred: &Table, truth: &Table) -> Result<MultiMetrics, MetricsError> {
    let t = check_aligned(pred, truth)?;
    if t < 2 {
        return Err(MetricsError::Misaligned("need at least two treatments".into()));
    }
    let (mut p_sum, mut a_sum, mut pairs) = (0.0, 0.0, 0);
    for (i, j) in treatment_pairs(t) {
        p_sum += pehe(pred, truth, i, j)?;
        a_sum += ate_error(pred, truth, i, j)?;
        pairs += 1;
    }
    Ok(MultiMetrics { mpehe: p_sum / pairs as f64, mate: a_sum / pairs as f64, pairs })
}

/// Scenario-level 90/10 split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationSplit {
    pub train: Vec<u64>,
    pub test: Vec<u64>,
    pub split_seed: u64,
}

impl EvaluationSplit {
    pub const TRAIN_FRACTION: f64 = 0.9;

    pub fn new(scenario_ids: &[u64], split_seed: u64) -> Self {
        let mut ids = scenario_ids.to_vec();
        ids.sort_unstable();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
        let n_train = (ids.len() as f64 * Self::TRAIN_FRACTION).round() as usize;
        let test = ids.split_off(n_train.min(ids.len()));
        Self { train: ids, test, split_seed }
    }

    pub fn of(dataset: &Dataset, split_seed: u64) -> Self {
        Self::new(&dataset.records.iter().map(|r| r.scenario_id).collect::<Vec<_>>(), split_seed)
    }

    fn select<'a>(ids: &[u64], dataset: &'a Dataset) -> Vec<&'a ScenarioRecord> {
        let wanted: std::collections::HashSet<u64> = ids.iter().copied().collect();
        dataset.records.iter().filter(|r| wanted.contains(&r.scenario_id)).collect()
    }

    pub fn train_records<'a>(&self, dataset: &'a Dataset) -> Vec<&'a ScenarioRecord> {
        Self::select(&self.train, dataset)
    }

    pub fn test_records<'a>(&self, dataset: &'a Dataset) -> Vec<&'a ScenarioRecord> {
        Self::select(&self.test, dataset)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SettingMetrics {
    pub rmse: f64,
    pub mpehe: f64,
    pub mate: f64,
}

/// Metrics of one model on one outcome component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub outcome: OutcomeComponent,
    pub seed: u64,
    pub within_sample: SettingMetrics,
    pub out_of_sample: SettingMetrics,
}

impl MetricsReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes") + "\n"
    }
}

/// Noiseless table rows of `records` for one component.
pub fn truth_table(records: &[&ScenarioRecord], component: OutcomeComponent) -> Result<Vec<Vec<f64>>, MetricsError> {
    records
        .iter()
        .map(|r| {
            r.table
                .as_ref()
                .map(|t| t.iter().map(|o| o.get(component)).collect())
                .ok_or(MetricsError::MissingGroundTruth(r.scenario_id))
        })
        .collect()
}

pub fn setting_metrics(pred: &Table, truth: &Table) -> Result<SettingMetrics, MetricsError> {
    let m = multi_metrics(pred, truth)?;
    Ok(SettingMetrics { rmse: rmse(pred, truth)?, mpehe: m.mpehe, mate: m.mate })
}

/// Within-sample metrics over the training scenarios' tables and
/// out-of-sample metrics over the test scenarios' tables. `predict` returns
/// one row of predictions per record.
pub fn evaluate_with<F>(
    dataset: &Dataset,
    split: &EvaluationSplit,
    component: OutcomeComponent,
    mut predict: F,
) -> Result<(SettingMetrics, SettingMetrics), MetricsError>
where
    F: FnMut(&[&ScenarioRecord]) -> Result<Vec<Vec<f64>>, MetricsError>,
{
    let mut run = |records: Vec<&ScenarioRecord>| -> Result<SettingMetrics, MetricsError> {
        let truth = truth_table(&records, component)?;
        let pred = predict(&records)?;
        setting_metrics(&pred, &truth)
    };
    let within = run(split.train_records(dataset))?;
    let out = run(split.test_records(dataset))?;
    Ok((within, out))
}

/// Evaluates a trained model on the split it was trained with.
pub fn evaluate(
    model: &TrainedModel,
    layout: &TheaterLayout,
    dataset: &Dataset,
    split: &EvaluationSplit,
) -> Result<MetricsReport, MetricsError> {
    if dataset.manifest.layout_hash != model.meta.layout_hash {
        return Err(MetricsError::LayoutMismatch(format!(
            "model {} vs dataset {}",
            model.meta.layout_hash, dataset.manifest.layout_hash
        )));
    }
    let (within, out) = evaluate_with(dataset, split, model.meta.outcome, |records| {
        let occ: Vec<_> = records.iter().map(|r| &r.occupancy).collect();
        Ok(model.predict_table(layout, &occ)?.into_iter().map(|r| r.to_vec()).collect())
    })?;
    Ok(MetricsReport {
        method: model.method_name().to_string(),
        outcome: model.meta.outcome,
        seed: split.split_seed,
        within_sample: within,
        out_of_sample: out,
    })
}

/// Predictor that returns the noiseless table itself.
pub fn oracle_predictions(records: &[&ScenarioRecord], component: OutcomeComponent) -> Result<Vec<Vec<f64>>, MetricsError> {
    truth_table(records, component)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    /// Mean of `a - b`.
    pub mean_difference: f64,
    /// `None` when the differences have zero variance.
    pub t_statistic: Option<f64>,
    /// Two-sided p value.
    pub p_value: Option<f64>,
}

impl PairedComparison {
    pub fn degenerate(&self) -> bool {
        self.t_statistic.is_none()
    }
}

/// Paired two-sided t-test on per-seed scores.
pub fn paired_compare(a: &[f64], b: &[f64]) -> Result<PairedComparison, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::Misaligned(format!("{} vs {} paired scores", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(MetricsError::TooFew(2));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var <= 0.0 {
        return Ok(PairedComparison { mean_difference: mean, t_statistic: None, p_value: None });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive degrees of freedom");
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(PairedComparison { mean_difference: mean, t_statistic: Some(t), p_value: Some(p) })
}

/// Mean and sample standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Method × metric × setting table with `mean (sd)` cells over seeds. Rows
/// keep first-appearance order of methods.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let mut methods: Vec<&str> = Vec::new();
    for r in reports {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} | {:^17} {:^17} {:^17} | {:^17} {:^17} {:^17}",
        "method", "within RMSE", "within mPEHE", "within mATE", "out RMSE", "out mPEHE", "out mATE"
    );
    for m in methods {
        let rows: Vec<&MetricsReport> = reports.iter().filter(|r| r.method == m).collect();
        let cell = |f: &dyn Fn(&MetricsReport) -> f64| {
            let (mean, sd) = mean_sd(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
            format!("{mean:.3} ({sd:.3})")
        };
        let _ = writeln!(
            out,
            "{:<10} | {:^17} {:^17} {:^17} | {:^17} {:^17} {:^17}",
            m,
            cell(&|r| r.within_sample.rmse),
            cell(&|r| r.within_sample.mpehe),
            cell(&|r| r.within_sample.mate),
            cell(&|r| r.out_of_sample.rmse),
            cell(&|r| r.out_of_sample.mpehe),
            cell(&|r| r.out_of_sample.mate),
        );
    }
    out
}
