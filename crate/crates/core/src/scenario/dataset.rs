use std::fs;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sampling::{assignment_rng, door_neighborhoods, rate_combinations, sample_assignment, sample_occupancy, scenario_seed};
use super::{GenConfig, OutcomeComponent, OutcomeTriple, ScenarioError};
use crate::occupancy::Occupancy;
use crate::sim::{SimConfig, Simulator};
use crate::treatment::{enumerate_treatments, Treatment, TREATMENT_COUNT};

/// One generated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRecord {
    pub scenario_id: u64,
    pub occupancy: Occupancy,
    /// Factual treatment.
    pub z: Treatment,
    /// Factual outcome with observation noise.
    pub y_f: OutcomeTriple,
    /// Noiseless outcome of every treatment, in enumeration order. Absent in
    /// observational exports.
    pub table: Option<Vec<OutcomeTriple>>,
    pub seed: u64,
}

impl ScenarioRecord {
    pub fn factual(&self, component: OutcomeComponent) -> f64 {
        self.y_f.get(component)
    }

    pub fn truth(&self, treatment: usize, component: OutcomeComponent) -> Option<f64> {
        self.table.as_ref().map(|t| t[treatment].get(component))
    }
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    scenario_id: u64,
    occupancy: String,
    z: Treatment,
    y_f: OutcomeTriple,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    table: Option<Vec<OutcomeTriple>>,
    seed: u64,
}

/// Sidecar describing how a dataset file was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub gen_config: GenConfig,
    pub sim_config: SimConfig,
    pub master_seed: u64,
    pub layout_hash: String,
    pub seat_count: usize,
    pub scenarios: usize,
    pub dropped: usize,
    pub ground_truth: bool,
    /// Hash of the run that wrote the file, set by the caller.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<ScenarioRecord>,
}

/// Counts reported after generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerationSummary {
    pub scenarios: usize,
    pub dropped: usize,
}

impl Dataset {
    pub fn summary(&self) -> GenerationSummary {
        GenerationSummary { scenarios: self.manifest.scenarios, dropped: self.manifest.dropped }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn has_ground_truth(&self) -> bool {
        self.records.iter().all(|r| r.table.is_some())
    }

    /// Copy without counterfactual tables.
    pub fn without_ground_truth(&self) -> Self {
        let mut out = self.clone();
        for r in &mut out.records {
            r.table = None;
        }
        out.manifest.ground_truth = false;
        out
    }

    pub fn check_layout(&self, layout_hash: &str) -> Result<(), ScenarioError> {
        if self.manifest.layout_hash != layout_hash {
            return Err(ScenarioError::LayoutMismatch {
                expected: self.manifest.layout_hash.clone(),
                found: layout_hash.to_string(),
            });
        }
        Ok(())
    }

    /// Line-delimited JSON body, one record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let line = RecordLine {
                scenario_id: r.scenario_id,
                occupancy: r.occupancy.to_base64(),
                z: r.z,
                y_f: r.y_f,
                table: r.table.clone(),
                seed: r.seed,
            };
            out.push_str(&serde_json::to_string(&line).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, manifest: DatasetManifest) -> Result<Self, ScenarioError> {
        let mut records = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| ScenarioError::Format { line: i + 1, msg };
            let line: RecordLine = serde_json::from_str(raw).map_err(|e| bad(e.to_string()))?;
            let occupancy = Occupancy::from_base64(&line.occupancy, manifest.seat_count).map_err(bad)?;
            if let Some(t) = &line.table {
                if t.len() != TREATMENT_COUNT {
                    return Err(bad(format!("table has {} rows, expected {TREATMENT_COUNT}", t.len())));
                }
            }
            records.push(ScenarioRecord {
                scenario_id: line.scenario_id,
                occupancy,
                z: line.z,
                y_f: line.y_f,
                table: line.table,
                seed: line.seed,
            });
        }
        Ok(Self { manifest, records })
    }
}

/// Sidecar path: the dataset path with `.manifest.json` appended.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<(), ScenarioError> {
    fs::write(path, dataset.to_jsonl())?;
    let manifest = serde_json::to_string_pretty(&dataset.manifest).expect("manifest serializes");
    fs::write(manifest_path(path), manifest + "\n")?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, ScenarioError> {
    let manifest_text = fs::read_to_string(manifest_path(path))?;
    let manifest: DatasetManifest = serde_json::from_str(&manifest_text)
        .map_err(|e| ScenarioError::Format { line: e.line(), msg: format!("manifest: {e}") })?;
    Dataset::from_jsonl(&fs::read_to_string(path)?, manifest)
}

/// Runs the full generation protocol over every (rate combination, seed) pair.
///
/// Scenario `k` (combination index × seeds per combination + repetition) uses
/// [`scenario_seed`]`(master_seed, k)`; occupancy comes from stream 0 of that
/// seed and treatment assignment plus noise from stream 1.
pub fn generate_dataset(simulator: &Simulator, config: &GenConfig, master_seed: u64) -> Result<Dataset, ScenarioError> {
    config.validate()?;
    let layout = simulator.layout();
    let blocks = layout.block_count();
    let combos = match &config.fixed_rates {
        Some(r) if r.len() != blocks => {
            return Err(ScenarioError::Config(format!("{} fixed rates given for {blocks} blocks", r.len())));
        }
        Some(r) => vec![r.clone()],
        None => rate_combinations(&config.occupancy_rates, blocks),
    };
    let combos = &combos[..config.max_combos.unwrap_or(usize::MAX).min(combos.len())];
    let neighborhoods = door_neighborhoods(layout, config.door_radius_m, config.cell_pitch_m);
    let noise = Normal::new(0.0, config.noise_std).map_err(|e| ScenarioError::Config(e.to_string()))?;
    let seeds = config.seeds_per_rate_combo;
    let total = (combos.len() * seeds) as u64;

    let results: Vec<Result<Option<ScenarioRecord>, ScenarioError>> = (0..total)
        .into_par_iter()
        .map(|scenario_id| {
            let seed = scenario_seed(master_seed, scenario_id);
            let rates = &combos[scenario_id as usize / seeds];
            let occupancy = sample_occupancy(layout, rates, seed)?;
            if occupancy.count() < config.min_people {
                return Ok(None);
            }
            let table = enumerate_treatments()
                .iter()
                .map(|t| simulator.simulate(&occupancy, t).map(|r| OutcomeTriple::from(&r)))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|source| ScenarioError::Simulation { scenario_id, source })?;
            let mut rng = assignment_rng(seed);
            let z = sample_assignment(&occupancy, &neighborhoods, &mut rng);
            let clean = table[z.index()];
            let y_f = OutcomeTriple {
                max_time: clean.max_time + noise.sample(&mut rng),
                mean_time: clean.mean_time + noise.sample(&mut rng),
                std_time: clean.std_time + noise.sample(&mut rng),
            };
            Ok(Some(ScenarioRecord { scenario_id, occupancy, z, y_f, table: Some(table), seed }))
        })
        .collect();

    let mut records = Vec::new();
    let mut dropped = 0;
    for r in results {
        match r? {
            Some(rec) => records.push(rec),
            None => dropped += 1,
        }
    }
    let manifest = DatasetManifest {
        gen_config: config.clone(),
        sim_config: *simulator.config(),
        master_seed,
        layout_hash: layout.hash(),
        seat_count: layout.seat_count(),
        scenarios: records.len(),
        dropped,
        ground_truth: true,
        provenance: None,
    };
    Ok(Dataset { manifest, records })
}
