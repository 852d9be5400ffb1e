//! Flat `key = value` run configuration. Keys mirror the field names of the
//! generation, simulator and training configs; `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crowd_cate::model::{FitOptions, MmdKernel, ModelKind};
use crowd_cate::scenario::{GenConfig, OutcomeComponent};
use crowd_cate::sim::{AgentPriority, SimConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{source_name}:{line}: field {field:?}: {msg}")]
    Field { source_name: String, line: usize, field: String, msg: String },
    #[error("{source_name}:{line}: expected `key = value`, got {text:?}")]
    Syntax { source_name: String, line: usize, text: String },
    #[error("{source_name}: {msg}")]
    Invalid { source_name: String, msg: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub master_seed: u64,
    pub gen: GenConfig,
    pub sim: SimConfig,
    pub fit: FitOptions,
    pub outcome: OutcomeComponent,
    pub methods: Vec<ModelKind>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            gen: GenConfig::default(),
            sim: SimConfig::default(),
            fit: FitOptions::default(),
            outcome: OutcomeComponent::Max,
            methods: ModelKind::ALL.to_vec(),
        }
    }
}

fn parse<T: FromStr>(value: &str) -> Result<T, String>
where
    T::Err: Display,
{
    value.parse::<T>().map_err(|e| format!("{value:?}: {e}"))
}

fn parse_list<T: FromStr>(value: &str) -> Result<Vec<T>, String>
where
    T::Err: Display,
{
    value.split(',').map(|v| parse(v.trim())).collect()
}

fn parse_optional<T: FromStr>(value: &str) -> Result<Option<T>, String>
where
    T::Err: Display,
{
    if value == "none" { Ok(None) } else { parse(value).map(Some) }
}

fn join<T: Display>(values: &[T]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn optional<T: Display>(value: &Option<T>) -> String {
    value.as_ref().map_or("none".into(), |v| v.to_string())
}

fn priority_name(p: AgentPriority) -> &'static str {
    match p {
        AgentPriority::NearestThenLowestId => "nearest_then_lowest_id",
        AgentPriority::NearestThenHighestId => "nearest_then_highest_id",
    }
}

fn kernel_name(k: MmdKernel) -> String {
    match k {
        MmdKernel::Linear => "linear".into(),
        MmdKernel::Rbf { bandwidth: None } => "rbf".into(),
        MmdKernel::Rbf { bandwidth: Some(h) } => format!("rbf:{h}"),
    }
}

impl RunConfig {
    pub const KEYS: [&'static str; 28] = [
        "master_seed",
        "occupancy_rates",
        "seeds_per_rate_combo",
        "min_people",
        "noise_std",
        "door_radius_m",
        "cell_pitch_m",
        "fixed_rates",
        "max_combos",
        "capacity_full",
        "capacity_half",
        "tick_limit",
        "agent_priority",
        "lambda",
        "lambda_grid",
        "ridge_alphas",
        "batch_size",
        "epochs",
        "patience",
        "mmd_kernel",
        "min_group_size",
        "learning_rate",
        "beta1",
        "beta2",
        "epsilon",
        "validation_fraction",
        "outcome",
        "methods",
    ];

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let (g, s, t) = (&mut self.gen, &mut self.sim, &mut self.fit.train);
        match key {
            "master_seed" => self.master_seed = parse(value)?,
            "occupancy_rates" => g.occupancy_rates = parse_list(value)?,
            "seeds_per_rate_combo" => g.seeds_per_rate_combo = parse(value)?,
            "min_people" => g.min_people = parse(value)?,
            "noise_std" => g.noise_std = parse(value)?,
            "door_radius_m" => g.door_radius_m = parse(value)?,
            "cell_pitch_m" => g.cell_pitch_m = parse(value)?,
            "fixed_rates" => g.fixed_rates = if value == "none" { None } else { Some(parse_list(value)?) },
            "max_combos" => g.max_combos = parse_optional(value)?,
            "capacity_full" => s.capacity_full = parse(value)?,
            "capacity_half" => s.capacity_half = parse(value)?,
            "tick_limit" => s.tick_limit = parse(value)?,
            "agent_priority" => {
                s.agent_priority = match value {
                    "nearest_then_lowest_id" => AgentPriority::NearestThenLowestId,
                    "nearest_then_highest_id" => AgentPriority::NearestThenHighestId,
                    _ => return Err(format!("{value:?}: expected nearest_then_lowest_id or nearest_then_highest_id")),
                }
            }
            "lambda" => self.fit.lambda = parse_optional(value)?,
            "lambda_grid" => self.fit.lambda_grid = parse_list(value)?,
            "ridge_alphas" => self.fit.ridge_alphas = parse_list(value)?,
            "batch_size" => t.batch_size = parse(value)?,
            "epochs" => t.epochs = parse(value)?,
            "patience" => t.patience = parse_optional(value)?,
            "mmd_kernel" => {
                t.mmd_kernel = match value.split_once(':') {
                    None if value == "linear" => MmdKernel::Linear,
                    None if value == "rbf" => MmdKernel::Rbf { bandwidth: None },
                    Some(("rbf", h)) => MmdKernel::Rbf { bandwidth: Some(parse(h)?) },
                    _ => return Err(format!("{value:?}: expected linear, rbf or rbf:<bandwidth>")),
                }
            }
            "min_group_size" => t.min_group_size = parse(value)?,
            "learning_rate" => t.adam.learning_rate = parse(value)?,
            "beta1" => t.adam.beta1 = parse(value)?,
            "beta2" => t.adam.beta2 = parse(value)?,
            "epsilon" => t.adam.epsilon = parse(value)?,
            "validation_fraction" => t.validation_fraction = parse(value)?,
            "outcome" => self.outcome = parse(value)?,
            "methods" => self.methods = parse_list(value)?,
            _ => return Err(format!("unknown key; valid keys: {}", Self::KEYS.join(", "))),
        }
        Ok(())
    }

    /// Current value of every key, in canonical text form.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        let (g, s, t) = (&self.gen, &self.sim, &self.fit.train);
        let values = [
            self.master_seed.to_string(),
            join(&g.occupancy_rates),
            g.seeds_per_rate_combo.to_string(),
            g.min_people.to_string(),
            g.noise_std.to_string(),
            g.door_radius_m.to_string(),
            g.cell_pitch_m.to_string(),
            g.fixed_rates.as_ref().map_or("none".into(), |r| join(r)),
            optional(&g.max_combos),
            s.capacity_full.to_string(),
            s.capacity_half.to_string(),
            s.tick_limit.to_string(),
            priority_name(s.agent_priority).into(),
            optional(&self.fit.lambda),
            join(&self.fit.lambda_grid),
            join(&self.fit.ridge_alphas),
            t.batch_size.to_string(),
            t.epochs.to_string(),
            optional(&t.patience),
            kernel_name(t.mmd_kernel),
            t.min_group_size.to_string(),
            t.adam.learning_rate.to_string(),
            t.adam.beta1.to_string(),
            t.adam.beta2.to_string(),
            t.adam.epsilon.to_string(),
            t.validation_fraction.to_string(),
            self.outcome.to_string(),
            join(&self.methods),
        ];
        Self::KEYS.iter().map(|k| k.to_string()).zip(values).collect()
    }

    /// Applies every assignment of `text`, reporting the first bad line.
    pub fn apply_text(&mut self, text: &str, source_name: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax { source_name: source_name.into(), line: i + 1, text: raw.into() });
            };
            let (key, value) = (key.trim(), value.trim());
            self.set(key, value).map_err(|msg| ConfigError::Field {
                source_name: source_name.into(),
                line: i + 1,
                field: key.into(),
                msg,
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies `--set key=value` overrides; the line number is the position
    /// of the flag.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        self.apply_text(&overrides.join("\n"), "--set")
    }

    /// Cross-field checks of the owning modules.
    pub fn validate(&self, source_name: &str) -> Result<(), ConfigError> {
        let invalid = |msg: String| ConfigError::Invalid { source_name: source_name.into(), msg };
        self.gen.validate().map_err(|e| invalid(e.to_string()))?;
        self.sim.validate().map_err(|e| invalid(e.to_string()))?;
        self.fit.train.validate().map_err(|e| invalid(e.to_string()))?;
        if self.fit.lambda_grid.is_empty() || self.fit.lambda_grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(invalid("lambda_grid must be a nonempty list of nonnegative numbers".into()));
        }
        if self.fit.lambda.is_some_and(|l| !(l.is_finite() && l >= 0.0)) {
            return Err(invalid("lambda must be a finite nonnegative number".into()));
        }
        if self.fit.ridge_alphas.is_empty() || self.fit.ridge_alphas.iter().any(|a| !(*a > 0.0)) {
            return Err(invalid("ridge_alphas must be a nonempty list of positive numbers".into()));
        }
        if self.methods.is_empty() {
            return Err(invalid("methods must name at least one model".into()));
        }
        Ok(())
    }
}
