//! Outcome estimators: spatial convolutional networks with an optional
//! balancing penalty, dense representation networks, a flat MLP and ridge
//! regression.

pub mod mmd;
pub mod net;
pub mod ridge;
pub mod train;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use mmd::{empirical_mmd, mmd_with_grad, modal_treatment, BatchIpm, MmdKernel, Sample};
pub use net::{Architecture, BatchInput, DenseArch, FlatArch, InputDims, NeuralNet, SpatialArch};
pub use ridge::{train_ridge, RidgeModel, DEFAULT_ALPHAS};
pub use train::{
    batch_loss, encode_inputs, train_lambda_grid, train_network, EpochLog, NeuralModel, TargetScaler, TrainConfig,
    TrainLog, TrainingSet,
};

use crate::nn::checkpoint::{Checkpoint, OptimizerSnapshot};
use crate::nn::{NnError, Tensor};
use crate::occupancy::Occupancy;
use crate::scenario::{OutcomeComponent, ScenarioRecord};
use crate::sim::TheaterLayout;
use crate::treatment::{enumerate_treatments, Treatment, TREATMENT_COUNT, TREATMENT_DIM};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("not enough data: {0}")]
    EmptyData(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("layout hash mismatch: model built for {expected}, got {found}")]
    LayoutMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Estimators selectable by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Sccfr,
    Sctarnet,
    Cfr,
    Tarnet,
    Mlp,
    Ridge,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] =
        [ModelKind::Sccfr, ModelKind::Sctarnet, ModelKind::Cfr, ModelKind::Tarnet, ModelKind::Mlp, ModelKind::Ridge];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Sccfr => "sccfr",
            ModelKind::Sctarnet => "sctarnet",
            ModelKind::Cfr => "cfr",
            ModelKind::Tarnet => "tarnet",
            ModelKind::Mlp => "mlp",
            ModelKind::Ridge => "ridge",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.map(Self::as_str).join(", ")
    }

    /// Network family; `None` for ridge.
    pub fn architecture(self) -> Option<Architecture> {
        match self {
            ModelKind::Sccfr | ModelKind::Sctarnet => Some(Architecture::Spatial(SpatialArch::default())),
            ModelKind::Cfr | ModelKind::Tarnet => Some(Architecture::Dense(DenseArch::default())),
            ModelKind::Mlp => Some(Architecture::Flat(FlatArch::default())),
            ModelKind::Ridge => None,
        }
    }

    /// Whether the balancing penalty is trained with a positive weight.
    pub fn balanced(self) -> bool {
        matches!(self, ModelKind::Sccfr | ModelKind::Cfr)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown model {s:?}; valid models: {}", Self::valid_names()))
    }
}

/// Training options shared by every estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub train: TrainConfig,
    /// Fixed λ for balanced models; `None` selects from `lambda_grid`.
    pub lambda: Option<f64>,
    pub lambda_grid: Vec<f64>,
    pub ridge_alphas: Vec<f64>,
    /// Overrides the default network of the chosen kind.
    pub architecture: Option<Architecture>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            lambda: None,
            lambda_grid: vec![0.1, 1.0, 10.0],
            ridge_alphas: DEFAULT_ALPHAS.to_vec(),
            architecture: None,
        }
    }
}

/// How a fitted model was produced. Contains everything that determines its
/// parameters, so equal training runs serialize identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Estimator {
    Neural { architecture: Architecture, train_config: TrainConfig, scaler: TargetScaler, best_epoch: usize },
    Ridge { alpha: f64, validation_fraction: f64, rng_seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub estimator: Estimator,
    pub outcome: OutcomeComponent,
    pub layout_hash: String,
    pub dims: InputDims,
    /// Hash of the generation settings of the training data.
    pub data_hash: String,
    /// Set by the caller, e.g. the hash of the run that produced the model.
    #[serde(default)]
    pub provenance: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Fitted {
    Neural(NeuralModel),
    Ridge(RidgeModel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub meta: ModelMeta,
    pub fitted: Fitted,
}

/// Fits one estimator on the factual fields of `records`.
pub fn fit<'a>(
    kind: ModelKind,
    layout: &TheaterLayout,
    records: impl IntoIterator<Item = &'a ScenarioRecord>,
    outcome: OutcomeComponent,
    options: &FitOptions,
    data_hash: &str,
) -> Result<(TrainedModel, Option<TrainLog>), ModelError> {
    let data = TrainingSet::from_records(layout, records, outcome);
    let meta = |estimator| ModelMeta {
        estimator,
        outcome,
        layout_hash: layout.hash(),
        dims: data.dims,
        data_hash: data_hash.to_string(),
        provenance: serde_json::Value::Null,
    };
    let Some(default_arch) = kind.architecture() else {
        let cfg = &options.train;
        let model = train_ridge(&data, &options.ridge_alphas, cfg.validation_fraction, cfg.rng_seed)?;
        let estimator = Estimator::Ridge {
            alpha: model.alpha,
            validation_fraction: cfg.validation_fraction,
            rng_seed: cfg.rng_seed,
        };
        return Ok((TrainedModel { meta: meta(estimator), fitted: Fitted::Ridge(model) }, None));
    };
    let arch = options.architecture.clone().unwrap_or(default_arch);
    let (model, log, lambda) = match (kind.balanced(), options.lambda) {
        (true, Some(l)) => {
            let cfg = TrainConfig { ipm_weight: l, ..options.train.clone() };
            let (m, log) = train_network(arch.clone(), &data, &cfg)?;
            (m, log, l)
        }
        (true, None) => train_lambda_grid(&arch, &data, &options.train, &options.lambda_grid)?,
        (false, _) => {
            let cfg = TrainConfig { ipm_weight: 0.0, ..options.train.clone() };
            let (m, log) = train_network(arch.clone(), &data, &cfg)?;
            (m, log, 0.0)
        }
    };
    let estimator = Estimator::Neural {
        architecture: arch,
        train_config: TrainConfig { ipm_weight: lambda, ..options.train.clone() },
        scaler: model.scaler,
        best_epoch: log.best_epoch,
    };
    Ok((TrainedModel { meta: meta(estimator), fitted: Fitted::Neural(model) }, Some(log)))
}

impl TrainedModel {
    /// Display name used in reports.
    pub fn method_name(&self) -> &'static str {
        match &self.meta.estimator {
            Estimator::Ridge { .. } => "Ridge",
            Estimator::Neural { architecture, train_config, .. } => {
                let balanced = train_config.ipm_weight > 0.0;
                match (architecture, balanced) {
                    (Architecture::Spatial(_), true) => "SC-CFR",
                    (Architecture::Spatial(_), false) => "SC-TARNET",
                    (Architecture::Dense(_), true) => "CFR",
                    (Architecture::Dense(_), false) => "TARNET",
                    (Architecture::Flat(_), _) => "MLP",
                }
            }
        }
    }

    pub fn check_layout(&self, layout: &TheaterLayout) -> Result<(), ModelError> {
        let found = layout.hash();
        if self.meta.layout_hash != found {
            return Err(ModelError::LayoutMismatch { expected: self.meta.layout_hash.clone(), found });
        }
        Ok(())
    }

    /// Predictions for `(occupancy, treatment)` pairs in outcome units.
    pub fn predict_pairs<'a>(
        &self,
        layout: &TheaterLayout,
        pairs: impl IntoIterator<Item = (&'a Occupancy, Treatment)>,
    ) -> Result<Vec<f64>, ModelError> {
        self.check_layout(layout)?;
        let pairs: Vec<(&Occupancy, Treatment)> = pairs.into_iter().collect();
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(240) {
            let input = encode_inputs(layout, chunk.iter().copied());
            match &self.fitted {
                Fitted::Neural(m) => out.extend(m.predict(&input)?),
                Fitted::Ridge(m) => {
                    let dim = layout.seat_count() + TREATMENT_DIM;
                    for i in 0..input.n {
                        let mut row = input.flat[i * layout.seat_count()..(i + 1) * layout.seat_count()].to_vec();
                        row.extend_from_slice(&input.z[i * TREATMENT_DIM..(i + 1) * TREATMENT_DIM]);
                        debug_assert_eq!(row.len(), dim);
                        out.push(m.predict_row(&row));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Predicted outcome of every treatment for every occupancy.
    pub fn predict_table(&self, layout: &TheaterLayout, occupancies: &[&Occupancy]) -> Result<Vec<[f64; TREATMENT_COUNT]>, ModelError> {
        let flat = self.predict_pairs(
            layout,
            occupancies.iter().flat_map(|&o| enumerate_treatments().iter().map(move |&t| (o, t))),
        )?;
        Ok(flat
            .chunks(TREATMENT_COUNT)
            .map(|c| c.try_into().expect("one row per treatment"))
            .collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::to_value(&self.meta).expect("meta serializes");
        match &self.fitted {
            Fitted::Neural(m) => Checkpoint {
                optimizer: match &self.meta.estimator {
                    Estimator::Neural { train_config, .. } => {
                        Some(OptimizerSnapshot { config: train_config.adam, step_count: m.adam_steps })
                    }
                    Estimator::Ridge { .. } => None,
                },
                meta,
                tensors: m.net.named_tensors(),
            },
            Fitted::Ridge(m) => Checkpoint {
                optimizer: None,
                meta,
                tensors: vec![
                    (
                        "ridge.coefficients".into(),
                        Tensor::new(vec![m.coefficients.len()], m.coefficients.clone()).expect("vector shape"),
                    ),
                    ("ridge.intercept".into(), Tensor::new(vec![1], vec![m.intercept]).expect("vector shape")),
                ],
            },
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, ModelError> {
        let meta: ModelMeta =
            serde_json::from_value(ck.meta).map_err(|e| ModelError::Checkpoint(format!("model metadata: {e}")))?;
        let fitted = match &meta.estimator {
            Estimator::Neural { architecture, scaler, .. } => {
                let net = NeuralNet::from_tensors(architecture.clone(), meta.dims, ck.tensors)?;
                let adam_steps = ck.optimizer.map_or(0, |o| o.step_count);
                Fitted::Neural(NeuralModel { net, scaler: *scaler, adam_steps })
            }
            Estimator::Ridge { alpha, .. } => {
                let get = |name: &str| {
                    ck.tensors
                        .iter()
                        .find(|(n, _)| n == name)
                        .map(|(_, t)| t.data().to_vec())
                        .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {name}")))
                };
                let coefficients = get("ridge.coefficients")?;
                if coefficients.len() != meta.dims.seats + TREATMENT_DIM {
                    return Err(ModelError::Checkpoint("ridge coefficient count does not match the layout".into()));
                }
                let intercept = get("ridge.intercept")?[0];
                Fitted::Ridge(RidgeModel { alpha: *alpha, coefficients, intercept })
            }
        };
        Ok(Self { meta, fitted })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_checkpoint().to_bytes()
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        Self::from_checkpoint(Checkpoint::from_bytes(bytes)?)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
