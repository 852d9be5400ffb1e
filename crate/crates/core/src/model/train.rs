use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mmd::{BatchIpm, MmdKernel};
use super::net::{Architecture, BatchInput, InputDims, NeuralNet};
use super::ModelError;
use crate::nn::{AdamConfig, AdamState, Tape, Tensor, Var};
use crate::occupancy::Occupancy;
use crate::scenario::{OutcomeComponent, ScenarioRecord};
use crate::sim::TheaterLayout;
use crate::treatment::{Treatment, TREATMENT_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight λ of the balancing penalty; 0 disables it.
    pub ipm_weight: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    pub mmd_kernel: MmdKernel,
    pub min_group_size: usize,
    pub adam: AdamConfig,
    /// Share of the training scenarios held out for model selection.
    pub validation_fraction: f64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            ipm_weight: 1.0,
            batch_size: 64,
            epochs: 150,
            patience: Some(30),
            mmd_kernel: MmdKernel::Linear,
            min_group_size: 2,
            adam: AdamConfig::default(),
            validation_fraction: 0.1,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.into()));
        if !(self.ipm_weight.is_finite() && self.ipm_weight >= 0.0) {
            return bad("ipm_weight must be a finite nonnegative number");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)");
        }
        if self.adam.learning_rate <= 0.0 {
            return bad("learning rate must be positive");
        }
        Ok(())
    }
}

/// Builds model inputs for `(occupancy, treatment)` pairs.
pub fn encode_inputs<'a>(
    layout: &TheaterLayout,
    pairs: impl IntoIterator<Item = (&'a Occupancy, Treatment)>,
) -> BatchInput {
    let cells = layout.rows() * layout.cols();
    let mut input = BatchInput { n: 0, grids: Vec::new(), flat: Vec::new(), z: Vec::new() };
    for (occ, t) in pairs {
        let start = input.grids.len();
        input.grids.resize(start + cells, 0.0);
        for s in occ.occupied_seats() {
            input.grids[start + layout.seat_cell(s)] = 1.0;
        }
        input.flat.extend(occ.bits().iter().map(|&b| f64::from(u8::from(b))));
        input.z.extend(t.to_vector());
        input.n += 1;
    }
    input
}

/// Factual observations only: occupancy, assigned treatment and one noisy
/// outcome component per scenario.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub dims: InputDims,
    inputs: BatchInput,
    treatments: Vec<usize>,
    targets: Vec<f64>,
}

impl TrainingSet {
    pub fn from_records<'a>(
        layout: &TheaterLayout,
        records: impl IntoIterator<Item = &'a ScenarioRecord>,
        component: OutcomeComponent,
    ) -> Self {
        let records: Vec<&ScenarioRecord> = records.into_iter().collect();
        let inputs = encode_inputs(layout, records.iter().map(|r| (&r.occupancy, r.z)));
        Self {
            dims: InputDims { rows: layout.rows(), cols: layout.cols(), seats: layout.seat_count() },
            inputs,
            treatments: records.iter().map(|r| r.z.index()).collect(),
            targets: records.iter().map(|r| r.factual(component)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn treatments(&self) -> &[usize] {
        &self.treatments
    }

    /// `[n, 875]` row-major `[x, z]` features.
    pub fn concat_features(&self) -> Vec<f64> {
        let s = self.dims.seats;
        let mut out = Vec::with_capacity(self.len() * (s + TREATMENT_DIM));
        for i in 0..self.len() {
            out.extend_from_slice(&self.inputs.flat[i * s..(i + 1) * s]);
            out.extend_from_slice(&self.inputs.z[i * TREATMENT_DIM..(i + 1) * TREATMENT_DIM]);
        }
        out
    }

    pub fn batch(&self, idx: &[usize]) -> BatchInput {
        let cells = self.dims.rows * self.dims.cols;
        let s = self.dims.seats;
        let mut b = BatchInput { n: idx.len(), grids: Vec::new(), flat: Vec::new(), z: Vec::new() };
        for &i in idx {
            b.grids.extend_from_slice(&self.inputs.grids[i * cells..(i + 1) * cells]);
            b.flat.extend_from_slice(&self.inputs.flat[i * s..(i + 1) * s]);
            b.z.extend_from_slice(&self.inputs.z[i * TREATMENT_DIM..(i + 1) * TREATMENT_DIM]);
        }
        b
    }

    /// Seeded split into `(fit, validation)` index sets.
    pub fn holdout(&self, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), ModelError> {
        let n = self.len();
        if n < 2 {
            return Err(ModelError::EmptyData(format!("need at least 2 training scenarios, got {n}")));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        idx.shuffle(&mut rng);
        let n_val = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
        let val = idx.split_off(n - n_val);
        Ok((idx, val))
    }
}

/// Affine map between raw and standardized targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub mean: f64,
    pub std: f64,
}

impl TargetScaler {
    pub fn fit(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Self { mean, std }
    }

    pub fn forward(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn inverse(&self, y: f64) -> f64 {
        y * self.std + self.mean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Training objective per sample on standardized targets.
    pub train_loss: f64,
    /// Factual validation MSE in outcome units.
    pub val_mse: f64,
    pub mean_ipm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
}

impl TrainLog {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs.iter().map(|e| serde_json::to_string(e).expect("log serializes") + "\n").collect()
    }
}

/// A trained network plus its target scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralModel {
    pub net: NeuralNet,
    pub scaler: TargetScaler,
    pub adam_steps: u64,
}

impl NeuralModel {
    pub fn predict(&self, input: &BatchInput) -> Result<Vec<f64>, ModelError> {
        Ok(self.net.predict(input)?.into_iter().map(|v| self.scaler.inverse(v)).collect())
    }
}

/// Loss of one batch: summed factual squared error on standardized targets,
/// plus λ times the balancing penalty when λ > 0. Returns the tape, the loss
/// node, the parameter nodes and the penalty value.
pub fn batch_loss(
    net: &NeuralNet,
    input: &BatchInput,
    targets: &[f64],
    treatments: &[usize],
    config: &TrainConfig,
) -> Result<(Tape, Var, Vec<Var>, f64), ModelError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = net.params.iter().map(|p| tape.param(p.clone())).collect();
    let (rep, pred) = net.forward(&mut tape, &vars, input)?;
    let y = tape.constant(Tensor::new(vec![input.n, 1], targets.to_vec())?);
    let mse = tape.mse(pred, y)?;
    let mut loss = tape.scale(mse, input.n as f64);
    let ipm = BatchIpm { treatments: treatments.to_vec(), kernel: config.mmd_kernel, min_group_size: config.min_group_size };
    let mut penalty = 0.0;
    if net.arch.has_representation() {
        if config.ipm_weight > 0.0 {
            let p = tape.scalar_fn(rep, &ipm)?;
            penalty = tape.value(p).data()[0];
            let weighted = tape.scale(p, config.ipm_weight);
            loss = tape.add(loss, weighted)?;
        } else {
            let r = tape.value(rep);
            penalty = ipm.penalty(r.data(), r.numel() / input.n)?.0;
        }
    }
    Ok((tape, loss, vars, penalty))
}

fn validation_mse(net: &NeuralNet, data: &TrainingSet, scaler: &TargetScaler, idx: &[usize]) -> Result<f64, ModelError> {
    let mut sse = 0.0;
    for chunk in idx.chunks(256) {
        let pred = net.predict(&data.batch(chunk))?;
        for (p, &i) in pred.iter().zip(chunk) {
            sse += (scaler.inverse(*p) - data.targets[i]).powi(2);
        }
    }
    Ok(sse / idx.len() as f64)
}

/// Mini-batch ADAM training. Returns the parameters of the epoch with the
/// lowest factual validation MSE.
pub fn train_network(arch: Architecture, data: &TrainingSet, config: &TrainConfig) -> Result<(NeuralModel, TrainLog), ModelError> {
    config.validate()?;
    let (fit, val) = data.holdout(config.validation_fraction, config.rng_seed)?;
    let scaler = TargetScaler::fit(&fit.iter().map(|&i| data.targets[i]).collect::<Vec<_>>());
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut net = NeuralNet::init(arch, data.dims, &mut init_rng)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    shuffle_rng.set_stream(2);
    let mut adam = AdamState::new(config.adam, &net.params);

    let mut order = fit.clone();
    let mut log = TrainLog { epochs: Vec::new(), best_epoch: 0, best_val_mse: f64::INFINITY };
    let mut best = net.params.clone();
    let mut best_steps = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut ipm_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let input = data.batch(chunk);
            let targets: Vec<f64> = chunk.iter().map(|&i| scaler.forward(data.targets[i])).collect();
            let treatments: Vec<usize> = chunk.iter().map(|&i| data.treatments[i]).collect();
            let (mut tape, loss, vars, penalty) = batch_loss(&net, &input, &targets, &treatments, config)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(ModelError::Divergence { epoch });
            }
            tape.backward(loss)?;
            for (p, v) in net.params.iter_mut().zip(&vars) {
                let g = tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]);
                p.set_grad(g)?;
            }
            adam.step(&mut net.params)?;
            loss_sum += value;
            ipm_sum += penalty;
            batches += 1;
        }
        let val_mse = validation_mse(&net, data, &scaler, &val)?;
        if !val_mse.is_finite() {
            return Err(ModelError::Divergence { epoch });
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            val_mse,
            mean_ipm: ipm_sum / batches as f64,
        });
        if val_mse < log.best_val_mse {
            log.best_val_mse = val_mse;
            log.best_epoch = epoch;
            best = net.params.clone();
            best_steps = adam.step_count;
        } else if config.patience.is_some_and(|p| epoch - log.best_epoch >= p) {
            break;
        }
    }
    for p in &mut best {
        p.clear_grad();
    }
    net.params = best;
    Ok((NeuralModel { net, scaler, adam_steps: best_steps }, log))
}

/// Trains one network per λ and keeps the one with the lowest validation MSE;
/// earlier grid entries win ties.
pub fn train_lambda_grid(
    arch: &Architecture,
    data: &TrainingSet,
    config: &TrainConfig,
    grid: &[f64],
) -> Result<(NeuralModel, TrainLog, f64), ModelError> {
    let mut best: Option<(NeuralModel, TrainLog, f64)> = None;
    for &lambda in grid {
        let cfg = TrainConfig { ipm_weight: lambda, ..config.clone() };
        let (model, log) = train_network(arch.clone(), data, &cfg)?;
        if best.as_ref().is_none_or(|b| log.best_val_mse < b.1.best_val_mse) {
            best = Some((model, log, lambda));
        }
    }
    best.ok_or_else(|| ModelError::Config("empty lambda grid".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::net::{DenseArch, FlatArch, SpatialArch};
    use crate::treatment::enumerate_treatments;
    use rand::Rng;

    fn planted(n: usize, mut f: impl FnMut(&Occupancy, &Treatment) -> f64) -> (TheaterLayout, Vec<ScenarioRecord>) {
        let layout = crate::sim::build_default_layout();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let records = (0..n)
            .map(|i| {
                let rate = rng.gen_range(0.2..0.9);
                let occupancy = Occupancy::new((0..868).map(|_| rng.gen_bool(rate)).collect());
                let z = enumerate_treatments()[rng.gen_range(0..30)];
                let y = f(&occupancy, &z);
                ScenarioRecord {
                    scenario_id: i as u64,
                    occupancy,
                    z,
                    y_f: [y, y, 0.0].into(),
                    table: None,
                    seed: 0,
                }
            })
            .collect();
        (layout, records)
    }

    #[test]
    fn constant_outcome_is_fit() {
        let (layout, records) = planted(60, |_, _| 37.5);
        let data = TrainingSet::from_records(&layout, &records, OutcomeComponent::Max);
        let cfg = TrainConfig { epochs: 300, patience: None, ipm_weight: 0.0, ..TrainConfig::default() };
        let (model, log) = train_network(Architecture::Dense(DenseArch::default()), &data, &cfg).unwrap();
        assert!(log.epochs.last().unwrap().train_loss < 1e-3, "{:?}", log.epochs.last());
        let p = model.predict(&data.batch(&[0, 1])).unwrap();
        assert!((p[0] - 37.5).abs() < 0.05);
    }

    #[test]
    fn training_is_deterministic_and_logs_ipm() {
        let (layout, records) = planted(50, |o, z| o.count() as f64 / 10.0 + 5.0 * z.to_vector()[1]);
        let data = TrainingSet::from_records(&layout, &records, OutcomeComponent::Max);
        let cfg = TrainConfig { epochs: 3, ..TrainConfig::default() };
        let a = train_network(Architecture::Dense(DenseArch::default()), &data, &cfg).unwrap();
        let b = train_network(Architecture::Dense(DenseArch::default()), &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.1.epochs.iter().all(|e| e.mean_ipm > 0.0));
        assert_eq!(a.1.to_jsonl().lines().count(), a.1.epochs.len());
    }

    #[test]
    fn planted_linear_function_reaches_the_noise_floor() {
        // y = count / 20 + 6 z_1 - 4 z_4 + noise, noise sd 0.5 => floor 0.25
        let mut noise = ChaCha8Rng::seed_from_u64(9);
        let normal = rand_distr::Normal::new(0.0, 0.5).unwrap();
        let (layout, records) = planted(1000, |o, z| {
            let v = z.to_vector();
            o.count() as f64 / 20.0 + 6.0 * v[1] - 4.0 * v[4] + rand_distr::Distribution::sample(&normal, &mut noise)
        });
        let data = TrainingSet::from_records(&layout, &records, OutcomeComponent::Max);
        let cfg = TrainConfig {
            epochs: 300,
            patience: Some(60),
            ipm_weight: 0.0,
            adam: AdamConfig { learning_rate: 3e-3, ..AdamConfig::default() },
            ..TrainConfig::default()
        };
        let arch = Architecture::Spatial(SpatialArch { channels: [2, 4], ..SpatialArch::default() });
        let (_, log) = train_network(arch, &data, &cfg).unwrap();
        assert!(log.best_val_mse < 2.0 * 0.25, "validation MSE {}", log.best_val_mse);
    }

    #[test]
    fn divergence_reports_the_epoch() {
        let (layout, records) = planted(20, |o, _| o.count() as f64);
        let data = TrainingSet::from_records(&layout, &records, OutcomeComponent::Max);
        let cfg = TrainConfig { epochs: 50, adam: AdamConfig { learning_rate: 1e300, ..AdamConfig::default() }, ..TrainConfig::default() };
        match train_network(Architecture::Flat(FlatArch::default()), &data, &cfg) {
            Err(ModelError::Divergence { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|m| m.1.best_val_mse)),
        }
    }

    #[test]
    fn holdout_is_disjoint_and_complete() {
        let (layout, records) = planted(31, |_, _| 1.0);
        let data = TrainingSet::from_records(&layout, &records, OutcomeComponent::Max);
        let (a, b) = data.holdout(0.1, 5).unwrap();
        assert_eq!(b.len(), 3);
        let mut all = [a, b].concat();
        all.sort_unstable();
        assert_eq!(all, (0..31).collect::<Vec<_>>());
    }
}
