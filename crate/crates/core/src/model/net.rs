use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::nn::{glorot_uniform, Activation, PoolMode, Tape, Tensor, Var};
use crate::treatment::TREATMENT_DIM;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialArch {
    /// Output channels of the two convolution blocks.
    pub channels: [usize; 2],
    pub kernel: usize,
    pub padding: usize,
    pub pool: usize,
    pub pool_mode: PoolMode,
    /// Hidden widths of the outcome head; a final width-1 layer is appended.
    pub head: Vec<usize>,
}

impl Default for SpatialArch {
    fn default() -> Self {
        Self { channels: [8, 16], kernel: 3, padding: 1, pool: 2, pool_mode: PoolMode::Mean, head: vec![64, 32] }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseArch {
    pub encoder: Vec<usize>,
    pub head: Vec<usize>,
}

impl Default for DenseArch {
    fn default() -> Self {
        Self { encoder: vec![64, 64], head: vec![64, 32] }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlatArch {
    pub hidden: Vec<usize>,
}

impl Default for FlatArch {
    fn default() -> Self {
        Self { hidden: vec![64, 64, 32, 32] }
    }
}

/// Network family. Spatial and dense networks expose a representation for the
/// balancing penalty; the flat network does not.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Architecture {
    Spatial(SpatialArch),
    Dense(DenseArch),
    Flat(FlatArch),
}

impl Architecture {
    pub fn has_representation(&self) -> bool {
        !matches!(self, Architecture::Flat(_))
    }
}

/// Input geometry shared by every network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub rows: usize,
    pub cols: usize,
    pub seats: usize,
}

/// Model inputs for a batch.
#[derive(Debug, Clone)]
pub struct BatchInput {
    pub n: usize,
    /// `[n, 1, rows, cols]` covariate grids, used by spatial networks.
    pub grids: Vec<f64>,
    /// `[n, seats]` seat bits, used by dense and flat networks.
    pub flat: Vec<f64>,
    /// `[n, 7]` treatment vectors.
    pub z: Vec<f64>,
}

fn conv_out(size: usize, kernel: usize, padding: usize) -> Option<usize> {
    (size + 2 * padding).checked_sub(kernel).map(|v| v + 1)
}

fn pool_out(size: usize, window: usize) -> Option<usize> {
    (size >= window).then(|| (size - window) / window + 1)
}

impl SpatialArch {
    /// `(channels, height, width)` after the second pooling block.
    pub fn representation_shape(&self, rows: usize, cols: usize) -> Option<(usize, usize, usize)> {
        let block = |s: usize| conv_out(s, self.kernel, self.padding).and_then(|s| pool_out(s, self.pool));
        let h = block(rows).and_then(block)?;
        let w = block(cols).and_then(block)?;
        Some((self.channels[1], h, w))
    }
}

/// Parameters of one network, in a fixed order with stable names.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralNet {
    pub arch: Architecture,
    pub dims: InputDims,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
}

fn mlp_shapes(prefix: &str, input: usize, hidden: &[usize], out: Option<usize>) -> Vec<(String, Vec<usize>, usize, usize)> {
    let mut widths = hidden.to_vec();
    widths.extend(out);
    let mut shapes = Vec::new();
    let mut prev = input;
    for (i, &w) in widths.iter().enumerate() {
        shapes.push((format!("{prefix}{i}.weight"), vec![w, prev], prev, w));
        shapes.push((format!("{prefix}{i}.bias"), vec![w], 0, 0));
        prev = w;
    }
    shapes
}

impl NeuralNet {
    /// `(name, shape, fan_in, fan_out)`; zero fans mark biases.
    fn shapes(arch: &Architecture, dims: InputDims) -> Result<Vec<(String, Vec<usize>, usize, usize)>, ModelError> {
        Ok(match arch {
            Architecture::Spatial(a) => {
                let (c, h, w) = a
                    .representation_shape(dims.rows, dims.cols)
                    .ok_or_else(|| ModelError::Config(format!("{}x{} grid too small for the encoder", dims.rows, dims.cols)))?;
                if a.kernel == 0 || a.pool == 0 || a.channels.contains(&0) {
                    return Err(ModelError::Config("kernel, pool and channel sizes must be positive".into()));
                }
                let k2 = a.kernel * a.kernel;
                let mut s = vec![
                    ("conv0.weight".into(), vec![a.channels[0], 1, a.kernel, a.kernel], k2, a.channels[0] * k2),
                    ("conv0.bias".into(), vec![a.channels[0]], 0, 0),
                    ("conv1.weight".into(), vec![a.channels[1], a.channels[0], a.kernel, a.kernel], a.channels[0] * k2, a.channels[1] * k2),
                    ("conv1.bias".into(), vec![a.channels[1]], 0, 0),
                ];
                s.extend(mlp_shapes("head", c * h * w + TREATMENT_DIM, &a.head, Some(1)));
                s
            }
            Architecture::Dense(a) => {
                if a.encoder.is_empty() {
                    return Err(ModelError::Config("dense encoder needs at least one layer".into()));
                }
                let mut s = mlp_shapes("enc", dims.seats, &a.encoder, None);
                s.extend(mlp_shapes("head", a.encoder[a.encoder.len() - 1] + TREATMENT_DIM, &a.head, Some(1)));
                s
            }
            Architecture::Flat(a) => mlp_shapes("mlp", dims.seats + TREATMENT_DIM, &a.hidden, Some(1)),
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, dims: InputDims, rng: &mut R) -> Result<Self, ModelError> {
        let shapes = Self::shapes(&arch, dims)?;
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape, fan_in, fan_out) in shapes {
            params.push(if fan_in == 0 { Tensor::zeros(&shape) } else { glorot_uniform(&shape, fan_in, fan_out, rng) });
            names.push(name);
        }
        Ok(Self { arch, dims, names, params })
    }

    /// Rebuilds a network from named tensors, checking every shape.
    pub fn from_tensors(arch: Architecture, dims: InputDims, tensors: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        let shapes = Self::shapes(&arch, dims)?;
        if shapes.len() != tensors.len() {
            return Err(ModelError::Checkpoint(format!("expected {} tensors, found {}", shapes.len(), tensors.len())));
        }
        for ((name, shape, _, _), (n, t)) in shapes.iter().zip(&tensors) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(ModelError::Checkpoint(format!("tensor {n} {:?} does not match {name} {shape:?}", t.shape())));
            }
        }
        let (names, params) = tensors.into_iter().unzip();
        Ok(Self { arch, dims, names, params })
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.params.iter().map(|t| {
            let mut t = t.clone();
            t.clear_grad();
            t
        }))
        .collect()
    }

    fn dense_stack(tape: &mut Tape, mut x: Var, params: &[Var], layers: usize, last_identity: bool) -> Result<Var, ModelError> {
        for i in 0..layers {
            x = tape.linear(x, params[2 * i], params[2 * i + 1])?;
            if !(last_identity && i + 1 == layers) {
                x = tape.activation(x, Activation::Relu);
            }
        }
        Ok(x)
    }

    /// Records the forward pass; returns `(representation, prediction [n, 1])`.
    /// The flat network's representation is its input.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], input: &BatchInput) -> Result<(Var, Var), ModelError> {
        let n = input.n;
        let z = tape.constant(Tensor::new(vec![n, TREATMENT_DIM], input.z.clone())?);
        match &self.arch {
            Architecture::Spatial(a) => {
                let grid = tape.constant(Tensor::new(vec![n, 1, self.dims.rows, self.dims.cols], input.grids.clone())?);
                let mut x = grid;
                for b in 0..2 {
                    x = tape.conv2d(x, params[2 * b], params[2 * b + 1], a.padding, 1)?;
                    x = tape.relu(x);
                    x = tape.avg_pool2d(x, a.pool, a.pool, a.pool_mode)?;
                }
                let rep = tape.flatten(x)?;
                let h = tape.concat_cols(rep, z)?;
                let pred = Self::dense_stack(tape, h, &params[4..], a.head.len() + 1, true)?;
                Ok((rep, pred))
            }
            Architecture::Dense(a) => {
                let x = tape.constant(Tensor::new(vec![n, self.dims.seats], input.flat.clone())?);
                let rep = Self::dense_stack(tape, x, params, a.encoder.len(), false)?;
                let h = tape.concat_cols(rep, z)?;
                let pred = Self::dense_stack(tape, h, &params[2 * a.encoder.len()..], a.head.len() + 1, true)?;
                Ok((rep, pred))
            }
            Architecture::Flat(a) => {
                let x = tape.constant(Tensor::new(vec![n, self.dims.seats], input.flat.clone())?);
                let xz = tape.concat_cols(x, z)?;
                let pred = Self::dense_stack(tape, xz, params, a.hidden.len() + 1, true)?;
                Ok((x, pred))
            }
        }
    }

    /// Raw network outputs for a batch, without recording gradients.
    pub fn predict(&self, input: &BatchInput) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let (_, pred) = self.forward(&mut tape, &vars, input)?;
        Ok(tape.value(pred).data().to_vec())
    }

    /// Representations for a batch (spatial and dense networks).
    pub fn represent(&self, input: &BatchInput) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let (rep, _) = self.forward(&mut tape, &vars, input)?;
        Ok(tape.value(rep).clone())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    const DIMS: InputDims = InputDims { rows: 22, cols: 42, seats: 868 };

    fn batch(n: usize, fill: f64) -> BatchInput {
        BatchInput {
            n,
            grids: vec![fill; n * 22 * 42],
            flat: vec![fill; n * 868],
            z: (0..n * 7).map(|i| (i % 2) as f64).collect(),
        }
    }

    #[test]
    fn representation_shape_arithmetic() {
        let a = SpatialArch::default();
        // 22x42 -> conv(p1) 22x42 -> pool 11x21 -> conv 11x21 -> pool 5x10
        assert_eq!(a.representation_shape(22, 42), Some((16, 5, 10)));
        let net = NeuralNet::init(Architecture::Spatial(a), DIMS, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(net.represent(&batch(2, 1.0)).unwrap().shape(), &[2, 800]);
        assert_eq!(net.params[4].shape(), &[64, 807]);
        let literal = SpatialArch { padding: 3, ..SpatialArch::default() };
        // 22 + 6 - 3 + 1 = 26 -> 13 -> 17 -> 8 ; 42 -> 46 -> 23 -> 27 -> 13
        assert_eq!(literal.representation_shape(22, 42), Some((16, 8, 13)));
    }

    #[test]
    fn zero_grid_zero_bias_gives_zero_representation() {
        let net = NeuralNet::init(Architecture::Spatial(SpatialArch::default()), DIMS, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(net.represent(&batch(1, 0.0)).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_rows_are_independent() {
        let net = NeuralNet::init(Architecture::Spatial(SpatialArch::default()), DIMS, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut b = batch(2, 0.0);
        for (i, v) in b.grids.iter_mut().enumerate() {
            *v = ((i * 7919) % 3 == 0) as u8 as f64;
        }
        let p = net.predict(&b).unwrap();
        let cell = 22 * 42;
        let mut swapped = b.clone();
        swapped.grids = [&b.grids[cell..], &b.grids[..cell]].concat();
        swapped.z = [&b.z[7..], &b.z[..7]].concat();
        let q = net.predict(&swapped).unwrap();
        assert_eq!((p[0], p[1]), (q[1], q[0]));
        assert_eq!(p, net.predict(&b).unwrap());
    }

    #[test]
    fn every_family_builds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for arch in [
            Architecture::Dense(DenseArch::default()),
            Architecture::Flat(FlatArch::default()),
        ] {
            let net = NeuralNet::init(arch.clone(), DIMS, &mut rng).unwrap();
            let p = net.predict(&batch(3, 1.0)).unwrap();
            assert_eq!(p.len(), 3);
            assert!(p.iter().all(|v| v.is_finite()));
            let back = NeuralNet::from_tensors(arch, DIMS, net.named_tensors()).unwrap();
            assert_eq!(back, net);
        }
        let flat = NeuralNet::init(Architecture::Flat(FlatArch::default()), DIMS, &mut rng).unwrap();
        assert_eq!(flat.params.len(), 10);
    }
}
