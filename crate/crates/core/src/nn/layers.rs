use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvGeometry, PoolGeometry, PoolMode};
use super::{NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }
}

/// Uniform Glorot initialization, `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-a..=a))
}

/// A bank of 2D cross-correlation kernels with per-output-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl ConvKernel {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self, NnError> {
        let s = weights.shape();
        if s.len() != 4 {
            return Err(NnError::Shape(format!("conv weights must be 4-D, got {s:?}")));
        }
        if bias.shape() != [s[0]] {
            return Err(NnError::Shape(format!(
                "conv bias shape {:?} does not match {} output channels",
                bias.shape(),
                s[0]
            )));
        }
        Ok(Self { weights, bias })
    }

    pub fn init<R: Rng + ?Sized>(
        out_channels: usize,
        in_channels: usize,
        k1: usize,
        k2: usize,
        rng: &mut R,
    ) -> Self {
        let area = k1 * k2;
        let weights = glorot_uniform(
            &[out_channels, in_channels, k1, k2],
            in_channels * area,
            out_channels * area,
            rng,
        );
        Self { weights, bias: Tensor::zeros(&[out_channels]) }
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn window(&self) -> (usize, usize) {
        (self.weights.shape()[2], self.weights.shape()[3])
    }
}

/// Fully connected layer `act(W x + b)` with `W: [out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpLayer {
    pub weights: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl MlpLayer {
    pub fn new(weights: Tensor, bias: Tensor, activation: Activation) -> Result<Self, NnError> {
        let s = weights.shape();
        if s.len() != 2 || bias.shape() != [s[0]] {
            return Err(NnError::Shape(format!(
                "dense layer expects weights [out, in] and bias [out], got {s:?} and {:?}",
                bias.shape()
            )));
        }
        Ok(Self { weights, bias, activation })
    }

    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut R) -> Self {
        Self {
            weights: glorot_uniform(&[out_dim, in_dim], in_dim, out_dim, rng),
            bias: Tensor::zeros(&[out_dim]),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[0]
    }
}

/// Splits `[C, H, W]` or `[N, C, H, W]` into `(N, C, H, W)`.
pub(crate) fn image_dims(t: &Tensor) -> Result<(usize, usize, usize, usize), NnError> {
    match *t.shape() {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(NnError::Shape(format!("expected [C,H,W] or [N,C,H,W] image, got {s:?}"))),
    }
}

fn image_shape(batched: bool, n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if batched {
        vec![n, c, h, w]
    } else {
        vec![c, h, w]
    }
}

/// 2D cross-correlation of a `[C_in,H,W]` (or batched) input with zero padding.
pub fn conv2d_forward(input: &Tensor, kernel: &ConvKernel, padding: usize, stride: usize) -> Result<Tensor, NnError> {
    let (n, c, h, w) = image_dims(input)?;
    if c != kernel.in_channels() {
        return Err(NnError::Shape(format!(
            "input has {c} channels but the kernel expects {}",
            kernel.in_channels()
        )));
    }
    let (k1, k2) = kernel.window();
    let g = ConvGeometry {
        batch: n,
        in_channels: c,
        height: h,
        width: w,
        out_channels: kernel.out_channels(),
        k1,
        k2,
        padding,
        stride,
    };
    g.validate()?;
    let mut out = vec![0.0; g.output_len()];
    kernels::conv2d(&g, input.data(), kernel.weights.data(), kernel.bias.data(), &mut out);
    let shape = image_shape(input.shape().len() == 4, n, g.out_channels, g.out_height(), g.out_width());
    Tensor::new(shape, out)
}

/// Window pooling over each channel; `PoolMode::Mean` divides by the window area.
pub fn avg_pool2d_forward(input: &Tensor, window: usize, stride: usize, mode: PoolMode) -> Result<Tensor, NnError> {
    let (n, c, h, w) = image_dims(input)?;
    let g = PoolGeometry { planes: n * c, height: h, width: w, window, stride, mode };
    g.validate()?;
    let mut out = vec![0.0; n * c * g.out_height() * g.out_width()];
    kernels::avg_pool2d(&g, input.data(), &mut out);
    let shape = image_shape(input.shape().len() == 4, n, c, g.out_height(), g.out_width());
    Tensor::new(shape, out)
}

/// Applies the layers in order to a `[in]` vector or a `[N, in]` batch.
pub fn mlp_forward(layers: &[MlpLayer], input: &Tensor) -> Result<Tensor, NnError> {
    let (rows, mut dim, batched) = match *input.shape() {
        [d] => (1, d, false),
        [n, d] => (n, d, true),
        ref s => return Err(NnError::Shape(format!("dense input must be 1-D or 2-D, got {s:?}"))),
    };
    let mut x = input.data().to_vec();
    for (idx, layer) in layers.iter().enumerate() {
        if layer.in_dim() != dim {
            return Err(NnError::Shape(format!(
                "layer {idx} expects {} inputs but receives {dim}",
                layer.in_dim()
            )));
        }
        let mut y = vec![0.0; rows * layer.out_dim()];
        kernels::linear(&x, rows, dim, layer.weights.data(), layer.bias.data(), layer.out_dim(), &mut y);
        for v in &mut y {
            *v = layer.activation.apply(*v);
        }
        x = y;
        dim = layer.out_dim();
    }
    let shape = if batched { vec![rows, dim] } else { vec![dim] };
    Tensor::new(shape, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conv_oracle(input: &Tensor, k: &ConvKernel, pad: usize, stride: usize) -> Vec<f64> {
        let (_, c, h, w) = image_dims(input).unwrap();
        let (k1, k2) = k.window();
        let co = k.out_channels();
        let ho = (h + 2 * pad - k1) / stride + 1;
        let wo = (w + 2 * pad - k2) / stride + 1;
        let at = |ci: usize, i: isize, j: isize| -> f64 {
            if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
                0.0
            } else {
                input.data()[(ci * h + i as usize) * w + j as usize]
            }
        };
        let mut out = Vec::new();
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = k.bias.data()[o];
                    for ci in 0..c {
                        for m in 0..k1 {
                            for n in 0..k2 {
                                let a = at(ci, (i * stride + m) as isize - pad as isize, (j * stride + n) as isize - pad as isize);
                                acc += a * k.weights.data()[((o * c + ci) * k1 + m) * k2 + n];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_on_ones() {
        let input = Tensor::full(&[1, 3, 3], 1.0);
        let k = ConvKernel::new(Tensor::full(&[1, 1, 1, 1], 1.0), Tensor::zeros(&[1])).unwrap();
        let out = conv2d_forward(&input, &k, 0, 1).unwrap();
        assert_eq!(out.shape(), &[1, 3, 3]);
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_kernel_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = Tensor::from_fn(&[2, 6, 5], |_| rng.gen_range(-1.0..1.0));
        let k = ConvKernel::new(Tensor::zeros(&[3, 2, 3, 2]), Tensor::zeros(&[3])).unwrap();
        let out = conv2d_forward(&input, &k, 1, 2).unwrap();
        assert_eq!(out.shape(), &[3, (6 + 2 - 3) / 2 + 1, (5 + 2 - 2) / 2 + 1]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_conv_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = Tensor::from_fn(&[1, 5, 5], |_| rng.gen_range(-1.0..1.0));
        let k = ConvKernel::new(
            Tensor::from_fn(&[1, 1, 3, 3], |_| rng.gen_range(-1.0..1.0)),
            Tensor::zeros(&[1]),
        )
        .unwrap();
        let out = conv2d_forward(&input, &k, 1, 1).unwrap();
        assert_eq!(out.shape(), &[1, 5, 5]);
        for (a, b) in out.data().iter().zip(conv_oracle(&input, &k, 1, 1)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let input = Tensor::zeros(&[2, 4, 4]);
        let k = ConvKernel::init(1, 3, 3, 3, &mut ChaCha8Rng::seed_from_u64(0));
        let err = conv2d_forward(&input, &k, 1, 1).unwrap_err();
        assert!(matches!(err, NnError::Shape(_)));
        let k = ConvKernel::init(1, 2, 7, 7, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(conv2d_forward(&input, &k, 1, 1).is_err());
    }

    #[test]
    fn pool_hand_example_and_constant() {
        let input = Tensor::new(vec![1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let out = avg_pool2d_forward(&input, 2, 2, PoolMode::Mean).unwrap();
        assert_eq!(out.data(), &[4.0]);
        let sum = avg_pool2d_forward(&input, 2, 2, PoolMode::Sum).unwrap();
        assert_eq!(sum.data(), &[16.0]);
        let c = Tensor::full(&[2, 6, 4], 2.5);
        let out = avg_pool2d_forward(&c, 2, 2, PoolMode::Mean).unwrap();
        assert!(out.data().iter().all(|&v| v == 2.5));
        assert!(avg_pool2d_forward(&input, 3, 1, PoolMode::Mean).is_err());
    }

    #[test]
    fn pool_random_matches_direct_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = Tensor::from_fn(&[1, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let out = avg_pool2d_forward(&input, 2, 2, PoolMode::Mean).unwrap();
        let d = input.data();
        for i in 0..2 {
            for j in 0..2 {
                let m = (d[(2 * i) * 4 + 2 * j] + d[(2 * i) * 4 + 2 * j + 1] + d[(2 * i + 1) * 4 + 2 * j] + d[(2 * i + 1) * 4 + 2 * j + 1]) / 4.0;
                assert!((out.data()[i * 2 + j] - m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mlp_identity_and_relu_clamp() {
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let layer = MlpLayer::new(eye, Tensor::zeros(&[3]), Activation::Identity).unwrap();
        let x = Tensor::new(vec![3], vec![0.5, -2.0, 7.0]).unwrap();
        assert_eq!(mlp_forward(std::slice::from_ref(&layer), &x).unwrap().data(), x.data());
        let relu = MlpLayer { activation: Activation::Relu, ..layer };
        let neg = Tensor::new(vec![3], vec![-0.5, -2.0, -7.0]).unwrap();
        assert!(mlp_forward(&[relu], &neg).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_rejects_broken_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layers = vec![
            MlpLayer::init(4, 3, Activation::Relu, &mut rng),
            MlpLayer::init(2, 1, Activation::Identity, &mut rng),
        ];
        assert!(mlp_forward(&layers, &Tensor::zeros(&[4])).is_err());
        assert!(mlp_forward(&layers[..1], &Tensor::zeros(&[5])).is_err());
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = glorot_uniform(&[10, 20], 20, 10, &mut rng);
        let a = (6.0f64 / 30.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= a));
    }
}
