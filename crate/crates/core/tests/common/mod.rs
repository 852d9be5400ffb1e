//! Loop oracles and finite-difference checks shared by the integration tests
//! and the acceptance runner.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crowd_cate::model::{
    batch_loss, encode_inputs, Architecture, InputDims, MmdKernel, NeuralNet, SpatialArch, TrainConfig,
};
use crowd_cate::nn::{
    avg_pool2d_forward, conv2d_forward, mlp_forward, Activation, ConvKernel, MlpLayer, PoolMode, Tensor,
};
use crowd_cate::scenario::sample_occupancy;
use crowd_cate::sim::build_default_layout;
use crowd_cate::Treatment;

/// Direct six-loop cross-correlation with explicit zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv_oracle(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    weight: &[f64],
    (co, k1, k2): (usize, usize, usize),
    bias: &[f64],
    pad: usize,
    stride: usize,
) -> Vec<f64> {
    let ho = (h + 2 * pad - k1) / stride + 1;
    let wo = (w + 2 * pad - k2) / stride + 1;
    let mut out = vec![0.0; n * co * ho * wo];
    for b in 0..n {
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = bias[o];
                    for ci in 0..c {
                        for m in 0..k1 {
                            for q in 0..k2 {
                                let (r, col) = ((i * stride + m) as isize - pad as isize, (j * stride + q) as isize - pad as isize);
                                if r < 0 || col < 0 || r >= h as isize || col >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * c + ci) * h + r as usize) * w + col as usize];
                                s += weight[((o * c + ci) * k1 + m) * k2 + q] * xv;
                            }
                        }
                    }
                    out[((b * co + o) * ho + i) * wo + j] = s;
                }
            }
        }
    }
    out
}

pub fn pool_oracle(x: &[f64], planes: usize, h: usize, w: usize, window: usize, stride: usize, mean: bool) -> Vec<f64> {
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        for i in 0..ho {
            for j in 0..wo {
                let mut s = 0.0;
                for a in 0..window {
                    for b in 0..window {
                        s += x[(p * h + i * stride + a) * w + j * stride + b];
                    }
                }
                out.push(if mean { s / (window * window) as f64 } else { s });
            }
        }
    }
    out
}

/// Dense stack oracle: each layer is (weights [out, in], bias, relu?).
pub fn mlp_oracle(x: &[f64], rows: usize, layers: &[(Vec<f64>, Vec<f64>, bool)]) -> Vec<f64> {
    let mut cur = x.to_vec();
    let mut dim = cur.len() / rows;
    for (w, b, relu) in layers {
        let out_dim = b.len();
        let mut next = vec![0.0; rows * out_dim];
        for r in 0..rows {
            for o in 0..out_dim {
                let mut s = b[o];
                for i in 0..dim {
                    s += w[o * dim + i] * cur[r * dim + i];
                }
                next[r * out_dim + o] = if *relu { s.max(0.0) } else { s };
            }
        }
        cur = next;
        dim = out_dim;
    }
    cur
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn uniform_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Largest elementwise gap between each library op and its loop oracle over
/// `cases` random shapes per op.
pub fn operator_oracle_gap(cases: usize, seed: u64) -> (f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut conv_gap, mut pool_gap, mut mlp_gap) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..cases {
        let (n, c, co) = (rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=4));
        let (k1, k2): (usize, usize) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let pad: usize = rng.gen_range(0..=2);
        let stride = rng.gen_range(1..=2);
        let h = rng.gen_range(k1.saturating_sub(2 * pad).max(1)..=12);
        let w = rng.gen_range(k2.saturating_sub(2 * pad).max(1)..=12);
        let x = uniform_vec(&mut rng, n * c * h * w);
        let weight = uniform_vec(&mut rng, co * c * k1 * k2);
        let bias = uniform_vec(&mut rng, co);
        let kernel = ConvKernel::new(
            Tensor::new(vec![co, c, k1, k2], weight.clone()).unwrap(),
            Tensor::new(vec![co], bias.clone()).unwrap(),
        )
        .unwrap();
        let got = conv2d_forward(&Tensor::new(vec![n, c, h, w], x.clone()).unwrap(), &kernel, pad, stride).unwrap();
        let want = conv_oracle(&x, (n, c, h, w), &weight, (co, k1, k2), &bias, pad, stride);
        conv_gap = conv_gap.max(max_abs_diff(got.data(), &want));

        let window = rng.gen_range(1..=3);
        let (ph, pw) = (rng.gen_range(window..=12), rng.gen_range(window..=12));
        let pstride = rng.gen_range(1..=3);
        let mean = rng.gen_bool(0.5);
        let px = uniform_vec(&mut rng, n * c * ph * pw);
        let mode = if mean { PoolMode::Mean } else { PoolMode::Sum };
        let got = avg_pool2d_forward(&Tensor::new(vec![n, c, ph, pw], px.clone()).unwrap(), window, pstride, mode).unwrap();
        pool_gap = pool_gap.max(max_abs_diff(got.data(), &pool_oracle(&px, n * c, ph, pw, window, pstride, mean)));

        let depth = rng.gen_range(1..=3);
        let rows = rng.gen_range(1..=5);
        let mut dim = rng.gen_range(1..=20);
        let input = uniform_vec(&mut rng, rows * dim);
        let mut layers = Vec::new();
        let mut plain = Vec::new();
        for _ in 0..depth {
            let out = rng.gen_range(1..=20);
            let relu = rng.gen_bool(0.5);
            let (wv, bv) = (uniform_vec(&mut rng, out * dim), uniform_vec(&mut rng, out));
            let act = if relu { Activation::Relu } else { Activation::Identity };
            layers.push(
                MlpLayer::new(Tensor::new(vec![out, dim], wv.clone()).unwrap(), Tensor::new(vec![out], bv.clone()).unwrap(), act)
                    .unwrap(),
            );
            plain.push((wv, bv, relu));
            dim = out;
        }
        let in_dim = input.len() / rows;
        let got = mlp_forward(&layers, &Tensor::new(vec![rows, in_dim], input.clone()).unwrap()).unwrap();
        mlp_gap = mlp_gap.max(max_abs_diff(got.data(), &mlp_oracle(&input, rows, &plain)));
    }
    (conv_gap, pool_gap, mlp_gap)
}

/// Relative gap used by every finite-difference comparison.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares analytic gradients of `loss(params)` against central differences
/// for every element of every parameter tensor. Returns the worst relative
/// error and the number of entries checked.
pub fn fd_check(
    params: &[Tensor],
    h: f64,
    loss: impl Fn(&[Tensor]) -> f64,
    analytic: &[Vec<f64>],
) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut count = 0;
    let mut work = params.to_vec();
    for (k, p) in params.iter().enumerate() {
        for e in 0..p.numel() {
            let orig = p.data()[e];
            work[k].data_mut()[e] = orig + h;
            let up = loss(&work);
            work[k].data_mut()[e] = orig - h;
            let down = loss(&work);
            work[k].data_mut()[e] = orig;
            worst = worst.max(rel_err(analytic[k][e], (up - down) / (2.0 * h)));
            count += 1;
        }
    }
    (worst, count)
}

/// Finite-difference check of the full balanced spatial loss (factual MSE +
/// λ·MMD) on a 4-sample batch over the real theater grid. Every parameter
/// entry of `arch` is perturbed in place.
pub struct GradCheck {
    pub worst: f64,
    pub checked: usize,
    /// (parameter name, entry, analytic, numeric) for entries above `tol`.
    pub failures: Vec<(String, usize, f64, f64)>,
}

pub fn sccfr_loss_gradient_check(arch: SpatialArch, seed: u64, lambda: f64, h: f64, tol: f64) -> GradCheck {
    let layout = build_default_layout();
    let dims = InputDims { rows: layout.rows(), cols: layout.cols(), seats: layout.seat_count() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = NeuralNet::init(Architecture::Spatial(arch), dims, &mut rng).unwrap();
    // Nonzero biases keep ReLU pre-activations away from exact zeros.
    for (name, p) in net.names.iter().zip(net.params.iter_mut()) {
        if name.ends_with("bias") {
            for v in p.data_mut() {
                *v = rng.gen_range(0.05..0.2);
            }
        }
    }
    let occs: Vec<_> = (0..4).map(|i| sample_occupancy(&layout, &[0.5; 4], seed * 10 + i).unwrap()).collect();
    let treatments = [0usize, 0, 7, 7];
    let pairs: Vec<_> = occs.iter().zip(treatments).map(|(o, t)| (o, Treatment::from_index(t).unwrap())).collect();
    let input = encode_inputs(&layout, pairs);
    let targets: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let config = TrainConfig { ipm_weight: lambda, mmd_kernel: MmdKernel::Linear, ..TrainConfig::default() };
    let loss_of = |net: &NeuralNet| {
        let (tape, loss, _, _) = batch_loss(net, &input, &targets, &treatments, &config).unwrap();
        tape.value(loss).data()[0]
    };

    let (mut tape, loss, vars, _) = batch_loss(&net, &input, &targets, &treatments, &config).unwrap();
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();
    let mut worst = 0.0f64;
    let mut count = 0;
    let mut failures = Vec::new();
    for (k, grads) in analytic.iter().enumerate() {
        for (e, &g) in grads.iter().enumerate() {
            let orig = net.params[k].data()[e];
            net.params[k].data_mut()[e] = orig + h;
            let up = loss_of(&net);
            net.params[k].data_mut()[e] = orig - h;
            let down = loss_of(&net);
            net.params[k].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = rel_err(g, numeric);
            if err >= tol {
                failures.push((net.names[k].clone(), e, g, numeric));
            }
            worst = worst.max(err);
            count += 1;
        }
    }
    GradCheck { worst, checked: count, failures }
}
