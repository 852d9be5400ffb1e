//! Reverse-mode differentiation over the fixed operator set used by the models.
//!
//! A [`Tape`] records every forward op as a node. Leaves created with
//! [`Tape::param`] require gradients; [`Tape::constant`] leaves do not, and ops
//! whose inputs are all constant are not differentiated through.

use super::kernels::{self, ConvGeometry, PoolGeometry, PoolMode};
use super::layers::{image_dims, Activation};
use super::{NnError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A scalar-valued function that reports its own gradient with respect to its input.
pub trait ScalarFunction {
    fn evaluate(&self, input: &Tensor) -> Result<(f64, Vec<f64>), NnError>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeometry },
    Pool { x: Var, geom: PoolGeometry },
    Relu { x: Var },
    Reshape { x: Var },
    ConcatCols { a: Var, b: Var, rows: usize, a_cols: usize, b_cols: usize },
    Linear { x: Var, w: Var, b: Var, rows: usize, in_dim: usize, out_dim: usize },
    Mse { pred: Var, target: Var },
    Sum { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Scalar { x: Var, grad: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A data leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient populated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, padding: usize, stride: usize) -> Result<Var, NnError> {
        let xv = self.value(x);
        let (n, c, h, wd) = image_dims(xv)?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[1] != c {
            return Err(NnError::Shape(format!(
                "conv weights {ws:?} incompatible with {c}-channel input"
            )));
        }
        if self.value(b).shape() != [ws[0]] {
            return Err(NnError::Shape("conv bias must have one entry per output channel".into()));
        }
        let geom = ConvGeometry {
            batch: n,
            in_channels: c,
            height: h,
            width: wd,
            out_channels: ws[0],
            k1: ws[2],
            k2: ws[3],
            padding,
            stride,
        };
        geom.validate()?;
        let mut out = vec![0.0; geom.output_len()];
        kernels::conv2d(&geom, xv.data(), self.value(w).data(), self.value(b).data(), &mut out);
        let value = Tensor::new(vec![n, geom.out_channels, geom.out_height(), geom.out_width()], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn avg_pool2d(&mut self, x: Var, window: usize, stride: usize, mode: PoolMode) -> Result<Var, NnError> {
        let xv = self.value(x);
        let (n, c, h, w) = image_dims(xv)?;
        let geom = PoolGeometry { planes: n * c, height: h, width: w, window, stride, mode };
        geom.validate()?;
        let mut out = vec![0.0; n * c * geom.out_height() * geom.out_width()];
        kernels::avg_pool2d(&geom, xv.data(), &mut out);
        let value = Tensor::new(vec![n, c, geom.out_height(), geom.out_width()], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Pool { x, geom }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::from_fn(xv.shape(), |i| xv.data()[i].max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        match act {
            Activation::Relu => self.relu(x),
            Activation::Identity => x,
        }
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var, NnError> {
        let xv = self.value(x);
        let n = xv.shape()[0];
        let value = xv.clone().reshape(&[n, xv.numel() / n])?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Column-wise concatenation of two `[N, *]` matrices.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (&[rows, a_cols], &[rows_b, b_cols]) = (av.shape(), bv.shape()) else {
            return Err(NnError::Shape("concat_cols expects two 2-D operands".into()));
        };
        if rows != rows_b {
            return Err(NnError::Shape(format!("cannot concatenate {rows} rows with {rows_b} rows")));
        }
        let mut out = Vec::with_capacity(rows * (a_cols + b_cols));
        for r in 0..rows {
            out.extend_from_slice(&av.data()[r * a_cols..(r + 1) * a_cols]);
            out.extend_from_slice(&bv.data()[r * b_cols..(r + 1) * b_cols]);
        }
        let value = Tensor::new(vec![rows, a_cols + b_cols], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::ConcatCols { a, b, rows, a_cols, b_cols }, rg))
    }

    /// `x: [N, in]`, `w: [out, in]`, `b: [out]` gives `[N, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (&[rows, in_dim], &[out_dim, w_in]) = (xv.shape(), wv.shape()) else {
            return Err(NnError::Shape(format!(
                "linear expects [N, in] input and [out, in] weights, got {:?} and {:?}",
                xv.shape(),
                wv.shape()
            )));
        };
        if w_in != in_dim || bv.shape() != [out_dim] {
            return Err(NnError::Shape(format!(
                "linear layer expects {w_in} inputs but receives {in_dim}"
            )));
        }
        let mut out = vec![0.0; rows * out_dim];
        kernels::linear(xv.data(), rows, in_dim, wv.data(), bv.data(), out_dim, &mut out);
        let value = Tensor::new(vec![rows, out_dim], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Linear { x, w, b, rows, in_dim, out_dim }, rg))
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, NnError> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.numel() != t.numel() {
            return Err(NnError::Shape(format!(
                "mse operands hold {} and {} values",
                p.numel(),
                t.numel()
            )));
        }
        let m = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.numel() as f64;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::scalar(m), Op::Mse { pred, target }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(NnError::Shape(format!("cannot add {:?} and {:?}", av.shape(), bv.shape())));
        }
        let value = Tensor::from_fn(av.shape(), |i| av.data()[i] + bv.data()[i]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xv = self.value(x);
        let value = Tensor::from_fn(xv.shape(), |i| xv.data()[i] * factor);
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    /// Records a scalar function of `x` whose gradient is computed eagerly.
    pub fn scalar_fn(&mut self, x: Var, f: &dyn ScalarFunction) -> Result<Var, NnError> {
        let (value, grad) = f.evaluate(self.value(x))?;
        if grad.len() != self.value(x).numel() {
            return Err(NnError::Shape("scalar function gradient has the wrong length".into()));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(value), Op::Scalar { x, grad }, rg))
    }

    /// Back-propagates from a scalar, storing gradients on every node that needs one.
    pub fn backward(&mut self, loss: Var) -> Result<(), NnError> {
        if !self.value(loss).is_scalar() {
            return Err(NnError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            self.nodes[i].value.set_grad(g)?;
        }
        Ok(())
    }

    fn take_slot(&self, grads: &mut [Option<Vec<f64>>], v: Var) -> Option<Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        Some(grads[v.0].take().unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.numel()]))
    }

    fn put_slot(grads: &mut [Option<Vec<f64>>], v: Var, g: Option<Vec<f64>>) {
        let Some(g) = g else { return };
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            empty => *empty = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let data = |v: Var| nodes[v.0].value.data();
        match nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, ref geom } => {
                let mut gx = self.take_slot(grads, x);
                let mut gw = self.take_slot(grads, w).unwrap_or_else(|| vec![0.0; nodes[w.0].value.numel()]);
                let mut gb = self.take_slot(grads, b).unwrap_or_else(|| vec![0.0; nodes[b.0].value.numel()]);
                kernels::conv2d_backward(geom, data(x), data(w), g, gx.as_deref_mut(), &mut gw, &mut gb);
                Self::put_slot(grads, x, gx);
                Self::put_slot(grads, w, self.rg(w).then_some(gw));
                Self::put_slot(grads, b, self.rg(b).then_some(gb));
            }
            Op::Pool { x, ref geom } => {
                let mut gx = self.take_slot(grads, x);
                if let Some(gx) = gx.as_deref_mut() {
                    kernels::avg_pool2d_backward(geom, g, gx);
                }
                Self::put_slot(grads, x, gx);
            }
            Op::Relu { x } => {
                let mut gx = self.take_slot(grads, x);
                if let Some(gx) = gx.as_deref_mut() {
                    for ((acc, &go), &v) in gx.iter_mut().zip(g).zip(data(x)) {
                        if v > 0.0 {
                            *acc += go;
                        }
                    }
                }
                Self::put_slot(grads, x, gx);
            }
            Op::Reshape { x } => {
                let mut gx = self.take_slot(grads, x);
                if let Some(gx) = gx.as_deref_mut() {
                    gx.iter_mut().zip(g).for_each(|(acc, go)| *acc += go);
                }
                Self::put_slot(grads, x, gx);
            }
            Op::ConcatCols { a, b, rows, a_cols, b_cols } => {
                let width = a_cols + b_cols;
                let mut ga = self.take_slot(grads, a);
                if let Some(ga) = ga.as_deref_mut() {
                    for r in 0..rows {
                        for c in 0..a_cols {
                            ga[r * a_cols + c] += g[r * width + c];
                        }
                    }
                }
                Self::put_slot(grads, a, ga);
                let mut gb = self.take_slot(grads, b);
                if let Some(gb) = gb.as_deref_mut() {
                    for r in 0..rows {
                        for c in 0..b_cols {
                            gb[r * b_cols + c] += g[r * width + a_cols + c];
                        }
                    }
                }
                Self::put_slot(grads, b, gb);
            }
            Op::Linear { x, w, b, rows, in_dim, out_dim } => {
                let mut gx = self.take_slot(grads, x);
                let mut gw = self.take_slot(grads, w).unwrap_or_else(|| vec![0.0; nodes[w.0].value.numel()]);
                let mut gb = self.take_slot(grads, b).unwrap_or_else(|| vec![0.0; nodes[b.0].value.numel()]);
                kernels::linear_backward(data(x), rows, in_dim, data(w), out_dim, g, gx.as_deref_mut(), &mut gw, &mut gb);
                Self::put_slot(grads, x, gx);
                Self::put_slot(grads, w, self.rg(w).then_some(gw));
                Self::put_slot(grads, b, self.rg(b).then_some(gb));
            }
            Op::Mse { pred, target } => {
                let (p, t) = (data(pred), data(target));
                let k = 2.0 * g[0] / p.len() as f64;
                for (v, sign) in [(pred, 1.0), (target, -1.0)] {
                    let mut gv = self.take_slot(grads, v);
                    if let Some(gv) = gv.as_deref_mut() {
                        for ((acc, a), b) in gv.iter_mut().zip(p).zip(t) {
                            *acc += sign * k * (a - b);
                        }
                    }
                    Self::put_slot(grads, v, gv);
                }
            }
            Op::Sum { x } => {
                let mut gx = self.take_slot(grads, x);
                if let Some(gx) = gx.as_deref_mut() {
                    gx.iter_mut().for_each(|acc| *acc += g[0]);
                }
                Self::put_slot(grads, x, gx);
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    let mut gv = self.take_slot(grads, v);
                    if let Some(gv) = gv.as_deref_mut() {
                        gv.iter_mut().zip(g).for_each(|(acc, go)| *acc += go);
                    }
                    Self::put_slot(grads, v, gv);
                }
            }
            Op::Scale { x, factor } => {
                let mut gx = self.take_slot(grads, x);
                if let Some(gx) = gx.as_deref_mut() {
                    gx.iter_mut().zip(g).for_each(|(acc, go)| *acc += factor * go);
                }
                Self::put_slot(grads, x, gx);
            }
            Op::Scalar { x, ref grad } => {
                let mut gx = self.take_slot(grads, x);
                if let Some(gx) = gx.as_deref_mut() {
                    gx.iter_mut().zip(grad).for_each(|(acc, d)| *acc += g[0] * d);
                }
                Self::put_slot(grads, x, gx);
            }
        }
    }
}
