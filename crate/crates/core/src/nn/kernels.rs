//! Slice-level compute kernels shared by the eager forward ops and the tape.
//!
//! Layouts are row-major: images `[n, c, h, w]`, conv weights `[c_out, c_in, k1, k2]`,
//! dense weights `[out, in]`.

use serde::{Deserialize, Serialize};

use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub k1: usize,
    pub k2: usize,
    pub padding: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.stride == 0 {
            return Err(NnError::Config("stride must be at least 1".into()));
        }
        if self.k1 == 0 || self.k2 == 0 {
            return Err(NnError::Config("kernel window must be at least 1x1".into()));
        }
        if self.height + 2 * self.padding < self.k1 || self.width + 2 * self.padding < self.k2 {
            return Err(NnError::Shape(format!(
                "padded input {}x{} is smaller than the {}x{} kernel window",
                self.height + 2 * self.padding,
                self.width + 2 * self.padding,
                self.k1,
                self.k2
            )));
        }
        Ok(())
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.k1) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.k2) / self.stride + 1
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.out_channels * self.out_height() * self.out_width()
    }
}

/// Output indices `o` in `0..out_len` with `o * stride + offset` inside `0..in_len`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, offset: isize, stride: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let hi_excl = (in_len as isize - offset + s - 1).div_euclid(s);
    let lo = lo.max(0) as usize;
    let hi = hi_excl.clamp(0, out_len as isize) as usize;
    (lo.min(hi), hi)
}

/// Cross-correlation with zero padding; `out` is overwritten.
pub fn conv2d(g: &ConvGeometry, input: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let in_plane = g.height * g.width;
    let out_plane = ho * wo;
    let pad = g.padding as isize;
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let out_base = (n * g.out_channels + co) * out_plane;
            let out_c = &mut out[out_base..out_base + out_plane];
            out_c.fill(bias[co]);
            for ci in 0..g.in_channels {
                let in_c = &input[(n * g.in_channels + ci) * in_plane..][..in_plane];
                let w_base = (co * g.in_channels + ci) * g.k1 * g.k2;
                for m in 0..g.k1 {
                    let (i_lo, i_hi) = valid_range(ho, g.height, m as isize - pad, g.stride);
                    for q in 0..g.k2 {
                        let w = weight[w_base + m * g.k2 + q];
                        if w == 0.0 {
                            continue;
                        }
                        let (j_lo, j_hi) = valid_range(wo, g.width, q as isize - pad, g.stride);
                        for oi in i_lo..i_hi {
                            let ii = (oi * g.stride + m) - g.padding;
                            let in_row = &in_c[ii * g.width..(ii + 1) * g.width];
                            let out_row = &mut out_c[oi * wo..(oi + 1) * wo];
                            if g.stride == 1 {
                                let jj0 = j_lo + q - g.padding;
                                let src = &in_row[jj0..jj0 + (j_hi - j_lo)];
                                for (o, x) in out_row[j_lo..j_hi].iter_mut().zip(src) {
                                    *o += w * x;
                                }
                            } else {
                                for oj in j_lo..j_hi {
                                    let jj = oj * g.stride + q - g.padding;
                                    out_row[oj] += w * in_row[jj];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates conv gradients. `grad_input` may be skipped for data leaves.
pub fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    mut grad_input: Option<&mut [f64]>,
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let in_plane = g.height * g.width;
    let out_plane = ho * wo;
    let pad = g.padding as isize;
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let go_c = &grad_out[(n * g.out_channels + co) * out_plane..][..out_plane];
            grad_bias[co] += go_c.iter().sum::<f64>();
            for ci in 0..g.in_channels {
                let in_off = (n * g.in_channels + ci) * in_plane;
                let w_base = (co * g.in_channels + ci) * g.k1 * g.k2;
                for m in 0..g.k1 {
                    let (i_lo, i_hi) = valid_range(ho, g.height, m as isize - pad, g.stride);
                    for q in 0..g.k2 {
                        let (j_lo, j_hi) = valid_range(wo, g.width, q as isize - pad, g.stride);
                        let w = weight[w_base + m * g.k2 + q];
                        let mut gw = 0.0;
                        for oi in i_lo..i_hi {
                            let ii = (oi * g.stride + m) - g.padding;
                            let row_off = in_off + ii * g.width;
                            let go_row = &go_c[oi * wo..(oi + 1) * wo];
                            if g.stride == 1 {
                                let span = j_hi - j_lo;
                                let start = row_off + j_lo + q - g.padding;
                                let go = &go_row[j_lo..j_hi];
                                gw += dot(&input[start..start + span], go);
                                if let Some(gi) = grad_input.as_deref_mut() {
                                    for (t, d) in gi[start..start + span].iter_mut().zip(go) {
                                        *t += w * d;
                                    }
                                }
                                continue;
                            }
                            for oj in j_lo..j_hi {
                                let jj = oj * g.stride + q - g.padding;
                                gw += input[row_off + jj] * go_row[oj];
                            }
                            if let Some(gi) = grad_input.as_deref_mut() {
                                for oj in j_lo..j_hi {
                                    let jj = oj * g.stride + q - g.padding;
                                    gi[row_off + jj] += w * go_row[oj];
                                }
                            }
                        }
                        grad_weight[w_base + m * g.k2 + q] += gw;
                    }
                }
            }
        }
    }
}

/// How a pooling window is reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    /// Arithmetic mean over the window.
    #[default]
    Mean,
    /// Plain sum over the window (all-ones kernel).
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub stride: usize,
    pub mode: PoolMode,
}

impl PoolGeometry {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.window == 0 || self.stride == 0 {
            return Err(NnError::Config("pool window and stride must be at least 1".into()));
        }
        if self.height < self.window || self.width < self.window {
            return Err(NnError::Shape(format!(
                "pool window {} exceeds input {}x{}",
                self.window, self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn out_height(&self) -> usize {
        (self.height - self.window) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - self.window) / self.stride + 1
    }

    fn scale(&self) -> f64 {
        match self.mode {
            PoolMode::Mean => 1.0 / (self.window * self.window) as f64,
            PoolMode::Sum => 1.0,
        }
    }
}

pub fn avg_pool2d(g: &PoolGeometry, input: &[f64], out: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let scale = g.scale();
    for p in 0..g.planes {
        let src = &input[p * g.height * g.width..][..g.height * g.width];
        let dst = &mut out[p * ho * wo..][..ho * wo];
        for oi in 0..ho {
            for oj in 0..wo {
                let mut acc = 0.0;
                for m in 0..g.window {
                    let row = &src[(oi * g.stride + m) * g.width..];
                    for q in 0..g.window {
                        acc += row[oj * g.stride + q];
                    }
                }
                dst[oi * wo + oj] = acc * scale;
            }
        }
    }
}

pub fn avg_pool2d_backward(g: &PoolGeometry, grad_out: &[f64], grad_input: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let scale = g.scale();
    for p in 0..g.planes {
        let go = &grad_out[p * ho * wo..][..ho * wo];
        let gi = &mut grad_input[p * g.height * g.width..][..g.height * g.width];
        for oi in 0..ho {
            for oj in 0..wo {
                let v = go[oi * wo + oj] * scale;
                for m in 0..g.window {
                    let base = (oi * g.stride + m) * g.width + oj * g.stride;
                    for q in 0..g.window {
                        gi[base + q] += v;
                    }
                }
            }
        }
    }
}

/// `out[n, o] = bias[o] + sum_i x[n, i] * w[o, i]`.
pub fn linear(x: &[f64], rows: usize, in_dim: usize, w: &[f64], b: &[f64], out_dim: usize, out: &mut [f64]) {
    for n in 0..rows {
        let xr = &x[n * in_dim..(n + 1) * in_dim];
        for o in 0..out_dim {
            let wr = &w[o * in_dim..(o + 1) * in_dim];
            out[n * out_dim + o] = b[o] + dot(xr, wr);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    rows: usize,
    in_dim: usize,
    w: &[f64],
    out_dim: usize,
    grad_out: &[f64],
    mut grad_x: Option<&mut [f64]>,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) {
    for n in 0..rows {
        let xr = &x[n * in_dim..(n + 1) * in_dim];
        for o in 0..out_dim {
            let go = grad_out[n * out_dim + o];
            if go == 0.0 {
                continue;
            }
            grad_b[o] += go;
            let gw = &mut grad_w[o * in_dim..(o + 1) * in_dim];
            for (g, xv) in gw.iter_mut().zip(xr) {
                *g += go * xv;
            }
            if let Some(gx) = grad_x.as_deref_mut() {
                let wr = &w[o * in_dim..(o + 1) * in_dim];
                for (g, wv) in gx[n * in_dim..(n + 1) * in_dim].iter_mut().zip(wr) {
                    *g += go * wv;
                }
            }
        }
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
