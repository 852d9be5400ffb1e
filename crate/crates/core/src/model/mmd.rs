use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::nn::{NnError, ScalarFunction, Tensor};

/// Kernel of the maximum mean discrepancy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MmdKernel {
    /// Squared distance between sample means.
    #[default]
    Linear,
    /// Gaussian kernel `exp(-|a - b|² / (2 h²))`. `bandwidth: None` uses the
    /// median pairwise distance of the pooled sample, held fixed for gradients.
    Rbf { bandwidth: Option<f64> },
}

/// Samples as row-major `[n, dim]` slices.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub data: &'a [f64],
    pub dim: usize,
}

impl<'a> Sample<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Self {
        Self { data, dim }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median_bandwidth(p: Sample, q: Sample) -> f64 {
    let rows: Vec<&[f64]> = (0..p.len()).map(|i| p.row(i)).chain((0..q.len()).map(|j| q.row(j))).collect();
    let mut d: Vec<f64> = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    d.retain(|&v| v > 0.0);
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

/// Squared MMD estimate and its gradient with respect to every row of `p`
/// and `q`.
pub fn mmd_with_grad(p: Sample, q: Sample, kernel: MmdKernel) -> Result<(f64, Vec<f64>, Vec<f64>), ModelError> {
    if p.is_empty() || q.is_empty() {
        return Err(ModelError::Config("MMD needs two nonempty samples".into()));
    }
    if p.dim != q.dim || p.data.len() % p.dim != 0 || q.data.len() % q.dim != 0 {
        return Err(ModelError::Config("MMD samples must share one dimension".into()));
    }
    let (np, nq, dim) = (p.len(), q.len(), p.dim);
    let mut gp = vec![0.0; p.data.len()];
    let mut gq = vec![0.0; q.data.len()];
    match kernel {
        MmdKernel::Linear => {
            let mut diff = vec![0.0; dim];
            for i in 0..np {
                for (d, v) in diff.iter_mut().zip(p.row(i)) {
                    *d += v / np as f64;
                }
            }
            for j in 0..nq {
                for (d, v) in diff.iter_mut().zip(q.row(j)) {
                    *d -= v / nq as f64;
                }
            }
            let value = diff.iter().map(|d| d * d).sum();
            for i in 0..np {
                for (k, d) in diff.iter().enumerate() {
                    gp[i * dim + k] = 2.0 * d / np as f64;
                }
            }
            for j in 0..nq {
                for (k, d) in diff.iter().enumerate() {
                    gq[j * dim + k] = -2.0 * d / nq as f64;
                }
            }
            Ok((value, gp, gq))
        }
        MmdKernel::Rbf { bandwidth } => {
            let h = bandwidth.unwrap_or_else(|| median_bandwidth(p, q));
            if !(h > 0.0 && h.is_finite()) {
                return Err(ModelError::Config("RBF bandwidth must be positive".into()));
            }
            let inv = 1.0 / (2.0 * h * h);
            let mut value = 0.0;
            // term(a, b) adds w·k(a,b) and its gradient into both rows
            let mut pair = |a: &[f64], b: &[f64], w: f64, ga: &mut [f64], gb: &mut [f64]| {
                let k = (-sq_dist(a, b) * inv).exp();
                value += w * k;
                let c = -2.0 * inv * w * k;
                for t in 0..dim {
                    let g = c * (a[t] - b[t]);
                    ga[t] += g;
                    gb[t] -= g;
                }
            };
            let (wpp, wqq, wpq) = (1.0 / (np * np) as f64, 1.0 / (nq * nq) as f64, -2.0 / (np * nq) as f64);
            let mut scratch_a = vec![0.0; dim];
            let mut scratch_b = vec![0.0; dim];
            for i in 0..np {
                for j in 0..np {
                    scratch_a.fill(0.0);
                    scratch_b.fill(0.0);
                    pair(p.row(i), p.row(j), wpp, &mut scratch_a, &mut scratch_b);
                    for t in 0..dim {
                        gp[i * dim + t] += scratch_a[t];
                        gp[j * dim + t] += scratch_b[t];
                    }
                }
            }
            for i in 0..nq {
                for j in 0..nq {
                    scratch_a.fill(0.0);
                    scratch_b.fill(0.0);
                    pair(q.row(i), q.row(j), wqq, &mut scratch_a, &mut scratch_b);
                    for t in 0..dim {
                        gq[i * dim + t] += scratch_a[t];
                        gq[j * dim + t] += scratch_b[t];
                    }
                }
            }
            for i in 0..np {
                for j in 0..nq {
                    scratch_a.fill(0.0);
                    scratch_b.fill(0.0);
                    pair(p.row(i), q.row(j), wpq, &mut scratch_a, &mut scratch_b);
                    for t in 0..dim {
                        gp[i * dim + t] += scratch_a[t];
                        gq[j * dim + t] += scratch_b[t];
                    }
                }
            }
            Ok((value.max(0.0), gp, gq))
        }
    }
}

/// Squared maximum mean discrepancy between two samples.
pub fn empirical_mmd(p: Sample, q: Sample, kernel: MmdKernel) -> Result<f64, ModelError> {
    mmd_with_grad(p, q, kernel).map(|(v, _, _)| v)
}

/// Most frequent treatment index; ties go to the smaller index.
pub fn modal_treatment(treatments: &[usize]) -> Option<usize> {
    let mut counts = std::collections::BTreeMap::new();
    for &t in treatments {
        *counts.entry(t).or_insert(0usize) += 1;
    }
    counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|(t, _)| t)
}

/// Sum of MMDs between the batch's modal-treatment group and every other
/// treatment group present, as a differentiable function of the `[n, dim]`
/// representation matrix.
#[derive(Debug, Clone)]
pub struct BatchIpm {
    pub treatments: Vec<usize>,
    pub kernel: MmdKernel,
    pub min_group_size: usize,
}

impl BatchIpm {
    pub fn penalty(&self, reps: &[f64], dim: usize) -> Result<(f64, Vec<f64>), ModelError> {
        let n = self.treatments.len();
        if dim == 0 || reps.len() != n * dim {
            return Err(ModelError::Config(format!("{} values for {n} samples of dimension {dim}", reps.len())));
        }
        let mut grad = vec![0.0; reps.len()];
        let Some(control) = modal_treatment(&self.treatments) else {
            return Ok((0.0, grad));
        };
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = std::collections::BTreeMap::new();
        for (i, &t) in self.treatments.iter().enumerate() {
            groups.entry(t).or_default().push(i);
        }
        let min = self.min_group_size.max(1);
        let ctrl = &groups[&control];
        if ctrl.len() < min {
            return Ok((0.0, grad));
        }
        let gather = |idx: &[usize]| idx.iter().flat_map(|&i| reps[i * dim..(i + 1) * dim].iter().copied()).collect::<Vec<_>>();
        let ctrl_data = gather(ctrl);
        let mut total = 0.0;
        for (&t, members) in &groups {
            if t == control || members.len() < min {
                continue;
            }
            let other = gather(members);
            let (v, gp, gq) = mmd_with_grad(Sample::new(&ctrl_data, dim), Sample::new(&other, dim), self.kernel)?;
            total += v;
            for (k, &i) in ctrl.iter().enumerate() {
                for t in 0..dim {
                    grad[i * dim + t] += gp[k * dim + t];
                }
            }
            for (k, &i) in members.iter().enumerate() {
                for t in 0..dim {
                    grad[i * dim + t] += gq[k * dim + t];
                }
            }
        }
        Ok((total, grad))
    }
}

impl ScalarFunction for BatchIpm {
    fn evaluate(&self, input: &Tensor) -> Result<(f64, Vec<f64>), NnError> {
        let n = self.treatments.len();
        if n == 0 || input.numel() % n != 0 {
            return Err(NnError::Shape(format!("{} values for {n} samples", input.numel())));
        }
        self.penalty(input.data(), input.numel() / n).map_err(|e| NnError::Config(e.to_string()))
    }
}
