use super::Tensor;
use crate::error::{Error, Result};

/// A recorded operation: its operands plus whatever the local backward rule
/// needs beyond the node's own output.
pub(crate) enum Op {
    MatMul(Tensor, Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    AddRow(Tensor, Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    Relu(Tensor),
    Sigmoid(Tensor),
    Log(Tensor, f64),
    Softmax(Tensor),
    Sum(Tensor),
    SumRows(Tensor),
    Rows(Tensor, usize),
    Concat(Vec<Tensor>),
    RowNorm(Tensor),
    ClampMin(Tensor, f64),
    Normalize {
        input: Tensor,
        gamma: Tensor,
        beta: Tensor,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        use Op::*;
        match self {
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddRow(a, b) => {
                vec![a, b]
            }
            Scale(a, _) | AddScalar(a) | Relu(a) | Sigmoid(a) | Log(a, _) | Softmax(a)
            | Sum(a) | SumRows(a) | Rows(a, _) | RowNorm(a) | ClampMin(a, _) => vec![a],
            Concat(parts) => parts.iter().collect(),
            Normalize {
                input, gamma, beta, ..
            } => vec![input, gamma, beta],
        }
    }

    /// Hands each operand's gradient contribution to `emit`.
    pub(crate) fn backward(&self, out: &[f64], g: &[f64], emit: &mut dyn FnMut(&Tensor, Vec<f64>)) {
        use Op::*;
        match self {
            MatMul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if a.requires_grad() {
                    let bd = b.data();
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[i * k + p] = dot(grow, brow);
                        }
                    }
                    drop(bd);
                    emit(a, ga);
                }
                if b.requires_grad() {
                    let ad = a.data();
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let s = ad[i * k + p];
                            if s != 0.0 {
                                axpy(s, grow, &mut gb[p * n..(p + 1) * n]);
                            }
                        }
                    }
                    drop(ad);
                    emit(b, gb);
                }
            }
            Add(a, b) => {
                emit(a, g.to_vec());
                emit(b, g.to_vec());
            }
            Sub(a, b) => {
                emit(a, g.to_vec());
                emit(b, g.iter().map(|v| -v).collect());
            }
            Mul(a, b) => {
                if a.requires_grad() {
                    let ga = g.iter().zip(b.data().iter()).map(|(g, b)| g * b).collect();
                    emit(a, ga);
                }
                if b.requires_grad() {
                    let gb = g.iter().zip(a.data().iter()).map(|(g, a)| g * a).collect();
                    emit(b, gb);
                }
            }
            Div(a, b) => {
                let bd = b.data().clone();
                if a.requires_grad() {
                    emit(a, g.iter().zip(&bd).map(|(g, b)| g / b).collect());
                }
                if b.requires_grad() {
                    let gb = g
                        .iter()
                        .zip(&bd)
                        .zip(out)
                        .map(|((g, b), q)| -g * q / b)
                        .collect();
                    emit(b, gb);
                }
            }
            AddRow(x, bias) => {
                emit(x, g.to_vec());
                if bias.requires_grad() {
                    let n = bias.numel();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    emit(bias, gb);
                }
            }
            Scale(a, c) => emit(a, g.iter().map(|v| v * c).collect()),
            AddScalar(a) => emit(a, g.to_vec()),
            Relu(a) => {
                let gd = g
                    .iter()
                    .zip(a.data().iter())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                emit(a, gd);
            }
            Sigmoid(a) => emit(a, g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect()),
            Log(a, floor) => {
                let gd = g
                    .iter()
                    .zip(a.data().iter())
                    .map(|(g, x)| if *x > *floor { g / x } else { 0.0 })
                    .collect();
                emit(a, gd);
            }
            Softmax(a) => {
                let (_, k) = a.rows_cols();
                let mut gd = vec![0.0; out.len()];
                for ((y, gr), dst) in out.chunks(k).zip(g.chunks(k)).zip(gd.chunks_mut(k)) {
                    let inner = dot(y, gr);
                    for j in 0..k {
                        dst[j] = y[j] * (gr[j] - inner);
                    }
                }
                emit(a, gd);
            }
            Sum(a) => emit(a, vec![g[0]; a.numel()]),
            SumRows(a) => {
                let (_, k) = a.rows_cols();
                emit(a, g.iter().flat_map(|&v| std::iter::repeat_n(v, k)).collect());
            }
            Rows(a, start) => {
                let (_, k) = a.rows_cols();
                let mut gd = vec![0.0; a.numel()];
                gd[start * k..start * k + g.len()].copy_from_slice(g);
                emit(a, gd);
            }
            Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = p.numel();
                    emit(p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            RowNorm(a) => {
                let (_, k) = a.rows_cols();
                let ad = a.data();
                let mut gd = vec![0.0; ad.len()];
                for (r, (x, dst)) in ad.chunks(k).zip(gd.chunks_mut(k)).enumerate() {
                    if out[r] > 0.0 {
                        let s = g[r] / out[r];
                        dst.iter_mut().zip(x).for_each(|(d, x)| *d = s * x);
                    }
                }
                drop(ad);
                emit(a, gd);
            }
            ClampMin(a, lo) => {
                let gd = g
                    .iter()
                    .zip(a.data().iter())
                    .map(|(g, x)| if *x > *lo { *g } else { 0.0 })
                    .collect();
                emit(a, gd);
            }
            Normalize {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let f = gamma.numel();
                let rows = g.len() / f;
                let gam = gamma.data().clone();
                if gamma.requires_grad() {
                    let mut gg = vec![0.0; f];
                    for (gr, xr) in g.chunks(f).zip(xhat.chunks(f)) {
                        for j in 0..f {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                    emit(gamma, gg);
                }
                if beta.requires_grad() {
                    let mut gb = vec![0.0; f];
                    for gr in g.chunks(f) {
                        gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                    emit(beta, gb);
                }
                if input.requires_grad() {
                    let mut gx = vec![0.0; g.len()];
                    if *batch_stats {
                        let n = rows as f64;
                        let mut sum_d = vec![0.0; f];
                        let mut sum_dx = vec![0.0; f];
                        for (gr, xr) in g.chunks(f).zip(xhat.chunks(f)) {
                            for j in 0..f {
                                let d = gr[j] * gam[j];
                                sum_d[j] += d;
                                sum_dx[j] += d * xr[j];
                            }
                        }
                        for ((gr, xr), dst) in g.chunks(f).zip(xhat.chunks(f)).zip(gx.chunks_mut(f)) {
                            for j in 0..f {
                                let d = gr[j] * gam[j];
                                dst[j] = inv_std[j] / n * (n * d - sum_d[j] - xr[j] * sum_dx[j]);
                            }
                        }
                    } else {
                        for (gr, dst) in g.chunks(f).zip(gx.chunks_mut(f)) {
                            for j in 0..f {
                                dst[j] = gr[j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                    emit(input, gx);
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data().iter()).map(|(x, y)| f(*x, *y)).collect()
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Vec<f64> {
    a.data().iter().map(|x| f(*x)).collect()
}

/// Running statistics consumed and produced by [`Tensor::normalize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormStats {
    /// Normalize with the batch's own mean and variance.
    Batch,
    /// Normalize with supplied (running) mean and variance.
    Fixed,
}

impl Tensor {
    /// Matrix product of `m×k` and `k×n` operands.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let (ad, bd) = (self.data(), other.data());
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let s = ad[i * k + p];
                    if s != 0.0 {
                        axpy(s, &bd[p * n..(p + 1) * n], orow);
                    }
                }
            }
        }
        Ok(Tensor::from_op(out, vec![m, n], Op::MatMul(self.clone(), other.clone())))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let out = zip_map(self, other, |a, b| a + b);
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let out = zip_map(self, other, |a, b| a - b);
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::Sub(self.clone(), other.clone())))
    }

    /// Element-wise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let out = zip_map(self, other, |a, b| a * b);
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::Mul(self.clone(), other.clone())))
    }

    /// Element-wise quotient.
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("div", self, other)?;
        let out = zip_map(self, other, |a, b| a / b);
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::Div(self.clone(), other.clone())))
    }

    /// Adds a vector of length `cols` to every row.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (_, k) = self.rows_cols();
        if row.shape() != [k] {
            return Err(Error::Shape {
                op: "add_row",
                left: self.shape().to_vec(),
                right: row.shape().to_vec(),
            });
        }
        let rd = row.data().clone();
        let mut out = self.to_vec();
        for chunk in out.chunks_mut(k) {
            chunk.iter_mut().zip(&rd).for_each(|(a, b)| *a += b);
        }
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::AddRow(self.clone(), row.clone())))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor::from_op(map(self, |x| x * c), self.shape().to_vec(), Op::Scale(self.clone(), c))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        Tensor::from_op(map(self, |x| x + c), self.shape().to_vec(), Op::AddScalar(self.clone()))
    }

    pub fn relu(&self) -> Tensor {
        Tensor::from_op(map(self, |x| x.max(0.0)), self.shape().to_vec(), Op::Relu(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor {
        let out = map(self, |x| 1.0 / (1.0 + (-x).exp()));
        Tensor::from_op(out, self.shape().to_vec(), Op::Sigmoid(self.clone()))
    }

    /// Natural log of `max(x, floor)`; the gradient is zero below the floor.
    pub fn log_floor(&self, floor: f64) -> Tensor {
        let out = map(self, |x| x.max(floor).ln());
        Tensor::from_op(out, self.shape().to_vec(), Op::Log(self.clone(), floor))
    }

    /// Softmax over the last dimension, shifted by the row maximum.
    pub fn softmax(&self) -> Result<Tensor> {
        let (_, k) = self.rows_cols();
        let mut out = self.to_vec();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "softmax" });
        }
        for row in out.chunks_mut(k) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::Softmax(self.clone())))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self) -> Tensor {
        let total = self.data().iter().fold(0.0, |acc, v| acc + v);
        Tensor::from_op(vec![total], Vec::new(), Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    /// Sums over the last dimension, dropping it.
    pub fn sum_rows(&self) -> Tensor {
        let (_, k) = self.rows_cols();
        let out = self.data().chunks(k).map(|r| r.iter().fold(0.0, |a, v| a + v)).collect();
        let shape = self.shape()[..self.shape().len().saturating_sub(1)].to_vec();
        Tensor::from_op(out, shape, Op::SumRows(self.clone()))
    }

    /// Sum over everything divided by the number of rows: the repo-wide
    /// "sum over features, mean over batch" reduction.
    pub fn batch_mean(&self) -> Tensor {
        let (rows, _) = self.rows_cols();
        if self.shape().len() <= 1 {
            return self.sum();
        }
        self.sum().scale(1.0 / rows as f64)
    }

    /// Rows `start..end` of a matrix.
    pub fn rows(&self, start: usize, end: usize) -> Result<Tensor> {
        if self.shape().len() != 2 || start >= end || end > self.shape()[0] {
            return Err(Error::InvalidArgument(format!(
                "row range {start}..{end} invalid for shape {:?}",
                self.shape()
            )));
        }
        let k = self.shape()[1];
        let out = self.data()[start * k..end * k].to_vec();
        Ok(Tensor::from_op(out, vec![end - start, k], Op::Rows(self.clone(), start)))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_rows of nothing".into()))?;
        let k = first.shape().get(1).copied().unwrap_or(0);
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            if p.shape().len() != 2 || p.shape()[1] != k {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: first.shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
            rows += p.shape()[0];
            out.extend_from_slice(&p.data());
        }
        Ok(Tensor::from_op(out, vec![rows, k], Op::Concat(parts.to_vec())))
    }

    /// Euclidean norm of each row (last dimension dropped). The gradient at
    /// a zero row is taken as zero.
    pub fn row_norm(&self) -> Tensor {
        let (_, k) = self.rows_cols();
        let out = self
            .data()
            .chunks(k)
            .map(|r| r.iter().fold(0.0, |a, v| a + v * v).sqrt())
            .collect();
        let shape = self.shape()[..self.shape().len().saturating_sub(1)].to_vec();
        Tensor::from_op(out, shape, Op::RowNorm(self.clone()))
    }

    pub fn clamp_min(&self, lo: f64) -> Tensor {
        Tensor::from_op(map(self, |x| x.max(lo)), self.shape().to_vec(), Op::ClampMin(self.clone(), lo))
    }

    /// Per-feature normalization of a `rows × features` matrix followed by
    /// the affine map `gamma * xhat + beta`.
    ///
    /// With [`NormStats::Batch`] the batch mean and biased variance are used
    /// and returned so callers can update running estimates; with
    /// [`NormStats::Fixed`] the supplied `mean`/`var` are used as constants.
    pub fn normalize(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        stats: NormStats,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        let (rows, f) = self.rows_cols();
        if self.shape().len() != 2 || gamma.shape() != [f] || beta.shape() != [f] {
            return Err(Error::Shape {
                op: "normalize",
                left: self.shape().to_vec(),
                right: gamma.shape().to_vec(),
            });
        }
        let xd = self.data().clone();
        let (mu, sigma2) = match stats {
            NormStats::Batch => {
                let mut mu = vec![0.0; f];
                for r in xd.chunks(f) {
                    mu.iter_mut().zip(r).for_each(|(m, x)| *m += x);
                }
                mu.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; f];
                for r in xd.chunks(f) {
                    for j in 0..f {
                        let d = r[j] - mu[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= rows as f64);
                (mu, var)
            }
            NormStats::Fixed => {
                if mean.len() != f || var.len() != f {
                    return Err(Error::Shape {
                        op: "normalize",
                        left: self.shape().to_vec(),
                        right: vec![mean.len()],
                    });
                }
                (mean.to_vec(), var.to_vec())
            }
        };
        let inv_std: Vec<f64> = sigma2.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (gamma.data().clone(), beta.data().clone());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for ((xr, hr), or) in xd.chunks(f).zip(xhat.chunks_mut(f)).zip(out.chunks_mut(f)) {
            for j in 0..f {
                hr[j] = (xr[j] - mu[j]) * inv_std[j];
                or[j] = gd[j] * hr[j] + bd[j];
            }
        }
        let op = Op::Normalize {
            input: self.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            xhat,
            inv_std,
            batch_stats: stats == NormStats::Batch,
        };
        Ok((Tensor::from_op(out, vec![rows, f], op), mu, sigma2))
    }
}
