//! Shared helpers for the integration targets: a central finite-difference
//! gradient checker and the catalog of differentiable operations it covers.

#![allow(dead_code)]

use rand::Rng as _;
use rand_distr::StandardNormal;

use srd_core::baselines::{kd_loss, negative_cosine, OodDetector};
use srd_core::config::ArchConfig;
use srd_core::distill::{cross_network_logit, feature_reg, srd_kl, srd_mse, srd_pmse};
use srd_core::nn::{Adaptor, Classifier, Linear, Mode, Network};
use srd_core::rng::{self, Rng};
use srd_core::tensor::{cross_entropy, cross_entropy_labels, kl_alignment, mse, NormStats, LOG_FLOOR};
use srd_core::{Result, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
pub const INSTANCES: usize = 100;

/// A scalar function of some leaf tensors, rebuilt on every call so the
/// leaves can be perturbed in place.
pub struct Instance {
    pub leaves: Vec<Tensor>,
    pub f: Box<dyn Fn() -> Result<Tensor>>,
}

pub struct OpCheck {
    pub name: &'static str,
    pub build: fn(&mut Rng) -> Instance,
}

/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-8)` over all
/// leaf gradients of one instance.
pub fn relative_error(inst: &Instance) -> Result<f64> {
    for l in &inst.leaves {
        l.zero_grad();
    }
    (inst.f)()?.backward()?;
    let mut analytic = Vec::new();
    for l in &inst.leaves {
        analytic.extend(l.grad().unwrap_or_else(|| vec![0.0; l.numel()]));
    }
    let mut numeric = Vec::with_capacity(analytic.len());
    for l in &inst.leaves {
        let base = l.to_vec();
        for i in 0..base.len() {
            let mut v = base.clone();
            v[i] = base[i] + FD_STEP;
            l.set_values(&v)?;
            let up = (inst.f)()?.item()?;
            v[i] = base[i] - FD_STEP;
            l.set_values(&v)?;
            let down = (inst.f)()?.item()?;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        l.set_values(&base)?;
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    Ok(norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-8))
}

/// Worst relative error of `op` over [`INSTANCES`] random instances.
pub fn check_op(op: &OpCheck, seed: u64) -> Result<f64> {
    let mut rng = rng::stream(seed, op.name);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        worst = worst.max(relative_error(&(op.build)(&mut rng))?);
    }
    Ok(worst)
}

pub fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn values(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Values at least `gap` away from `at`, so a kink is never straddled.
fn away_from(rng: &mut Rng, n: usize, at: f64, gap: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = normal(rng);
            let m = gap + v.abs();
            if v < 0.0 {
                at - m
            } else {
                at + m
            }
        })
        .collect()
}

fn positive(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn leaf(data: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::parameter(data, shape).expect("leaf shape")
}

fn constant(data: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::new(data, shape).expect("constant shape")
}

fn dims(rng: &mut Rng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..6))
}

fn distribution(rng: &mut Rng, rows: usize, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * k);
    for _ in 0..rows {
        let r = positive(rng, k, 0.05, 1.0);
        let s: f64 = r.iter().sum();
        out.extend(r.iter().map(|v| v / s));
    }
    out
}

/// Wraps a tensor-valued function into a scalar one by a fixed random
/// weighting of its outputs.
fn weighted(rng: &mut Rng, shape: &[usize], leaves: Vec<Tensor>, f: impl Fn() -> Result<Tensor> + 'static) -> Instance {
    let n: usize = shape.iter().product();
    let w = constant(values(rng, n), shape);
    Instance {
        leaves,
        f: Box::new(move || f()?.mul(&w).map(|t| t.sum())),
    }
}

fn scalar(leaves: Vec<Tensor>, f: impl Fn() -> Result<Tensor> + 'static) -> Instance {
    Instance { leaves, f: Box::new(f) }
}

fn binary(rng: &mut Rng, op: fn(&Tensor, &Tensor) -> Result<Tensor>, nonzero_rhs: bool) -> Instance {
    let (m, n) = dims(rng);
    let a = leaf(values(rng, m * n), &[m, n]);
    let b = if nonzero_rhs {
        leaf(away_from(rng, m * n, 0.0, 0.5), &[m, n])
    } else {
        leaf(values(rng, m * n), &[m, n])
    };
    let (x, y) = (a.clone(), b.clone());
    weighted(rng, &[m, n], vec![a, b], move || op(&x, &y))
}

fn unary(data: Vec<f64>, shape: &[usize], rng: &mut Rng, op: impl Fn(&Tensor) -> Result<Tensor> + 'static) -> Instance {
    let a = leaf(data, shape);
    let x = a.clone();
    let out_shape = op(&a).expect("probe").shape().to_vec();
    weighted(rng, &out_shape, vec![a], move || op(&x))
}

fn small_arch(rng: &mut Rng) -> ArchConfig {
    ArchConfig {
        hidden: vec![rng.random_range(2..6), rng.random_range(2..6)],
        batch_norm: rng.random(),
    }
}

pub fn catalog() -> Vec<OpCheck> {
    vec![
        OpCheck {
            name: "matmul",
            build: |rng| {
                let (m, k) = dims(rng);
                let n = rng.random_range(1..6);
                let a = leaf(values(rng, m * k), &[m, k]);
                let b = leaf(values(rng, k * n), &[k, n]);
                let (x, y) = (a.clone(), b.clone());
                weighted(rng, &[m, n], vec![a, b], move || x.matmul(&y))
            },
        },
        OpCheck {
            name: "add",
            build: |rng| binary(rng, Tensor::add, false),
        },
        OpCheck {
            name: "sub",
            build: |rng| binary(rng, Tensor::sub, false),
        },
        OpCheck {
            name: "mul",
            build: |rng| binary(rng, Tensor::mul, false),
        },
        OpCheck {
            name: "div",
            build: |rng| binary(rng, Tensor::div, true),
        },
        OpCheck {
            name: "add_row",
            build: |rng| {
                let (m, n) = dims(rng);
                let a = leaf(values(rng, m * n), &[m, n]);
                let r = leaf(values(rng, n), &[n]);
                let (x, y) = (a.clone(), r.clone());
                weighted(rng, &[m, n], vec![a, r], move || x.add_row(&y))
            },
        },
        OpCheck {
            name: "scale",
            build: |rng| {
                let (m, n) = dims(rng);
                let c = normal(rng);
                unary(values(rng, m * n), &[m, n], rng, move |x| Ok(x.scale(c)))
            },
        },
        OpCheck {
            name: "neg",
            build: |rng| {
                let (m, n) = dims(rng);
                unary(values(rng, m * n), &[m, n], rng, |x| Ok(x.neg()))
            },
        },
        OpCheck {
            name: "add_scalar",
            build: |rng| {
                let (m, n) = dims(rng);
                let c = normal(rng);
                unary(values(rng, m * n), &[m, n], rng, move |x| Ok(x.add_scalar(c)))
            },
        },
        OpCheck {
            name: "relu",
            build: |rng| {
                let (m, n) = dims(rng);
                unary(away_from(rng, m * n, 0.0, 0.01), &[m, n], rng, |x| Ok(x.relu()))
            },
        },
        OpCheck {
            name: "sigmoid",
            build: |rng| {
                let (m, n) = dims(rng);
                let v: Vec<f64> = values(rng, m * n).iter().map(|x| 3.0 * x).collect();
                unary(v, &[m, n], rng, |x| Ok(x.sigmoid()))
            },
        },
        OpCheck {
            name: "log_floor",
            build: |rng| {
                let (m, n) = dims(rng);
                unary(positive(rng, m * n, 0.05, 3.0), &[m, n], rng, |x| Ok(x.log_floor(LOG_FLOOR)))
            },
        },
        OpCheck {
            name: "softmax",
            build: |rng| {
                let (m, n) = dims(rng);
                let v: Vec<f64> = values(rng, m * n).iter().map(|x| 2.0 * x).collect();
                unary(v, &[m, n], rng, Tensor::softmax)
            },
        },
        OpCheck {
            name: "sum",
            build: |rng| {
                let (m, n) = dims(rng);
                unary(values(rng, m * n), &[m, n], rng, |x| Ok(x.sum()))
            },
        },
        OpCheck {
            name: "mean",
            build: |rng| {
                let (m, n) = dims(rng);
                unary(values(rng, m * n), &[m, n], rng, |x| Ok(x.mean()))
            },
        },
        OpCheck {
            name: "sum_rows",
            build: |rng| {
                let (m, n) = dims(rng);
                unary(values(rng, m * n), &[m, n], rng, |x| Ok(x.sum_rows()))
            },
        },
        OpCheck {
            name: "batch_mean",
            build: |rng| {
                let (m, n) = dims(rng);
                unary(values(rng, m * n), &[m, n], rng, |x| Ok(x.batch_mean()))
            },
        },
        OpCheck {
            name: "rows",
            build: |rng| {
                let m = rng.random_range(2..6);
                let n = rng.random_range(1..5);
                let start = rng.random_range(0..m - 1);
                let end = rng.random_range(start + 1..=m);
                unary(values(rng, m * n), &[m, n], rng, move |x| x.rows(start, end))
            },
        },
        OpCheck {
            name: "concat_rows",
            build: |rng| {
                let n = rng.random_range(1..5);
                let (p, q) = (rng.random_range(1..4), rng.random_range(1..4));
                let a = leaf(values(rng, p * n), &[p, n]);
                let b = leaf(values(rng, q * n), &[q, n]);
                let (x, y) = (a.clone(), b.clone());
                weighted(rng, &[p + q, n], vec![a, b], move || Tensor::concat_rows(&[x.clone(), y.clone()]))
            },
        },
        OpCheck {
            name: "row_norm",
            build: |rng| {
                let (m, n) = dims(rng);
                unary(away_from(rng, m * n, 0.0, 0.1), &[m, n], rng, |x| Ok(x.row_norm()))
            },
        },
        OpCheck {
            name: "clamp_min",
            build: |rng| {
                let (m, n) = dims(rng);
                let lo = normal(rng);
                unary(away_from(rng, m * n, lo, 0.01), &[m, n], rng, move |x| Ok(x.clamp_min(lo)))
            },
        },
        OpCheck {
            name: "normalize_batch",
            build: |rng| {
                let m = rng.random_range(2..6);
                let f = rng.random_range(1..5);
                let x = leaf(values(rng, m * f), &[m, f]);
                let g = leaf(positive(rng, f, 0.5, 2.0), &[f]);
                let b = leaf(values(rng, f), &[f]);
                let (xi, gi, bi) = (x.clone(), g.clone(), b.clone());
                weighted(rng, &[m, f], vec![x, g, b], move || {
                    Ok(xi.normalize(&gi, &bi, NormStats::Batch, &[], &[], 1e-5)?.0)
                })
            },
        },
        OpCheck {
            name: "normalize_fixed",
            build: |rng| {
                let m = rng.random_range(1..5);
                let f = rng.random_range(1..5);
                let x = leaf(values(rng, m * f), &[m, f]);
                let g = leaf(values(rng, f), &[f]);
                let b = leaf(values(rng, f), &[f]);
                let mean = values(rng, f);
                let var = positive(rng, f, 0.2, 3.0);
                let (xi, gi, bi) = (x.clone(), g.clone(), b.clone());
                weighted(rng, &[m, f], vec![x, g, b], move || {
                    Ok(xi.normalize(&gi, &bi, NormStats::Fixed, &mean, &var, 1e-5)?.0)
                })
            },
        },
        OpCheck {
            name: "cross_entropy",
            build: |rng| {
                let (m, k) = (rng.random_range(1..5), rng.random_range(2..6));
                let p = leaf(positive(rng, m * k, 0.05, 1.0), &[m, k]);
                let y = constant(distribution(rng, m, k), &[m, k]);
                let pi = p.clone();
                scalar(vec![p], move || cross_entropy(&pi, &y))
            },
        },
        OpCheck {
            name: "cross_entropy_of_logits",
            build: |rng| {
                let (m, k) = (rng.random_range(1..5), rng.random_range(2..6));
                let z = leaf(values(rng, m * k), &[m, k]);
                let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
                let zi = z.clone();
                scalar(vec![z], move || cross_entropy_labels(&zi.softmax()?, &labels))
            },
        },
        OpCheck {
            name: "kl_alignment",
            build: |rng| {
                let (m, k) = (rng.random_range(1..5), rng.random_range(2..6));
                let target = constant(distribution(rng, m, k), &[m, k]);
                let p = leaf(distribution(rng, m, k), &[m, k]);
                let pi = p.clone();
                scalar(vec![p], move || kl_alignment(&target, &pi))
            },
        },
        OpCheck {
            name: "mse",
            build: |rng| {
                let (m, n) = dims(rng);
                let a = leaf(values(rng, m * n), &[m, n]);
                let b = leaf(values(rng, m * n), &[m, n]);
                let (x, y) = (a.clone(), b.clone());
                scalar(vec![a, b], move || mse(&x, &y))
            },
        },
        OpCheck {
            name: "srd_kl",
            build: |rng| logit_pair(rng, srd_kl),
        },
        OpCheck {
            name: "srd_mse",
            build: |rng| logit_pair(rng, srd_mse),
        },
        OpCheck {
            name: "srd_pmse",
            build: |rng| logit_pair(rng, srd_pmse),
        },
        OpCheck {
            name: "kd_loss",
            build: |rng| {
                let t = [1.0, 2.0, 4.0, 8.0][rng.random_range(0..4)];
                let (m, k) = (rng.random_range(1..5), rng.random_range(2..6));
                let zt = constant(values(rng, m * k), &[m, k]);
                let zs = leaf(values(rng, m * k), &[m, k]);
                let zi = zs.clone();
                scalar(vec![zs], move || kd_loss(&zt, &zi, t))
            },
        },
        OpCheck {
            name: "feature_reg",
            build: |rng| {
                let (m, d) = dims(rng);
                let xt = constant(values(rng, m * d), &[m, d]);
                let xa = leaf(values(rng, m * d), &[m, d]);
                let xi = xa.clone();
                scalar(vec![xa], move || feature_reg(&xt, &xi))
            },
        },
        OpCheck {
            name: "negative_cosine",
            build: |rng| {
                let (m, k) = (rng.random_range(1..5), rng.random_range(2..6));
                let a = leaf(values(rng, m * k), &[m, k]);
                let b = constant(values(rng, m * k), &[m, k]);
                let ai = a.clone();
                scalar(vec![a], move || negative_cosine(&ai, &b))
            },
        },
        OpCheck {
            name: "detector_loss",
            build: |rng| {
                let d = rng.random_range(1..5);
                let (p, q) = (rng.random_range(1..4), rng.random_range(1..4));
                let det = OodDetector::new(d, 0.5, rng).expect("detector");
                let ind = constant(values(rng, p * d), &[p, d]);
                let ood = constant(values(rng, q * d), &[q, d]);
                let leaves = det.parameters();
                scalar(leaves, move || det.loss(&ind, &ood))
            },
        },
        OpCheck {
            name: "linear",
            build: |rng| {
                let (m, i) = dims(rng);
                let o = rng.random_range(1..5);
                let layer = Linear::new(i, o, rng).expect("linear");
                let x = leaf(values(rng, m * i), &[m, i]);
                let leaves = vec![layer.weight.clone(), layer.bias.clone(), x.clone()];
                weighted(rng, &[m, o], leaves, move || layer.forward(&x))
            },
        },
        OpCheck {
            name: "adaptor",
            build: |rng| {
                let m = rng.random_range(2..5);
                let (ds, dt) = (rng.random_range(1..5), rng.random_range(1..5));
                let phi = Adaptor::new(ds, dt, rng.random(), rng).expect("adaptor");
                let x = leaf(values(rng, m * ds), &[m, ds]);
                let mut leaves = phi.parameters();
                leaves.push(x.clone());
                weighted(rng, &[m, dt], leaves, move || phi.adapt(&x, Mode::Train))
            },
        },
        OpCheck {
            name: "cross_network_logit",
            build: |rng| {
                let m = rng.random_range(2..5);
                let (ds, dt, k) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(2..5));
                let phi = Adaptor::new(ds, dt, true, rng).expect("adaptor");
                let h_t = Classifier::new(dt, k, rng).expect("classifier");
                h_t.weight.set_requires_grad(false);
                let x = leaf(values(rng, m * ds), &[m, ds]);
                let mut leaves = phi.parameters();
                leaves.push(x.clone());
                weighted(rng, &[m, k], leaves, move || cross_network_logit(&x, &phi, &h_t, Mode::Train))
            },
        },
        OpCheck {
            name: "network",
            build: |rng| {
                let m = rng.random_range(2..5);
                let (input, k) = (rng.random_range(1..4), rng.random_range(2..4));
                let arch = small_arch(rng);
                let net = Network::new(input, &arch, k, rng).expect("network");
                let x = leaf(values(rng, m * input), &[m, input]);
                let mut leaves = net.parameters();
                leaves.push(x.clone());
                weighted(rng, &[m, k], leaves, move || Ok(net.forward(&x, Mode::Train)?.1))
            },
        },
    ]
}

fn logit_pair(rng: &mut Rng, loss: fn(&Tensor, &Tensor) -> Result<Tensor>) -> Instance {
    let (m, k) = (rng.random_range(1..5), rng.random_range(2..6));
    let zt = constant(values(rng, m * k), &[m, k]);
    let zh = leaf(values(rng, m * k), &[m, k]);
    let zi = zh.clone();
    scalar(vec![zh], move || loss(&zt, &zi))
}
