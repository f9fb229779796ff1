//! Library results against independent references: plain-loop
//! recomputations on random instances, and values for fixed instances
//! evaluated once at 50-digit precision and frozen here.

use rand::Rng as _;
use rand_distr::StandardNormal;

use srd_core::baselines::{kd_loss, negative_cosine, pseudo_label, OodDetector};
use srd_core::config::{ArchConfig, ExperimentConfig};
use srd_core::data::{augment, generate, select_unlabeled, DatasetParams, Inputs, SelectionPolicy};
use srd_core::distill::{
    apply_step, cross_network_logit, feature_reg, labeled_objective, pretrain_teacher, semi_objective, srd_kl,
    srd_mse, srd_pmse, Nets, PretrainConfig, StepBatch, StepLosses,
};
use srd_core::metrics::{
    feature_dump, mimicry_kl_from_logits, read_feature_dump, roc_auc, top_k_accuracy, usage_curve, UsageStats,
};
use srd_core::nn::{build_pair, Adaptor, Mode, Network};
use srd_core::optim::SgdState;
use srd_core::rng::{self, Rng};
use srd_core::tensor::{cross_entropy, kl_alignment, mse};
use srd_core::Tensor;

type Mat = Vec<Vec<f64>>;

fn random_mat(rng: &mut Rng, r: usize, c: usize) -> Mat {
    (0..r).map(|_| (0..c).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

fn tensor(m: &Mat) -> Tensor {
    Tensor::matrix(m.len(), m[0].len(), m.concat()).unwrap()
}

fn rows_of(t: &Tensor) -> Mat {
    let (_, c) = t.rows_cols();
    t.to_vec().chunks(c).map(<[f64]>::to_vec).collect()
}

fn ref_matmul(a: &Mat, b: &Mat) -> Mat {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    out
}

fn ref_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn ref_relu(m: &Mat) -> Mat {
    m.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
}

fn ref_affine(x: &Mat, w: &Tensor, b: &Tensor) -> Mat {
    let bias = b.to_vec();
    ref_matmul(x, &rows_of(w))
        .into_iter()
        .map(|r| r.iter().zip(&bias).map(|(v, c)| v + c).collect())
        .collect()
}

fn ref_norm_fixed(x: &Mat, mean: &[f64], var: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|r| (0..r.len()).map(|j| gamma[j] * (r[j] - mean[j]) / (var[j] + eps).sqrt() + beta[j]).collect())
        .collect()
}

fn ref_norm_batch(x: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    let (n, f) = (x.len() as f64, x[0].len());
    let mean: Vec<f64> = (0..f).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let var: Vec<f64> = (0..f).map(|j| x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).collect();
    ref_norm_fixed(x, &mean, &var, gamma, beta, eps)
}

fn ref_ce(z: &Mat, labels: &[usize]) -> f64 {
    z.iter().zip(labels).map(|(r, &y)| -ref_softmax(r)[y].ln()).sum::<f64>() / z.len() as f64
}

fn ref_sq_dist(a: &Mat, b: &Mat) -> f64 {
    let s: f64 = a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).powi(2))).sum();
    s / a.len() as f64
}

fn ref_row_dist(a: &Mat, b: &Mat) -> f64 {
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt())
        .sum();
    s / a.len() as f64
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}

fn assert_mat_close(got: &Mat, want: &Mat, tol: f64) {
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(want) {
        for (x, y) in g.iter().zip(w) {
            assert!(close(*x, *y, tol), "{x} vs {y}");
        }
    }
}

// fixed instances with 50-digit reference values

const A: [f64; 9] = [0.3, -1.2, 2.0, 1.5, 0.7, -0.4, -2.2, 0.9, 1.1];
const B: [f64; 9] = [1.0, 0.5, -0.3, -0.8, 2.4, 0.6, 0.2, -1.7, 1.3];
const Z_T: [f64; 8] = [2.0, -1.0, 0.5, 0.0, 0.3, 0.3, -2.0, 1.0];
const Z_H: [f64; 8] = [1.0, 0.0, 0.5, -0.5, -0.2, 1.1, -1.0, 0.4];

fn logits_pair() -> (Tensor, Tensor) {
    (Tensor::matrix(2, 4, Z_T.to_vec()).unwrap(), Tensor::matrix(2, 4, Z_H.to_vec()).unwrap())
}

#[test]
fn fixed_matmul() {
    let c = Tensor::matrix(3, 3, A.to_vec()).unwrap().matmul(&Tensor::matrix(3, 3, B.to_vec()).unwrap()).unwrap();
    let want = [1.66, -6.13, 1.79, 0.86, 3.11, -0.55, -2.7, -0.81, 2.63];
    for (g, w) in c.to_vec().iter().zip(want) {
        assert!((g - w).abs() < 1e-12, "{g} vs {w}");
    }
}

#[test]
fn fixed_softmax() {
    let p = Tensor::new(vec![1.0, 2.0, 3.0], &[3]).unwrap().softmax().unwrap().to_vec();
    let want = [0.090030573170380457998, 0.24472847105479765247, 0.66524095577482188953];
    for (g, w) in p.iter().zip(want) {
        assert!((g - w).abs() < 1e-12, "{g} vs {w}");
    }
}

#[test]
fn fixed_probability_losses() {
    let p = Tensor::matrix(2, 3, vec![0.2, 0.5, 0.3, 0.6, 0.1, 0.3]).unwrap();
    let y = Tensor::one_hot(&[1, 0], 3).unwrap();
    assert!((cross_entropy(&p, &y).unwrap().item().unwrap() - 0.60198640216296799631).abs() < 1e-12);
    let q = Tensor::matrix(2, 3, vec![0.1, 0.7, 0.2, 0.3, 0.3, 0.4]).unwrap();
    assert!((kl_alignment(&q, &p).unwrap().item().unwrap() - 1.1062768576294721299).abs() < 1e-12);
    let a = Tensor::matrix(2, 3, vec![1.5, -2.0, 0.25, 0.0, 3.0, -1.0]).unwrap();
    let b = Tensor::matrix(2, 3, vec![0.5, 1.0, 0.25, 2.0, -1.0, 0.5]).unwrap();
    assert!((mse(&a, &b).unwrap().item().unwrap() - 16.125).abs() < 1e-12);
}

#[test]
fn fixed_distillation_losses() {
    let (zt, zh) = logits_pair();
    let cases = [
        (srd_kl(&zt, &zh).unwrap(), 1.1966435857765440886),
        (srd_mse(&zt, &zh).unwrap(), 2.25),
        (srd_pmse(&zt, &zh).unwrap(), 0.12041878786288124258),
        (kd_loss(&zt, &zh, 4.0).unwrap(), 21.87073360188698016),
        (negative_cosine(&zh, &zt).unwrap(), -0.77873180368359868692),
    ];
    for (got, want) in cases {
        let got = got.item().unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
    let mimicry = mimicry_kl_from_logits(&zt, &zh).unwrap();
    assert!((mimicry - 0.1935983321137914625).abs() < 1e-12);
    let xt = Tensor::matrix(2, 3, vec![1.0, 2.0, -0.5, 0.25, 0.0, 3.0]).unwrap();
    let xa = Tensor::matrix(2, 3, vec![0.0, 1.5, 0.5, 1.0, 1.0, 1.0]).unwrap();
    assert!((feature_reg(&xt, &xa).unwrap().item().unwrap() - 1.9292476415070754764).abs() < 1e-12);
}

#[test]
fn fixed_roc_auc_with_tie() {
    let scores = [0.9, 0.8, 0.8, 0.3, 0.6, 0.1];
    let pos = [true, true, false, false, true, false];
    assert!((roc_auc(&scores, &pos).unwrap() - 5.0 / 6.0).abs() < 1e-15);
}

// random instances against loop references

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = rng::stream(1, "oracle/matmul");
    for _ in 0..200 {
        let (m, k, n) = (rng.random_range(1..7), rng.random_range(1..7), rng.random_range(1..7));
        let (a, b) = (random_mat(&mut rng, m, k), random_mat(&mut rng, k, n));
        assert_mat_close(&rows_of(&tensor(&a).matmul(&tensor(&b)).unwrap()), &ref_matmul(&a, &b), 1e-12);
    }
}

#[test]
fn losses_match_direct_summation() {
    let mut rng = rng::stream(2, "oracle/losses");
    for _ in 0..200 {
        let (m, k) = (rng.random_range(1..6), rng.random_range(2..7));
        let (zt, zh) = (random_mat(&mut rng, m, k), random_mat(&mut rng, m, k));
        let pt: Mat = zt.iter().map(|r| ref_softmax(r)).collect();
        let ph: Mat = zh.iter().map(|r| ref_softmax(r)).collect();
        let (tt, th) = (tensor(&zt), tensor(&zh));

        let soft = rows_of(&th.softmax().unwrap());
        assert_mat_close(&soft, &ph, 1e-12);

        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
        let y = Tensor::one_hot(&labels, k).unwrap();
        let ce = cross_entropy(&th.softmax().unwrap(), &y).unwrap().item().unwrap();
        assert!(close(ce, ref_ce(&zh, &labels), 1e-12));

        let cross: f64 = pt
            .iter()
            .zip(&ph)
            .map(|(t, h)| -t.iter().zip(h).map(|(a, b)| a * b.ln()).sum::<f64>())
            .sum::<f64>()
            / m as f64;
        assert!(close(srd_kl(&tt, &th).unwrap().item().unwrap(), cross, 1e-12));
        assert!(close(srd_mse(&tt, &th).unwrap().item().unwrap(), ref_sq_dist(&zt, &zh), 1e-12));
        assert!(close(srd_pmse(&tt, &th).unwrap().item().unwrap(), ref_sq_dist(&pt, &ph), 1e-12));

        let t = 4.0;
        let scaled = |z: &Mat| -> Mat { z.iter().map(|r| ref_softmax(&r.iter().map(|v| v / t).collect::<Vec<_>>())).collect() };
        let (qt, qs) = (scaled(&zt), scaled(&zh));
        let kd: f64 = t * t
            * qt.iter()
                .zip(&qs)
                .map(|(a, b)| -a.iter().zip(b).map(|(u, v)| u * v.ln()).sum::<f64>())
                .sum::<f64>()
            / m as f64;
        assert!(close(kd_loss(&tt, &th, t).unwrap().item().unwrap(), kd, 1e-12));

        let kl: f64 = pt
            .iter()
            .zip(&ph)
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u * (u.ln() - v.ln())).sum::<f64>())
            .sum::<f64>()
            / m as f64;
        assert!(close(mimicry_kl_from_logits(&tt, &th).unwrap(), kl, 1e-12));

        let cos: f64 = zh
            .iter()
            .zip(&zt)
            .map(|(a, b)| {
                let dot: f64 = a.iter().zip(b).map(|(u, v)| u * v).sum();
                let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                dot / (na * nb)
            })
            .sum::<f64>()
            / m as f64;
        assert!(close(negative_cosine(&th, &tt).unwrap().item().unwrap(), -cos, 1e-12));
        assert!(close(feature_reg(&tt, &th).unwrap().item().unwrap(), ref_row_dist(&zt, &zh), 1e-12));
        assert!(close(mse(&tt, &th).unwrap().item().unwrap(), ref_sq_dist(&zt, &zh), 1e-12));
    }
}

fn randomize_norms(net: &Network, rng: &mut Rng) {
    if let Some(norms) = &net.extractor.norms {
        for bn in norms {
            let f = bn.gamma.numel();
            bn.gamma.set_values(&(0..f).map(|_| rng.random_range(0.5..2.0)).collect::<Vec<_>>()).unwrap();
            bn.beta.set_values(&(0..f).map(|_| rng.sample(StandardNormal)).collect::<Vec<_>>()).unwrap();
            bn.set_running(
                (0..f).map(|_| rng.sample(StandardNormal)).collect(),
                (0..f).map(|_| rng.random_range(0.2..3.0)).collect(),
            );
        }
    }
}

fn ref_network(net: &Network, x: &Mat, mode: Mode) -> (Mat, Mat) {
    let mut h = x.clone();
    for (i, layer) in net.extractor.layers.iter().enumerate() {
        h = ref_affine(&h, &layer.weight, &layer.bias);
        if let Some(norms) = &net.extractor.norms {
            let bn = &norms[i];
            let (g, b) = (bn.gamma.to_vec(), bn.beta.to_vec());
            h = match mode {
                Mode::Eval => ref_norm_fixed(&h, &bn.running_mean(), &bn.running_var(), &g, &b, bn.eps),
                Mode::Train => ref_norm_batch(&h, &g, &b, bn.eps),
            };
        }
        h = ref_relu(&h);
    }
    let logits = ref_matmul(&h, &rows_of(&net.classifier.weight));
    (h, logits)
}

#[test]
fn network_forward_matches_layerwise_loops() {
    let mut rng = rng::stream(3, "oracle/network");
    for case in 0..40 {
        let arch = ArchConfig {
            hidden: vec![rng.random_range(1..8), rng.random_range(1..8)],
            batch_norm: case % 2 == 0,
        };
        let (input, k) = (rng.random_range(1..6), rng.random_range(2..6));
        let net = Network::new(input, &arch, k, &mut rng).unwrap();
        randomize_norms(&net, &mut rng);
        let rows = rng.random_range(2..7);
        let x = random_mat(&mut rng, rows, input);
        for mode in [Mode::Eval, Mode::Train] {
            let before = net.extractor.norms.as_ref().map(|n| (n[0].running_mean(), n[0].running_var()));
            let (want_f, want_z) = ref_network(&net, &x, mode);
            let (f, z) = net.forward(&tensor(&x), mode).unwrap();
            assert_mat_close(&rows_of(&f), &want_f, 1e-12);
            assert_mat_close(&rows_of(&z), &want_z, 1e-12);
            if mode == Mode::Eval {
                let after = net.extractor.norms.as_ref().map(|n| (n[0].running_mean(), n[0].running_var()));
                assert_eq!(before, after);
            }
        }
    }
}

#[test]
fn adaptor_and_cross_network_logit_match_composition() {
    let mut rng = rng::stream(4, "oracle/adaptor");
    for case in 0..60 {
        let (ds, dt, k) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(2..6));
        let phi = Adaptor::new(ds, dt, case % 2 == 0, &mut rng).unwrap();
        let teacher = Network::new(3, &ArchConfig { hidden: vec![dt], batch_norm: false }, k, &mut rng).unwrap();
        let rows = rng.random_range(2..6);
        let x = random_mat(&mut rng, rows, ds);
        let mut h = ref_affine(&x, &phi.linear.weight, &phi.linear.bias);
        if let Some(bn) = &phi.norm {
            h = ref_norm_batch(&h, &bn.gamma.to_vec(), &bn.beta.to_vec(), bn.eps);
        }
        let adapted = ref_relu(&h);
        assert_mat_close(&rows_of(&phi.adapt(&tensor(&x), Mode::Train).unwrap()), &adapted, 1e-12);
        let z_hat = cross_network_logit(&tensor(&x), &phi, &teacher.classifier, Mode::Train).unwrap();
        assert_mat_close(&rows_of(&z_hat), &ref_matmul(&adapted, &rows_of(&teacher.classifier.weight)), 1e-12);
    }
}

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.input_dim = 4;
    cfg.dataset.num_classes = 3;
    cfg.teacher.hidden = vec![6, 5];
    cfg.student.hidden = vec![3, 4];
    cfg
}

/// Hand composition of the objective from layer-wise references: CE on the
/// first `labeled` rows, distillation terms on all rows of `x`.
fn ref_objective(t: &Network, s: &Network, phi: &Adaptor, x: &Mat, labels: &[usize], alpha: f64, beta: f64) -> [f64; 4] {
    let (xt, zt) = ref_network(t, x, Mode::Eval);
    let (fs, zs) = ref_network(s, x, Mode::Train);
    let mut h = ref_affine(&fs, &phi.linear.weight, &phi.linear.bias);
    if let Some(bn) = &phi.norm {
        h = ref_norm_batch(&h, &bn.gamma.to_vec(), &bn.beta.to_vec(), bn.eps);
    }
    let adapted = ref_relu(&h);
    let z_hat = ref_matmul(&adapted, &rows_of(&t.classifier.weight));
    let ce = ref_ce(&zs[..labels.len()].to_vec(), labels);
    let srd = ref_sq_dist(&zt, &z_hat);
    let reg = ref_row_dist(&xt, &adapted);
    [ce, srd, reg, ce + alpha * srd + beta * reg]
}

#[test]
fn objectives_equal_hand_composition() {
    let cfg = small_config();
    let mut rng = rng::stream(5, "oracle/objective");
    for seed in 0..10 {
        let (mut teacher, student, phi) = build_pair(&cfg, seed).unwrap();
        teacher.freeze();
        randomize_norms(&teacher, &mut rng);
        let nets = Nets {
            teacher: &teacher,
            student: &student,
            adaptor: &phi,
        };
        let srd = srd_core::distill::SrdConfig {
            alpha: rng.random_range(0.0..2.0),
            beta: rng.random_range(0.0..2.0),
            ..Default::default()
        };
        let (nl, nu) = (rng.random_range(2..6), rng.random_range(1..6));
        let xl = random_mat(&mut rng, nl, 4);
        let xu = random_mat(&mut rng, nu, 4);
        let labels: Vec<usize> = (0..nl).map(|_| rng.random_range(0..3)).collect();

        let only = StepBatch::labeled_only(tensor(&xl), labels.clone());
        let o = labeled_objective(&only, nets, &srd).unwrap();
        let want = ref_objective(&teacher, &student, &phi, &xl, &labels, srd.alpha, srd.beta);
        let got = [o.ce, o.srd, o.reg, o.total].map(|t| t.item().unwrap());
        for (g, w) in got.iter().zip(want) {
            assert!(close(*g, w, 1e-12), "labeled {g} vs {w}");
        }

        let mixed = StepBatch {
            unlabeled: Some(tensor(&xu)),
            ..only
        };
        let o = semi_objective(&mixed, nets, &srd).unwrap();
        let union: Mat = xl.iter().chain(&xu).cloned().collect();
        let want = ref_objective(&teacher, &student, &phi, &union, &labels, srd.alpha, srd.beta);
        let got = [o.ce, o.srd, o.reg, o.total].map(|t| t.item().unwrap());
        for (g, w) in got.iter().zip(want) {
            assert!(close(*g, w, 1e-12), "semi {g} vs {w}");
        }
    }
}

#[test]
fn one_parameter_step_matches_hand_update() {
    // loss = (θ·x − y)², gradient 2x(θx − y)
    let (theta0, x, y, lr, wd) = (0.7, 1.3, -0.4, 0.05, 5e-4);
    let theta = Tensor::parameter(vec![theta0], &[1, 1]).unwrap();
    let input = Tensor::matrix(1, 1, vec![x]).unwrap();
    let target = Tensor::matrix(1, 1, vec![y]).unwrap();
    let mut opt = SgdState::new(vec![theta.clone()], lr, 0.9, wd).unwrap();
    let loss = mse(&input.matmul(&theta).unwrap(), &target).unwrap();
    let reported = apply_step(&loss, StepLosses::default(), &mut opt, 0).unwrap();
    let g = 2.0 * x * (theta0 * x - y);
    assert!((reported.total - (theta0 * x - y).powi(2)).abs() < 1e-15);
    assert!((theta.item().unwrap() - (theta0 - lr * (g + wd * theta0))).abs() < 1e-15);
}

#[test]
fn separable_toy_teacher_reaches_ninety_nine_percent() {
    let params = DatasetParams {
        num_classes: 2,
        unseen_classes: 0,
        overlap: 0.0,
        labeled_per_class: 50,
        test_per_class: 200,
        input_dim: 4,
        modes_per_class: 1,
        separation: 8.0,
        noise: 0.5,
        ..DatasetParams::default()
    };
    let data = generate(&params).unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.dataset = params;
    let (mut teacher, _, _) = build_pair(&cfg, 0).unwrap();
    let pre = PretrainConfig {
        epochs: 50,
        accuracy_floor: 0.99,
        ..PretrainConfig::default()
    };
    let acc = pretrain_teacher(&mut teacher, data.labeled(), data.test(), &pre, 0).unwrap();
    assert!(acc >= 0.99, "{acc}");
    assert!(teacher.is_frozen());
}

#[test]
fn hidden_flags_match_exhaustive_count() {
    let params = DatasetParams {
        num_classes: 8,
        unseen_classes: 16,
        overlap: 0.1,
        ..DatasetParams::default()
    };
    let data = generate(&params).unwrap();
    let truth = data.eval_truth();
    let u = params.unlabeled_per_class;
    let seen_present = params.seen_in_unlabeled();
    assert_eq!(seen_present, 1);
    let ind = truth.in_distribution.iter().filter(|&&f| f).count();
    assert_eq!(ind, seen_present * u);
    assert_eq!(truth.in_distribution.len(), (seen_present + 16) * u);
    for (&c, &f) in truth.classes.iter().zip(&truth.in_distribution) {
        assert_eq!(f, c < 8);
    }
    let mut present: Vec<usize> = truth.classes.iter().copied().filter(|&c| c < 8).collect();
    present.dedup();
    present.sort_unstable();
    present.dedup();
    assert_eq!(present.len(), seen_present);
    assert!((data.ind_fraction() - 1.0 / 17.0).abs() < 1e-15);
}

#[test]
fn augment_displacement_is_centred() {
    let strength = 0.7;
    let x = [0.5, -1.0, 2.0, 0.0];
    let mut rng = rng::stream(6, "oracle/augment");
    let n = 10_000;
    let mut sums = [0.0; 4];
    for _ in 0..n {
        for (s, (a, b)) in sums.iter_mut().zip(augment(&x, strength, &mut rng).iter().zip(&x)) {
            *s += a - b;
        }
    }
    let bound = 3.0 * strength / 100.0;
    for s in sums {
        assert!((s / n as f64).abs() < bound, "{}", s / n as f64);
    }
}

/// One input coordinate; features relu(x), relu(−x); identity classifier.
/// Confidence is sigmoid(|x|), increasing in |x|.
fn abs_teacher() -> Network {
    let mut rng = rng::stream(0, "oracle/abs");
    let net = Network::new(1, &ArchConfig { hidden: vec![2], batch_norm: false }, 2, &mut rng).unwrap();
    net.extractor.layers[0].weight.set_values(&[1.0, -1.0]).unwrap();
    net.extractor.layers[0].bias.set_values(&[0.0, 0.0]).unwrap();
    net.classifier.weight.set_values(&[1.0, 0.0, 0.0, 1.0]).unwrap();
    net
}

#[test]
fn teacher_score_keeps_exact_top_half() {
    let teacher = abs_teacher();
    let mut rng = rng::stream(7, "oracle/select");
    let xs: Vec<f64> = (0..40).map(|_| rng.sample::<f64, _>(StandardNormal) * 3.0).collect();
    let pool = Inputs::new(1, xs.clone()).unwrap();
    let chosen = select_unlabeled(&pool, 0.5, SelectionPolicy::TeacherScore, Some(&teacher), 3).unwrap();
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[b].abs().total_cmp(&xs[a].abs()));
    let mut want = order[..20].to_vec();
    want.sort_unstable();
    assert_eq!(chosen, want);
}

#[test]
fn pseudo_labels_recover_planted_centres() {
    // without noise every sample sits on a planted centre
    let params = DatasetParams {
        noise: 0.0,
        ..DatasetParams::default()
    };
    let data = generate(&params).unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.dataset = params;
    let (mut teacher, _, _) = build_pair(&cfg, 0).unwrap();
    let pre = PretrainConfig {
        accuracy_floor: 0.0,
        ..PretrainConfig::default()
    };
    pretrain_teacher(&mut teacher, data.labeled(), data.test(), &pre, 0).unwrap();
    let test = data.test();
    assert_eq!(pseudo_label(&teacher, &test.inputs).unwrap(), test.labels);
}

#[test]
fn detector_separates_separable_features() {
    let d = 6;
    let mut rng = rng::stream(8, "oracle/detector");
    let mut draw = |shift: f64, n: usize| -> Mat {
        (0..n).map(|_| (0..d).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect()).collect()
    };
    let (ind, ood) = (draw(1.5, 200), draw(-1.5, 200));
    let det = OodDetector::new(d, 0.5, &mut rng::stream(8, "oracle/detector-init")).unwrap();
    let mut opt = SgdState::new(det.parameters(), 0.1, 0.9, 0.0).unwrap();
    for it in 0..100 {
        let loss = det.loss(&tensor(&ind), &tensor(&ood)).unwrap();
        apply_step(&loss, StepLosses::default(), &mut opt, it).unwrap();
    }
    let all: Mat = ind.iter().chain(&ood).cloned().collect();
    let scores = det.score(&tensor(&all)).unwrap().to_vec();
    let flags: Vec<bool> = (0..400).map(|i| i < 200).collect();
    let auc = roc_auc(&scores, &flags).unwrap();
    assert!(auc > 0.95, "{auc}");
}

#[test]
fn random_top1_is_near_chance() {
    let (b, k) = (10_000, 10);
    let mut rng = rng::stream(9, "oracle/topk");
    let logits = tensor(&random_mat(&mut rng, b, k));
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
    let acc = top_k_accuracy(&logits, &labels, 1).unwrap();
    let sigma = (0.1f64 * 0.9 / b as f64).sqrt();
    assert!((acc - 0.1).abs() < 3.0 * sigma, "{acc}");
}

#[test]
fn usage_proportions_equal_recount() {
    let stats = UsageStats {
        epoch: 4,
        kept_ind: 37,
        kept_ood: 112,
        dropped_ind: 5,
        dropped_ood: 230,
    };
    let curve = usage_curve(&[stats]).unwrap();
    let total = (37 + 112 + 5 + 230) as f64;
    assert_eq!(curve[0].epoch, 4);
    assert_eq!(curve[0].kept, (37.0 + 112.0) / total);
    assert_eq!(curve[0].kept_ind, 37.0 / 42.0);
    assert_eq!(curve[0].kept_ood, 112.0 / 342.0);
}

#[test]
fn feature_dump_parses_back() {
    let cfg = small_config();
    let (teacher, _, _) = build_pair(&cfg, 2).unwrap();
    let mut rng = rng::stream(10, "oracle/dump");
    let x = random_mat(&mut rng, 9, 4);
    let inputs = Inputs::new(4, x.concat()).unwrap();
    let labels: Vec<usize> = (0..9).map(|i| i % 3).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("features.csv");
    assert_eq!(feature_dump(&teacher, &inputs, &labels, &path).unwrap(), 9);
    let (rows, back) = read_feature_dump(&path).unwrap();
    let (features, _) = teacher.forward(&tensor(&x), Mode::Eval).unwrap();
    assert_eq!(back, labels);
    assert_mat_close(&rows, &rows_of(&features), 1e-12);

    let empty = dir.path().join("empty.csv");
    feature_dump(&teacher, &Inputs::empty(4), &[], &empty).unwrap();
    let text = std::fs::read_to_string(&empty).unwrap();
    assert_eq!(text.lines().count(), 1);
}
