//! Semantic representational distillation.
//!
//! The student's features are mapped into the teacher's feature space by
//! the adaptor and scored by the frozen teacher classifier, giving the
//! cross-network logit `ẑ = h_t(φ(x_s))`. The distillation loss compares
//! `ẑ` with the teacher's own logit `z_t`; a feature regularizer compares
//! `φ(x_s)` with `x_t` directly.
//!
//! Every loss reduces per sample by summing over classes or features and
//! then averages over the batch. Teacher outputs are always detached.

use std::fmt;
use std::str::FromStr;

use crate::data::LabeledPool;
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{Adaptor, Classifier, Mode, Network};
use crate::optim::{SgdState, StepDecay};
use crate::rng;
use crate::tensor::{cross_entropy_labels, kl_alignment, mse, Tensor};

/// Distance used between teacher and cross-network logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Cross-entropy of the cross-network prediction against the teacher's.
    Kl,
    /// Squared distance between logits.
    Mse,
    /// Squared distance between probabilities.
    Pmse,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Kl => "kl",
            Variant::Mse => "mse",
            Variant::Pmse => "pmse",
        })
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "kl" => Ok(Variant::Kl),
            "mse" => Ok(Variant::Mse),
            "pmse" => Ok(Variant::Pmse),
            _ => Err(format!("unknown variant {s:?} (expected kl, mse or pmse)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrdConfig {
    pub variant: Variant,
    /// Weight of the distillation term.
    pub alpha: f64,
    /// Weight of the feature regularizer.
    pub beta: f64,
    /// Temperature of the logit-matching KD baseline.
    pub kd_temperature: f64,
}

impl Default for SrdConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Mse,
            alpha: 1.0,
            beta: 1.0,
            kd_temperature: 4.0,
        }
    }
}

/// The three networks taking part in stage-2 training.
#[derive(Clone, Copy)]
pub struct Nets<'a> {
    pub teacher: &'a Network,
    pub student: &'a Network,
    pub adaptor: &'a Adaptor,
}

/// One mini-batch: labeled rows with their labels and (possibly no)
/// unlabeled rows.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub labeled: Tensor,
    pub labels: Vec<usize>,
    pub unlabeled: Option<Tensor>,
}

impl StepBatch {
    pub fn labeled_only(labeled: Tensor, labels: Vec<usize>) -> Self {
        Self {
            labeled,
            labels,
            unlabeled: None,
        }
    }

    pub fn labeled_len(&self) -> usize {
        self.labels.len()
    }

    pub fn unlabeled_len(&self) -> usize {
        self.unlabeled.as_ref().map_or(0, |u| u.shape()[0])
    }

    /// Labeled rows followed by unlabeled rows.
    pub fn union(&self) -> Result<Tensor> {
        match &self.unlabeled {
            Some(u) if u.numel() > 0 => Tensor::concat_rows(&[self.labeled.clone(), u.clone()]),
            _ => Ok(self.labeled.clone()),
        }
    }
}

/// `h_t(φ(x_s))`. The teacher classifier must be frozen; gradients reach
/// only the adaptor and whatever produced `x_s`.
pub fn cross_network_logit(x_s: &Tensor, phi: &Adaptor, h_t: &Classifier, mode: Mode) -> Result<Tensor> {
    if phi.output_dim() != h_t.feature_dim() {
        return Err(Error::Shape {
            op: "cross_network_logit",
            left: vec![phi.output_dim()],
            right: h_t.weight.shape().to_vec(),
        });
    }
    h_t.forward(&phi.adapt(x_s, mode)?)
}

fn check_logits(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    if a.data().iter().chain(b.data().iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op });
    }
    Ok(())
}

/// `-Σ softmax(z_t) log softmax(ẑ)`, batch-meaned.
pub fn srd_kl(z_t: &Tensor, z_hat: &Tensor) -> Result<Tensor> {
    check_logits("srd_kl", z_t, z_hat)?;
    kl_alignment(&z_t.detach().softmax()?, &z_hat.softmax()?)
}

/// `‖z_t − ẑ‖²`, batch-meaned. With a bias-free teacher classifier this is
/// `‖W_tᵀ(x_t − φ(x_s))‖²`.
pub fn srd_mse(z_t: &Tensor, z_hat: &Tensor) -> Result<Tensor> {
    check_logits("srd_mse", z_t, z_hat)?;
    mse(&z_t.detach(), z_hat)
}

/// `‖softmax(z_t) − softmax(ẑ)‖²`, batch-meaned.
pub fn srd_pmse(z_t: &Tensor, z_hat: &Tensor) -> Result<Tensor> {
    check_logits("srd_pmse", z_t, z_hat)?;
    mse(&z_t.detach().softmax()?, &z_hat.softmax()?)
}

pub fn srd_loss(variant: Variant, z_t: &Tensor, z_hat: &Tensor) -> Result<Tensor> {
    match variant {
        Variant::Kl => srd_kl(z_t, z_hat),
        Variant::Mse => srd_mse(z_t, z_hat),
        Variant::Pmse => srd_pmse(z_t, z_hat),
    }
}

/// Batch mean of the (unsquared) per-sample distance `‖x_t − φ(x_s)‖`.
pub fn feature_reg(x_t: &Tensor, x_adapted: &Tensor) -> Result<Tensor> {
    if x_t.shape() != x_adapted.shape() {
        return Err(Error::Shape {
            op: "feature_reg",
            left: x_t.shape().to_vec(),
            right: x_adapted.shape().to_vec(),
        });
    }
    Ok(x_adapted.sub(&x_t.detach())?.row_norm().mean())
}

/// Everything one training step computes before combining losses.
pub struct StepForward {
    pub labeled_len: usize,
    pub student_features: Tensor,
    pub student_logits: Tensor,
    /// Detached.
    pub teacher_features: Tensor,
    /// Detached.
    pub teacher_logits: Tensor,
    pub adapted: Tensor,
    pub cross_logits: Tensor,
}

impl StepForward {
    /// Algorithm steps 2–4 on `inputs`, whose first `labeled_len` rows are
    /// the labeled ones.
    pub fn run(inputs: &Tensor, labeled_len: usize, nets: Nets<'_>) -> Result<Self> {
        let (student_features, student_logits) = nets.student.forward(inputs, Mode::Train)?;
        let (tf, tl) = nets.teacher.forward(inputs, Mode::Eval)?;
        let adapted = nets.adaptor.adapt(&student_features, Mode::Train)?;
        if adapted.shape() != tf.shape() {
            return Err(Error::Shape {
                op: "cross_network_logit",
                left: adapted.shape().to_vec(),
                right: tf.shape().to_vec(),
            });
        }
        let cross_logits = nets.teacher.classifier.forward(&adapted)?;
        Ok(Self {
            labeled_len,
            student_features,
            student_logits,
            teacher_features: tf.detach(),
            teacher_logits: tl.detach(),
            adapted,
            cross_logits,
        })
    }

    pub fn total_len(&self) -> usize {
        self.student_logits.shape()[0]
    }

    /// Student logits of the labeled rows.
    pub fn labeled_logits(&self) -> Result<Tensor> {
        if self.labeled_len == self.total_len() {
            Ok(self.student_logits.clone())
        } else {
            self.student_logits.rows(0, self.labeled_len)
        }
    }

    pub fn ce(&self, labels: &[usize]) -> Result<Tensor> {
        cross_entropy_labels(&self.labeled_logits()?.softmax()?, labels)
    }

    pub fn srd(&self, variant: Variant) -> Result<Tensor> {
        srd_loss(variant, &self.teacher_logits, &self.cross_logits)
    }

    pub fn reg(&self) -> Result<Tensor> {
        feature_reg(&self.teacher_features, &self.adapted)
    }
}

/// Loss components of one objective evaluation.
#[derive(Debug, Clone)]
pub struct Objective {
    pub ce: Tensor,
    pub srd: Tensor,
    pub reg: Tensor,
    pub total: Tensor,
}

fn combine(fwd: &StepForward, labels: &[usize], cfg: &SrdConfig) -> Result<Objective> {
    let ce = fwd.ce(labels)?;
    let srd = fwd.srd(cfg.variant)?;
    let reg = fwd.reg()?;
    let total = ce.add(&srd.scale(cfg.alpha))?.add(&reg.scale(cfg.beta))?;
    Ok(Objective { ce, srd, reg, total })
}

/// `CE + α·L_srd + β·R`, all on the labeled rows.
pub fn labeled_objective(batch: &StepBatch, nets: Nets<'_>, cfg: &SrdConfig) -> Result<Objective> {
    if batch.labeled_len() == 0 {
        return Err(Error::InvalidArgument("empty labeled sub-batch".into()));
    }
    let fwd = StepForward::run(&batch.labeled, batch.labeled_len(), nets)?;
    combine(&fwd, &batch.labels, cfg)
}

/// `CE(labeled) + α·L_srd(labeled ∪ unlabeled) + β·R(labeled ∪ unlabeled)`.
/// Without unlabeled rows this is exactly [`labeled_objective`].
pub fn semi_objective(batch: &StepBatch, nets: Nets<'_>, cfg: &SrdConfig) -> Result<Objective> {
    if batch.unlabeled_len() == 0 {
        return labeled_objective(batch, nets, cfg);
    }
    let fwd = StepForward::run(&batch.union()?, batch.labeled_len(), nets)?;
    combine(&fwd, &batch.labels, cfg)
}

/// Scalar loss components reported by a training step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLosses {
    pub ce: f64,
    pub srd: f64,
    pub reg: f64,
    /// Extra terms added by baseline compositions.
    pub aux: f64,
    pub total: f64,
}

impl StepLosses {
    pub fn add_assign(&mut self, o: &StepLosses) {
        self.ce += o.ce;
        self.srd += o.srd;
        self.reg += o.reg;
        self.aux += o.aux;
        self.total += o.total;
    }

    pub fn scaled(&self, c: f64) -> StepLosses {
        StepLosses {
            ce: self.ce * c,
            srd: self.srd * c,
            reg: self.reg * c,
            aux: self.aux * c,
            total: self.total * c,
        }
    }
}

/// Back-propagates `total`, applies one SGD update and reports the scalar
/// value of each component. Non-finite losses abort before the update.
pub fn apply_step(total: &Tensor, parts: StepLosses, opt: &mut SgdState, iteration: usize) -> Result<StepLosses> {
    let at = |e: Error| Error::AtIteration {
        iteration,
        source: Box::new(e),
    };
    let value = total.item().map_err(at)?;
    if !value.is_finite() {
        return Err(at(Error::NonFinite { op: "loss" }));
    }
    opt.zero_grad();
    total.backward().map_err(at)?;
    opt.step().map_err(at)?;
    Ok(StepLosses { total: value, ..parts })
}

/// One iteration of stage-2 training: forward student and teacher, form
/// the cross-network logits, evaluate the semi-supervised objective and
/// update the student and adaptor.
pub fn train_step(
    batch: &StepBatch,
    nets: Nets<'_>,
    opt: &mut SgdState,
    cfg: &SrdConfig,
    iteration: usize,
) -> Result<StepLosses> {
    let obj = semi_objective(batch, nets, cfg).map_err(|e| Error::AtIteration {
        iteration,
        source: Box::new(e),
    })?;
    let parts = StepLosses {
        ce: obj.ce.item()?,
        srd: obj.srd.item()?,
        reg: obj.reg.item()?,
        aux: 0.0,
        total: 0.0,
    };
    apply_step(&obj.total, parts, opt, iteration)
}

/// Stage-1 optimisation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    /// Minimum held-out top-1 accuracy the teacher must reach.
    pub accuracy_floor: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![30, 45],
            gamma: 0.1,
            accuracy_floor: 0.7,
        }
    }
}

/// Supervised cross-entropy training of the teacher on `train`, followed by
/// freezing. Returns the held-out top-1 accuracy, or
/// [`Error::AccuracyFloor`] (with the network still frozen) if it is below
/// `cfg.accuracy_floor`.
pub fn pretrain_teacher(
    net: &mut Network,
    train: &LabeledPool,
    held_out: &LabeledPool,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<f64> {
    let schedule = StepDecay {
        base: cfg.lr,
        milestones: cfg.milestones.clone(),
        gamma: cfg.gamma,
    };
    let mut opt = SgdState::new(net.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)?;
    let n = train.labels.len();
    let mut iteration = 0;
    for epoch in 0..cfg.epochs {
        opt.learning_rate = schedule.rate_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng::stream(seed, &format!("pretrain/{epoch}")));
        for chunk in order.chunks(cfg.batch.max(1)) {
            let x = train.inputs.gather(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let (_, logits) = net.forward(&x, Mode::Train)?;
            let loss = cross_entropy_labels(&logits.softmax()?, &labels)?;
            apply_step(&loss, StepLosses::default(), &mut opt, iteration)?;
            iteration += 1;
        }
    }
    net.freeze();
    let accuracy = metrics::accuracy(net, held_out)?;
    if accuracy < cfg.accuracy_floor {
        return Err(Error::AccuracyFloor {
            accuracy,
            floor: cfg.accuracy_floor,
        });
    }
    Ok(accuracy)
}
