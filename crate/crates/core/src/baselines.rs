//! Methods the distillation objective is compared with or combined with:
//! logit-matching KD, teacher pseudo-labels, OOD filtering of unlabeled
//! data with a detector on teacher features, and two-view augmentation
//! consistency (DAC).

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::data::{augment_batch, Inputs, LabeledPool};
use crate::distill::{apply_step, semi_objective, Nets, SrdConfig, StepBatch, StepForward, StepLosses};
use crate::error::{Error, Result};
use crate::metrics::{logits_for, UsageStats};
use crate::nn::{Linear, Mode, Network};
use crate::optim::SgdState;
use crate::rng::Rng;
use crate::tensor::{cross_entropy_labels, kl_alignment, Tensor};

/// Guard on the product of norms in the cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

/// Temperature-softened logit matching, scaled by `T²`:
/// `T² · mean(-Σ softmax(z_t/T) log softmax(z_s/T))`.
pub fn kd_loss(z_t: &Tensor, z_s: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature {temperature}")));
    }
    let inv = 1.0 / temperature;
    let pt = z_t.detach().scale(inv).softmax()?;
    let ps = z_s.scale(inv).softmax()?;
    Ok(kl_alignment(&pt, &ps)?.scale(temperature * temperature))
}

/// Index of the largest value in each row, lowest index on ties.
pub fn argmax_rows(values: &[f64], k: usize) -> Vec<usize> {
    values
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// The teacher's most likely seen class for every unlabeled row.
pub fn pseudo_label(teacher: &Network, pool: &Inputs) -> Result<Vec<usize>> {
    let logits = logits_for(teacher, pool)?;
    let labels = argmax_rows(&logits.data(), teacher.classes());
    Ok(labels)
}

/// The labeled pool extended with every unlabeled row under its teacher
/// pseudo-label, so that both are trained on alike.
pub fn pseudo_labeled_pool(teacher: &Network, labeled: &LabeledPool, pool: &Inputs) -> Result<LabeledPool> {
    let mut data = labeled.inputs.as_slice().to_vec();
    data.extend_from_slice(pool.as_slice());
    let mut labels = labeled.labels.clone();
    labels.extend(pseudo_label(teacher, pool)?);
    Ok(LabeledPool {
        inputs: Inputs::new(labeled.inputs.dim(), data)?,
        labels,
    })
}

/// Binary IND-vs-OOD scorer on teacher features: a linear head followed by
/// a sigmoid. Samples scoring at least `threshold` are kept as IND.
#[derive(Debug)]
pub struct OodDetector {
    pub head: Linear,
    pub threshold: f64,
}

impl OodDetector {
    pub fn new(feature_dim: usize, threshold: f64, rng: &mut Rng) -> Result<Self> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::InvalidArgument(format!("threshold {threshold} outside [0, 1]")));
        }
        Ok(Self {
            head: Linear::new(feature_dim, 1, rng)?,
            threshold,
        })
    }

    /// IND probability for each row of teacher features (`B × 1`).
    pub fn score(&self, teacher_features: &Tensor) -> Result<Tensor> {
        Ok(self.head.forward(teacher_features)?.sigmoid())
    }

    /// Binary cross-entropy with `ind` rows as positives and `ood` rows as
    /// negatives, averaged over all rows.
    pub fn loss(&self, ind: &Tensor, ood: &Tensor) -> Result<Tensor> {
        let (np, nn) = (ind.shape()[0], ood.shape()[0]);
        let s = self.score(&Tensor::concat_rows(&[ind.detach(), ood.detach()])?)?;
        let mut y = vec![1.0; np];
        y.extend(std::iter::repeat_n(0.0, nn));
        let y = Tensor::matrix(np + nn, 1, y)?;
        let one_minus_y = Tensor::matrix(np + nn, 1, y.data().iter().map(|v| 1.0 - v).collect())?;
        let pos = s.log_floor(crate::tensor::LOG_FLOOR).mul(&y)?;
        let neg = s.neg().add_scalar(1.0).log_floor(crate::tensor::LOG_FLOOR).mul(&one_minus_y)?;
        Ok(pos.add(&neg)?.sum().scale(-1.0 / (np + nn) as f64))
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        vec![self.head.weight.clone(), self.head.bias.clone()]
    }
}

/// Result of filtering one unlabeled batch.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    /// Row positions within the batch kept as IND.
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
    /// Detector score of every row.
    pub scores: Vec<f64>,
    /// Counts split by hidden tags; all zero if no tags were supplied.
    pub stats: UsageStats,
}

/// Splits a batch by detector score on the teacher's features.
/// `hidden_ind` is used for the statistics only.
pub fn ood_filter(
    detector: &OodDetector,
    teacher_features: &Tensor,
    hidden_ind: Option<&[bool]>,
) -> Result<FilterOutcome> {
    let scores = detector.score(&teacher_features.detach())?.to_vec();
    let mut out = FilterOutcome {
        kept: Vec::new(),
        dropped: Vec::new(),
        scores: scores.clone(),
        stats: UsageStats::default(),
    };
    for (i, &s) in scores.iter().enumerate() {
        let keep = s >= detector.threshold;
        let ind = hidden_ind.map(|h| h[i]);
        if keep {
            out.kept.push(i);
        } else {
            out.dropped.push(i);
        }
        match (keep, ind) {
            (true, Some(true)) => out.stats.kept_ind += 1,
            (true, Some(false)) => out.stats.kept_ood += 1,
            (false, Some(true)) => out.stats.dropped_ind += 1,
            (false, Some(false)) => out.stats.dropped_ood += 1,
            _ => {}
        }
    }
    Ok(out)
}

/// `-mean cos(a_i, b_i)` over rows; `b` is treated as a constant.
pub fn negative_cosine(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let b = b.detach();
    let dot = a.mul(&b)?.sum_rows();
    let norms = a.row_norm().mul(&b.row_norm())?.clamp_min(COSINE_EPS);
    Ok(dot.div(&norms)?.mean().neg())
}

/// Two stochastic views of `batch`: the teacher scores view 1, the student
/// view 2, and the loss is their negative cosine similarity.
pub fn dac_loss(student: &Network, teacher: &Network, batch: &Tensor, strength: f64, rng: &mut Rng) -> Result<Tensor> {
    let v1 = augment_batch(batch, strength, rng)?;
    let v2 = augment_batch(batch, strength, rng)?;
    let (_, zt) = teacher.forward(&v1, Mode::Eval)?;
    let (_, zs) = student.forward(&v2, Mode::Train)?;
    negative_cosine(&zs, &zt)
}

/// Training recipe for stage 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Supervised,
    Kd,
    Srd,
    SrdKd,
    KdOod,
    SrdOod,
    KdDac,
    SrdDac,
    PseudoLabel,
}

impl TrainMode {
    pub const ALL: [TrainMode; 9] = [
        TrainMode::Supervised,
        TrainMode::Kd,
        TrainMode::Srd,
        TrainMode::SrdKd,
        TrainMode::KdOod,
        TrainMode::SrdOod,
        TrainMode::KdDac,
        TrainMode::SrdDac,
        TrainMode::PseudoLabel,
    ];

    pub fn uses_srd(self) -> bool {
        matches!(self, TrainMode::Srd | TrainMode::SrdKd | TrainMode::SrdOod | TrainMode::SrdDac)
    }

    pub fn uses_kd(self) -> bool {
        matches!(self, TrainMode::Kd | TrainMode::SrdKd | TrainMode::KdOod | TrainMode::KdDac)
    }

    pub fn uses_ood(self) -> bool {
        matches!(self, TrainMode::KdOod | TrainMode::SrdOod)
    }

    pub fn uses_dac(self) -> bool {
        matches!(self, TrainMode::KdDac | TrainMode::SrdDac)
    }

    pub fn uses_unlabeled(self) -> bool {
        self != TrainMode::Supervised
    }

    /// Modes that cannot run without unlabeled data.
    pub fn requires_unlabeled(self) -> bool {
        self.uses_ood() || self.uses_dac() || self == TrainMode::PseudoLabel
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Supervised => "supervised",
            TrainMode::Kd => "kd",
            TrainMode::Srd => "srd",
            TrainMode::SrdKd => "srd+kd",
            TrainMode::KdOod => "kd+ood",
            TrainMode::SrdOod => "srd+ood",
            TrainMode::KdDac => "kd+dac",
            TrainMode::SrdDac => "srd+dac",
            TrainMode::PseudoLabel => "pseudo_label",
        })
    }
}

impl FromStr for TrainMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| format!("unknown mode {s:?}"))
    }
}

/// Weights and settings of the baseline terms.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub kd_weight: f64,
    pub dac_weight: f64,
    pub dac_strength: f64,
    pub ood_threshold: f64,
    pub ood_weight: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            kd_weight: 0.9,
            dac_weight: 1.0,
            dac_strength: 2.0,
            ood_threshold: 0.5,
            ood_weight: 1.0,
        }
    }
}

/// Per-step context beyond the batch itself.
pub struct ModeStep<'a> {
    pub mode: TrainMode,
    pub nets: Nets<'a>,
    pub srd: &'a SrdConfig,
    pub baselines: &'a BaselineConfig,
    pub detector: Option<&'a OodDetector>,
    /// Hidden IND flags of this batch's unlabeled rows, for usage stats.
    pub hidden_ind: Option<&'a [bool]>,
}

/// One optimisation step of `ctx.mode`. Returns the loss components and,
/// for OOD modes, the filter statistics of this batch.
pub fn mode_step(
    batch: &StepBatch,
    ctx: &ModeStep<'_>,
    opt: &mut SgdState,
    rng: &mut Rng,
    iteration: usize,
) -> Result<(StepLosses, Option<UsageStats>)> {
    let at = |e: Error| Error::AtIteration {
        iteration,
        source: Box::new(e),
    };
    let (total, parts, usage) = mode_objective(batch, ctx, rng).map_err(at)?;
    Ok((apply_step(&total, parts, opt, iteration)?, usage))
}

fn mode_objective(
    batch: &StepBatch,
    ctx: &ModeStep<'_>,
    rng: &mut Rng,
) -> Result<(Tensor, StepLosses, Option<UsageStats>)> {
    let mode = ctx.mode;
    let nets = ctx.nets;
    let b = ctx.baselines;
    if batch.labeled_len() == 0 {
        return Err(Error::InvalidArgument("empty labeled sub-batch".into()));
    }
    if (mode.uses_ood() || mode.uses_dac()) && batch.unlabeled_len() == 0 {
        return Err(Error::InvalidArgument(format!("mode {mode} needs unlabeled data")));
    }
    let mut parts = StepLosses::default();

    match mode {
        // pseudo-labeled rows arrive merged into the labeled sub-batch
        TrainMode::Supervised | TrainMode::PseudoLabel => {
            let (_, logits) = nets.student.forward(&batch.labeled, Mode::Train)?;
            let ce = cross_entropy_labels(&logits.softmax()?, &batch.labels)?;
            parts.ce = ce.item()?;
            return Ok((ce, parts, None));
        }
        TrainMode::Srd => {
            let obj = semi_objective(batch, nets, ctx.srd)?;
            parts.ce = obj.ce.item()?;
            parts.srd = obj.srd.item()?;
            parts.reg = obj.reg.item()?;
            return Ok((obj.total, parts, None));
        }
        _ => {}
    }

    let mut extra: Vec<Tensor> = Vec::new();
    let mut usage = None;
    let mut unlabeled = batch.unlabeled.clone().filter(|u| u.numel() > 0);

    if mode.uses_ood() {
        let detector = ctx
            .detector
            .ok_or_else(|| Error::InvalidArgument(format!("mode {mode} needs a detector")))?;
        let u = unlabeled.as_ref().expect("checked above");
        let (tf_u, _) = nets.teacher.forward(u, Mode::Eval)?;
        let (tf_l, _) = nets.teacher.forward(&batch.labeled, Mode::Eval)?;
        // provisional negatives: a uniform subset of the unlabeled rows
        let mut neg: Vec<usize> = (0..u.shape()[0]).collect();
        neg.shuffle(rng);
        neg.truncate(batch.labeled_len().min(u.shape()[0]));
        neg.sort_unstable();
        let neg_rows = Inputs::new(tf_u.shape()[1], tf_u.to_vec())?.gather(&neg)?;
        let det_loss = detector.loss(&tf_l, &neg_rows)?;
        let outcome = ood_filter(detector, &tf_u, ctx.hidden_ind)?;
        usage = Some(outcome.stats);
        parts.aux += det_loss.item()?;
        extra.push(det_loss.scale(b.ood_weight));
        unlabeled = if outcome.kept.is_empty() {
            None
        } else {
            Some(Inputs::new(u.shape()[1], u.to_vec())?.gather(&outcome.kept)?)
        };
    }

    let mut dac_view = None;
    if mode.uses_dac() {
        let u = unlabeled.as_ref().expect("checked above");
        let v1 = augment_batch(u, b.dac_strength, rng)?;
        let v2 = augment_batch(u, b.dac_strength, rng)?;
        unlabeled = Some(v1);
        dac_view = Some(v2);
    }

    let work = StepBatch {
        labeled: batch.labeled.clone(),
        labels: batch.labels.clone(),
        unlabeled,
    };
    let fwd = StepForward::run(&work.union()?, work.labeled_len(), nets)?;
    let ce = fwd.ce(&work.labels)?;
    parts.ce = ce.item()?;
    let mut total = ce;

    if mode.uses_srd() {
        let srd = fwd.srd(ctx.srd.variant)?;
        let reg = fwd.reg()?;
        parts.srd = srd.item()?;
        parts.reg = reg.item()?;
        total = total.add(&srd.scale(ctx.srd.alpha))?.add(&reg.scale(ctx.srd.beta))?;
    }
    if mode.uses_kd() {
        let kd = kd_loss(&fwd.teacher_logits, &fwd.student_logits, ctx.srd.kd_temperature)?;
        parts.aux += kd.item()?;
        extra.push(kd.scale(b.kd_weight));
    }
    if let Some(v2) = dac_view {
        let nl = work.labeled_len();
        let teacher_v1 = fwd.teacher_logits.rows(nl, fwd.total_len())?;
        let (_, student_v2) = nets.student.forward(&v2, Mode::Train)?;
        let dac = negative_cosine(&student_v2, &teacher_v1)?;
        parts.aux += dac.item()?;
        extra.push(dac.scale(b.dac_weight));
    }
    for term in extra {
        total = total.add(&term)?;
    }
    Ok((total, parts, usage))
}
