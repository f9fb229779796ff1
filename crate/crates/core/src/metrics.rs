//! Accuracy, mimicry and unlabeled-usage reporting, plus the CSV writers
//! for them.
//!
//! All metrics run networks in eval mode. Ties between classes are broken
//! in favour of the lower class index everywhere.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::data::{Inputs, LabeledPool};
use crate::error::{Error, Result};
use crate::nn::{Mode, Network};
use crate::tensor::{Tensor, LOG_FLOOR};

/// Formats with six significant digits, `%g` style.
pub fn fmt6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let fixed = format!("{x:.decimals$}");
        if fixed.contains('.') {
            fixed.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            fixed
        }
    } else {
        let m = if mantissa.contains('.') {
            mantissa.trim_end_matches('0').trim_end_matches('.')
        } else {
            mantissa
        };
        format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

/// Position of each row's true class among its logits, counting classes
/// that score higher or tie with a lower index.
fn rank_of_true(logits: &[f64], k: usize, labels: &[usize]) -> Vec<usize> {
    logits
        .chunks(k)
        .zip(labels)
        .map(|(row, &c)| {
            let zc = row[c];
            row.iter()
                .enumerate()
                .filter(|&(j, &z)| z > zc || (z == zc && j < c))
                .count()
        })
        .collect()
}

/// Fraction of rows whose true class is among the `k` highest logits.
pub fn top_k_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let (rows, classes) = logits.rows_cols();
    if labels.is_empty() || logits.shape().len() != 2 {
        return Err(Error::InvalidArgument("top-k accuracy of an empty batch".into()));
    }
    if rows != labels.len() {
        return Err(Error::Shape {
            op: "top_k_accuracy",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    if k == 0 || k > classes {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..={classes}")));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= classes) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range")));
    }
    let hits = rank_of_true(&logits.data(), classes, labels)
        .into_iter()
        .filter(|&r| r < k)
        .count();
    Ok(hits as f64 / rows as f64)
}

/// Eval-mode logits for every row of `inputs`, as a `n × K` constant.
pub fn logits_for(net: &Network, inputs: &Inputs) -> Result<Tensor> {
    let all: Vec<usize> = (0..inputs.len()).collect();
    let mut out = Vec::with_capacity(inputs.len() * net.classes());
    for chunk in all.chunks(1024) {
        let (_, logits) = net.forward(&inputs.gather(chunk)?, Mode::Eval)?;
        out.extend_from_slice(&logits.data());
    }
    Tensor::matrix(inputs.len(), net.classes(), out)
}

/// Eval-mode top-1 accuracy on a labeled pool.
pub fn accuracy(net: &Network, pool: &LabeledPool) -> Result<f64> {
    top_k_accuracy(&logits_for(net, &pool.inputs)?, &pool.labels, 1)
}

/// Mean over rows of `KL(p_t ‖ p_s)` between two logit matrices.
pub fn mimicry_kl_from_logits(teacher: &Tensor, student: &Tensor) -> Result<f64> {
    if teacher.shape() != student.shape() {
        return Err(Error::Shape {
            op: "mimicry_kl",
            left: teacher.shape().to_vec(),
            right: student.shape().to_vec(),
        });
    }
    let (rows, k) = teacher.rows_cols();
    let (pt, ps) = (teacher.softmax()?, student.softmax()?);
    let (pt, ps) = (pt.data(), ps.data());
    let mut total = 0.0;
    for (a, b) in pt.chunks(k).zip(ps.chunks(k)) {
        let kl = a.iter().zip(b).fold(0.0, |acc, (&p, &q)| {
            if p > 0.0 {
                acc + p * (p.max(LOG_FLOOR).ln() - q.max(LOG_FLOOR).ln())
            } else {
                acc
            }
        });
        total += kl.max(0.0);
    }
    Ok(total / rows as f64)
}

/// Mean KL divergence from the teacher's to the student's predictions on
/// `inputs`; lower means closer imitation.
pub fn mimicry_kl(teacher: &Network, student: &Network, inputs: &Inputs) -> Result<f64> {
    mimicry_kl_from_logits(&logits_for(teacher, inputs)?, &logits_for(student, inputs)?)
}

/// Area under the ROC curve of `scores` against binary `positive` flags,
/// via the Mann-Whitney statistic with tied scores given average ranks.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Shape {
            op: "roc_auc",
            left: vec![scores.len()],
            right: vec![positive.len()],
        });
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument("ROC-AUC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// One row of a run's per-epoch metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub mode: String,
    pub seed: u64,
    pub epoch: usize,
    pub ce: f64,
    pub srd: f64,
    pub reg: f64,
    pub aux: f64,
    pub total: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub test_topk: f64,
    pub mimicry_kl: f64,
}

pub const METRICS_HEADER: &str = "run_id,mode,seed,epoch,ce,srd,reg,aux,total,train_acc,test_acc,test_topk,mimicry_kl";

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.mode,
            self.seed,
            self.epoch,
            fmt6(self.ce),
            fmt6(self.srd),
            fmt6(self.reg),
            fmt6(self.aux),
            fmt6(self.total),
            fmt6(self.train_acc),
            fmt6(self.test_acc),
            fmt6(self.test_topk),
            fmt6(self.mimicry_kl)
        )
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Per-epoch outcome of OOD filtering, split by the hidden IND/OOD tags.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UsageStats {
    pub epoch: usize,
    pub kept_ind: usize,
    pub kept_ood: usize,
    pub dropped_ind: usize,
    pub dropped_ood: usize,
}

impl UsageStats {
    pub fn add(&mut self, o: &UsageStats) {
        self.kept_ind += o.kept_ind;
        self.kept_ood += o.kept_ood;
        self.dropped_ind += o.dropped_ind;
        self.dropped_ood += o.dropped_ood;
    }

    pub fn total(&self) -> usize {
        self.kept_ind + self.kept_ood + self.dropped_ind + self.dropped_ood
    }
}

pub const USAGE_HEADER: &str = "epoch,kept_ind,kept_ood,dropped_ind,dropped_ood";

pub fn usage_csv(stats: &[UsageStats]) -> String {
    let mut out = format!("{USAGE_HEADER}\n");
    for s in stats {
        let _ = writeln!(out, "{},{},{},{},{}", s.epoch, s.kept_ind, s.kept_ood, s.dropped_ind, s.dropped_ood);
    }
    out
}

/// Kept proportions of one epoch's unlabeled traffic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UsageProportion {
    pub epoch: usize,
    pub kept: f64,
    /// Kept fraction among IND samples (0 when there were none).
    pub kept_ind: f64,
    /// Kept fraction among OOD samples (0 when there were none).
    pub kept_ood: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Turns raw per-epoch filter counts into kept proportions.
pub fn usage_curve(stats: &[UsageStats]) -> Result<Vec<UsageProportion>> {
    if stats.is_empty() {
        return Err(Error::InvalidArgument("no usage statistics recorded".into()));
    }
    Ok(stats
        .iter()
        .map(|s| UsageProportion {
            epoch: s.epoch,
            kept: ratio(s.kept_ind + s.kept_ood, s.total()),
            kept_ind: ratio(s.kept_ind, s.kept_ind + s.dropped_ind),
            kept_ood: ratio(s.kept_ood, s.kept_ood + s.dropped_ood),
        })
        .collect())
}

pub const USAGE_CURVE_HEADER: &str = "epoch,kept,kept_ind,kept_ood";

pub fn usage_curve_csv(curve: &[UsageProportion]) -> String {
    let mut out = format!("{USAGE_CURVE_HEADER}\n");
    for p in curve {
        let _ = writeln!(out, "{},{},{},{}", p.epoch, fmt6(p.kept), fmt6(p.kept_ind), fmt6(p.kept_ood));
    }
    out
}

/// Writes `f0..f{d-1},label` rows of eval-mode features. Values are written
/// in shortest round-trip form so the file parses back exactly.
pub fn feature_dump(net: &Network, inputs: &Inputs, labels: &[usize], path: &Path) -> Result<usize> {
    if inputs.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} inputs but {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    let d = net.feature_dim();
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    let header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    writeln!(f, "{},label", header.join(","))?;
    let all: Vec<usize> = (0..inputs.len()).collect();
    for chunk in all.chunks(1024) {
        let (features, _) = net.forward(&inputs.gather(chunk)?, Mode::Eval)?;
        for (row, &i) in features.data().chunks(d).zip(chunk) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(f, "{},{}", cells.join(","), labels[i])?;
        }
    }
    f.flush()?;
    Ok(inputs.len())
}

/// Parses a [`feature_dump`] file back into `(features, labels)`.
pub fn read_feature_dump(path: &Path) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    lines.next().ok_or_else(|| Error::Format("empty feature dump".into()))?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in lines.enumerate() {
        let bad = || Error::Format(format!("feature dump line {}: {line:?}", n + 2));
        let (values, label) = line.rsplit_once(',').ok_or_else(bad)?;
        features.push(
            values
                .split(',')
                .map(str::parse)
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|_| bad())?,
        );
        labels.push(label.parse().map_err(|_| bad())?);
    }
    Ok((features, labels))
}
