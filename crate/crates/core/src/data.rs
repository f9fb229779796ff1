//! Synthetic open-set data.
//!
//! Seen classes are Gaussian mixtures in a shared input space: each class
//! owns several sub-cluster centres scattered on a shell, so class regions
//! interleave and the decision boundary is non-linear. Unseen classes are
//! placed either between seen sub-clusters (hard OOD, overlapping seen
//! support) or further out (easy OOD).
//!
//! Training code only ever sees inputs and seen-class labels. The hidden
//! class tags and IND/OOD flags of the unlabeled pool live in
//! [`UnlabeledTruth`] and are handed out by [`OpenSetDataset::eval_truth`]
//! for reporting.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{Checkpoint, Mode, Network};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Where unseen classes sit relative to the seen ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Mostly between seen sub-clusters.
    Near,
    /// Mostly far outside the seen shell.
    Far,
}

impl Regime {
    /// `(fraction of unseen classes placed between seen clusters, radius
    /// multiplier for the rest)`.
    fn geometry(self) -> (f64, f64) {
        match self {
            Regime::Near => (0.5, 1.5),
            Regime::Far => (0.0, 3.0),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Near => "near",
            Regime::Far => "far",
        })
    }
}

impl FromStr for Regime {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "near" => Ok(Regime::Near),
            "far" => Ok(Regime::Far),
            _ => Err(format!("unknown regime {s:?} (expected near or far)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetParams {
    pub num_classes: usize,
    pub unseen_classes: usize,
    /// Fraction of seen classes that also appear in the unlabeled pool.
    pub overlap: f64,
    pub labeled_per_class: usize,
    pub unlabeled_per_class: usize,
    pub test_per_class: usize,
    pub input_dim: usize,
    pub modes_per_class: usize,
    /// Typical norm of a sub-cluster centre.
    pub separation: f64,
    /// Per-coordinate standard deviation around a centre.
    pub noise: f64,
    pub regime: Regime,
    pub seed: u64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            num_classes: 8,
            unseen_classes: 16,
            overlap: 0.1,
            labeled_per_class: 20,
            unlabeled_per_class: 40,
            test_per_class: 250,
            input_dim: 32,
            modes_per_class: 4,
            separation: 4.0,
            noise: 0.8,
            regime: Regime::Near,
            seed: 2022,
        }
    }
}

impl DatasetParams {
    /// Seen classes that contribute to the unlabeled pool.
    pub fn seen_in_unlabeled(&self) -> usize {
        (self.overlap * self.num_classes as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return bad(format!("overlap {} outside [0, 1]", self.overlap));
        }
        if self.input_dim == 0 || self.modes_per_class == 0 {
            return bad("input_dim and modes_per_class must be positive".into());
        }
        if self.labeled_per_class == 0 || self.test_per_class == 0 {
            return bad("labeled and test pools must be non-empty".into());
        }
        if !(self.noise >= 0.0 && self.separation > 0.0) {
            return bad("noise must be nonnegative and separation positive".into());
        }
        if self.overlap > 0.0 && (self.seen_in_unlabeled() == 0 || self.unlabeled_per_class == 0) {
            return bad(format!(
                "overlap {} cannot be realised with {} classes and {} unlabeled samples per class",
                self.overlap, self.num_classes, self.unlabeled_per_class
            ));
        }
        Ok(())
    }
}

/// Row-major sample matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Inputs {
    dim: usize,
    data: Vec<f64>,
}

impl Inputs {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} values do not form rows of width {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn empty(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// The selected rows as a constant `len × dim` tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let mut out = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            out.extend_from_slice(self.row(i));
        }
        Tensor::matrix(indices.len(), self.dim, out)
    }

    pub fn subset(&self, indices: &[usize]) -> Inputs {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Inputs { dim: self.dim, data }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::matrix(self.len(), self.dim, self.data.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPool {
    pub inputs: Inputs,
    pub labels: Vec<usize>,
}

/// Ground truth of the unlabeled pool. Evaluation-only.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledTruth {
    /// `0..K` for seen classes, `K..K+unseen` for unseen ones.
    pub classes: Vec<usize>,
    /// True iff the sample belongs to a seen class.
    pub in_distribution: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenSetDataset {
    pub params: DatasetParams,
    labeled: LabeledPool,
    unlabeled: Inputs,
    truth: UnlabeledTruth,
    test: LabeledPool,
}

fn gaussian(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn draw_pool(rng: &mut Rng, centres: &[Vec<f64>], per_class: usize, noise: f64, out: &mut Vec<f64>) {
    for i in 0..per_class {
        let centre = &centres[i % centres.len()];
        out.extend(centre.iter().zip(gaussian(rng, centre.len(), noise)).map(|(c, e)| c + e));
    }
}

/// Builds a dataset; the result is a pure function of `params`.
pub fn generate(params: &DatasetParams) -> Result<OpenSetDataset> {
    params.validate()?;
    let d = params.input_dim;
    let k = params.num_classes;
    let mut geo = rng::stream(params.seed, "data/geometry");
    let centre_scale = params.separation / (d as f64).sqrt();

    let seen: Vec<Vec<Vec<f64>>> = (0..k)
        .map(|_| (0..params.modes_per_class).map(|_| gaussian(&mut geo, d, centre_scale)).collect())
        .collect();

    let (hard_fraction, far_radius) = params.regime.geometry();
    let hard = (hard_fraction * params.unseen_classes as f64).round() as usize;
    let unseen: Vec<Vec<Vec<f64>>> = (0..params.unseen_classes)
        .map(|u| {
            (0..params.modes_per_class)
                .map(|_| {
                    if u < hard {
                        // between two sub-clusters of different seen classes
                        let a = geo.random_range(0..k);
                        let b = (a + geo.random_range(1..k)) % k;
                        let ca = &seen[a][geo.random_range(0..params.modes_per_class)];
                        let cb = &seen[b][geo.random_range(0..params.modes_per_class)];
                        let t: f64 = geo.random_range(0.3..0.7);
                        let jitter = gaussian(&mut geo, d, 0.25 * centre_scale);
                        (0..d).map(|j| t * ca[j] + (1.0 - t) * cb[j] + jitter[j]).collect()
                    } else {
                        gaussian(&mut geo, d, far_radius * centre_scale)
                    }
                })
                .collect()
        })
        .collect();

    let mut sampler = rng::stream(params.seed, "data/samples");
    let mut labeled = Vec::new();
    let mut labels = Vec::new();
    let mut test = Vec::new();
    let mut test_labels = Vec::new();
    for (c, centres) in seen.iter().enumerate() {
        draw_pool(&mut sampler, centres, params.labeled_per_class, params.noise, &mut labeled);
        labels.extend(std::iter::repeat_n(c, params.labeled_per_class));
        draw_pool(&mut sampler, centres, params.test_per_class, params.noise, &mut test);
        test_labels.extend(std::iter::repeat_n(c, params.test_per_class));
    }

    let mut present: Vec<usize> = (0..k).collect();
    present.shuffle(&mut rng::stream(params.seed, "data/overlap"));
    present.truncate(params.seen_in_unlabeled());
    present.sort_unstable();

    let mut unlabeled = Vec::new();
    let mut classes = Vec::new();
    for &c in &present {
        draw_pool(&mut sampler, &seen[c], params.unlabeled_per_class, params.noise, &mut unlabeled);
        classes.extend(std::iter::repeat_n(c, params.unlabeled_per_class));
    }
    for (u, centres) in unseen.iter().enumerate() {
        draw_pool(&mut sampler, centres, params.unlabeled_per_class, params.noise, &mut unlabeled);
        classes.extend(std::iter::repeat_n(k + u, params.unlabeled_per_class));
    }
    // interleave the pool so its order carries no class information
    let mut order: Vec<usize> = (0..classes.len()).collect();
    order.shuffle(&mut rng::stream(params.seed, "data/unlabeled-order"));
    let pool = Inputs::new(d, unlabeled)?;
    let unlabeled = pool.subset(&order);
    let classes: Vec<usize> = order.iter().map(|&i| classes[i]).collect();
    let in_distribution = classes.iter().map(|&c| c < k).collect();

    Ok(OpenSetDataset {
        params: params.clone(),
        labeled: LabeledPool {
            inputs: Inputs::new(d, labeled)?,
            labels,
        },
        unlabeled,
        truth: UnlabeledTruth {
            classes,
            in_distribution,
        },
        test: LabeledPool {
            inputs: Inputs::new(d, test)?,
            labels: test_labels,
        },
    })
}

impl OpenSetDataset {
    pub fn labeled(&self) -> &LabeledPool {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &Inputs {
        &self.unlabeled
    }

    pub fn test(&self) -> &LabeledPool {
        &self.test
    }

    /// Hidden tags of the unlabeled pool, for evaluation and reporting only.
    pub fn eval_truth(&self) -> &UnlabeledTruth {
        &self.truth
    }

    /// Fraction of unlabeled samples that belong to seen classes.
    pub fn ind_fraction(&self) -> f64 {
        if self.truth.in_distribution.is_empty() {
            return 0.0;
        }
        let ind = self.truth.in_distribution.iter().filter(|&&b| b).count();
        ind as f64 / self.truth.in_distribution.len() as f64
    }

    /// Copy whose unlabeled pool is restricted to `indices`.
    pub fn with_unlabeled_subset(&self, indices: &[usize]) -> OpenSetDataset {
        let mut out = self.clone();
        out.unlabeled = self.unlabeled.subset(indices);
        out.truth = UnlabeledTruth {
            classes: indices.iter().map(|&i| self.truth.classes[i]).collect(),
            in_distribution: indices.iter().map(|&i| self.truth.in_distribution[i]).collect(),
        };
        out
    }

    /// Text header with the generator parameters followed by the pools as
    /// little-endian `f64` blocks.
    pub fn save(&self, path: &Path) -> Result<()> {
        let p = &self.params;
        let mut out = format!(
            "srd-dataset 1\nnum_classes {}\nunseen_classes {}\noverlap {}\nlabeled_per_class {}\n\
             unlabeled_per_class {}\ntest_per_class {}\ninput_dim {}\nmodes_per_class {}\n\
             separation {}\nnoise {}\nregime {}\nseed {}\nparams-end\n",
            p.num_classes,
            p.unseen_classes,
            p.overlap,
            p.labeled_per_class,
            p.unlabeled_per_class,
            p.test_per_class,
            p.input_dim,
            p.modes_per_class,
            p.separation,
            p.noise,
            p.regime,
            p.seed
        )
        .into_bytes();
        let d = p.input_dim;
        let as_f = |v: &[usize]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        let mut blocks = Checkpoint::default();
        blocks.push_raw("labeled.inputs".into(), vec![self.labeled.labels.len(), d], self.labeled.inputs.data.clone());
        blocks.push_raw("labeled.labels".into(), vec![self.labeled.labels.len()], as_f(&self.labeled.labels));
        blocks.push_raw("unlabeled.inputs".into(), vec![self.unlabeled.len(), d], self.unlabeled.data.clone());
        blocks.push_raw("unlabeled.classes".into(), vec![self.truth.classes.len()], as_f(&self.truth.classes));
        blocks.push_raw("test.inputs".into(), vec![self.test.labels.len(), d], self.test.inputs.data.clone());
        blocks.push_raw("test.labels".into(), vec![self.test.labels.len()], as_f(&self.test.labels));
        blocks.write_to(&mut out)?;
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let marker = b"params-end\n";
        let split = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or_else(|| Error::Format("dataset header not terminated".into()))?;
        let header = std::str::from_utf8(&bytes[..split]).map_err(|_| Error::Format("dataset header is not UTF-8".into()))?;
        let mut lines = header.lines();
        if lines.next() != Some("srd-dataset 1") {
            return Err(Error::Format("not a dataset file".into()));
        }
        let mut p = DatasetParams::default();
        for line in lines {
            let (key, value) = line
                .split_once(' ')
                .ok_or_else(|| Error::Format(format!("bad header line {line:?}")))?;
            let bad = || Error::Format(format!("bad value for {key}: {value:?}"));
            match key {
                "num_classes" => p.num_classes = value.parse().map_err(|_| bad())?,
                "unseen_classes" => p.unseen_classes = value.parse().map_err(|_| bad())?,
                "overlap" => p.overlap = value.parse().map_err(|_| bad())?,
                "labeled_per_class" => p.labeled_per_class = value.parse().map_err(|_| bad())?,
                "unlabeled_per_class" => p.unlabeled_per_class = value.parse().map_err(|_| bad())?,
                "test_per_class" => p.test_per_class = value.parse().map_err(|_| bad())?,
                "input_dim" => p.input_dim = value.parse().map_err(|_| bad())?,
                "modes_per_class" => p.modes_per_class = value.parse().map_err(|_| bad())?,
                "separation" => p.separation = value.parse().map_err(|_| bad())?,
                "noise" => p.noise = value.parse().map_err(|_| bad())?,
                "regime" => p.regime = value.parse().map_err(|_| bad())?,
                "seed" => p.seed = value.parse().map_err(|_| bad())?,
                _ => return Err(Error::Format(format!("unknown dataset header key {key}"))),
            }
        }
        let blocks = Checkpoint::read_from(&bytes[split + marker.len()..])?;
        let d = p.input_dim;
        let n_l = p.num_classes * p.labeled_per_class;
        let n_t = p.num_classes * p.test_per_class;
        let n_u = (p.seen_in_unlabeled() + p.unseen_classes) * p.unlabeled_per_class;
        let as_u = |v: &[f64]| v.iter().map(|&x| x as usize).collect::<Vec<_>>();
        let classes = as_u(blocks.get("unlabeled.classes", &[n_u])?);
        let in_distribution = classes.iter().map(|&c| c < p.num_classes).collect();
        Ok(OpenSetDataset {
            labeled: LabeledPool {
                inputs: Inputs::new(d, blocks.get("labeled.inputs", &[n_l, d])?.to_vec())?,
                labels: as_u(blocks.get("labeled.labels", &[n_l])?),
            },
            unlabeled: if n_u == 0 {
                Inputs::empty(d)
            } else {
                Inputs::new(d, blocks.get("unlabeled.inputs", &[n_u, d])?.to_vec())?
            },
            truth: UnlabeledTruth {
                classes,
                in_distribution,
            },
            test: LabeledPool {
                inputs: Inputs::new(d, blocks.get("test.inputs", &[n_t, d])?.to_vec())?,
                labels: as_u(blocks.get("test.labels", &[n_t])?),
            },
            params: p,
        })
    }

    /// Writes `labeled.csv`, `unlabeled.csv` and `test.csv` into `dir`.
    pub fn export_csv(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let d = self.params.input_dim;
        let cols: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
        let write = |name: &str, extra: &str, inputs: &Inputs, tail: &dyn Fn(usize) -> String| -> Result<()> {
            let mut f = std::io::BufWriter::new(fs::File::create(dir.join(name))?);
            writeln!(f, "{},{extra}", cols.join(","))?;
            for i in 0..inputs.len() {
                let row: Vec<String> = inputs.row(i).iter().map(|v| format!("{v:e}")).collect();
                writeln!(f, "{},{}", row.join(","), tail(i))?;
            }
            Ok(())
        };
        write("labeled.csv", "label", &self.labeled.inputs, &|i| self.labeled.labels[i].to_string())?;
        write("test.csv", "label", &self.test.inputs, &|i| self.test.labels[i].to_string())?;
        write("unlabeled.csv", "class,ind", &self.unlabeled, &|i| {
            format!("{},{}", self.truth.classes[i], u8::from(self.truth.in_distribution[i]))
        })?;
        Ok(())
    }
}

/// Stochastic view of an input: additive Gaussian jitter of scale
/// `strength` under a random per-coordinate sign mask. Strength 0 returns
/// the input unchanged.
pub fn augment(x: &[f64], strength: f64, rng: &mut Rng) -> Vec<f64> {
    if strength == 0.0 {
        return x.to_vec();
    }
    x.iter()
        .map(|&v| {
            let jitter: f64 = rng.sample::<f64, _>(StandardNormal).abs() * strength;
            if rng.random::<bool>() {
                v - jitter
            } else {
                v + jitter
            }
        })
        .collect()
}

/// Augments every row of `inputs`.
pub fn augment_batch(inputs: &Tensor, strength: f64, rng: &mut Rng) -> Result<Tensor> {
    let (rows, cols) = inputs.rows_cols();
    let data = inputs.data().chunks(cols).flat_map(|r| augment(r, strength, rng)).collect();
    Tensor::matrix(rows, cols, data)
}

/// Row indices of one mixed mini-batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchIndices {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Epoch-wise mini-batch schedule over a labeled and an unlabeled pool.
///
/// Each epoch is a fresh permutation of the labeled pool, cut into batches
/// of `labeled_batch` (the last may be short). Unlabeled rows come from an
/// endless concatenation of permutations of the unlabeled pool, so no
/// sample repeats until the pool is exhausted. Epoch `e` is computed
/// directly from `(seed, e)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSampler {
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub seed: u64,
    pub labeled_len: usize,
    pub unlabeled_len: usize,
}

impl BatchSampler {
    pub fn batches_per_epoch(&self) -> usize {
        self.labeled_len.div_ceil(self.labeled_batch.max(1))
    }

    fn unlabeled_cycle(&self, cycle: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.unlabeled_len).collect();
        perm.shuffle(&mut rng::stream(self.seed, &format!("sampler/unlabeled/{cycle}")));
        perm
    }

    pub fn epoch(&self, epoch: usize) -> Vec<BatchIndices> {
        let mut order: Vec<usize> = (0..self.labeled_len).collect();
        order.shuffle(&mut rng::stream(self.seed, &format!("sampler/labeled/{epoch}")));
        let per_epoch = self.batches_per_epoch();
        let lb = self.labeled_batch.max(1);
        let mut cached: Option<(usize, Vec<usize>)> = None;
        let mut cursor = epoch * per_epoch * self.unlabeled_batch;
        order
            .chunks(lb)
            .map(|chunk| {
                let want = if self.unlabeled_len == 0 {
                    0
                } else {
                    (self.unlabeled_batch * chunk.len()).div_ceil(lb)
                };
                let mut unlabeled = Vec::with_capacity(want);
                for _ in 0..want {
                    let (cycle, pos) = (cursor / self.unlabeled_len, cursor % self.unlabeled_len);
                    if cached.as_ref().map(|(c, _)| *c) != Some(cycle) {
                        cached = Some((cycle, self.unlabeled_cycle(cycle)));
                    }
                    unlabeled.push(cached.as_ref().expect("cycle cached").1[pos]);
                    cursor += 1;
                }
                // keep the stream aligned with full-size batches
                cursor += self.unlabeled_batch.saturating_sub(want) * usize::from(self.unlabeled_len > 0);
                BatchIndices {
                    labeled: chunk.to_vec(),
                    unlabeled,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionPolicy {
    Random,
    TeacherScore,
}

impl fmt::Display for SelectionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionPolicy::Random => "random",
            SelectionPolicy::TeacherScore => "teacher_score",
        })
    }
}

impl FromStr for SelectionPolicy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "random" => Ok(SelectionPolicy::Random),
            "teacher_score" => Ok(SelectionPolicy::TeacherScore),
            _ => Err(format!("unknown policy {s:?} (expected random or teacher_score)")),
        }
    }
}

/// Maximum softmax probability of `net` on every row, in eval mode.
pub fn confidence_scores(net: &Network, inputs: &Inputs) -> Result<Vec<f64>> {
    let k = net.classes();
    let mut scores = Vec::with_capacity(inputs.len());
    let all: Vec<usize> = (0..inputs.len()).collect();
    for chunk in all.chunks(512) {
        let (_, logits) = net.forward(&inputs.gather(chunk)?, Mode::Eval)?;
        let p = logits.softmax()?;
        scores.extend(p.data().chunks(k).map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)));
    }
    Ok(scores)
}

/// Picks `round(fraction · n)` (at least one) unlabeled rows, returned in
/// ascending index order. `TeacherScore` keeps the most confident rows
/// under the teacher, breaking ties by index; `Random` draws uniformly
/// from a stream keyed by `seed`.
pub fn select_unlabeled(
    pool: &Inputs,
    fraction: f64,
    policy: SelectionPolicy,
    teacher: Option<&Network>,
    seed: u64,
) -> Result<Vec<usize>> {
    if pool.is_empty() {
        return Err(Error::InvalidArgument("cannot select from an empty unlabeled pool".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside (0, 1]")));
    }
    let n = pool.len();
    let keep = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut chosen = match policy {
        SelectionPolicy::Random => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng::stream(seed, "select/random"));
            idx.truncate(keep);
            idx
        }
        SelectionPolicy::TeacherScore => {
            let teacher = teacher.ok_or_else(|| {
                Error::InvalidArgument("teacher_score selection needs a teacher".into())
            })?;
            let scores = confidence_scores(teacher, pool)?;
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            idx.truncate(keep);
            idx
        }
    };
    chosen.sort_unstable();
    Ok(chosen)
}
