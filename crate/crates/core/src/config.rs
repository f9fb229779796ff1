//! Experiment configuration.
//!
//! The text format is line oriented: `[section]` headers followed by
//! `key = value` lines. `#` starts a comment. Every key has a default, so
//! an empty file is a complete configuration. Lists are comma separated.
//!
//! ```text
//! [dataset]
//! regime = near
//! overlap = 0.1
//!
//! [run]
//! mode = srd
//! seeds = 0, 1, 2
//! ```

use std::fmt::{Display, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use crate::baselines::{BaselineConfig, TrainMode};
use crate::data::{DatasetParams, SelectionPolicy};
use crate::distill::{PretrainConfig, SrdConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    /// Widths of the hidden layers; the last one is the feature dimension.
    pub hidden: Vec<usize>,
    pub batch_norm: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptorConfig {
    /// Batch normalisation between the adaptor's linear map and its ReLU.
    pub normalization: bool,
}

/// Stage-2 optimisation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![40, 50],
            gamma: 0.1,
            labeled_batch: 32,
            unlabeled_batch: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: TrainMode,
    pub seeds: Vec<u64>,
    /// Whether distillation terms also see the unlabeled pool.
    pub use_unlabeled: bool,
    /// Share of the unlabeled pool kept before training.
    pub fraction: f64,
    pub policy: SelectionPolicy,
    pub top_k: usize,
    pub out_dir: PathBuf,
    /// Directory of pretrained teachers; empty disables caching.
    pub teacher_cache: PathBuf,
    pub sweep_fractions: Vec<f64>,
    pub sweep_policies: Vec<SelectionPolicy>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Srd,
            seeds: vec![0, 1, 2, 3, 4],
            use_unlabeled: true,
            fraction: 1.0,
            policy: SelectionPolicy::Random,
            top_k: 3,
            out_dir: PathBuf::from("runs/default"),
            teacher_cache: PathBuf::from("runs/teachers"),
            sweep_fractions: vec![0.25, 0.5, 0.75, 1.0],
            sweep_policies: vec![SelectionPolicy::Random, SelectionPolicy::TeacherScore],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetParams,
    pub teacher: ArchConfig,
    pub student: ArchConfig,
    pub adaptor: AdaptorConfig,
    pub srd: SrdConfig,
    pub baselines: BaselineConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub run: RunConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetParams::default(),
            teacher: ArchConfig {
                hidden: vec![256, 256],
                batch_norm: true,
            },
            student: ArchConfig {
                hidden: vec![32, 32],
                batch_norm: true,
            },
            adaptor: AdaptorConfig { normalization: true },
            srd: SrdConfig::default(),
            baselines: BaselineConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            run: RunConfig::default(),
        }
    }
}

fn value<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| format!("cannot parse {v:?}: {e}"))
}

fn list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: Display,
{
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| value(p.trim())).collect()
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

fn join_f64(items: &[f64]) -> String {
    items.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        let mut last_line = 0;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            last_line = line_no;
            let err = |message: String| Error::Config { line: line_no, message };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("malformed section header {line:?}")))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(err(format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, val) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            let sec = section
                .as_deref()
                .ok_or_else(|| err(format!("key {:?} outside any section", key.trim())))?;
            cfg.set(sec, key.trim(), val.trim()).map_err(err)?;
        }
        cfg.validate().map_err(|message| Error::Config {
            line: last_line,
            message,
        })?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
        let d = &mut self.dataset;
        let b = &mut self.baselines;
        let p = &mut self.pretrain;
        let t = &mut self.train;
        let r = &mut self.run;
        match (section, key) {
            ("dataset", "num_classes") => d.num_classes = value(v)?,
            ("dataset", "unseen_classes") => d.unseen_classes = value(v)?,
            ("dataset", "overlap") => d.overlap = value(v)?,
            ("dataset", "labeled_per_class") => d.labeled_per_class = value(v)?,
            ("dataset", "unlabeled_per_class") => d.unlabeled_per_class = value(v)?,
            ("dataset", "test_per_class") => d.test_per_class = value(v)?,
            ("dataset", "input_dim") => d.input_dim = value(v)?,
            ("dataset", "modes_per_class") => d.modes_per_class = value(v)?,
            ("dataset", "separation") => d.separation = value(v)?,
            ("dataset", "noise") => d.noise = value(v)?,
            ("dataset", "regime") => d.regime = value(v)?,
            ("dataset", "seed") => d.seed = value(v)?,
            ("teacher", "hidden") => self.teacher.hidden = list(v)?,
            ("teacher", "batch_norm") => self.teacher.batch_norm = value(v)?,
            ("student", "hidden") => self.student.hidden = list(v)?,
            ("student", "batch_norm") => self.student.batch_norm = value(v)?,
            ("adaptor", "normalization") => self.adaptor.normalization = value(v)?,
            ("srd", "variant") => self.srd.variant = value(v)?,
            ("srd", "alpha") => self.srd.alpha = value(v)?,
            ("srd", "beta") => self.srd.beta = value(v)?,
            ("srd", "kd_temperature") => self.srd.kd_temperature = value(v)?,
            ("baselines", "kd_weight") => b.kd_weight = value(v)?,
            ("baselines", "dac_weight") => b.dac_weight = value(v)?,
            ("baselines", "dac_strength") => b.dac_strength = value(v)?,
            ("baselines", "ood_threshold") => b.ood_threshold = value(v)?,
            ("baselines", "ood_weight") => b.ood_weight = value(v)?,
            ("pretrain", "epochs") => p.epochs = value(v)?,
            ("pretrain", "batch") => p.batch = value(v)?,
            ("pretrain", "lr") => p.lr = value(v)?,
            ("pretrain", "momentum") => p.momentum = value(v)?,
            ("pretrain", "weight_decay") => p.weight_decay = value(v)?,
            ("pretrain", "milestones") => p.milestones = list(v)?,
            ("pretrain", "gamma") => p.gamma = value(v)?,
            ("pretrain", "accuracy_floor") => p.accuracy_floor = value(v)?,
            ("train", "epochs") => t.epochs = value(v)?,
            ("train", "lr") => t.lr = value(v)?,
            ("train", "momentum") => t.momentum = value(v)?,
            ("train", "weight_decay") => t.weight_decay = value(v)?,
            ("train", "milestones") => t.milestones = list(v)?,
            ("train", "gamma") => t.gamma = value(v)?,
            ("train", "labeled_batch") => t.labeled_batch = value(v)?,
            ("train", "unlabeled_batch") => t.unlabeled_batch = value(v)?,
            ("run", "mode") => r.mode = value(v)?,
            ("run", "seeds") => r.seeds = list(v)?,
            ("run", "use_unlabeled") => r.use_unlabeled = value(v)?,
            ("run", "fraction") => r.fraction = value(v)?,
            ("run", "policy") => r.policy = value(v)?,
            ("run", "top_k") => r.top_k = value(v)?,
            ("run", "out_dir") => r.out_dir = PathBuf::from(v),
            ("run", "teacher_cache") => r.teacher_cache = PathBuf::from(v),
            ("run", "sweep_fractions") => r.sweep_fractions = list(v)?,
            ("run", "sweep_policies") => r.sweep_policies = list(v)?,
            _ => return Err(format!("unknown key {key:?} in [{section}]")),
        }
        Ok(())
    }

    /// Range and consistency checks beyond what parsing enforces.
    pub fn validate(&self) -> std::result::Result<(), String> {
        self.dataset.validate().map_err(|e| e.to_string())?;
        let nonneg = [
            ("srd.alpha", self.srd.alpha),
            ("srd.beta", self.srd.beta),
            ("baselines.kd_weight", self.baselines.kd_weight),
            ("baselines.dac_weight", self.baselines.dac_weight),
            ("baselines.dac_strength", self.baselines.dac_strength),
            ("baselines.ood_weight", self.baselines.ood_weight),
            ("train.weight_decay", self.train.weight_decay),
            ("pretrain.weight_decay", self.pretrain.weight_decay),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be nonnegative, got {v}"));
            }
        }
        for (name, v) in [("train.lr", self.train.lr), ("pretrain.lr", self.pretrain.lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.srd.kd_temperature > 0.0) {
            return Err("srd.kd_temperature must be positive".into());
        }
        for (name, v) in [("train.momentum", self.train.momentum), ("pretrain.momentum", self.pretrain.momentum)] {
            if !(0.0..1.0).contains(&v) {
                return Err(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.baselines.ood_threshold) {
            return Err("baselines.ood_threshold must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.pretrain.accuracy_floor) {
            return Err("pretrain.accuracy_floor must lie in [0, 1]".into());
        }
        if self.teacher.hidden.is_empty() || self.student.hidden.is_empty() {
            return Err("teacher and student need at least one hidden layer".into());
        }
        if self.teacher.hidden.contains(&0) || self.student.hidden.contains(&0) {
            return Err("hidden widths must be positive".into());
        }
        if self.train.labeled_batch == 0 || self.pretrain.batch == 0 {
            return Err("batch sizes must be positive".into());
        }
        if self.run.seeds.is_empty() {
            return Err("run.seeds must list at least one seed".into());
        }
        let frac_ok = |f: f64| f > 0.0 && f <= 1.0;
        if !frac_ok(self.run.fraction) || !self.run.sweep_fractions.iter().all(|&f| frac_ok(f)) {
            return Err("unlabeled fractions must lie in (0, 1]".into());
        }
        if self.run.top_k == 0 || self.run.top_k > self.dataset.num_classes {
            return Err(format!("run.top_k must lie in [1, {}]", self.dataset.num_classes));
        }
        Ok(())
    }

    /// Fully resolved text form; parsing it gives back an identical value.
    pub fn emit(&self) -> String {
        let d = &self.dataset;
        let b = &self.baselines;
        let p = &self.pretrain;
        let t = &self.train;
        let r = &self.run;
        let mut o = String::new();
        let _ = writeln!(o, "[dataset]");
        let _ = writeln!(o, "num_classes = {}", d.num_classes);
        let _ = writeln!(o, "unseen_classes = {}", d.unseen_classes);
        let _ = writeln!(o, "overlap = {:?}", d.overlap);
        let _ = writeln!(o, "labeled_per_class = {}", d.labeled_per_class);
        let _ = writeln!(o, "unlabeled_per_class = {}", d.unlabeled_per_class);
        let _ = writeln!(o, "test_per_class = {}", d.test_per_class);
        let _ = writeln!(o, "input_dim = {}", d.input_dim);
        let _ = writeln!(o, "modes_per_class = {}", d.modes_per_class);
        let _ = writeln!(o, "separation = {:?}", d.separation);
        let _ = writeln!(o, "noise = {:?}", d.noise);
        let _ = writeln!(o, "regime = {}", d.regime);
        let _ = writeln!(o, "seed = {}", d.seed);
        for (name, a) in [("teacher", &self.teacher), ("student", &self.student)] {
            let _ = writeln!(o, "\n[{name}]");
            let _ = writeln!(o, "hidden = {}", join(&a.hidden));
            let _ = writeln!(o, "batch_norm = {}", a.batch_norm);
        }
        let _ = writeln!(o, "\n[adaptor]");
        let _ = writeln!(o, "normalization = {}", self.adaptor.normalization);
        let _ = writeln!(o, "\n[srd]");
        let _ = writeln!(o, "variant = {}", self.srd.variant);
        let _ = writeln!(o, "alpha = {:?}", self.srd.alpha);
        let _ = writeln!(o, "beta = {:?}", self.srd.beta);
        let _ = writeln!(o, "kd_temperature = {:?}", self.srd.kd_temperature);
        let _ = writeln!(o, "\n[baselines]");
        let _ = writeln!(o, "kd_weight = {:?}", b.kd_weight);
        let _ = writeln!(o, "dac_weight = {:?}", b.dac_weight);
        let _ = writeln!(o, "dac_strength = {:?}", b.dac_strength);
        let _ = writeln!(o, "ood_threshold = {:?}", b.ood_threshold);
        let _ = writeln!(o, "ood_weight = {:?}", b.ood_weight);
        let _ = writeln!(o, "\n[pretrain]");
        let _ = writeln!(o, "epochs = {}", p.epochs);
        let _ = writeln!(o, "batch = {}", p.batch);
        let _ = writeln!(o, "lr = {:?}", p.lr);
        let _ = writeln!(o, "momentum = {:?}", p.momentum);
        let _ = writeln!(o, "weight_decay = {:?}", p.weight_decay);
        let _ = writeln!(o, "milestones = {}", join(&p.milestones));
        let _ = writeln!(o, "gamma = {:?}", p.gamma);
        let _ = writeln!(o, "accuracy_floor = {:?}", p.accuracy_floor);
        let _ = writeln!(o, "\n[train]");
        let _ = writeln!(o, "epochs = {}", t.epochs);
        let _ = writeln!(o, "lr = {:?}", t.lr);
        let _ = writeln!(o, "momentum = {:?}", t.momentum);
        let _ = writeln!(o, "weight_decay = {:?}", t.weight_decay);
        let _ = writeln!(o, "milestones = {}", join(&t.milestones));
        let _ = writeln!(o, "gamma = {:?}", t.gamma);
        let _ = writeln!(o, "labeled_batch = {}", t.labeled_batch);
        let _ = writeln!(o, "unlabeled_batch = {}", t.unlabeled_batch);
        let _ = writeln!(o, "\n[run]");
        let _ = writeln!(o, "mode = {}", r.mode);
        let _ = writeln!(o, "seeds = {}", join(&r.seeds));
        let _ = writeln!(o, "use_unlabeled = {}", r.use_unlabeled);
        let _ = writeln!(o, "fraction = {:?}", r.fraction);
        let _ = writeln!(o, "policy = {}", r.policy);
        let _ = writeln!(o, "top_k = {}", r.top_k);
        let _ = writeln!(o, "out_dir = {}", r.out_dir.display());
        let _ = writeln!(o, "teacher_cache = {}", r.teacher_cache.display());
        let _ = writeln!(o, "sweep_fractions = {}", join_f64(&r.sweep_fractions));
        let _ = writeln!(o, "sweep_policies = {}", join(&r.sweep_policies));
        o
    }
}

const SECTIONS: [&str; 9] = [
    "dataset", "teacher", "student", "adaptor", "srd", "baselines", "pretrain", "train", "run",
];
