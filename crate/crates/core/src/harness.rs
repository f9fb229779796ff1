//! Experiment runner: two-stage training per seed, result files, sweeps
//! over the unlabeled fraction, and comparison tables across runs.
//!
//! A run directory holds:
//!
//! * `config.resolved`: the fully resolved configuration
//! * `metrics_seed{N}.csv`: one row per epoch
//! * `usage_seed{N}.csv`, `usage_curve_seed{N}.csv`, `detector.csv`: OOD modes only
//! * `student_seed{N}.ckpt`, `adaptor_seed{N}.ckpt`
//! * `summary.csv`: one row, mean and standard deviation over seeds
//!
//! Pretrained teachers are cached under `run.teacher_cache`, keyed by a
//! hash of everything that determines them.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::baselines::{mode_step, pseudo_labeled_pool, ModeStep, OodDetector, TrainMode};
use crate::config::ExperimentConfig;
use crate::data::{generate, select_unlabeled, BatchSampler, OpenSetDataset, SelectionPolicy};
use crate::distill::{pretrain_teacher, Nets, StepBatch, StepLosses};
use crate::error::{Error, Result};
use crate::metrics::{
    accuracy, feature_dump, fmt6, logits_for, metrics_csv, mimicry_kl_from_logits, roc_auc, top_k_accuracy,
    usage_csv, usage_curve, usage_curve_csv, MetricsRecord, UsageStats,
};
use crate::nn::{build_pair, Adaptor, Checkpoint, Mode, Network};
use crate::optim::{SgdState, StepDecay};
use crate::rng;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Cache key of the teacher for `seed`: dataset, teacher architecture,
/// stage-1 optimiser and seed.
pub fn teacher_key(cfg: &ExperimentConfig, seed: u64) -> String {
    let text = format!("{:?}|{:?}|{:?}|{seed}", cfg.dataset, cfg.teacher, cfg.pretrain);
    hex(&Sha256::digest(text.as_bytes()))[..16].to_string()
}

/// Identifier of a configuration, independent of where results go.
pub fn run_id(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.run.out_dir = PathBuf::new();
    c.run.teacher_cache = PathBuf::new();
    c.run.seeds.clear();
    hex(&Sha256::digest(c.emit().as_bytes()))[..12].to_string()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// The frozen teacher for `seed`, from the cache if present, otherwise
/// pretrained on the labeled pool and stored. Returns it with its
/// held-out accuracy; fails if that accuracy is below the configured floor.
pub fn obtain_teacher(cfg: &ExperimentConfig, data: &OpenSetDataset, seed: u64) -> Result<(Network, f64)> {
    let (mut teacher, _, _) = build_pair(cfg, seed)?;
    let cache = &cfg.run.teacher_cache;
    let path = (!cache.as_os_str().is_empty()).then(|| cache.join(format!("teacher-{}.ckpt", teacher_key(cfg, seed))));
    if let Some(p) = path.as_ref().filter(|p| p.exists()) {
        teacher.load_checkpoint(&Checkpoint::load(p)?)?;
        teacher.freeze();
        let acc = accuracy(&teacher, data.test())?;
        if acc < cfg.pretrain.accuracy_floor {
            return Err(Error::AccuracyFloor {
                accuracy: acc,
                floor: cfg.pretrain.accuracy_floor,
            });
        }
        return Ok((teacher, acc));
    }
    let acc = pretrain_teacher(&mut teacher, data.labeled(), data.test(), &cfg.pretrain, seed)?;
    if let Some(p) = path {
        fs::create_dir_all(cache)?;
        let mut bytes = Vec::new();
        teacher.to_checkpoint().write_to(&mut bytes)?;
        write_atomic(&p, &bytes)?;
    }
    Ok((teacher, acc))
}

/// Everything produced by training one seed.
#[derive(Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
    /// Per-epoch filter statistics (OOD modes only).
    pub usage: Vec<UsageStats>,
    /// ROC-AUC of the final detector on the unlabeled pool (OOD modes only).
    pub detector_auc: Option<f64>,
    pub student: Network,
    pub adaptor: Adaptor,
}

impl SeedOutcome {
    pub fn last(&self) -> &MetricsRecord {
        self.records.last().expect("at least one epoch")
    }
}

/// Stage 2 for one seed against an already frozen teacher.
pub fn train_seed(cfg: &ExperimentConfig, data: &OpenSetDataset, teacher: &Network, seed: u64) -> Result<SeedOutcome> {
    let mode = cfg.run.mode;
    let (_, student, adaptor) = build_pair(cfg, seed)?;
    let use_unlabeled = cfg.run.use_unlabeled && mode.uses_unlabeled() && !data.unlabeled().is_empty();
    if mode.requires_unlabeled() && !use_unlabeled {
        return Err(Error::InvalidArgument(format!("mode {mode} requires a non-empty unlabeled pool")));
    }
    let subset;
    let data = if use_unlabeled && cfg.run.fraction < 1.0 {
        let idx = select_unlabeled(data.unlabeled(), cfg.run.fraction, cfg.run.policy, Some(teacher), seed)?;
        subset = data.with_unlabeled_subset(&idx);
        &subset
    } else {
        data
    };
    let pool = data.unlabeled();
    let hidden = &data.eval_truth().in_distribution;
    // pseudo-label mode trains on one merged pool and samples nothing else
    let merged;
    let (train_pool, sample_unlabeled) = if mode == TrainMode::PseudoLabel {
        merged = pseudo_labeled_pool(teacher, data.labeled(), pool)?;
        (&merged, false)
    } else {
        (data.labeled(), use_unlabeled)
    };
    let detector = if mode.uses_ood() {
        Some(OodDetector::new(
            teacher.feature_dim(),
            cfg.baselines.ood_threshold,
            &mut rng::stream(seed, "init/detector"),
        )?)
    } else {
        None
    };

    let mut params = student.parameters();
    if mode.uses_srd() {
        params.extend(adaptor.parameters());
    }
    if let Some(d) = &detector {
        params.extend(d.parameters());
    }
    let t = &cfg.train;
    let mut opt = SgdState::new(params, t.lr, t.momentum, t.weight_decay)?;
    let schedule = StepDecay {
        base: t.lr,
        milestones: t.milestones.clone(),
        gamma: t.gamma,
    };
    let sampler = BatchSampler {
        labeled_batch: t.labeled_batch,
        unlabeled_batch: if sample_unlabeled { t.unlabeled_batch } else { 0 },
        seed,
        labeled_len: train_pool.labels.len(),
        unlabeled_len: if sample_unlabeled { pool.len() } else { 0 },
    };
    let steps_per_epoch = data.labeled().labels.len().div_ceil(t.labeled_batch);
    let nets = Nets {
        teacher,
        student: &student,
        adaptor: &adaptor,
    };
    let mut step_rng = rng::stream(seed, "train/steps");
    let teacher_test = logits_for(teacher, &data.test().inputs)?;
    let id = run_id(cfg);
    let mut records = Vec::with_capacity(t.epochs);
    let mut usage = Vec::new();
    let mut iteration = 0;

    for epoch in 0..t.epochs {
        opt.learning_rate = schedule.rate_at(epoch);
        let mut sums = StepLosses::default();
        let mut epoch_usage = UsageStats {
            epoch,
            ..UsageStats::default()
        };
        let mut batches = sampler.epoch(epoch);
        // same number of steps as a run on the labeled pool alone
        batches.truncate(steps_per_epoch);
        for bi in &batches {
            let labels: Vec<usize> = bi.labeled.iter().map(|&i| train_pool.labels[i]).collect();
            let batch = StepBatch {
                labeled: train_pool.inputs.gather(&bi.labeled)?,
                labels,
                unlabeled: if bi.unlabeled.is_empty() {
                    None
                } else {
                    Some(pool.gather(&bi.unlabeled)?)
                },
            };
            let flags: Vec<bool> = bi.unlabeled.iter().map(|&i| hidden[i]).collect();
            let ctx = ModeStep {
                mode,
                nets,
                srd: &cfg.srd,
                baselines: &cfg.baselines,
                detector: detector.as_ref(),
                hidden_ind: Some(&flags),
            };
            let (losses, stats) = mode_step(&batch, &ctx, &mut opt, &mut step_rng, iteration)?;
            sums.add_assign(&losses);
            if let Some(s) = stats {
                epoch_usage.add(&s);
            }
            iteration += 1;
        }
        if detector.is_some() {
            usage.push(epoch_usage);
        }
        let mean = sums.scaled(1.0 / batches.len().max(1) as f64);
        let test_logits = logits_for(&student, &data.test().inputs)?;
        records.push(MetricsRecord {
            run_id: id.clone(),
            mode: mode.to_string(),
            seed,
            epoch,
            ce: mean.ce,
            srd: mean.srd,
            reg: mean.reg,
            aux: mean.aux,
            total: mean.total,
            train_acc: accuracy(&student, data.labeled())?,
            test_acc: top_k_accuracy(&test_logits, &data.test().labels, 1)?,
            test_topk: top_k_accuracy(&test_logits, &data.test().labels, cfg.run.top_k)?,
            mimicry_kl: mimicry_kl_from_logits(&teacher_test, &test_logits)?,
        });
    }

    let detector_auc = match &detector {
        Some(d) if hidden.iter().any(|&h| h) && hidden.iter().any(|&h| !h) => {
            let (features, _) = teacher.forward(&pool.to_tensor()?, Mode::Eval)?;
            Some(roc_auc(&d.score(&features)?.to_vec(), hidden)?)
        }
        _ => None,
    };
    Ok(SeedOutcome {
        seed,
        records,
        usage,
        detector_auc,
        student,
        adaptor,
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub const SUMMARY_HEADER: &str = "mode,use_unlabeled,fraction,policy,dataset_seed,seeds,\
test_acc_mean,test_acc_std,test_topk_mean,test_topk_std,mimicry_kl_mean,mimicry_kl_std,train_acc_mean,train_acc_std";

/// Final-epoch metrics aggregated over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub mode: TrainMode,
    pub use_unlabeled: bool,
    pub fraction: f64,
    pub policy: SelectionPolicy,
    pub dataset_seed: u64,
    pub seeds: usize,
    pub test_acc: (f64, f64),
    pub test_topk: (f64, f64),
    pub mimicry_kl: (f64, f64),
    pub train_acc: (f64, f64),
}

impl Summary {
    pub fn from_outcomes(cfg: &ExperimentConfig, outcomes: &[SeedOutcome]) -> Self {
        let col = |f: fn(&MetricsRecord) -> f64| mean_std(&outcomes.iter().map(|o| f(o.last())).collect::<Vec<_>>());
        Self {
            mode: cfg.run.mode,
            use_unlabeled: cfg.run.use_unlabeled,
            fraction: cfg.run.fraction,
            policy: cfg.run.policy,
            dataset_seed: cfg.dataset.seed,
            seeds: outcomes.len(),
            test_acc: col(|r| r.test_acc),
            test_topk: col(|r| r.test_topk),
            mimicry_kl: col(|r| r.mimicry_kl),
            train_acc: col(|r| r.train_acc),
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.mode,
            self.use_unlabeled,
            fmt6(self.fraction),
            self.policy,
            self.dataset_seed,
            self.seeds,
            fmt6(self.test_acc.0),
            fmt6(self.test_acc.1),
            fmt6(self.test_topk.0),
            fmt6(self.test_topk.1),
            fmt6(self.mimicry_kl.0),
            fmt6(self.mimicry_kl.1),
            fmt6(self.train_acc.0),
            fmt6(self.train_acc.1),
        )
    }

    pub fn csv(&self) -> String {
        format!("{SUMMARY_HEADER}\n{}\n", self.csv_row())
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub teacher_accuracy: Vec<f64>,
    pub seeds: Vec<SeedOutcome>,
    pub summary: Summary,
}

/// Both stages for every configured seed, with all result files written
/// to `cfg.run.out_dir`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate().map_err(|message| Error::Config { line: 0, message })?;
    let data = generate(&cfg.dataset)?;
    run_on(cfg, &data)
}

/// [`run`] on an already generated dataset.
pub fn run_on(cfg: &ExperimentConfig, data: &OpenSetDataset) -> Result<RunOutcome> {
    let dir = cfg.run.out_dir.clone();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.resolved"), cfg.emit())?;
    let mut outcomes = Vec::with_capacity(cfg.run.seeds.len());
    let mut teacher_accuracy = Vec::new();
    let mut detector_rows = String::from("seed,roc_auc\n");
    for &seed in &cfg.run.seeds {
        let (teacher, acc) = obtain_teacher(cfg, data, seed)?;
        teacher_accuracy.push(acc);
        let out = train_seed(cfg, data, &teacher, seed)?;
        fs::write(dir.join(format!("metrics_seed{seed}.csv")), metrics_csv(&out.records))?;
        if cfg.run.mode.uses_ood() {
            fs::write(dir.join(format!("usage_seed{seed}.csv")), usage_csv(&out.usage))?;
            fs::write(
                dir.join(format!("usage_curve_seed{seed}.csv")),
                usage_curve_csv(&usage_curve(&out.usage)?),
            )?;
            let auc = out.detector_auc.map(fmt6).unwrap_or_else(|| "nan".into());
            let _ = writeln!(detector_rows, "{seed},{auc}");
        }
        out.student.to_checkpoint().save(&dir.join(format!("student_seed{seed}.ckpt")))?;
        out.adaptor.to_checkpoint().save(&dir.join(format!("adaptor_seed{seed}.ckpt")))?;
        outcomes.push(out);
    }
    if cfg.run.mode.uses_ood() {
        fs::write(dir.join("detector.csv"), detector_rows)?;
    }
    let summary = Summary::from_outcomes(cfg, &outcomes);
    fs::write(dir.join("summary.csv"), summary.csv())?;
    Ok(RunOutcome {
        dir,
        teacher_accuracy,
        seeds: outcomes,
        summary,
    })
}

/// Accuracy slack allowed between adjacent sweep points.
pub const SWEEP_SLACK: f64 = 0.002;

#[derive(Debug)]
pub struct SweepOutcome {
    /// `(policy, fraction, summary)` in configuration order.
    pub rows: Vec<(SelectionPolicy, f64, Summary)>,
    /// Whether mean accuracy is nondecreasing in the fraction, per policy.
    pub trend: Vec<(SelectionPolicy, bool)>,
}

/// True if every step of `values` drops by at most `slack`.
pub fn nondecreasing_within(values: &[f64], slack: f64) -> bool {
    values.windows(2).all(|w| w[1] >= w[0] - slack)
}

/// One run per (policy, fraction); writes `sweep.csv` and
/// `sweep_report.txt` into `cfg.run.out_dir`.
pub fn sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    let data = generate(&cfg.dataset)?;
    let root = cfg.run.out_dir.clone();
    let mut rows = Vec::new();
    let mut trend = Vec::new();
    let mut csv = format!("{SUMMARY_HEADER}\n");
    let mut report = String::new();
    for &policy in &cfg.run.sweep_policies {
        let mut means = Vec::new();
        for &fraction in &cfg.run.sweep_fractions {
            let mut c = cfg.clone();
            c.run.policy = policy;
            c.run.fraction = fraction;
            c.run.out_dir = root.join("sweep").join(format!("{policy}-{}", fmt6(fraction)));
            let out = run_on(&c, &data)?;
            csv.push_str(&out.summary.csv_row());
            csv.push('\n');
            means.push(out.summary.test_acc.0);
            rows.push((policy, fraction, out.summary));
        }
        let ok = nondecreasing_within(&means, SWEEP_SLACK);
        let points: Vec<String> = means.iter().map(|m| fmt6(*m)).collect();
        let _ = writeln!(
            report,
            "{policy}: mean accuracy {} -> {}",
            points.join(" "),
            if ok { "nondecreasing" } else { "NOT nondecreasing" }
        );
        trend.push((policy, ok));
    }
    fs::create_dir_all(&root)?;
    fs::write(root.join("sweep.csv"), csv)?;
    fs::write(root.join("sweep_report.txt"), report)?;
    Ok(SweepOutcome { rows, trend })
}

/// Rows of completed runs side by side.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub runs: Vec<String>,
    /// Raw `summary.csv` fields of each run, in [`SUMMARY_HEADER`] order.
    pub rows: Vec<Vec<String>>,
}

fn summary_fields(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join("summary.csv");
    let text = fs::read_to_string(&path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    if lines.next() != Some(SUMMARY_HEADER) {
        return Err(Error::Format(format!("{}: unexpected header", path.display())));
    }
    let row = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: no summary row", path.display())))?;
    Ok(row.split(',').map(str::to_string).collect())
}

/// Reads the summaries of finished runs. All runs must share the dataset
/// seed, otherwise their numbers are not comparable.
pub fn compare(dirs: &[PathBuf]) -> Result<Comparison> {
    if dirs.len() < 2 {
        return Err(Error::InvalidArgument("compare needs at least two run directories".into()));
    }
    let mut rows = Vec::new();
    let mut seeds = Vec::new();
    for dir in dirs {
        if !dir.is_dir() {
            return Err(Error::Io(format!("run directory {} does not exist", dir.display())));
        }
        let resolved = dir.join("config.resolved");
        let text = fs::read_to_string(&resolved).map_err(|e| Error::Io(format!("{}: {e}", resolved.display())))?;
        seeds.push(ExperimentConfig::parse(&text)?.dataset.seed);
        rows.push(summary_fields(dir)?);
    }
    if let Some(i) = seeds.iter().position(|&s| s != seeds[0]) {
        return Err(Error::InvalidArgument(format!(
            "runs use different datasets: {} has dataset seed {} but {} has {}",
            dirs[0].display(),
            seeds[0],
            dirs[i].display(),
            seeds[i]
        )));
    }
    Ok(Comparison {
        runs: dirs.iter().map(|d| d.display().to_string()).collect(),
        rows,
    })
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = format!("run,{SUMMARY_HEADER}\n");
        for (run, row) in self.runs.iter().zip(&self.rows) {
            let _ = writeln!(out, "{run},{}", row.join(","));
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let cols: Vec<&str> = SUMMARY_HEADER.split(',').collect();
        let at = |name: &str| cols.iter().position(|c| *c == name).expect("known column");
        let mut out = String::from("| run | mode | test top-1 | test top-k | mimicry KL | train top-1 |\n");
        out.push_str("|---|---|---|---|---|---|\n");
        for (run, row) in self.runs.iter().zip(&self.rows) {
            let pm = |m: &str| format!("{} ± {}", row[at(&format!("{m}_mean"))], row[at(&format!("{m}_std"))]);
            let _ = writeln!(
                out,
                "| {run} | {} | {} | {} | {} | {} |",
                row[at("mode")],
                pm("test_acc"),
                pm("test_topk"),
                pm("mimicry_kl"),
                pm("train_acc")
            );
        }
        out
    }
}

/// Writes the dataset file and CSV exports into `dir`.
pub fn generate_data(cfg: &ExperimentConfig, dir: &Path) -> Result<OpenSetDataset> {
    let data = generate(&cfg.dataset)?;
    fs::create_dir_all(dir)?;
    data.save(&dir.join("dataset.bin"))?;
    data.export_csv(dir)?;
    Ok(data)
}

/// Test-set features of the teacher for `seed`, and of the student if a
/// run in `cfg.run.out_dir` saved one. Returns the files written.
pub fn dump_features(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<Vec<PathBuf>> {
    let data = generate(&cfg.dataset)?;
    let (teacher, _) = obtain_teacher(cfg, &data, seed)?;
    fs::create_dir_all(dir)?;
    let test = data.test();
    let mut written = Vec::new();
    let path = dir.join(format!("teacher_features_seed{seed}.csv"));
    feature_dump(&teacher, &test.inputs, &test.labels, &path)?;
    written.push(path);
    let ckpt = cfg.run.out_dir.join(format!("student_seed{seed}.ckpt"));
    if ckpt.exists() {
        let (_, student, _) = build_pair(cfg, seed)?;
        student.load_checkpoint(&Checkpoint::load(&ckpt)?)?;
        let path = dir.join(format!("student_features_seed{seed}.csv"));
        feature_dump(&student, &test.inputs, &test.labels, &path)?;
        written.push(path);
    }
    Ok(written)
}
