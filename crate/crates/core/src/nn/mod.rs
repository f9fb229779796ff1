//! MLP feature extractors, bias-free classifiers and the student→teacher
//! feature adaptor.

mod checkpoint;

use std::sync::Mutex;

use rand::Rng as _;

pub use checkpoint::Checkpoint;

use crate::config::{ArchConfig, ExperimentConfig};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{NormStats, Tensor};

/// Whether normalization layers use batch statistics (and update their
/// running estimates) or the frozen running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn uniform(rng: &mut Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Affine layer `x·W + b` with `W` stored as `in × out`.
#[derive(Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Fan-in scaled uniform initialization: weights in `±sqrt(6/fan_in)`,
    /// biases in `±1/sqrt(fan_in)`.
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Result<Self> {
        let fan_in = input as f64;
        let weight = Tensor::parameter(uniform(rng, input * output, (6.0 / fan_in).sqrt()), &[input, output])?;
        let bias = Tensor::parameter(uniform(rng, output, 1.0 / fan_in.sqrt()), &[output])?;
        Ok(Self { weight, bias })
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.shape()[1]] {
            return Err(Error::Shape {
                op: "linear",
                left: weight.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add_row(&self.bias)
    }
}

/// Per-feature normalization with running estimates.
#[derive(Debug)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    running_mean: Mutex<Vec<f64>>,
    running_var: Mutex<Vec<f64>>,
    /// Weight kept on the old running estimate at each update.
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(features: usize) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::parameter(vec![1.0; features], &[features])?,
            beta: Tensor::parameter(vec![0.0; features], &[features])?,
            running_mean: Mutex::new(vec![0.0; features]),
            running_var: Mutex::new(vec![1.0; features]),
            momentum: 0.9,
            eps: 1e-5,
        })
    }

    pub fn running_mean(&self) -> Vec<f64> {
        self.running_mean.lock().expect("running stats lock").clone()
    }

    pub fn running_var(&self) -> Vec<f64> {
        self.running_var.lock().expect("running stats lock").clone()
    }

    pub fn set_running(&self, mean: Vec<f64>, var: Vec<f64>) {
        *self.running_mean.lock().expect("running stats lock") = mean;
        *self.running_var.lock().expect("running stats lock") = var;
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Train => {
                let (y, mean, var) = x.normalize(&self.gamma, &self.beta, NormStats::Batch, &[], &[], self.eps)?;
                let m = self.momentum;
                let mut rm = self.running_mean.lock().expect("running stats lock");
                let mut rv = self.running_var.lock().expect("running stats lock");
                for j in 0..mean.len() {
                    rm[j] = m * rm[j] + (1.0 - m) * mean[j];
                    rv[j] = m * rv[j] + (1.0 - m) * var[j];
                }
                Ok(y)
            }
            Mode::Eval => {
                let (mean, var) = (self.running_mean(), self.running_var());
                let (y, _, _) = x.normalize(&self.gamma, &self.beta, NormStats::Fixed, &mean, &var, self.eps)?;
                Ok(y)
            }
        }
    }

    fn parameters(&self) -> Vec<Tensor> {
        vec![self.gamma.clone(), self.beta.clone()]
    }
}

/// Stack of affine layers, each followed by optional normalization and ReLU.
#[derive(Debug)]
pub struct FeatureExtractor {
    pub layers: Vec<Linear>,
    pub norms: Option<Vec<BatchNorm>>,
}

impl FeatureExtractor {
    pub fn new(input_dim: usize, hidden: &[usize], batch_norm: bool, rng: &mut Rng) -> Result<Self> {
        if hidden.is_empty() || hidden.contains(&0) || input_dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "extractor needs positive widths, got input {input_dim} hidden {hidden:?}"
            )));
        }
        let mut layers = Vec::with_capacity(hidden.len());
        let mut width = input_dim;
        for &h in hidden {
            layers.push(Linear::new(width, h, rng)?);
            width = h;
        }
        let norms = if batch_norm {
            Some(hidden.iter().map(|&h| BatchNorm::new(h)).collect::<Result<_>>()?)
        } else {
            None
        };
        Ok(Self { layers, norms })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().map(Linear::output_dim).unwrap_or(0)
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if let Some(norms) = &self.norms {
                h = norms[i].forward(&h, mode)?;
            }
            h = h.relu();
        }
        Ok(h)
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            out.push(layer.weight.clone());
            out.push(layer.bias.clone());
            if let Some(norms) = &self.norms {
                out.extend(norms[i].parameters());
            }
        }
        out
    }
}

/// Bias-free linear classifier `z = Wᵀx` with `W` of shape `d × K`.
#[derive(Debug)]
pub struct Classifier {
    pub weight: Tensor,
}

impl Classifier {
    pub fn new(features: usize, classes: usize, rng: &mut Rng) -> Result<Self> {
        let bound = (6.0 / features as f64).sqrt();
        Ok(Self {
            weight: Tensor::parameter(uniform(rng, features * classes, bound), &[features, classes])?,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)
    }
}

/// Feature extractor plus classifier. A frozen network always runs in eval
/// mode and its parameters never receive gradients.
#[derive(Debug)]
pub struct Network {
    pub extractor: FeatureExtractor,
    pub classifier: Classifier,
    frozen: bool,
}

impl Network {
    pub fn new(input_dim: usize, arch: &ArchConfig, classes: usize, rng: &mut Rng) -> Result<Self> {
        let extractor = FeatureExtractor::new(input_dim, &arch.hidden, arch.batch_norm, rng)?;
        let classifier = Classifier::new(extractor.feature_dim(), classes, rng)?;
        Ok(Self {
            extractor,
            classifier,
            frozen: false,
        })
    }

    pub fn from_parts(extractor: FeatureExtractor, classifier: Classifier) -> Result<Self> {
        if extractor.feature_dim() != classifier.feature_dim() {
            return Err(Error::Shape {
                op: "network",
                left: vec![extractor.feature_dim()],
                right: classifier.weight.shape().to_vec(),
            });
        }
        Ok(Self {
            extractor,
            classifier,
            frozen: false,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.feature_dim()
    }

    pub fn classes(&self) -> usize {
        self.classifier.classes()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.parameters().iter().for_each(|p| p.set_requires_grad(false));
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
        self.parameters().iter().for_each(|p| p.set_requires_grad(true));
    }

    /// Returns `(features, logits)` for a `B × input_dim` batch.
    pub fn forward(&self, batch: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        if batch.shape().len() != 2 || batch.shape()[1] != self.input_dim() {
            return Err(Error::Shape {
                op: "network forward",
                left: batch.shape().to_vec(),
                right: vec![self.input_dim()],
            });
        }
        let mode = if self.frozen { Mode::Eval } else { mode };
        let features = self.extractor.forward(batch, mode)?;
        let logits = self.classifier.forward(&features)?;
        Ok((features, logits))
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        let mut p = self.extractor.parameters();
        p.push(self.classifier.weight.clone());
        p
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(Tensor::numel).sum()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for (i, layer) in self.extractor.layers.iter().enumerate() {
            ck.push(format!("extractor.{i}.weight"), &layer.weight);
            ck.push(format!("extractor.{i}.bias"), &layer.bias);
            if let Some(norms) = &self.extractor.norms {
                push_norm(&mut ck, &format!("extractor.{i}.norm"), &norms[i]);
            }
        }
        ck.push("classifier.weight".into(), &self.classifier.weight);
        ck
    }

    /// Overwrites every parameter and running statistic from `ck`; names and
    /// shapes must match exactly.
    pub fn load_checkpoint(&self, ck: &Checkpoint) -> Result<()> {
        for (i, layer) in self.extractor.layers.iter().enumerate() {
            ck.load_into(&format!("extractor.{i}.weight"), &layer.weight)?;
            ck.load_into(&format!("extractor.{i}.bias"), &layer.bias)?;
            if let Some(norms) = &self.extractor.norms {
                load_norm(ck, &format!("extractor.{i}.norm"), &norms[i])?;
            }
        }
        ck.load_into("classifier.weight", &self.classifier.weight)
    }
}

fn push_norm(ck: &mut Checkpoint, prefix: &str, norm: &BatchNorm) {
    ck.push(format!("{prefix}.gamma"), &norm.gamma);
    ck.push(format!("{prefix}.beta"), &norm.beta);
    let f = norm.gamma.numel();
    ck.push_raw(format!("{prefix}.running_mean"), vec![f], norm.running_mean());
    ck.push_raw(format!("{prefix}.running_var"), vec![f], norm.running_var());
}

fn load_norm(ck: &Checkpoint, prefix: &str, norm: &BatchNorm) -> Result<()> {
    ck.load_into(&format!("{prefix}.gamma"), &norm.gamma)?;
    ck.load_into(&format!("{prefix}.beta"), &norm.beta)?;
    let f = norm.gamma.numel();
    let mean = ck.get(&format!("{prefix}.running_mean"), &[f])?.to_vec();
    let var = ck.get(&format!("{prefix}.running_var"), &[f])?.to_vec();
    norm.set_running(mean, var);
    Ok(())
}

/// Maps student features (`d_s`) into the teacher's feature space (`d_t`):
/// affine map, optional per-feature normalization, then ReLU.
#[derive(Debug)]
pub struct Adaptor {
    pub linear: Linear,
    pub norm: Option<BatchNorm>,
}

impl Adaptor {
    pub fn new(student_dim: usize, teacher_dim: usize, normalization: bool, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(student_dim, teacher_dim, rng)?,
            norm: if normalization {
                Some(BatchNorm::new(teacher_dim)?)
            } else {
                None
            },
        })
    }

    pub fn input_dim(&self) -> usize {
        self.linear.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.linear.output_dim()
    }

    pub fn adapt(&self, x_s: &Tensor, mode: Mode) -> Result<Tensor> {
        if x_s.shape().len() != 2 || x_s.shape()[1] != self.input_dim() {
            return Err(Error::Shape {
                op: "adapt",
                left: x_s.shape().to_vec(),
                right: vec![self.input_dim()],
            });
        }
        let mut h = self.linear.forward(x_s)?;
        if let Some(norm) = &self.norm {
            h = norm.forward(&h, mode)?;
        }
        Ok(h.relu())
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        let mut p = vec![self.linear.weight.clone(), self.linear.bias.clone()];
        if let Some(norm) = &self.norm {
            p.extend(norm.parameters());
        }
        p
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.push("adaptor.weight".into(), &self.linear.weight);
        ck.push("adaptor.bias".into(), &self.linear.bias);
        if let Some(norm) = &self.norm {
            push_norm(&mut ck, "adaptor.norm", norm);
        }
        ck
    }
}

/// Teacher, student and adaptor for one run, each from its own seed stream.
/// The teacher comes back trainable; freeze it after pretraining.
pub fn build_pair(cfg: &ExperimentConfig, seed: u64) -> Result<(Network, Network, Adaptor)> {
    let classes = cfg.dataset.num_classes;
    let input_dim = cfg.dataset.input_dim;
    if classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {classes}")));
    }
    if cfg.teacher.hidden.last().copied().unwrap_or(0) < 1 {
        return Err(Error::InvalidArgument("teacher feature dimension must be at least 1".into()));
    }
    let teacher = Network::new(input_dim, &cfg.teacher, classes, &mut rng::stream(seed, "init/teacher"))?;
    let student = Network::new(input_dim, &cfg.student, classes, &mut rng::stream(seed, "init/student"))?;
    if teacher.parameter_count() < student.parameter_count() {
        return Err(Error::InvalidArgument(format!(
            "teacher capacity ({}) below student capacity ({})",
            teacher.parameter_count(),
            student.parameter_count()
        )));
    }
    let adaptor = Adaptor::new(
        student.feature_dim(),
        teacher.feature_dim(),
        cfg.adaptor.normalization,
        &mut rng::stream(seed, "init/adaptor"),
    )?;
    Ok((teacher, student, adaptor))
}
