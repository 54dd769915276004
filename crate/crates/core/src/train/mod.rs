//! Deterministic toy-scale training.
//!
//! Every sample of a batch gets its own tape; per-sample gradients are
//! summed in sample order, so results do not depend on the thread count.

pub mod data;
pub mod optim;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::losses::{self, MetricRow};
use crate::model::LaViTModel;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub use data::{BatchSchedule, Dataset, InMemoryDataset, SyntheticDataset};
pub use optim::{adamw_step, clip_global_norm, cosine_lr, global_norm, AdamWConfig, OptimizerState};

/// How the DP loss enters the update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DpMode {
    /// `total = ce + dp_weight * dp` is what gets differentiated.
    #[default]
    Applied,
    /// DP terms are computed and logged but never differentiated.
    Detached,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Collect {
    #[default]
    None,
    Saturation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub dp_weight: f64,
    pub dp_mode: DpMode,
    /// Size of the fixed training set the batches are drawn from.
    pub train_size: usize,
    /// Held-out samples used for the saturation probe.
    pub probe_size: usize,
    /// Steps between evaluations (train accuracy, saturation probe).
    pub eval_every: usize,
    /// Training samples scored at each evaluation.
    pub eval_size: usize,
    /// Stop once evaluated train accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    /// Steps between checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    pub collect: Collect,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr_max: 1e-3,
            lr_min: 1e-5,
            warmup_steps: 100,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            dp_weight: 1.0,
            dp_mode: DpMode::Applied,
            train_size: 512,
            probe_size: 16,
            eval_every: 100,
            eval_size: 256,
            target_accuracy: None,
            checkpoint_every: 0,
            collect: Collect::None,
        }
    }
}

impl TrainConfig {
    /// The large-scale recipe (lr 0.005, batch 1024, 300 epochs of 1.28M
    /// images, 5 warmup epochs). Far beyond desk scale; kept for reference.
    pub fn imagenet_recipe() -> Self {
        let steps_per_epoch = 1_281_167 / 1024;
        Self {
            steps: 300 * steps_per_epoch,
            batch_size: 1024,
            lr_max: 5e-3,
            warmup_steps: 5 * steps_per_epoch,
            train_size: 1_281_167,
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.steps > 0 && self.warmup_steps >= self.steps {
            return fail(format!("warmup_steps {} must be below steps {}", self.warmup_steps, self.steps));
        }
        if !(self.lr_max >= 0.0 && self.lr_min >= 0.0) {
            return fail("learning rates must be >= 0".into());
        }
        if self.train_size == 0 || self.probe_size == 0 || self.eval_every == 0 {
            return fail("train_size, probe_size and eval_every must be positive".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return fail(format!("clip_norm {c} must be positive"));
            }
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr_max, beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub ce: f64,
    pub dp: f64,
    pub total: f64,
    pub acc: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainSummary {
    pub metrics: Vec<StepMetrics>,
    /// `(step, accuracy)` of every evaluation on the fixed training subset.
    pub evaluations: Vec<(usize, f64)>,
    /// Probe metrics from the last evaluation when saturation was collected.
    pub saturation: Option<Vec<MetricRow>>,
    pub stopped_early: bool,
}

impl TrainSummary {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.evaluations.last().map(|e| e.1)
    }
}

struct BatchResult {
    grads: Vec<Tensor>,
    ce: f64,
    dp: f64,
    correct: usize,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn sample_gradients(model: &LaViTModel, image: &Tensor, label: usize, cfg: &TrainConfig, scale: f64) -> Result<BatchResult> {
    let mut tape = Tape::new();
    let vars = model.param_vars(&mut tape, true);
    let x = tape.constant_ref(image);
    let trace = model.forward_sample(&mut tape, &vars, x)?;
    let k = tape.shape(trace.logits)[0];
    let correct = usize::from(argmax(tape.value(trace.logits).data()) == label);
    let logits = tape.reshape(trace.logits, &[1, k])?;
    let ce = tape.cross_entropy(logits, &[label])?;
    let dp_vars: Vec<_> = trace.dp_terms.iter().map(|t| t.2).collect();
    let dp = dp_vars.iter().fold(0.0, |acc, &v| acc + tape.value(v).data()[0]);
    let root = if cfg.dp_mode == DpMode::Applied && cfg.dp_weight != 0.0 && !dp_vars.is_empty() {
        let dp_sum = tape.sum_scalars(&dp_vars)?;
        let weighted = tape.scale(dp_sum, cfg.dp_weight);
        tape.sum_scalars(&[ce, weighted])?
    } else {
        ce
    };
    let mut g = tape.backward_scaled(root, scale)?;
    let grads = vars
        .iter()
        .zip(model.params.tensors())
        .map(|(&v, p)| g.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok(BatchResult { grads, ce: tape.value(ce).data()[0], dp, correct })
}

/// Gradients of the mean batch objective, summed over samples in order.
fn batch_gradients(model: &LaViTModel, images: &[Tensor], labels: &[usize], cfg: &TrainConfig) -> Result<BatchResult> {
    let scale = 1.0 / images.len() as f64;
    let parts: Vec<Result<BatchResult>> = images
        .par_iter()
        .zip(labels.par_iter())
        .map(|(img, &l)| sample_gradients(model, img, l, cfg, scale))
        .collect();
    let mut total: Option<BatchResult> = None;
    for part in parts {
        let part = part?;
        match &mut total {
            None => total = Some(part),
            Some(t) => {
                for (a, b) in t.grads.iter_mut().zip(&part.grads) {
                    a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
                }
                t.ce += part.ce;
                t.dp += part.dp;
                t.correct += part.correct;
            }
        }
    }
    let mut t = total.ok_or_else(|| Error::invalid("train", "empty batch"))?;
    t.ce *= scale;
    t.dp *= scale;
    Ok(t)
}

/// Fraction of `indices` the model classifies correctly.
pub fn accuracy(model: &LaViTModel, data: &dyn Dataset, indices: &[usize]) -> Result<f64> {
    let correct: Vec<Result<usize>> = indices
        .par_iter()
        .map(|&i| {
            let (img, label) = data.sample(i);
            let batch = Tensor::stack(&[img])?;
            let (logits, _) = model.forward(&batch, false)?;
            Ok(usize::from(argmax(logits.data()) == label))
        })
        .collect();
    let mut hits = 0;
    for c in correct {
        hits += c?;
    }
    Ok(hits as f64 / indices.len() as f64)
}

/// Held-out probe batch: the `probe_size` samples after the training set.
pub fn probe_batch(data: &dyn Dataset, cfg: &TrainConfig) -> Result<Tensor> {
    let idx: Vec<usize> = (cfg.train_size..cfg.train_size + cfg.probe_size).collect();
    Ok(data.batch(&idx)?.0)
}

/// Thread pool honoring `LAVIT_THREADS` (default 1).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var("LAVIT_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("LAVIT_THREADS must be a positive integer, got {v:?}")))?,
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))
}

pub struct Trainer<'d> {
    pub config: TrainConfig,
    pub data: &'d dyn Dataset,
    pub seed: u64,
    /// Directory for metrics, saturation CSVs and checkpoints.
    pub out: Option<PathBuf>,
}

impl<'d> Trainer<'d> {
    pub fn new(config: TrainConfig, data: &'d dyn Dataset, seed: u64) -> Self {
        Self { config, data, seed, out: None }
    }

    pub fn with_output(mut self, dir: impl AsRef<Path>) -> Self {
        self.out = Some(dir.as_ref().to_path_buf());
        self
    }

    pub fn run(&self, model: &mut LaViTModel) -> Result<TrainSummary> {
        let pool = thread_pool()?;
        pool.install(|| self.run_inner(model))
    }

    fn run_inner(&self, model: &mut LaViTModel) -> Result<TrainSummary> {
        let cfg = &self.config;
        cfg.validate()?;
        let (h, w) = model.config.image_size.hw();
        let want = [model.config.in_channels, h, w];
        if self.data.image_shape() != want || self.data.num_classes() != model.config.num_classes {
            return Err(Error::Config(format!(
                "dataset images {:?} with {} classes do not fit the model ({want:?}, {} classes)",
                self.data.image_shape(),
                self.data.num_classes(),
                model.config.num_classes
            )));
        }
        let mut metrics_file = match &self.out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Some(BufWriter::new(File::create(dir.join("metrics.jsonl"))?))
            }
            None => None,
        };
        let mut summary = TrainSummary::default();
        let mut opt = OptimizerState::new(model.params.tensors());
        let adamw = cfg.adamw();
        let mut schedule = BatchSchedule::new(cfg.train_size, self.seed);
        let eval_idx: Vec<usize> = (0..cfg.eval_size.min(cfg.train_size)).collect();
        let probe = match cfg.collect {
            Collect::Saturation => Some(probe_batch(self.data, cfg)?),
            Collect::None => None,
        };
        for step in 0..cfg.steps {
            let idx = schedule.next_batch(cfg.batch_size);
            let (images, labels): (Vec<Tensor>, Vec<usize>) = idx.iter().map(|&i| self.data.sample(i)).unzip();
            let mut batch = batch_gradients(model, &images, &labels, cfg)?;
            let total = cfg.dp_weight.mul_add(batch.dp, batch.ce);
            if !total.is_finite() || batch.grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { step, loss: total });
            }
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut batch.grads, c);
            }
            let lr = cosine_lr(step, cfg.steps, cfg.warmup_steps, cfg.lr_max, cfg.lr_min);
            adamw_step(model.params.tensors_mut(), &batch.grads, &mut opt, &adamw, lr)?;
            let row = StepMetrics {
                step,
                lr,
                ce: batch.ce,
                dp: batch.dp,
                total,
                acc: batch.correct as f64 / labels.len() as f64,
            };
            if let Some(f) = &mut metrics_file {
                serde_json::to_writer(&mut *f, &row)?;
                f.write_all(b"\n")?;
            }
            summary.metrics.push(row);
            let done = step + 1;
            if done % cfg.eval_every == 0 || done == cfg.steps {
                let acc = accuracy(model, self.data, &eval_idx)?;
                summary.evaluations.push((done, acc));
                if let Some(p) = &probe {
                    let rows = model.metric_rows(p)?;
                    if let Some(dir) = &self.out {
                        let mut f = BufWriter::new(File::create(dir.join(format!("saturation_step{done}.csv")))?);
                        losses::write_metric_csv(&rows, &mut f)?;
                        f.flush()?;
                    }
                    summary.saturation = Some(rows);
                }
                if cfg.target_accuracy.is_some_and(|t| acc >= t) {
                    summary.stopped_early = done < cfg.steps;
                    self.checkpoint(model, done)?;
                    break;
                }
            }
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                self.checkpoint(model, done)?;
            }
        }
        if let Some(f) = &mut metrics_file {
            f.flush()?;
        }
        Ok(summary)
    }

    fn checkpoint(&self, model: &LaViTModel, step: usize) -> Result<()> {
        match &self.out {
            Some(dir) if self.config.checkpoint_every > 0 => checkpoint::save(model, dir.join(format!("checkpoint_step{step}.lavt"))),
            _ => Ok(()),
        }
    }
}
