//! Seeded training runs with step-level checkpoint/resume.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::analysis::{snapshot_layer, trace_epoch, DistributionTrace};
use crate::compander::{count_correct, wrap_model, Binding, CompandedModel, SharedAbState};
use crate::error::{Error, Result};
use crate::harness::checkpoint::CheckpointFile;
use crate::harness::config::{DatasetConfig, ExperimentConfig};
use crate::harness::data::{load_cifar10_bin, load_mnist_idx, synth_dataset, Dataset};
use crate::nn::{forward, Architecture, ForwardOptions, Network, ParamRole};
use crate::optim::{lr_at, Optimizer};
use crate::reparam::{AbMode, ReparamKind, ReparamSpec};
use crate::rng::{Purpose, Stream};
use crate::tensor::{Dtype, Real, Tensor};

/// Training, validation and test partitions of one run.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Loads the configured dataset as `(train+validation pool, test set)`.
/// Subsampling and the test hold-out depend only on `data_seed`.
pub fn load_dataset(cfg: &DatasetConfig, data_seed: u64) -> Result<(Dataset, Dataset)> {
    let holdout = |d: Dataset, fraction: f64| d.split(fraction, Stream::new(data_seed, Purpose::Split, 1));
    match cfg {
        DatasetConfig::Synthetic {
            spec,
            test_fraction,
        } => Ok(holdout(synth_dataset(spec, data_seed)?, *test_fraction)),
        DatasetConfig::Mnist {
            images,
            labels,
            subset_size,
            test_images,
            test_labels,
            test_fraction,
        } => {
            let pool = load_mnist_idx(images, labels, *subset_size, data_seed)?;
            match (test_images, test_labels) {
                (Some(ti), Some(tl)) => Ok((pool, load_mnist_idx(ti, tl, None, data_seed)?)),
                (None, None) => Ok(holdout(pool, *test_fraction)),
                _ => Err(Error::Config(
                    "test_images and test_labels must be given together".into(),
                )),
            }
        }
        DatasetConfig::Cifar10 {
            train,
            test,
            subset_size,
            test_fraction,
            mean,
            std,
        } => {
            let pool = load_cifar10_bin(train, *subset_size, data_seed, *mean, *std)?;
            if test.is_empty() {
                Ok(holdout(pool, *test_fraction))
            } else {
                Ok((pool, load_cifar10_bin(test, None, data_seed, *mean, *std)?))
            }
        }
    }
}

/// Splits the pool into training and validation sets for one seed.
pub fn split_for_seed(pool: &Dataset, test: &Dataset, fraction: f64, seed: u64) -> Splits {
    let (train, val) = pool.split(fraction, Stream::new(seed, Purpose::Split, 0));
    Splits {
        train,
        val,
        test: test.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Diverged { step: u64, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: String,
    /// `(delta, fraction of |w| < delta)`.
    pub near_zero: Vec<(f64, f64)>,
    pub bound_utilization: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub status: RunStatus,
    pub best_epoch: Option<usize>,
    pub best_val_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub curves: Vec<EpochRecord>,
    /// Wall-clock seconds per epoch (excluded from determinism checks).
    pub epoch_seconds: Vec<f64>,
    pub traces: Vec<DistributionTrace>,
    /// Statistics of the selected (best-validation) model's traced layers.
    pub summaries: Vec<LayerSummary>,
    /// The same statistics for the weights after the last epoch.
    pub final_summaries: Vec<LayerSummary>,
    /// Final `(a, b)` per scope when they are learned.
    pub final_ab: Option<Vec<(String, f64, f64)>>,
}

impl SeedResult {
    pub fn completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    /// Near-zero fraction of `layer` at `delta` in the selected model.
    pub fn near_zero(&self, layer: &str, delta: f64) -> Option<f64> {
        find_near_zero(&self.summaries, layer, delta)
    }

    /// Near-zero fraction of `layer` at `delta` after the last epoch.
    pub fn final_near_zero(&self, layer: &str, delta: f64) -> Option<f64> {
        find_near_zero(&self.final_summaries, layer, delta)
    }
}

fn find_near_zero(summaries: &[LayerSummary], layer: &str, delta: f64) -> Option<f64> {
    summaries
        .iter()
        .find(|s| s.layer == layer)?
        .near_zero
        .iter()
        .find(|(d, _)| *d == delta)
        .map(|&(_, f)| f)
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedResult>,
    /// Over completed seeds.
    pub test_mean: f64,
    pub test_std: f64,
    pub val_mean: f64,
    pub val_std: f64,
}

impl RunResult {
    pub fn new(config: ExperimentConfig, seeds: Vec<SeedResult>) -> Self {
        let test: Vec<f64> = seeds.iter().filter_map(|s| s.test_acc).collect();
        let val: Vec<f64> = seeds.iter().filter_map(|s| s.best_val_acc).collect();
        let (test_mean, test_std) = mean_std(&test);
        let (val_mean, val_std) = mean_std(&val);
        RunResult {
            config,
            seeds,
            test_mean,
            test_std,
            val_mean,
            val_std,
        }
    }
}

/// Mean cross-entropy and accuracy of a parameter set on `data`.
pub fn evaluate<T: Real>(
    arch: &Architecture,
    params: &[&Tensor<T>],
    buffers: &[Tensor<T>],
    data: &Dataset,
    batch_size: usize,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::InvalidInput("evaluation on an empty dataset".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in idx.chunks(batch_size) {
        let (x, y) = data.batch::<T>(chunk, &arch.input_shape)?;
        let pass = forward(arch, params, buffers, &x, Some(&y), ForwardOptions::eval())?;
        let l = pass.tape.value(pass.loss.expect("labels given")).data()[0].as_f64();
        loss += l * chunk.len() as f64;
        correct += count_correct(pass.tape.value(pass.logits), &y);
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

pub fn evaluate_network<T: Real>(net: &Network<T>, data: &Dataset, batch: usize) -> Result<(f64, f64)> {
    let refs: Vec<&Tensor<T>> = net.params.iter().collect();
    evaluate(&net.arch, &refs, &net.buffers, data, batch)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
struct EpochAccum {
    loss_sum: f64,
    correct: usize,
    seen: usize,
    seconds: f64,
}

#[derive(Debug, Clone)]
struct Best<T> {
    epoch: usize,
    val_acc: f64,
    network: Network<T>,
}

/// One seeded training run.
#[derive(Debug, Clone)]
pub struct Trainer<T = f64> {
    pub config: ExperimentConfig,
    pub seed: u64,
    model: CompandedModel<T>,
    optimizer: Optimizer<T>,
    splits: Splits,
    /// Completed epochs.
    epoch: usize,
    /// Batches done in the current epoch.
    cursor: usize,
    order: Option<(usize, Vec<usize>)>,
    accum: EpochAccum,
    curves: Vec<EpochRecord>,
    epoch_seconds: Vec<f64>,
    traced: Vec<usize>,
    traces: Vec<DistributionTrace>,
    best: Option<Best<T>>,
    status: RunStatus,
}

fn layer_label(arch: &Architecture, param: usize) -> String {
    format!("layer{}", arch.param_specs()[param].layer)
}

impl<T: Real> Trainer<T> {
    pub fn new(config: &ExperimentConfig, seed: u64, splits: Splits) -> Result<Self> {
        config.validate()?;
        if T::DTYPE != config.precision {
            return Err(Error::Config(format!(
                "trainer instantiated for {:?}, config asks for {:?}",
                T::DTYPE,
                config.precision
            )));
        }
        let arch = config.architecture(&splits.train.sample_shape, splits.train.classes)?;
        let model = wrap_model(&arch, &config.policy, &config.reparam, &config.init, seed)?;
        Self::with_model(config, seed, splits, model)
    }

    fn with_model(
        config: &ExperimentConfig,
        seed: u64,
        splits: Splits,
        model: CompandedModel<T>,
    ) -> Result<Self> {
        let optimizer = config.optimizer.build::<T>(config.lambda)?;
        let specs = model.arch.param_specs();
        let traced: Vec<usize> = specs
            .iter()
            .enumerate()
            .filter(|(_, s)| {
                s.role == ParamRole::Weight
                    && (config.analysis.trace_layers.is_empty()
                        || config.analysis.trace_layers.contains(&s.layer))
            })
            .map(|(i, _)| i)
            .collect();
        let traces = traced
            .iter()
            .map(|&i| DistributionTrace::new(layer_label(&model.arch, i)))
            .collect();
        let mut t = Trainer {
            config: config.clone(),
            seed,
            model,
            optimizer,
            splits,
            epoch: 0,
            cursor: 0,
            order: None,
            accum: EpochAccum::default(),
            curves: Vec::new(),
            epoch_seconds: Vec::new(),
            traced,
            traces,
            best: None,
            status: RunStatus::Running,
        };
        t.record_traces(0)?;
        Ok(t)
    }

    pub fn model(&self) -> &CompandedModel<T> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut CompandedModel<T> {
        &mut self.model
    }

    pub fn optimizer(&self) -> &Optimizer<T> {
        &self.optimizer
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn status(&self) -> &RunStatus {
        &self.status
    }

    pub fn curves(&self) -> &[EpochRecord] {
        &self.curves
    }

    pub fn traces(&self) -> &[DistributionTrace] {
        &self.traces
    }

    pub fn is_finished(&self) -> bool {
        self.status != RunStatus::Running || self.epoch >= self.config.epochs
    }

    fn batches_per_epoch(&self) -> usize {
        self.splits.train.len().div_ceil(self.config.batch_size)
    }

    fn record_traces(&mut self, epoch: usize) -> Result<()> {
        self.model.refresh()?;
        for (trace, &i) in self.traces.iter_mut().zip(&self.traced) {
            trace_epoch(trace, epoch, self.model.weight(i))?;
        }
        Ok(())
    }

    /// Runs one mini-batch. Returns `false` once training is over.
    pub fn step(&mut self) -> Result<bool> {
        if self.is_finished() {
            return Ok(false);
        }
        let started = Instant::now();
        if self.order.as_ref().is_none_or(|(e, _)| *e != self.epoch) {
            let perm = Stream::new(self.seed, Purpose::Shuffle, self.epoch as u32)
                .permutation(self.splits.train.len());
            self.order = Some((self.epoch, perm));
        }
        let bs = self.config.batch_size;
        let (_, order) = self.order.as_ref().expect("order set above");
        let lo = self.cursor * bs;
        let hi = (lo + bs).min(order.len());
        let (x, y) = self
            .splits
            .train
            .batch::<T>(&order[lo..hi], &self.model.arch.input_shape)?;
        let lr = lr_at(&self.config.schedule, self.config.optimizer.base_lr(), self.epoch);
        self.optimizer.set_learning_rate(lr);
        let step = self.model.steps();
        let stats = match self.model.train_step(
            &mut self.optimizer,
            &x,
            &y,
            self.config.lambda,
            self.config.decay,
        ) {
            Ok(s) => s,
            Err(e @ (Error::RunDiverged { .. } | Error::Divergence { .. })) => {
                log::warn!("seed {}: {e}", self.seed);
                self.status = RunStatus::Diverged {
                    step,
                    detail: e.to_string(),
                };
                return Ok(false);
            }
            Err(e) => return Err(e),
        };
        self.accum.loss_sum += stats.loss * stats.batch as f64;
        self.accum.correct += stats.correct;
        self.accum.seen += stats.batch;
        self.accum.seconds += started.elapsed().as_secs_f64();
        self.cursor += 1;
        if self.cursor == self.batches_per_epoch() {
            self.finish_epoch(lr)?;
        }
        Ok(true)
    }

    fn finish_epoch(&mut self, lr: f64) -> Result<()> {
        let started = Instant::now();
        self.model.refresh()?;
        let weights: Vec<&Tensor<T>> = (0..self.model.params().len())
            .map(|i| self.model.weight(i))
            .collect();
        let (val_loss, val_acc) = evaluate(
            &self.model.arch,
            &weights,
            self.model.buffers(),
            &self.splits.val,
            self.config.eval_batch_size,
        )?;
        let epoch = self.epoch + 1;
        self.curves.push(EpochRecord {
            epoch,
            lr,
            train_loss: self.accum.loss_sum / self.accum.seen as f64,
            train_acc: self.accum.correct as f64 / self.accum.seen as f64,
            val_loss,
            val_acc,
        });
        self.record_traces(epoch)?;
        if self.best.as_ref().is_none_or(|b| val_acc > b.val_acc) {
            self.best = Some(Best {
                epoch,
                val_acc,
                network: self.model.bake()?,
            });
        }
        self.epoch_seconds
            .push(self.accum.seconds + started.elapsed().as_secs_f64());
        self.accum = EpochAccum::default();
        self.epoch = epoch;
        self.cursor = 0;
        if self.epoch >= self.config.epochs {
            self.status = RunStatus::Completed;
        }
        log::info!(
            "seed {} epoch {epoch}: train loss {:.4} val acc {:.4}",
            self.seed,
            self.curves.last().map_or(f64::NAN, |c| c.train_loss),
            val_acc
        );
        Ok(())
    }

    pub fn run_epoch(&mut self) -> Result<()> {
        let target = self.epoch + 1;
        while self.epoch < target && self.step()? {}
        Ok(())
    }

    /// Trains to the configured epoch count and evaluates the best model.
    pub fn run(mut self) -> Result<SeedResult> {
        while self.step()? {}
        self.finish()
    }

    /// Summarizes the run; the selected model is the best on validation.
    pub fn finish(&self) -> Result<SeedResult> {
        let mut result = SeedResult {
            seed: self.seed,
            status: self.status.clone(),
            best_epoch: self.best.as_ref().map(|b| b.epoch),
            best_val_acc: self.best.as_ref().map(|b| b.val_acc),
            test_acc: None,
            curves: self.curves.clone(),
            epoch_seconds: self.epoch_seconds.clone(),
            traces: self.traces.clone(),
            summaries: Vec::new(),
            final_summaries: Vec::new(),
            final_ab: (self.model.ab().mode == AbMode::Learnable).then(|| {
                let ab = self.model.ab();
                (0..ab.scopes())
                    .map(|s| (ab.labels[s].clone(), ab.a[s], ab.b[s]))
                    .collect()
            }),
        };
        if self.status != RunStatus::Completed {
            return Ok(result);
        }
        let best = self.best.as_ref().expect("a completed run has a best epoch");
        let (_, test_acc) =
            evaluate_network(&best.network, &self.splits.test, self.config.eval_batch_size)?;
        result.test_acc = Some(test_acc);
        result.summaries = self.summarize(&best.network)?;
        result.final_summaries = self.summarize(&self.model.clone().bake()?)?;
        Ok(result)
    }

    fn summarize(&self, net: &Network<T>) -> Result<Vec<LayerSummary>> {
        let mut out = Vec::new();
        for &i in &self.traced {
            let w = &net.params[i];
            let a_bound = match self.model.params()[i].binding() {
                Binding::Elementwise {
                    kind: ReparamKind::Arctan,
                    scope,
                } => Some(self.model.ab().a[*scope]),
                _ => None,
            };
            let mut near_zero = Vec::new();
            let mut util = None;
            for &d in &self.config.analysis.deltas {
                let s = snapshot_layer(w, d, a_bound)?;
                near_zero.push((d, s.near_zero_fraction));
                util = s.bound_utilization;
            }
            out.push(LayerSummary {
                layer: layer_label(&self.model.arch, i),
                near_zero,
                bound_utilization: util,
            });
        }
        Ok(out)
    }

    /// Full training state as a checkpoint.
    pub fn checkpoint(&self) -> Result<CheckpointFile> {
        let m = &self.model;
        let ab = m.ab();
        let (opt_kind, adam_steps) = match &self.optimizer {
            Optimizer::Sgd(_) => ("sgd", Vec::new()),
            Optimizer::Adam(s) => ("adam", s.buffers().2.to_vec()),
            Optimizer::ModifiedAdam(s) => ("modified_adam", s.buffers().2.to_vec()),
        };
        let meta = json!({
            "dtype": T::DTYPE,
            "architecture": m.arch,
            "reparam": m.spec,
            "policy": m.policy,
            "ab": {"mode": ab.mode, "scope": ab.scope, "labels": ab.labels},
            "optimizer": {"type": opt_kind, "learning_rate": self.optimizer.learning_rate(),
                          "slots": m.slot_count(), "adam_steps": adam_steps},
            "config": self.config,
            "seed": self.seed,
            "epoch": self.epoch,
            "cursor": self.cursor,
            "steps": m.steps(),
            "status": self.status,
            "accum": self.accum,
            "curves": self.curves,
            "epoch_seconds": self.epoch_seconds,
            "traces": self.traces,
            "best": self.best.as_ref().map(|b| json!({"epoch": b.epoch, "val_acc": b.val_acc})),
        });
        let mut ck = CheckpointFile::new("companded", meta);
        for p in m.params() {
            ck.put(format!("latent/{}", p.spec.name), p.latent())?;
            if let Some(g) = p.gain() {
                ck.put(format!("gain/{}", p.spec.name), g)?;
            }
        }
        for (i, b) in m.buffers().iter().enumerate() {
            ck.put(format!("buffer/{i}"), b)?;
        }
        if ab.mode == AbMode::Learnable || m.spec.kind.uses_ab() {
            ck.put("ab/a", &Tensor::new(vec![ab.scopes()], ab.a.clone())?)?;
            ck.put("ab/b", &Tensor::new(vec![ab.scopes()], ab.b.clone())?)?;
        }
        let mut put_slots = |prefix: &str, bufs: &[Option<Tensor<T>>]| -> Result<()> {
            for (s, b) in bufs.iter().enumerate() {
                if let Some(b) = b {
                    ck.put(format!("opt/{prefix}/{s}"), b)?;
                }
            }
            Ok(())
        };
        match &self.optimizer {
            Optimizer::Sgd(s) => put_slots("velocity", s.buffers())?,
            Optimizer::Adam(s) | Optimizer::ModifiedAdam(s) => {
                let (m1, m2, _) = s.buffers();
                put_slots("m", m1)?;
                put_slots("v", m2)?;
            }
        }
        if let Some(b) = &self.best {
            for (i, p) in b.network.params.iter().enumerate() {
                ck.put(format!("best/param/{i}"), p)?;
            }
            for (i, p) in b.network.buffers.iter().enumerate() {
                ck.put(format!("best/buffer/{i}"), p)?;
            }
        }
        Ok(ck)
    }

    /// Restores a trainer from [`Trainer::checkpoint`] output. The dataset is
    /// reloaded from the stored config.
    pub fn from_checkpoint(ck: &CheckpointFile) -> Result<Self> {
        let config: ExperimentConfig = meta_field(ck, "config")?;
        let seed: u64 = meta_field(ck, "seed")?;
        let (pool, test) = load_dataset(&config.dataset, config.data_seed)?;
        let splits = split_for_seed(&pool, &test, config.validation_split, seed);
        Self::from_checkpoint_with(ck, splits)
    }

    /// Restores a trainer with caller-provided data splits.
    pub fn from_checkpoint_with(ck: &CheckpointFile, splits: Splits) -> Result<Self> {
        if ck.kind() != "companded" {
            return Err(Error::Checkpoint(format!(
                "expected a training checkpoint, found `{}`",
                ck.kind()
            )));
        }
        let dtype: Dtype = meta_field(ck, "dtype")?;
        if dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!("checkpoint holds {dtype:?} tensors")));
        }
        let config: ExperimentConfig = meta_field(ck, "config")?;
        let seed: u64 = meta_field(ck, "seed")?;
        let model = load_companded::<T>(ck)?;
        let mut t = Self::with_model(&config, seed, splits, model)?;

        let opt_type: String = serde_json::from_value(ck.meta()["optimizer"]["type"].clone())?;
        let lr: f64 = serde_json::from_value(ck.meta()["optimizer"]["learning_rate"].clone())?;
        let slots = t.model.slot_count();
        let read_slots = |prefix: &str| -> Result<Vec<Option<Tensor<T>>>> {
            (0..slots)
                .map(|s| {
                    let name = format!("opt/{prefix}/{s}");
                    ck.has(&name).then(|| ck.get::<T>(&name)).transpose()
                })
                .collect()
        };
        match &mut t.optimizer {
            Optimizer::Sgd(s) if opt_type == "sgd" => s.set_buffers(read_slots("velocity")?),
            Optimizer::Adam(s) | Optimizer::ModifiedAdam(s)
                if opt_type == "adam" || opt_type == "modified_adam" =>
            {
                let steps: Vec<u64> =
                    serde_json::from_value(ck.meta()["optimizer"]["adam_steps"].clone())?;
                s.set_buffers(read_slots("m")?, read_slots("v")?, steps);
            }
            _ => return Err(Error::Checkpoint(format!("optimizer `{opt_type}` mismatch"))),
        }
        t.optimizer.set_learning_rate(lr);
        t.epoch = meta_field(ck, "epoch")?;
        t.cursor = meta_field(ck, "cursor")?;
        t.status = meta_field(ck, "status")?;
        t.accum = meta_field(ck, "accum")?;
        t.curves = meta_field(ck, "curves")?;
        t.epoch_seconds = meta_field(ck, "epoch_seconds")?;
        t.traces = meta_field(ck, "traces")?;
        let best: Option<serde_json::Value> = meta_field(ck, "best")?;
        if let Some(b) = best {
            let n = t.model.params().len();
            let nb = t.model.buffers().len();
            t.best = Some(Best {
                epoch: serde_json::from_value(b["epoch"].clone())?,
                val_acc: serde_json::from_value(b["val_acc"].clone())?,
                network: Network {
                    arch: t.model.arch.clone(),
                    params: (0..n)
                        .map(|i| ck.get::<T>(&format!("best/param/{i}")))
                        .collect::<Result<_>>()?,
                    buffers: (0..nb)
                        .map(|i| ck.get::<T>(&format!("best/buffer/{i}")))
                        .collect::<Result<_>>()?,
                },
            });
        }
        Ok(t)
    }
}

pub(crate) fn meta_field<V: serde::de::DeserializeOwned>(ck: &CheckpointFile, key: &str) -> Result<V> {
    let v = ck
        .meta()
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("manifest lacks `{key}`")))?;
    serde_json::from_value(v.clone())
        .map_err(|e| Error::Checkpoint(format!("manifest field `{key}`: {e}")))
}

/// Rebuilds the companded model stored in a training checkpoint.
pub fn load_companded<T: Real>(ck: &CheckpointFile) -> Result<CompandedModel<T>> {
    let arch: Architecture = meta_field(ck, "architecture")?;
    let spec: ReparamSpec = meta_field(ck, "reparam")?;
    let policy = meta_field(ck, "policy")?;
    let ab_meta = ck
        .meta()
        .get("ab")
        .ok_or_else(|| Error::Checkpoint("manifest lacks `ab`".into()))?;
    let labels: Vec<String> = serde_json::from_value(ab_meta["labels"].clone())?;
    let (a, b) = if ck.has("ab/a") {
        (
            ck.get::<f64>("ab/a")?.into_data(),
            ck.get::<f64>("ab/b")?.into_data(),
        )
    } else {
        (vec![spec.params.a; labels.len()], vec![spec.params.b; labels.len()])
    };
    let ab = SharedAbState {
        mode: serde_json::from_value(ab_meta["mode"].clone())?,
        scope: serde_json::from_value(ab_meta["scope"].clone())?,
        grad_a: vec![0.0; a.len()],
        grad_b: vec![0.0; b.len()],
        a,
        b,
        labels,
    };
    let specs = arch.param_specs();
    let latents = specs
        .iter()
        .map(|s| ck.get::<T>(&format!("latent/{}", s.name)))
        .collect::<Result<Vec<_>>>()?;
    let gains = specs
        .iter()
        .map(|s| {
            let name = format!("gain/{}", s.name);
            ck.has(&name).then(|| ck.get::<T>(&name)).transpose()
        })
        .collect::<Result<Vec<_>>>()?;
    let buffers = (0..arch.buffer_specs().len())
        .map(|i| ck.get::<T>(&format!("buffer/{i}")))
        .collect::<Result<Vec<_>>>()?;
    let steps: u64 = meta_field(ck, "steps")?;
    CompandedModel::from_state(arch, spec, policy, latents, gains, ab, buffers, steps)
}

/// Plain checkpoint of a baked network; it carries no reparameterization state.
pub fn network_checkpoint<T: Real>(net: &Network<T>) -> Result<CheckpointFile> {
    let mut ck = CheckpointFile::new(
        "plain",
        json!({"dtype": T::DTYPE, "architecture": net.arch}),
    );
    for (spec, p) in net.arch.param_specs().iter().zip(&net.params) {
        ck.put(format!("param/{}", spec.name), p)?;
    }
    for (i, b) in net.buffers.iter().enumerate() {
        ck.put(format!("buffer/{i}"), b)?;
    }
    Ok(ck)
}

pub fn load_network<T: Real>(ck: &CheckpointFile) -> Result<Network<T>> {
    if ck.kind() != "plain" {
        return Err(Error::Checkpoint(format!("expected a plain network, found `{}`", ck.kind())));
    }
    let arch: Architecture = meta_field(ck, "architecture")?;
    let params = arch
        .param_specs()
        .iter()
        .map(|s| ck.get::<T>(&format!("param/{}", s.name)))
        .collect::<Result<_>>()?;
    let buffers = (0..arch.buffer_specs().len())
        .map(|i| ck.get::<T>(&format!("buffer/{i}")))
        .collect::<Result<_>>()?;
    Ok(Network {
        arch,
        params,
        buffers,
    })
}

/// Runs `f` over `items` on up to `available_parallelism` threads,
/// preserving order.
pub fn parallel_map<I: Sync, O: Send>(items: &[I], f: impl Fn(&I) -> O + Sync) -> Vec<O> {
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(items.len())
        .max(1);
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut out: Vec<Option<O>> = (0..items.len()).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut out);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                results.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    out.into_iter().map(|o| o.expect("every item ran")).collect()
}

fn run_seed<T: Real>(config: &ExperimentConfig, pool: &Dataset, test: &Dataset, seed: u64) -> Result<SeedResult> {
    let splits = split_for_seed(pool, test, config.validation_split, seed);
    Trainer::<T>::new(config, seed, splits)?.run()
}

/// Trains every configured seed (in parallel) on a shared dataset.
pub fn train_on(config: &ExperimentConfig, pool: &Dataset, test: &Dataset) -> Result<RunResult> {
    config.validate()?;
    let results = parallel_map(&config.seeds, |&seed| match config.precision {
        Dtype::F64 => run_seed::<f64>(config, pool, test, seed),
        Dtype::F32 => run_seed::<f32>(config, pool, test, seed),
    });
    Ok(RunResult::new(
        config.clone(),
        results.into_iter().collect::<Result<_>>()?,
    ))
}

pub fn train(config: &ExperimentConfig) -> Result<RunResult> {
    config.validate()?;
    let (pool, test) = load_dataset(&config.dataset, config.data_seed)?;
    train_on(config, &pool, &test)
}
