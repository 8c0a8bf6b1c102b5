//! Grid search, exported artifacts and the runtime-overhead report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::{percentiles, snapshot_layer, DistributionSummary, TRACE_LEVELS};
use crate::compander::wrap_model;
use crate::error::{Error, Result};
use crate::harness::checkpoint::CheckpointFile;
use crate::harness::config::{DatasetConfig, ExperimentConfig};
use crate::harness::data::Dataset;
use crate::harness::train::{
    evaluate_network, load_companded, load_dataset, load_network, meta_field, network_checkpoint,
    parallel_map, split_for_seed, train_on, RunResult, Trainer,
};
use crate::nn::{Network, ParamRole};
use crate::reparam::{AbMode, ReparamKind, ReparamSpec};
use crate::rng::{Purpose, Stream};
use crate::tensor::{Dtype, Real};

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Writes `metrics.csv`, `results.json` and per-seed `trace_<layer>.csv`
/// files into `dir`.
pub fn write_run_outputs(result: &RunResult, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut written = Vec::new();
    let mut csv = String::from("seed,epoch,split,loss,accuracy,lr\n");
    for s in &result.seeds {
        for r in &s.curves {
            let _ = writeln!(
                csv,
                "{},{},train,{},{},{}",
                s.seed, r.epoch, r.train_loss, r.train_acc, r.lr
            );
            let _ = writeln!(
                csv,
                "{},{},val,{},{},{}",
                s.seed, r.epoch, r.val_loss, r.val_acc, r.lr
            );
        }
    }
    let path = dir.join("metrics.csv");
    write_file(&path, &csv)?;
    written.push(path);
    let path = dir.join("results.json");
    write_file(&path, &serde_json::to_string_pretty(result)?)?;
    written.push(path);
    for s in &result.seeds {
        let sub = dir.join(format!("seed_{}", s.seed));
        std::fs::create_dir_all(&sub)
            .map_err(|e| Error::io(format!("creating {}", sub.display()), e))?;
        for t in &s.traces {
            written.push(t.write_csv(&sub)?);
        }
    }
    Ok(written)
}

/// Values of a `start:end:step` range (inclusive) or a comma-separated list.
pub fn parse_values(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("cannot parse value list `{text}`"));
    let parts: Vec<&str> = text.split(':').collect();
    match parts.as_slice() {
        [start, end, step] => {
            let (start, end, step): (f64, f64, f64) = (
                start.trim().parse().map_err(|_| bad())?,
                end.trim().parse().map_err(|_| bad())?,
                step.trim().parse().map_err(|_| bad())?,
            );
            if !(step > 0.0) || end < start {
                return Err(bad());
            }
            let n = ((end - start) / step + 1e-9).floor() as usize + 1;
            // Rounded to 12 decimals so that 0.1 steps give 0.7, not 0.7000000000000001.
            Ok((0..n)
                .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
                .collect())
        }
        [list] => list
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
            .collect(),
        _ => Err(bad()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub a: f64,
    pub b: f64,
    pub val_acc: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub seed: u64,
    pub cells: Vec<GridCell>,
    /// `(a, b, validation accuracy)` of the winning cell.
    pub best: Option<(f64, f64, f64)>,
}

impl GridResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("a,b,val_acc\n");
        for c in &self.cells {
            let acc = c.val_acc.map_or_else(|| "nan".to_string(), |v| v.to_string());
            let _ = writeln!(out, "{},{},{}", c.a, c.b, acc);
        }
        out
    }
}

/// Highest accuracy; ties go to the smaller `a`, then the smaller `b`.
pub fn grid_argmax(cells: &[GridCell]) -> Option<(f64, f64, f64)> {
    cells
        .iter()
        .filter_map(|c| c.val_acc.map(|v| (c.a, c.b, v)))
        .reduce(|best, x| {
            let better = x.2 > best.2
                || (x.2 == best.2 && (x.0 < best.0 || (x.0 == best.0 && x.1 < best.1)));
            if better {
                x
            } else {
                best
            }
        })
}

/// The single-seed config a grid cell trains.
pub fn grid_cell_config(config: &ExperimentConfig, a: f64, b: f64) -> ExperimentConfig {
    let mut c = config.clone();
    c.reparam.params = c.reparam.params.with_ab(a, b);
    c.seeds = vec![config.seeds[0]];
    c
}

/// Trains one cell per `(a, b)` pair, in cartesian order, on the first seed.
pub fn grid_search_on(
    config: &ExperimentConfig,
    a_values: &[f64],
    b_values: &[f64],
    pool: &Dataset,
    test: &Dataset,
) -> Result<GridResult> {
    if a_values.is_empty() || b_values.is_empty() {
        return Err(Error::Config("grid axes must be non-empty".into()));
    }
    if config.reparam.params.mode != AbMode::Fixed || !config.reparam.kind.uses_ab() {
        return Err(Error::Config(
            "grid search needs a fixed-mode reparameterization with a and b".into(),
        ));
    }
    let pairs: Vec<(f64, f64)> = a_values
        .iter()
        .flat_map(|&a| b_values.iter().map(move |&b| (a, b)))
        .collect();
    let cells = parallel_map(&pairs, |&(a, b)| {
        let mut cell_cfg = grid_cell_config(config, a, b);
        // Cells already run in parallel; each cell trains its one seed inline.
        cell_cfg.seeds.truncate(1);
        match train_on(&cell_cfg, pool, test) {
            Ok(r) => match r.seeds[0].best_val_acc {
                Some(v) if r.seeds[0].completed() => GridCell {
                    a,
                    b,
                    val_acc: Some(v),
                    error: None,
                },
                _ => GridCell {
                    a,
                    b,
                    val_acc: None,
                    error: Some(format!("{:?}", r.seeds[0].status)),
                },
            },
            Err(e) => GridCell {
                a,
                b,
                val_acc: None,
                error: Some(e.to_string()),
            },
        }
    });
    Ok(GridResult {
        seed: config.seeds[0],
        best: grid_argmax(&cells),
        cells,
    })
}

pub fn grid_search(config: &ExperimentConfig, a_values: &[f64], b_values: &[f64]) -> Result<GridResult> {
    config.validate()?;
    let (pool, test) = load_dataset(&config.dataset, config.data_seed)?;
    grid_search_on(config, a_values, b_values, &pool, &test)
}

fn bake_typed<T: Real>(ck: &CheckpointFile) -> Result<CheckpointFile> {
    let mut model = load_companded::<T>(ck)?;
    network_checkpoint(&model.bake()?)
}

fn dtype_of(ck: &CheckpointFile) -> Result<Dtype> {
    meta_field(ck, "dtype")
}

/// Writes a plain checkpoint holding `psi(v)`; plain inputs are copied.
pub fn bake_export(checkpoint: &Path, out: &Path) -> Result<()> {
    let ck = CheckpointFile::load(checkpoint)?;
    let baked = match ck.kind() {
        "plain" => ck,
        "companded" => match dtype_of(&ck)? {
            Dtype::F64 => bake_typed::<f64>(&ck)?,
            Dtype::F32 => bake_typed::<f32>(&ck)?,
        },
        other => return Err(Error::Checkpoint(format!("unknown checkpoint kind `{other}`"))),
    };
    baked.save(out)
}

/// Plain network from either checkpoint kind.
pub fn network_from_checkpoint<T: Real>(ck: &CheckpointFile) -> Result<Network<T>> {
    match ck.kind() {
        "plain" => load_network(ck),
        _ => load_companded::<T>(ck)?.bake(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Evaluates a checkpoint on the test partition of `dataset`.
pub fn eval_checkpoint(checkpoint: &Path, dataset: &DatasetConfig, data_seed: u64) -> Result<EvalReport> {
    let ck = CheckpointFile::load(checkpoint)?;
    let (_, test) = load_dataset(dataset, data_seed)?;
    let (loss, accuracy) = match dtype_of(&ck)? {
        Dtype::F64 => evaluate_network(&network_from_checkpoint::<f64>(&ck)?, &test, 500)?,
        Dtype::F32 => evaluate_network(&network_from_checkpoint::<f32>(&ck)?, &test, 500)?,
    };
    Ok(EvalReport {
        samples: test.len(),
        loss,
        accuracy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAnalysis {
    pub layer: usize,
    pub percentile_levels: Vec<f64>,
    pub percentiles: Vec<f64>,
    pub summary: DistributionSummary,
}

fn analyze_typed<T: Real>(ck: &CheckpointFile, layers: &[usize], delta: f64) -> Result<Vec<LayerAnalysis>> {
    let net = network_from_checkpoint::<T>(ck)?;
    let a_bound = if ck.kind() == "companded" {
        let spec: ReparamSpec = meta_field(ck, "reparam")?;
        (spec.kind == ReparamKind::Arctan && spec.params.mode == AbMode::Fixed)
            .then_some(spec.params.a)
    } else {
        None
    };
    let specs = net.arch.param_specs();
    let mut out = Vec::new();
    for (i, s) in specs.iter().enumerate() {
        if s.role != ParamRole::Weight || !(layers.is_empty() || layers.contains(&s.layer)) {
            continue;
        }
        let w = &net.params[i];
        out.push(LayerAnalysis {
            layer: s.layer,
            percentile_levels: TRACE_LEVELS.to_vec(),
            percentiles: percentiles(&w.to_f64_vec(), &TRACE_LEVELS)?,
            summary: snapshot_layer(w, delta, a_bound)?,
        });
    }
    if out.is_empty() {
        return Err(Error::Config(format!("no weighted layer among {layers:?}")));
    }
    Ok(out)
}

/// Percentiles and distribution summary of the materialized weights.
pub fn analyze_checkpoint(checkpoint: &Path, layers: &[usize], delta: f64) -> Result<Vec<LayerAnalysis>> {
    let ck = CheckpointFile::load(checkpoint)?;
    match dtype_of(&ck)? {
        Dtype::F64 => analyze_typed::<f64>(&ck, layers, delta),
        Dtype::F32 => analyze_typed::<f32>(&ck, layers, delta),
    }
}

/// Overhead of a reparameterization measured against the identity.
pub const REFERENCE_OVERHEAD: (f64, f64) = (0.07, 0.14);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub steps: usize,
    pub baseline: ReparamSpec,
    pub candidate: ReparamSpec,
    pub baseline_ms_per_step: f64,
    pub candidate_ms_per_step: f64,
    pub ratio: f64,
    /// Reference range of the relative overhead, for context only.
    pub reference_overhead: (f64, f64),
}

impl OverheadReport {
    pub fn summary(&self) -> String {
        format!(
            "{} steps: {} {:.3} ms/step, {} {:.3} ms/step, ratio {:.3} ({:+.1}%); reference overhead range {:.0}%-{:.0}%",
            self.steps,
            self.baseline.kind,
            self.baseline_ms_per_step,
            self.candidate.kind,
            self.candidate_ms_per_step,
            self.ratio,
            (self.ratio - 1.0) * 100.0,
            self.reference_overhead.0 * 100.0,
            self.reference_overhead.1 * 100.0
        )
    }
}

fn time_steps<T: Real>(
    config: &ExperimentConfig,
    spec: &ReparamSpec,
    pool: &Dataset,
    test: &Dataset,
    steps: usize,
) -> Result<f64> {
    let seed = config.seeds[0];
    let splits = split_for_seed(pool, test, config.validation_split, seed);
    let arch = config.architecture(&splits.train.sample_shape, splits.train.classes)?;
    let mut model = wrap_model::<T>(&arch, &config.policy, spec, &config.init, seed)?;
    let mut opt = config.optimizer.build::<T>(config.lambda)?;
    let mut rng = Stream::new(seed, Purpose::Probe, 0);
    let bs = config.batch_size.min(splits.train.len());
    let batches: Vec<_> = (0..4)
        .map(|_| {
            let idx: Vec<usize> = (0..bs).map(|_| rng.below(splits.train.len())).collect();
            splits.train.batch::<T>(&idx, &arch.input_shape)
        })
        .collect::<Result<_>>()?;
    let warmup = 2.min(steps);
    let mut elapsed = 0.0;
    for i in 0..warmup + steps {
        let (x, y) = &batches[i % batches.len()];
        let t0 = Instant::now();
        model.train_step(&mut opt, x, y, config.lambda, config.decay)?;
        if i >= warmup {
            elapsed += t0.elapsed().as_secs_f64();
        }
    }
    Ok(elapsed * 1e3 / steps as f64)
}

/// Times `steps` training steps with the identity and with `candidate`
/// (the config's reparameterization, or arctan(1, 1) if it is the identity).
pub fn overhead_report_on(
    config: &ExperimentConfig,
    baseline: ReparamSpec,
    candidate: ReparamSpec,
    steps: usize,
    pool: &Dataset,
    test: &Dataset,
) -> Result<OverheadReport> {
    if steps == 0 {
        return Err(Error::Config("overhead needs at least one step".into()));
    }
    let time = |spec: &ReparamSpec| match config.precision {
        Dtype::F64 => time_steps::<f64>(config, spec, pool, test, steps),
        Dtype::F32 => time_steps::<f32>(config, spec, pool, test, steps),
    };
    // Interleaved twice to spread drift in machine load over both arms.
    let (b1, c1) = (time(&baseline)?, time(&candidate)?);
    let (c2, b2) = (time(&candidate)?, time(&baseline)?);
    let (b, c) = ((b1 + b2) / 2.0, (c1 + c2) / 2.0);
    Ok(OverheadReport {
        steps,
        baseline,
        candidate,
        baseline_ms_per_step: b,
        candidate_ms_per_step: c,
        ratio: c / b,
        reference_overhead: REFERENCE_OVERHEAD,
    })
}

pub fn overhead_report(config: &ExperimentConfig, steps: usize) -> Result<OverheadReport> {
    config.validate()?;
    let (pool, test) = load_dataset(&config.dataset, config.data_seed)?;
    let candidate = if config.reparam.kind == ReparamKind::Identity {
        ReparamSpec::arctan(1.0, 1.0)
    } else {
        config.reparam
    };
    overhead_report_on(config, ReparamSpec::identity(), candidate, steps, &pool, &test)
}

/// Resumes a training checkpoint and runs it to completion.
pub fn resume_to_end(checkpoint: &Path) -> Result<RunResult> {
    let ck = CheckpointFile::load(checkpoint)?;
    let config: ExperimentConfig = meta_field(&ck, "config")?;
    let seed = match dtype_of(&ck)? {
        Dtype::F64 => Trainer::<f64>::from_checkpoint(&ck)?.run()?,
        Dtype::F32 => Trainer::<f32>::from_checkpoint(&ck)?.run()?,
    };
    Ok(RunResult::new(config, vec![seed]))
}
