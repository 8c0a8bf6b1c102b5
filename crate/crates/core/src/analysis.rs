//! Weight-distribution statistics: percentile traces, histograms and
//! near-zero mass of materialized weights.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Percentile levels recorded per epoch: minimum, seven interior levels, maximum.
pub const TRACE_LEVELS: [f64; 9] = [0.0, 7.0, 16.0, 31.0, 50.0, 69.0, 84.0, 93.0, 100.0];

pub const DEFAULT_DELTA: f64 = 0.01;
pub const REPORT_DELTAS: [f64; 3] = [0.005, 0.01, 0.02];
pub const HISTOGRAM_BINS: usize = 101;

/// Linear-interpolation percentiles of `values` at `levels` (in percent).
pub fn percentiles(values: &[f64], levels: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::InvalidInput("percentiles of an empty sequence".into()));
    }
    if let Some(&l) = levels.iter().find(|l| !(0.0..=100.0).contains(*l)) {
        return Err(Error::InvalidInput(format!("percentile level {l} outside [0, 100]")));
    }
    if let Some(x) = values.iter().find(|x| x.is_nan()) {
        return Err(Error::InvalidInput(format!("cannot rank {x}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Ok(levels
        .iter()
        .map(|&level| {
            let rank = level / 100.0 * (n - 1) as f64;
            let lo = rank.floor() as usize;
            let hi = rank.ceil() as usize;
            if lo == hi {
                sorted[lo]
            } else {
                sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges, symmetric about zero.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub histogram: Histogram,
    pub delta: f64,
    pub near_zero_fraction: f64,
    /// `max|w| / (a pi / 2)` for arctan layers.
    pub bound_utilization: Option<f64>,
}

/// Fraction of entries with `|w| < delta`.
pub fn near_zero_fraction(weights: &[f64], delta: f64) -> f64 {
    if weights.is_empty() {
        return 0.0;
    }
    weights.iter().filter(|w| w.abs() < delta).count() as f64 / weights.len() as f64
}

/// Histogram, near-zero mass and, given the arctan scale `a`, bound utilization.
pub fn snapshot_layer<T: Real>(
    weights: &Tensor<T>,
    delta: f64,
    a_bound: Option<f64>,
) -> Result<DistributionSummary> {
    if !(delta > 0.0) {
        return Err(Error::InvalidInput(format!("delta must be positive, got {delta}")));
    }
    let w = weights.to_f64_vec();
    let m = w.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    let range = if m > 0.0 { m } else { 1.0 };
    let width = 2.0 * range / HISTOGRAM_BINS as f64;
    let edges = (0..=HISTOGRAM_BINS)
        .map(|i| -range + i as f64 * width)
        .collect();
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    for &x in &w {
        let bin = ((x + range) / width).floor();
        let bin = (bin.max(0.0) as usize).min(HISTOGRAM_BINS - 1);
        counts[bin] += 1;
    }
    Ok(DistributionSummary {
        histogram: Histogram { edges, counts },
        delta,
        near_zero_fraction: near_zero_fraction(&w, delta),
        bound_utilization: a_bound.map(|a| m / (a * std::f64::consts::FRAC_PI_2)),
    })
}

/// Per-epoch percentile vectors of one layer's materialized weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionTrace {
    pub layer: String,
    pub levels: Vec<f64>,
    pub epochs: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

impl DistributionTrace {
    pub fn new(layer: impl Into<String>) -> Self {
        DistributionTrace {
            layer: layer.into(),
            levels: TRACE_LEVELS.to_vec(),
            epochs: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn last_epoch(&self) -> Option<usize> {
        self.epochs.last().copied()
    }

    /// Largest recorded maximum and smallest recorded minimum.
    pub fn extremes(&self) -> Option<(f64, f64)> {
        let lo = self.values.iter().map(|v| v[0]).reduce(f64::min)?;
        let hi = self.values.iter().map(|v| v[v.len() - 1]).reduce(f64::max)?;
        Some((lo, hi))
    }

    pub fn write_csv(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("trace_{}.csv", self.layer));
        let mut out = String::from("epoch");
        for l in &self.levels {
            out.push_str(&format!(",p{l}"));
        }
        out.push('\n');
        for (e, row) in self.epochs.iter().zip(&self.values) {
            out.push_str(&e.to_string());
            for x in row {
                out.push_str(&format!(",{x:e}"));
            }
            out.push('\n');
        }
        let mut f = std::fs::File::create(&path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        f.write_all(out.as_bytes())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(path)
    }
}

/// Appends the percentile vector of `weights` for `epoch`.
pub fn trace_epoch<T: Real>(
    trace: &mut DistributionTrace,
    epoch: usize,
    weights: &Tensor<T>,
) -> Result<()> {
    if let Some(last) = trace.last_epoch() {
        if epoch <= last {
            return Err(Error::Contract(format!(
                "trace `{}`: epoch {epoch} after {last}",
                trace.layer
            )));
        }
    }
    let p = percentiles(&weights.to_f64_vec(), &trace.levels)?;
    trace.epochs.push(epoch);
    trace.values.push(p);
    Ok(())
}
