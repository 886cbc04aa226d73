//! Inter-arrival chi-square goodness of fit under missingness.
//!
//! Candidate parameters are scored by simulating reported streams with the
//! same thinning as the training data and comparing pooled inter-arrival
//! histograms:
//!
//! ```text
//! χ² = Σ_bins (f_train - f_syn)² / f_train
//! ```
//!
//! Synthetic counts are rescaled to the training total. Bins are equal width
//! on `[0, q]` plus one overflow bin, where `q` is the larger of the two
//! pools' 99.5% quantiles; training bins with zero count are merged into
//! their right neighbour (a trailing run of empty bins merges left).

use serde::{Deserialize, Serialize};

use crate::generator::{batch_seeds, simulate_reported_batch, GenConfig};
use crate::model::{compensator_increments, BackgroundConfig, EventStream, ModelParams};
use crate::stats::quantile_sorted;
use crate::thinning::RegionMap;
use crate::{Error, Result};

const RANGE_QUANTILE: f64 = 0.995;

/// `t_i - t_{i-1}` for consecutive events; empty for fewer than two events.
pub fn interarrivals(s: &EventStream) -> Vec<f64> {
    s.events.windows(2).map(|w| w[1].t - w[0].t).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolSource {
    Training,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterarrivalPool {
    pub values: Vec<f64>,
    pub source: PoolSource,
    pub streams: usize,
}

impl InterarrivalPool {
    pub fn from_streams(streams: &[EventStream], source: PoolSource) -> Self {
        Self { values: streams.iter().flat_map(interarrivals).collect(), source, streams: streams.len() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GofConfig {
    pub k_synthetic: usize,
    pub n_bins: usize,
}

impl Default for GofConfig {
    fn default() -> Self {
        Self { k_synthetic: 1000, n_bins: 50 }
    }
}

/// Binned frequencies after rescaling and merging. Bin `k` covers
/// `[edges[k], edges[k + 1])`; the last edge may be infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofHistogram {
    pub edges: Vec<f64>,
    pub training: Vec<f64>,
    pub synthetic: Vec<f64>,
}

impl GofHistogram {
    pub fn statistic(&self) -> f64 {
        self.training.iter().zip(&self.synthetic).map(|(t, s)| (t - s).powi(2) / t).sum()
    }
}

pub fn histogram(training: &InterarrivalPool, synthetic: &InterarrivalPool, n_bins: usize) -> Result<GofHistogram> {
    if training.is_empty() || synthetic.is_empty() {
        return Err(Error::InvalidArgument("chi-square needs two non-empty inter-arrival pools".into()));
    }
    if n_bins == 0 {
        return Err(Error::Config("n_bins must be positive".into()));
    }
    let all = training.values.iter().chain(&synthetic.values);
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(lo.is_finite() && hi.is_finite()) || lo == hi {
        return Err(Error::InvalidArgument("inter-arrival pools have degenerate support".into()));
    }
    let sorted = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        s
    };
    let q = quantile_sorted(&sorted(&training.values), RANGE_QUANTILE)
        .max(quantile_sorted(&sorted(&synthetic.values), RANGE_QUANTILE));
    // a pool concentrated at zero still needs a positive range
    let q = if q > 0.0 { q } else { hi };
    let width = q / n_bins as f64;
    let bin = |v: f64| if v > q { n_bins } else { ((v / width) as usize).min(n_bins - 1) };

    let mut train = vec![0.0; n_bins + 1];
    let mut syn = vec![0.0; n_bins + 1];
    training.values.iter().for_each(|&v| train[bin(v)] += 1.0);
    synthetic.values.iter().for_each(|&v| syn[bin(v)] += 1.0);
    let scale = training.len() as f64 / synthetic.len() as f64;
    syn.iter_mut().for_each(|c| *c *= scale);

    let mut edges: Vec<f64> = (0..=n_bins).map(|k| k as f64 * width).collect();
    edges[n_bins] = q;
    edges.push(f64::INFINITY);

    let mut out = GofHistogram { edges: vec![0.0], training: Vec::new(), synthetic: Vec::new() };
    let (mut acc_t, mut acc_s) = (0.0, 0.0);
    for k in 0..=n_bins {
        acc_t += train[k];
        acc_s += syn[k];
        if acc_t > 0.0 {
            out.training.push(acc_t);
            out.synthetic.push(acc_s);
            out.edges.push(edges[k + 1]);
            acc_t = 0.0;
            acc_s = 0.0;
        }
    }
    if acc_s > 0.0 || out.edges.last() != Some(&f64::INFINITY) {
        let last = out.training.len() - 1;
        out.synthetic[last] += acc_s;
        *out.edges.last_mut().expect("non-empty") = f64::INFINITY;
    }
    Ok(out)
}

pub fn chi_square(training: &InterarrivalPool, synthetic: &InterarrivalPool, n_bins: usize) -> Result<f64> {
    histogram(training, synthetic, n_bins).map(|h| h.statistic())
}

/// Everything needed to score a candidate against a training set.
#[derive(Debug, Clone, Copy)]
pub struct GofSetup<'a> {
    pub training: &'a [EventStream],
    pub bg: &'a BackgroundConfig,
    pub map: &'a RegionMap,
    pub gen: GenConfig,
    pub config: GofConfig,
    pub seed: u64,
}

impl GofSetup<'_> {
    pub fn synthetic(&self, theta: &ModelParams) -> Result<Vec<EventStream>> {
        if self.config.k_synthetic == 0 {
            return Err(Error::Config("k_synthetic must be positive".into()));
        }
        let seeds = batch_seeds(self.seed, self.config.k_synthetic);
        simulate_reported_batch(theta, self.bg, self.map, &seeds, &self.gen)
    }

    pub fn histogram(&self, theta: &ModelParams) -> Result<GofHistogram> {
        let syn = self.synthetic(theta)?;
        histogram(
            &InterarrivalPool::from_streams(self.training, PoolSource::Training),
            &InterarrivalPool::from_streams(&syn, PoolSource::Synthetic),
            self.config.n_bins,
        )
    }

    pub fn score(&self, theta: &ModelParams) -> Result<f64> {
        self.histogram(theta).map(|h| h.statistic())
    }
}

/// Simulates `K_synthetic` reported streams at `theta` and returns the
/// chi-square statistic against the training pool.
pub fn gof_score(theta: &ModelParams, setup: &GofSetup<'_>) -> Result<f64> {
    setup.score(theta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    pub score: f64,
    /// Score per candidate; `None` for failed runs or failed scoring.
    pub scores: Vec<Option<f64>>,
}

/// Index of the candidate with the smallest score; ties keep the earliest.
pub fn select_best(candidates: &[Option<ModelParams>], setup: &GofSetup<'_>) -> Result<Selection> {
    let scores: Vec<Option<f64>> =
        candidates.iter().map(|c| c.as_ref().and_then(|p| setup.score(p).ok()).filter(|s| s.is_finite())).collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(s) = *s {
            if best.is_none_or(|(_, b)| s < b) {
                best = Some((i, s));
            }
        }
    }
    let (index, score) = best.ok_or_else(|| Error::InvalidArgument("no candidate could be scored".into()))?;
    Ok(Selection { index, score, scores })
}

/// Pooled compensator increments of un-thinned streams; `Exp(1)` under the model.
pub fn compensator_residuals(streams: &[EventStream], params: &ModelParams, bg: &BackgroundConfig) -> Vec<f64> {
    streams.iter().flat_map(|s| compensator_increments(s, params, bg)).collect()
}

/// `(Exp(1) quantile, sorted residual)` pairs for a QQ plot.
pub fn qq_residuals(streams: &[EventStream], params: &ModelParams, bg: &BackgroundConfig) -> Vec<(f64, f64)> {
    let mut r = compensator_residuals(streams, params, bg);
    r.sort_by(f64::total_cmp);
    let n = r.len() as f64;
    r.into_iter().enumerate().map(|(i, v)| (-(1.0 - (i as f64 + 0.5) / n).ln(), v)).collect()
}
