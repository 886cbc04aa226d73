//! Exact branching simulator `g_θ(z)`.
//!
//! Events are produced in time order from a priority queue: background
//! arrivals come from time-rescaled unit exponentials, `t_k = E_k / μ_tot`,
//! and every processed event draws a `Poisson(A·B)` number of children with
//! delays `-ln(u) / β` and offsets `σ · N(0, 1)`. Because a child always
//! follows its parent, the popped event is final, so count-limited streams
//! stop after exactly `N` in-domain events even for supercritical parameters.
//!
//! All randomness is keyed by event identity (see [`crate::noise`]). Along
//! the way each event carries the forward-mode Jacobian of `(t, x, y)` with
//! respect to `(log μ, log α, log β, log σ²)`, holding the discrete structure
//! (offspring counts, horizon cut, discard mask, ordering) fixed. The
//! offspring count is the only place `α` enters, so its pathwise column is
//! zero.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{total_background_rate, Ancestry, BackgroundConfig, Event, EventStream, ModelParams};
use crate::noise::{derive_seed, mix, BaseNoise, Channel};
use crate::thinning::RegionMap;
use crate::{Error, Result};

/// Hard cap on simulated events (observed or not) per stream.
pub const MAX_PROCESSED: usize = 1 << 24;

/// Which bound ends a stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Limit {
    /// All events in `[0, T]`.
    Horizon(f64),
    /// The first `N` in-domain events.
    Count(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub limit: Limit,
    pub batch_size: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { limit: Limit::Count(250), batch_size: 256 }
    }
}

impl GenConfig {
    pub fn horizon(horizon: f64) -> Self {
        Self { limit: Limit::Horizon(horizon), ..Self::default() }
    }

    pub fn count(max_events: usize) -> Self {
        Self { limit: Limit::Count(max_events), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        match self.limit {
            Limit::Horizon(t) if t.is_nan() || t < 0.0 => Err(Error::Config(format!("horizon {t} must be non-negative"))),
            Limit::Horizon(t) if t.is_infinite() => Err(Error::NonTermination(
                "an unbounded horizon never stops producing background events".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// `∂(t, x, y) / ∂(log μ, log α, log β, log σ²)`, one row per coordinate.
pub type EventJacobian = [[f64; 4]; 3];

/// A simulated stream together with its pathwise Jacobians.
#[derive(Debug, Clone, PartialEq)]
pub struct Traced {
    pub stream: EventStream,
    pub jacobians: Vec<EventJacobian>,
}

impl Traced {
    /// Keeps the events whose flag is set.
    pub fn select(&self, keep: &[bool]) -> Traced {
        let stream = crate::thinning::select(&self.stream, keep);
        let jacobians = self.jacobians.iter().zip(keep).filter(|(_, &k)| k).map(|(j, _)| *j).collect();
        Traced { stream, jacobians }
    }
}

struct Pending {
    t: f64,
    x: f64,
    y: f64,
    jac: EventJacobian,
    ident: u64,
    parent_uid: Option<usize>,
    seq: u64,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Pending {}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Pending {
    // reversed: BinaryHeap is a max-heap and we want the earliest event
    fn cmp(&self, other: &Self) -> Ordering {
        other.t.total_cmp(&self.t).then_with(|| other.seq.cmp(&self.seq))
    }
}

fn background_ident(k: u64) -> u64 {
    mix(k ^ 0xB4C6_0000_0000_0001)
}

fn child_ident(parent: u64, c: u64) -> u64 {
    mix(parent ^ mix(c.wrapping_add(1)))
}

/// Smallest `k` with `P(Poisson(mean) ≤ k) ≥ u`.
pub fn poisson_quantile(u: f64, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    let cap = (mean + 40.0 * mean.sqrt() + 40.0) as u64;
    let ln_mean = mean.ln();
    let mut k = 0u64;
    let mut log_p = -mean;
    let mut cdf = log_p.exp();
    while cdf < u && k < cap {
        k += 1;
        log_p += ln_mean - (k as f64).ln();
        cdf += log_p.exp();
    }
    k
}

/// Simulates one stream and its pathwise Jacobians.
pub fn simulate_traced(params: &ModelParams, bg: &BackgroundConfig, noise: &mut BaseNoise, cfg: &GenConfig) -> Result<Traced> {
    params.validate()?;
    bg.validate()?;
    cfg.validate()?;

    let mu_tot = total_background_rate(params, bg);
    let offspring_mean = params.branching_ratio();
    let [vx, vy] = params.variances();
    let (sx, sy) = (vx.sqrt(), vy.sqrt());
    let horizon = match cfg.limit {
        Limit::Horizon(t) => t,
        Limit::Count(_) => f64::INFINITY,
    };
    let max_events = match cfg.limit {
        Limit::Count(n) => n,
        Limit::Horizon(_) => usize::MAX,
    };

    let mut events: Vec<Event> = Vec::new();
    let mut jacobians: Vec<EventJacobian> = Vec::new();
    let mut output_of_uid: Vec<Option<usize>> = Vec::new();
    let mut queue: BinaryHeap<Pending> = BinaryHeap::new();
    let mut seq = 0u64;

    // cumulative unit-rate exponential of the next background arrival
    let mut bg_index = 0u64;
    let mut bg_clock = if mu_tot > 0.0 {
        let u = noise.uniform(Channel::BackgroundTime, 0)?;
        Some(-u.ln())
    } else {
        None
    };

    loop {
        if max_events == 0 {
            break;
        }
        let bg_time = bg_clock.map(|e| e / mu_tot);
        let take_background = match (bg_time, queue.peek()) {
            (None, None) => break,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (Some(tb), Some(p)) => tb < p.t,
        };
        let next = if take_background {
            let t = bg_time.unwrap_or_default();
            if t > horizon {
                break;
            }
            let key = bg_index;
            let (u, z) = noise.uniform_and_normals::<2>(Channel::BackgroundLocation, key)?;
            let centre = bg.centers[((u * bg.centers.len() as f64) as usize).min(bg.centers.len() - 1)];
            bg_index += 1;
            let step = -noise.uniform(Channel::BackgroundTime, bg_index)?.ln();
            bg_clock = bg_clock.map(|e| e + step);
            let mut jac = [[0.0; 4]; 3];
            jac[0][0] = -t;
            Pending {
                t,
                x: centre[0] + bg.sigma0 * z[0],
                y: centre[1] + bg.sigma0 * z[1],
                jac,
                ident: background_ident(key),
                parent_uid: None,
                seq: u64::MAX,
            }
        } else {
            let p = queue.pop().expect("peeked");
            if p.t > horizon {
                break;
            }
            p
        };

        let uid = output_of_uid.len();
        if uid >= MAX_PROCESSED {
            return Err(Error::NonTermination(format!(
                "more than {MAX_PROCESSED} events processed; the parameters are likely supercritical"
            )));
        }
        if bg.domain.contains(next.x, next.y) {
            let mut t = next.t;
            if let Some(last) = events.last() {
                // exact ties have probability zero but can appear through rounding
                if t <= last.t {
                    t = last.t.next_up();
                }
            }
            let ancestry = match next.parent_uid {
                None => Ancestry::Background,
                Some(p) => match output_of_uid[p] {
                    Some(j) => Ancestry::Offspring(j),
                    None => Ancestry::OffspringOfUnobserved,
                },
            };
            output_of_uid.push(Some(events.len()));
            events.push(Event { t, x: next.x, y: next.y, ancestry });
            jacobians.push(next.jac);
            if events.len() >= max_events {
                break;
            }
        } else {
            output_of_uid.push(None);
        }

        if offspring_mean > 0.0 {
            let u = noise.uniform(Channel::OffspringCount, next.ident)?;
            let count = poisson_quantile(u, offspring_mean);
            for c in 0..count {
                let ident = child_ident(next.ident, c);
                let delay = -noise.uniform(Channel::OffspringTime, ident)?.ln() / params.beta;
                let t = next.t + delay;
                if t > horizon {
                    continue;
                }
                let z = noise.normals::<2>(Channel::OffspringOffset, ident)?;
                let ox = sx * z[0];
                let oy = sy * z[1];
                let mut jac = next.jac;
                jac[0][2] -= delay;
                jac[1][3] += 0.5 * ox;
                jac[2][3] += 0.5 * oy;
                seq += 1;
                queue.push(Pending { t, x: next.x + ox, y: next.y + oy, jac, ident, parent_uid: Some(uid), seq });
            }
        }
    }

    let (stream_horizon, truncation) = match cfg.limit {
        Limit::Horizon(t) => (t, None),
        Limit::Count(n) => (events.last().map_or(0.0, |e| e.t), Some(n)),
    };
    let stream = EventStream { events, horizon: stream_horizon, truncation, retained: None };
    Ok(Traced { stream, jacobians })
}

pub fn simulate_stream(params: &ModelParams, bg: &BackgroundConfig, noise: &mut BaseNoise, cfg: &GenConfig) -> Result<EventStream> {
    simulate_traced(params, bg, noise, cfg).map(|t| t.stream)
}

/// Pathwise derivatives of every retained `(t, x, y)` with respect to the
/// log-parameters, with the branching structure frozen.
pub fn reparam_gradient(
    params: &ModelParams,
    bg: &BackgroundConfig,
    noise: &mut BaseNoise,
    cfg: &GenConfig,
) -> Result<Vec<EventJacobian>> {
    simulate_traced(params, bg, noise, cfg).map(|t| t.jacobians)
}

/// One stream per seed; output order follows `seeds`.
pub fn simulate_batch(params: &ModelParams, bg: &BackgroundConfig, seeds: &[u64], cfg: &GenConfig) -> Result<Vec<EventStream>> {
    seeds
        .par_iter()
        .map(|&seed| simulate_stream(params, bg, &mut BaseNoise::new(seed), cfg))
        .collect::<Vec<_>>()
        .into_iter()
        .enumerate()
        .map(|(index, r)| r.map_err(|e| Error::Stream { index, source: Box::new(e) }))
        .collect()
}

/// `cfg.batch_size` seeds derived from `base_seed`.
pub fn batch_seeds(base_seed: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| derive_seed(base_seed, &[i])).collect()
}

/// Simulates and then thins with `map`, using the thinning channel of the
/// same noise. Jacobians follow the retained events.
pub fn simulate_reported_traced(
    params: &ModelParams,
    bg: &BackgroundConfig,
    map: &RegionMap,
    seed: u64,
    cfg: &GenConfig,
) -> Result<Traced> {
    let mut noise = BaseNoise::new(seed);
    let traced = simulate_traced(params, bg, &mut noise, cfg)?;
    let keep = crate::thinning::retention_mask(&traced.stream, map, &mut noise)?;
    Ok(traced.select(&keep))
}

pub fn simulate_reported(
    params: &ModelParams,
    bg: &BackgroundConfig,
    map: &RegionMap,
    seed: u64,
    cfg: &GenConfig,
) -> Result<EventStream> {
    simulate_reported_traced(params, bg, map, seed, cfg).map(|t| t.stream)
}

/// Reported streams for a list of seeds; output order follows `seeds`.
pub fn simulate_reported_batch(
    params: &ModelParams,
    bg: &BackgroundConfig,
    map: &RegionMap,
    seeds: &[u64],
    cfg: &GenConfig,
) -> Result<Vec<EventStream>> {
    seeds
        .par_iter()
        .map(|&seed| simulate_reported(params, bg, map, seed, cfg))
        .collect::<Vec<_>>()
        .into_iter()
        .enumerate()
        .map(|(index, r)| r.map_err(|e| Error::Stream { index, source: Box::new(e) }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Rect;

    fn sample_mean_and_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    }

    #[test]
    fn poisson_quantile_matches_cdf() {
        assert_eq!(poisson_quantile(0.3, 0.0), 0);
        let m: f64 = 0.9425;
        let p0 = (-m).exp();
        assert_eq!(poisson_quantile(p0 * 0.999, m), 0);
        assert_eq!(poisson_quantile(p0 * 1.001, m), 1);
        assert_eq!(poisson_quantile(p0 * (1.0 + m) * 1.0001, m), 2);
        // large means stay finite and near the mean
        let k = poisson_quantile(0.5, 1000.0);
        assert!((990..=1010).contains(&k));
    }

    #[test]
    fn deterministic_under_seed() {
        let p = ModelParams::new(1.0, 3.0, 1.0, 0.01);
        let bg = BackgroundConfig::default();
        let cfg = GenConfig::horizon(20.0);
        let a = simulate_stream(&p, &bg, &mut BaseNoise::new(9), &cfg).unwrap();
        let b = simulate_stream(&p, &bg, &mut BaseNoise::new(9), &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.len() > 10);
        let c = simulate_stream(&p, &bg, &mut BaseNoise::new(10), &cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn output_is_sorted_and_inside_domain() {
        let p = ModelParams::new(2.0, 2.0, 1.0, 0.05);
        let bg = BackgroundConfig::default();
        for seed in 0..5 {
            let s = simulate_stream(&p, &bg, &mut BaseNoise::new(seed), &GenConfig::horizon(10.0)).unwrap();
            s.validate().unwrap();
            assert!(s.events.iter().all(|e| bg.domain.contains(e.x, e.y) && e.t <= 10.0));
            for (i, e) in s.events.iter().enumerate() {
                if let Ancestry::Offspring(j) = e.ancestry {
                    assert!(j < i);
                }
            }
        }
    }

    #[test]
    fn count_mode_returns_exactly_n() {
        let p = ModelParams::reference();
        let bg = BackgroundConfig::default();
        let s = simulate_stream(&p, &bg, &mut BaseNoise::new(1), &GenConfig::count(250)).unwrap();
        assert_eq!(s.len(), 250);
        assert_eq!(s.truncation, Some(250));
        assert_eq!(s.horizon, s.events[249].t);
        // supercritical parameters still terminate in count mode
        let hot = ModelParams::new(1.0, 40.0, 1.0, 0.05);
        assert!(!hot.is_subcritical());
        let s = simulate_stream(&hot, &bg, &mut BaseNoise::new(2), &GenConfig::count(300)).unwrap();
        assert_eq!(s.len(), 300);
        // nothing available: fewer than N
        let none = ModelParams::new(0.0, 3.0, 0.2, 0.01);
        let s = simulate_stream(&none, &bg, &mut BaseNoise::new(2), &GenConfig::count(10)).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn unbounded_horizon_is_rejected() {
        let p = ModelParams::reference();
        let err = simulate_stream(&p, &BackgroundConfig::default(), &mut BaseNoise::new(1), &GenConfig::horizon(f64::INFINITY))
            .unwrap_err();
        assert!(matches!(err, Error::NonTermination(_)));
    }

    #[test]
    fn exhausted_noise_is_an_error() {
        let p = ModelParams::reference();
        let err = simulate_stream(&p, &BackgroundConfig::default(), &mut BaseNoise::with_capacity(1, 50), &GenConfig::horizon(1.0))
            .unwrap_err();
        assert!(matches!(err, Error::NoiseExhausted { .. }));
    }

    #[test]
    fn background_only_mean_count() {
        let p = ModelParams::new(2.0, 0.0, 1.0, 0.01);
        let bg = BackgroundConfig::unbounded();
        let horizon = 3.0;
        let counts: Vec<f64> = batch_seeds(11, 1000)
            .iter()
            .map(|&s| simulate_stream(&p, &bg, &mut BaseNoise::new(s), &GenConfig::horizon(horizon)).unwrap().len() as f64)
            .collect();
        let (mean, se) = sample_mean_and_se(&counts);
        let expected = 14.0 * 2.0 * horizon;
        assert!((mean - expected).abs() < 3.0 * se, "mean {mean} expected {expected} se {se}");
    }

    #[test]
    fn batch_matches_single_streams() {
        let p = ModelParams::new(1.0, 3.0, 1.0, 0.01);
        let bg = BackgroundConfig::default();
        let cfg = GenConfig::horizon(5.0);
        let seeds = batch_seeds(3, 4);
        let batch = simulate_batch(&p, &bg, &seeds, &cfg).unwrap();
        for (s, seed) in batch.iter().zip(&seeds) {
            assert_eq!(s, &simulate_stream(&p, &bg, &mut BaseNoise::new(*seed), &cfg).unwrap());
        }
        let single = simulate_batch(&p, &bg, &seeds[..1], &cfg).unwrap();
        assert_eq!(single[0], batch[0]);
        for i in 0..batch.len() {
            for j in i + 1..batch.len() {
                assert_ne!(batch[i], batch[j]);
            }
        }
    }

    #[test]
    fn batch_errors_carry_index() {
        let p = ModelParams::new(1.0, 3.0, 1.0, 0.01);
        let bad = GenConfig::horizon(f64::INFINITY);
        let err = simulate_batch(&p, &BackgroundConfig::default(), &[1, 2], &bad).unwrap_err();
        assert!(matches!(err, Error::Stream { index: 0, .. }));
    }

    #[test]
    fn offset_gradient_is_half_the_offset() {
        // each child's x-derivative in log σ² is half its offset from the parent
        let p = ModelParams::new(0.05, 5.0, 1.0, 0.02);
        let bg = BackgroundConfig::unbounded();
        let traced = simulate_traced(&p, &bg, &mut BaseNoise::new(5), &GenConfig::horizon(50.0)).unwrap();
        let mut checked = 0;
        for (i, e) in traced.stream.events.iter().enumerate() {
            if let Ancestry::Offspring(j) = e.ancestry {
                let parent = traced.stream.events[j];
                let expected = 0.5 * (e.x - parent.x) + traced.jacobians[j][1][3];
                assert!((traced.jacobians[i][1][3] - expected).abs() < 1e-12);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn background_times_scale_with_mu() {
        let p = ModelParams::new(3.0, 0.0, 1.0, 0.01);
        let bg = BackgroundConfig::unbounded();
        let traced = simulate_traced(&p, &bg, &mut BaseNoise::new(4), &GenConfig::horizon(2.0)).unwrap();
        for (e, j) in traced.stream.events.iter().zip(&traced.jacobians) {
            assert_eq!(j[0][0], -e.t);
            assert_eq!(j[0][1..], [0.0; 3]);
        }
    }

    #[test]
    fn thinned_generation_keeps_jacobians_aligned() {
        let p = ModelParams::new(1.0, 3.0, 1.0, 0.01);
        let bg = BackgroundConfig::default();
        let map = RegionMap::uniform(0.5);
        let full = simulate_traced(&p, &bg, &mut BaseNoise::new(8), &GenConfig::count(80)).unwrap();
        let thinned = simulate_reported_traced(&p, &bg, &map, 8, &GenConfig::count(80)).unwrap();
        assert!(thinned.stream.len() < full.stream.len());
        assert_eq!(thinned.stream.len(), thinned.jacobians.len());
        for (e, j) in thinned.stream.events.iter().zip(&thinned.jacobians) {
            let k = full.stream.events.iter().position(|f| f.t == e.t).unwrap();
            assert_eq!(&full.jacobians[k], j);
        }
        let _ = Rect::everything();
    }
}
