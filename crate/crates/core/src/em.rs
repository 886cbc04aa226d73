//! EM estimation over the latent branching structure.
//!
//! Streams are treated as complete observations. The E-step computes the
//! posterior probability that each event is background or was triggered by
//! a given earlier event; the M-step maximises the expected complete-data
//! log-likelihood
//!
//! ```text
//! Q = S_bg log μ - μ T Ĩ + S log α - β W - D / 2σ² - α B(σ²) G(β)
//! ```
//!
//! where `S_bg` and `S` are the expected background and triggered counts,
//! `W` the weighted delays, `D` the weighted squared offsets, `Ĩ` the
//! background mass inside the domain, `B = 2πσ²` and
//! `G(β) = Σ_j (1 - e^{-β τ_j}) / β` with `τ_j` the time from event `j` to its
//! stream's horizon. Everything except `β` has a closed form; `β` solves a
//! concave 1-D problem by bisection on the derivative.
//!
//! Candidate parents whose kernel exponent `β Δt + ‖Δ‖² / 2σ²` exceeds 50 in
//! either factor are skipped; their share of the intensity is below `e^{-50}`.

use std::collections::HashMap;
use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{background_intensity, kernel_unchecked, BackgroundConfig, EventStream, ModelParams};
use crate::{Error, Result};

const CUTOFF_LOG: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop when every parameter moves by less than this relative amount.
    pub tol: f64,
    /// Estimate `σx²` and `σy²` separately.
    #[serde(default)]
    pub anisotropic: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { max_iters: 200, tol: 1e-6, anisotropic: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponsibilityRow {
    pub background: f64,
    /// `(j, P(parent = j))` for the earlier events within the cutoff.
    pub parents: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Responsibilities {
    pub rows: Vec<ResponsibilityRow>,
}

impl Responsibilities {
    /// Posterior parent probability as a dense lookup (0 outside the cutoff).
    pub fn parent_prob(&self, i: usize, j: usize) -> f64 {
        self.rows[i].parents.iter().find(|(k, _)| *k == j).map_or(0.0, |(_, p)| *p)
    }
}

/// Candidate-parent search on a square grid with cell size equal to the cutoff.
struct NeighbourGrid {
    cell: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl NeighbourGrid {
    fn new(stream: &EventStream, cutoff: f64) -> Self {
        let cell = if cutoff.is_finite() && cutoff > 0.0 { cutoff } else { f64::INFINITY };
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, e) in stream.events.iter().enumerate() {
            cells.entry(Self::key(cell, e.x, e.y)).or_default().push(i);
        }
        Self { cell, cells }
    }

    fn key(cell: f64, x: f64, y: f64) -> (i64, i64) {
        if cell.is_infinite() {
            (0, 0)
        } else {
            ((x / cell).floor() as i64, (y / cell).floor() as i64)
        }
    }

    /// Calls `f(j)` for every `j < i` with `t_j ≥ t_min` in the 3 × 3 block
    /// around `(x, y)`.
    fn for_each_before(&self, stream: &EventStream, i: usize, t_min: f64, x: f64, y: f64, mut f: impl FnMut(usize)) {
        let (cx, cy) = Self::key(self.cell, x, y);
        let span = if self.cell.is_infinite() { 0 } else { 1 };
        for gx in cx - span..=cx + span {
            for gy in cy - span..=cy + span {
                if let Some(list) = self.cells.get(&(gx, gy)) {
                    let end = list.partition_point(|&j| j < i);
                    let start = list[..end].partition_point(|&j| stream.events[j].t < t_min);
                    list[start..end].iter().for_each(|&j| f(j));
                }
            }
        }
    }
}

fn cutoff_radius(params: &ModelParams) -> f64 {
    let [vx, vy] = params.variances();
    (2.0 * CUTOFF_LOG * vx.max(vy)).sqrt()
}

/// Runs `visit(i, background_weight, parent_weights, λ_i)` for every event.
fn for_each_event(
    stream: &EventStream,
    params: &ModelParams,
    bg: &BackgroundConfig,
    mut visit: impl FnMut(usize, f64, &[(usize, f64)], f64),
) -> Result<()> {
    let grid = NeighbourGrid::new(stream, cutoff_radius(params));
    let r2 = cutoff_radius(params).powi(2);
    let window = CUTOFF_LOG / params.beta;
    let mut parents: Vec<(usize, f64)> = Vec::new();
    for (i, e) in stream.events.iter().enumerate() {
        parents.clear();
        let base = background_intensity([e.x, e.y], params.mu, bg);
        let mut total = base;
        if params.alpha > 0.0 {
            grid.for_each_before(stream, i, e.t - window, e.x, e.y, |j| {
                let p = stream.events[j];
                let (dx, dy) = (e.x - p.x, e.y - p.y);
                if dx * dx + dy * dy <= r2 {
                    let g = kernel_unchecked(e.t - p.t, dx, dy, params);
                    if g > 0.0 {
                        parents.push((j, g));
                        total += g;
                    }
                }
            });
        }
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::Numerical(format!("intensity at event {i} is {total}")));
        }
        parents.sort_unstable_by_key(|p| p.0);
        visit(i, base, &parents, total);
    }
    Ok(())
}

/// Posterior parentage for one stream.
pub fn e_step(stream: &EventStream, params: &ModelParams, bg: &BackgroundConfig) -> Result<Responsibilities> {
    stream.validate()?;
    params.validate()?;
    let mut rows = Vec::with_capacity(stream.len());
    for_each_event(stream, params, bg, |_, base, parents, total| {
        rows.push(ResponsibilityRow {
            background: base / total,
            parents: parents.iter().map(|&(j, g)| (j, g / total)).collect(),
        });
    })?;
    Ok(Responsibilities { rows })
}

/// Sufficient statistics of the expected complete-data log-likelihood.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SuffStats {
    pub background: f64,
    pub triggered: f64,
    pub sq_dx: f64,
    pub sq_dy: f64,
    pub delay: f64,
    /// Σ horizons.
    pub time: f64,
    /// Time from each event to its stream's horizon.
    pub tails: Vec<f64>,
    /// Σ log λ_i at the parameters the responsibilities came from.
    pub log_intensity: f64,
}

impl SuffStats {
    fn merge(mut self, other: SuffStats) -> SuffStats {
        self.background += other.background;
        self.triggered += other.triggered;
        self.sq_dx += other.sq_dx;
        self.sq_dy += other.sq_dy;
        self.delay += other.delay;
        self.time += other.time;
        self.tails.extend(other.tails);
        self.log_intensity += other.log_intensity;
        self
    }

    fn add_event(&mut self, stream: &EventStream, i: usize, background: f64, parents: impl Iterator<Item = (usize, f64)>) {
        let e = stream.events[i];
        self.background += background;
        for (j, p) in parents {
            let q = stream.events[j];
            self.triggered += p;
            self.sq_dx += p * (e.x - q.x).powi(2);
            self.sq_dy += p * (e.y - q.y).powi(2);
            self.delay += p * (e.t - q.t);
        }
        self.tails.push(stream.horizon - e.t);
    }
}

fn stream_stats(stream: &EventStream, params: &ModelParams, bg: &BackgroundConfig) -> Result<SuffStats> {
    let mut s = SuffStats { time: stream.horizon, ..SuffStats::default() };
    for_each_event(stream, params, bg, |i, base, parents, total| {
        s.add_event(stream, i, base / total, parents.iter().map(|&(j, g)| (j, g / total)));
        s.log_intensity += total.ln();
    })?;
    Ok(s)
}

fn collect_stats(streams: &[EventStream], params: &ModelParams, bg: &BackgroundConfig) -> Result<SuffStats> {
    streams
        .par_iter()
        .enumerate()
        .map(|(index, s)| stream_stats(s, params, bg).map_err(|e| Error::Stream { index, source: Box::new(e) }))
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().fold(SuffStats::default(), SuffStats::merge))
}

/// `h(β) = Σ (1 - e^{-β τ})` and `h'(β) = Σ τ e^{-β τ}`.
fn tail_sums(tails: &[f64], beta: f64) -> (f64, f64) {
    tails.iter().fold((0.0, 0.0), |(h, dh), &tau| (h - (-beta * tau).exp_m1(), dh + tau * (-beta * tau).exp()))
}

/// Σ_j (α/β)(1 - e^{-β τ_j}) B.
fn triggered_compensator(tails: &[f64], params: &ModelParams) -> f64 {
    if params.alpha == 0.0 {
        return 0.0;
    }
    params.theta() * params.spatial_mass() * tail_sums(tails, params.beta).0
}

pub const BETA_RANGE: [f64; 2] = [1e-12, 1e12];

/// Maximiser of `-S log G(β) - β W` over [`BETA_RANGE`]. A slope that keeps
/// its sign across the range gives the nearer endpoint; `None` only for
/// non-finite inputs.
pub fn solve_beta(triggered: f64, delay: f64, tails: &[f64]) -> Option<f64> {
    // derivative S/β - S h'/h - W, decreasing in β
    let slope = |beta: f64| {
        let (h, dh) = tail_sums(tails, beta);
        triggered / beta - triggered * dh / h - delay
    };
    let (mut lo, mut hi) = (BETA_RANGE[0].ln(), BETA_RANGE[1].ln());
    let (s_lo, s_hi) = (slope(lo.exp()), slope(hi.exp()));
    if s_lo.is_nan() || s_hi.is_nan() {
        return None;
    }
    if s_lo <= 0.0 {
        return Some(BETA_RANGE[0]);
    }
    if s_hi >= 0.0 {
        return Some(BETA_RANGE[1]);
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if slope(mid.exp()) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some((0.5 * (lo + hi)).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MStep {
    pub params: ModelParams,
    /// Set when the `β` update failed; `params` are then the previous ones.
    pub flagged: bool,
}

fn m_step_from_stats(stats: &SuffStats, current: &ModelParams, bg: &BackgroundConfig, cfg: &EmConfig) -> MStep {
    let kept = MStep { params: *current, flagged: true };
    let mass = stats.time * bg.domain_weight();
    let mu = if mass > 0.0 { stats.background / mass } else { current.mu };
    let s = stats.triggered;
    if !(s > 0.0) {
        // no triggered mass: the α update goes to zero, the kernel shape is unidentified
        let mut p = *current;
        p.mu = mu;
        p.alpha = 0.0;
        return MStep { params: p, flagged: false };
    }
    let Some(beta) = solve_beta(s, stats.delay, &stats.tails) else {
        return kept;
    };
    let g = tail_sums(&stats.tails, beta).0 / beta;
    let params = if cfg.anisotropic {
        let (vx, vy) = (stats.sq_dx / s, stats.sq_dy / s);
        let alpha = s / (2.0 * PI * (vx * vy).sqrt() * g);
        ModelParams::anisotropic(mu, alpha, beta, vx, vy)
    } else {
        let v = (stats.sq_dx + stats.sq_dy) / (2.0 * s);
        ModelParams::new(mu, s / (2.0 * PI * v * g), beta, v)
    };
    if params.validate_positive().is_err() {
        return kept;
    }
    MStep { params, flagged: false }
}

/// M-step from explicit responsibilities (one per stream).
pub fn m_step(
    streams: &[EventStream],
    responsibilities: &[Responsibilities],
    current: &ModelParams,
    bg: &BackgroundConfig,
    cfg: &EmConfig,
) -> Result<MStep> {
    if streams.len() != responsibilities.len() {
        return Err(Error::Shape(format!("{} streams but {} responsibility sets", streams.len(), responsibilities.len())));
    }
    let mut stats = SuffStats::default();
    for (s, r) in streams.iter().zip(responsibilities) {
        if r.rows.len() != s.len() {
            return Err(Error::Shape("responsibility rows do not match the stream".into()));
        }
        stats.time += s.horizon;
        for (i, row) in r.rows.iter().enumerate() {
            stats.add_event(s, i, row.background, row.parents.iter().copied());
        }
    }
    Ok(m_step_from_stats(&stats, current, bg, cfg))
}

/// Observed-data log-likelihood
/// `Σ log λ_i - μ T Ĩ - Σ_j (α/β)(1 - e^{-β τ_j}) B`, summed over streams.
pub fn log_likelihood(streams: &[EventStream], params: &ModelParams, bg: &BackgroundConfig) -> Result<f64> {
    let stats = collect_stats(streams, params, bg)?;
    Ok(log_likelihood_from(&stats, params, bg))
}

fn log_likelihood_from(stats: &SuffStats, params: &ModelParams, bg: &BackgroundConfig) -> f64 {
    stats.log_intensity - params.mu * stats.time * bg.domain_weight() - triggered_compensator(&stats.tails, params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmIteration {
    pub params: ModelParams,
    pub log_likelihood: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmFit {
    pub params: ModelParams,
    pub converged: bool,
    /// One entry per visited parameter value, starting with `init`.
    pub trace: Vec<EmIteration>,
}

pub fn fit_em(streams: &[EventStream], init: &ModelParams, bg: &BackgroundConfig, cfg: &EmConfig) -> Result<EmFit> {
    if streams.is_empty() {
        return Err(Error::InvalidArgument("EM needs at least one stream".into()));
    }
    for (index, s) in streams.iter().enumerate() {
        s.validate().map_err(|e| Error::Stream { index, source: Box::new(e) })?;
    }
    init.validate_positive()?;
    bg.validate()?;
    if !(cfg.tol >= 0.0) {
        return Err(Error::Config(format!("tolerance {} must be non-negative", cfg.tol)));
    }

    let mut params = *init;
    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        let stats = collect_stats(streams, &params, bg)?;
        let ll = log_likelihood_from(&stats, &params, bg);
        let step = m_step_from_stats(&stats, &params, bg, cfg);
        trace.push(EmIteration { params, log_likelihood: ll, flagged: step.flagged });
        if step.flagged {
            break;
        }
        let change = relative_change(&params, &step.params);
        params = step.params;
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    let ll = log_likelihood(streams, &params, bg)?;
    trace.push(EmIteration { params, log_likelihood: ll, flagged: false });
    Ok(EmFit { params, converged, trace })
}

fn relative_change(a: &ModelParams, b: &ModelParams) -> f64 {
    let av = [a.mu, a.alpha, a.beta, a.variances()[0], a.variances()[1]];
    let bv = [b.mu, b.alpha, b.beta, b.variances()[0], b.variances()[1]];
    av.iter()
        .zip(&bv)
        .map(|(x, y)| if *x == 0.0 { (y - x).abs() } else { ((y - x) / x).abs() })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{simulate_batch, GenConfig};
    use crate::model::{Ancestry, Event};

    fn bg() -> BackgroundConfig {
        BackgroundConfig::default()
    }

    #[test]
    fn single_event_is_background() {
        let s = EventStream::new(vec![Event::new(0.5, 0.0, 1.0)], 1.0);
        let r = e_step(&s, &ModelParams::reference(), &bg()).unwrap();
        assert_eq!(r.rows[0].background, 1.0);
        assert!(r.rows[0].parents.is_empty());
    }

    #[test]
    fn two_event_hand_oracle() {
        let p = ModelParams::new(2.0, 3.0, 0.5, 0.04);
        let s = EventStream::new(vec![Event::new(0.2, 1.0, 2.0), Event::new(0.7, 1.1, 2.15)], 1.0);
        let r = e_step(&s, &p, &bg()).unwrap();
        let g = 3.0 * (-0.5f64 * 0.5).exp() * (-(0.01f64 + 0.0225) / (2.0 * 0.04)).exp();
        let m = background_intensity([1.1, 2.15], 2.0, &bg());
        assert!((r.parent_prob(1, 0) - g / (m + g)).abs() < 1e-14);
        assert!((r.rows[1].background + r.parent_prob(1, 0) - 1.0).abs() < 1e-14);
        let none = e_step(&s, &ModelParams::new(2.0, 0.0, 0.5, 0.04), &bg()).unwrap();
        assert!(none.rows.iter().all(|row| row.background == 1.0));
    }

    #[test]
    fn rows_sum_to_one() {
        let p = ModelParams::new(1.0, 3.0, 1.0, 0.05);
        let streams = simulate_batch(&p, &bg(), &[1, 2, 3], &GenConfig::horizon(8.0)).unwrap();
        for s in &streams {
            let r = e_step(s, &p, &bg()).unwrap();
            for row in &r.rows {
                let total = row.background + row.parents.iter().map(|x| x.1).sum::<f64>();
                assert!((total - 1.0).abs() < 1e-12);
                assert!(row.background >= 0.0 && row.parents.iter().all(|x| x.1 >= 0.0));
            }
        }
    }

    #[test]
    fn all_background_update() {
        let s = EventStream::new(vec![Event::new(0.2, 0.0, 0.0), Event::new(0.9, 3.0, 1.0)], 2.0);
        let r = Responsibilities {
            rows: vec![
                ResponsibilityRow { background: 1.0, parents: vec![] },
                ResponsibilityRow { background: 1.0, parents: vec![(0, 0.0)] },
            ],
        };
        let cur = ModelParams::reference();
        let m = m_step(&[s], &[r], &cur, &bg(), &EmConfig::default()).unwrap();
        assert_eq!(m.params.alpha, 0.0);
        assert!((m.params.mu - 2.0 / (2.0 * bg().domain_weight())).abs() < 1e-12);
    }

    #[test]
    fn beta_matches_grid_search() {
        // 20 events with hand-picked triggered mass and delays
        let tails: Vec<f64> = (0..20).map(|i| 0.3 + 0.37 * i as f64).collect();
        let (s, w) = (6.5, 9.1);
        let beta = solve_beta(s, w, &tails).unwrap();
        let objective = |b: f64| -s * (tail_sums(&tails, b).0 / b).ln() - b * w;
        let mut best = (f64::NEG_INFINITY, 0.0);
        for k in 0..200_000 {
            let b = 1e-3 + k as f64 * 5e-5;
            let v = objective(b);
            if v > best.0 {
                best = (v, b);
            }
        }
        assert!(((beta - best.1) / best.1).abs() < 5e-4, "{beta} vs {}", best.1);
    }

    #[test]
    fn one_iteration_increases_likelihood() {
        let truth = ModelParams::new(1.0, 3.0, 1.0, 0.05);
        let streams = simulate_batch(&truth, &bg(), &[4, 5, 6, 7], &GenConfig::horizon(10.0)).unwrap();
        let start = ModelParams::new(2.0, 1.0, 0.5, 0.1);
        let fit = fit_em(&streams, &start, &bg(), &EmConfig { max_iters: 1, tol: 0.0, anisotropic: false }).unwrap();
        assert_eq!(fit.trace.len(), 2);
        assert!(fit.trace[1].log_likelihood > fit.trace[0].log_likelihood);
        let direct = log_likelihood(&streams, &start, &bg()).unwrap();
        assert!((direct - fit.trace[0].log_likelihood).abs() < 1e-9 * direct.abs());
    }

    #[test]
    fn likelihood_matches_direct_summation() {
        let p = ModelParams::new(1.0, 3.0, 1.0, 0.05);
        let streams = simulate_batch(&p, &bg(), &[21], &GenConfig::horizon(6.0)).unwrap();
        let s = &streams[0];
        let mut direct = 0.0;
        for e in &s.events {
            direct += crate::model::conditional_intensity(e.t, [e.x, e.y], s, &p, &bg()).ln();
        }
        direct -= p.mu * s.horizon * bg().domain_weight();
        for e in &s.events {
            direct -= p.theta() * p.spatial_mass() * (1.0 - (-p.beta * (s.horizon - e.t)).exp());
        }
        let ll = log_likelihood(&streams, &p, &bg()).unwrap();
        assert!((ll - direct).abs() < 1e-9 * direct.abs());
    }

    #[test]
    fn true_parents_get_more_mass() {
        let p = ModelParams::new(0.5, 4.0, 1.0, 0.05);
        let streams = simulate_batch(&p, &bg(), &(0..20).collect::<Vec<_>>(), &GenConfig::horizon(15.0)).unwrap();
        let (mut true_mass, mut prev_mass, mut n) = (0.0, 0.0, 0);
        for s in &streams {
            let r = e_step(s, &p, &bg()).unwrap();
            for (i, e) in s.events.iter().enumerate() {
                match e.ancestry {
                    Ancestry::Offspring(j) => {
                        true_mass += r.parent_prob(i, j);
                        // baseline: the immediately preceding event
                        prev_mass += r.parent_prob(i, i - 1);
                        n += 1;
                    }
                    Ancestry::Background => {
                        true_mass += r.rows[i].background;
                        prev_mass += if i > 0 { r.parent_prob(i, i - 1) } else { 0.0 };
                        n += 1;
                    }
                    _ => {}
                }
            }
        }
        assert!(n >= 1000, "{n}");
        assert!(true_mass > prev_mass);
    }

    #[test]
    fn invalid_inputs() {
        assert!(fit_em(&[], &ModelParams::reference(), &bg(), &EmConfig::default()).is_err());
        let s = EventStream::new(vec![Event::new(0.5, 0.0, 0.0)], 1.0);
        let zero_mu = ModelParams::new(0.0, 1.0, 1.0, 0.01);
        assert!(fit_em(&[s], &zero_mu, &bg(), &EmConfig::default()).is_err());
    }

    #[test]
    fn monotone_on_small_fixture() {
        let truth = ModelParams::new(1.0, 3.0, 1.0, 0.05);
        let streams = simulate_batch(&truth, &bg(), &[8, 9], &GenConfig::horizon(10.0)).unwrap();
        let fit = fit_em(&streams, &ModelParams::new(0.3, 6.0, 3.0, 0.02), &bg(), &EmConfig { max_iters: 30, tol: 0.0, anisotropic: true })
            .unwrap();
        for w in fit.trace.windows(2) {
            assert!(w[1].log_likelihood >= w[0].log_likelihood - 1e-8);
        }
    }
}
