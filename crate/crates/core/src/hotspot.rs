//! Grid evaluation: expected daily reported counts per cell, hotspot sets,
//! relative MAE and the robustness sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{fit_em, EmConfig};
use crate::generator::{batch_seeds, simulate_reported, simulate_reported_batch, GenConfig};
use crate::model::{default_domain, BackgroundConfig, EventStream, ModelParams, Rect};
use crate::noise::derive_seed;
use crate::thinning::RegionMap;
use crate::wgan::{train, RunStatus, TrainConfig};
use crate::{Error, Result};

/// `rows` split the x range, `cols` the y range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalGrid {
    pub rows: usize,
    pub cols: usize,
    pub bounds: Rect,
    pub t_eval: f64,
    pub n_mc: usize,
    /// Hotspot set size.
    pub k: usize,
}

impl Default for EvalGrid {
    fn default() -> Self {
        Self { rows: 7, cols: 16, bounds: default_domain(), t_eval: 7.0, n_mc: 100, k: 10 }
    }
}

impl EvalGrid {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config(format!("grid must be at least 1x1, got {}x{}", self.rows, self.cols)));
        }
        self.bounds.validate()?;
        if !self.bounds.is_bounded() {
            return Err(Error::Config("grid bounds must be finite".into()));
        }
        if !(self.t_eval > 0.0 && self.t_eval.is_finite()) {
            return Err(Error::Config(format!("t_eval must be positive and finite, got {}", self.t_eval)));
        }
        if self.n_mc == 0 {
            return Err(Error::Config("n_mc must be positive".into()));
        }
        if self.k > self.cells() {
            return Err(Error::Config(format!("k = {} exceeds the {} grid cells", self.k, self.cells())));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    fn edge(lo: f64, hi: f64, n: usize, i: usize) -> f64 {
        if i == n {
            hi
        } else {
            lo + (hi - lo) * i as f64 / n as f64
        }
    }

    /// Cell `(r, c)` as a rectangle; neighbours share edges exactly.
    pub fn cell_rect(&self, r: usize, c: usize) -> Rect {
        let b = &self.bounds;
        Rect::new(
            Self::edge(b.x_min, b.x_max, self.rows, r),
            Self::edge(b.x_min, b.x_max, self.rows, r + 1),
            Self::edge(b.y_min, b.y_max, self.cols, c),
            Self::edge(b.y_min, b.y_max, self.cols, c + 1),
        )
    }

    fn index_along(v: f64, lo: f64, hi: f64, n: usize) -> Option<usize> {
        if !(v >= lo && v <= hi) {
            return None;
        }
        let mut i = (((v - lo) / (hi - lo)) * n as f64).floor() as usize;
        i = i.min(n - 1);
        // floating point can put v on the wrong side of a computed edge
        while i > 0 && v < Self::edge(lo, hi, n, i) {
            i -= 1;
        }
        while i + 1 < n && v >= Self::edge(lo, hi, n, i + 1) {
            i += 1;
        }
        Some(i)
    }

    /// Row-major cell index of a point; the upper bounds are inclusive.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<usize> {
        let b = &self.bounds;
        let r = Self::index_along(x, b.x_min, b.x_max, self.rows)?;
        let c = Self::index_along(y, b.y_min, b.y_max, self.cols)?;
        Some(r * self.cols + c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    /// Row-major cell indices, highest mean first.
    pub cells: Vec<usize>,
    /// The k-th and (k+1)-th means are equal, so row-major order decided membership.
    pub tied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub rows: usize,
    pub cols: usize,
    /// Row-major expected daily reported counts.
    pub mean_counts: Vec<f64>,
    /// Monte Carlo standard errors of `mean_counts`.
    pub std_errors: Vec<f64>,
    pub hotspots: TopK,
    pub n_mc: usize,
    pub t_eval: f64,
}

impl GridSummary {
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.mean_counts[r * self.cols + c]
    }

    /// Mean counts as `rows` vectors of length `cols`.
    pub fn matrix(&self) -> Vec<Vec<f64>> {
        self.mean_counts.chunks(self.cols).map(<[f64]>::to_vec).collect()
    }
}

/// Daily reported counts per cell for one simulated stream.
pub fn cell_counts(stream: &EventStream, grid: &EvalGrid) -> Vec<f64> {
    let mut out = vec![0.0; grid.cells()];
    for e in &stream.events {
        if e.t <= grid.t_eval {
            if let Some(i) = grid.cell_of(e.x, e.y) {
                out[i] += 1.0;
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= grid.t_eval);
    out
}

/// Monte Carlo estimate of the expected daily reported count in every cell.
pub fn expected_counts(
    theta: &ModelParams,
    bg: &BackgroundConfig,
    map: &RegionMap,
    grid: &EvalGrid,
    seed: u64,
) -> Result<GridSummary> {
    grid.validate()?;
    theta.validate()?;
    map.validate()?;
    let gen = GenConfig::horizon(grid.t_eval);
    let per_rep: Vec<Vec<f64>> = batch_seeds(seed, grid.n_mc)
        .par_iter()
        .map(|&s| simulate_reported(theta, bg, map, s, &gen).map(|st| cell_counts(&st, grid)))
        .collect::<Result<_>>()?;
    let n = grid.n_mc as f64;
    let cells = grid.cells();
    let mut mean = vec![0.0; cells];
    for rep in &per_rep {
        for (m, v) in mean.iter_mut().zip(rep) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let std_errors = (0..cells)
        .map(|i| {
            if grid.n_mc < 2 {
                return f64::NAN;
            }
            let ss: f64 = per_rep.iter().map(|rep| (rep[i] - mean[i]).powi(2)).sum();
            (ss / (n - 1.0) / n).sqrt()
        })
        .collect();
    let hotspots = top_k_of(&mean, grid.k)?;
    Ok(GridSummary { rows: grid.rows, cols: grid.cols, mean_counts: mean, std_errors, hotspots, n_mc: grid.n_mc, t_eval: grid.t_eval })
}

fn top_k_of(values: &[f64], k: usize) -> Result<TopK> {
    if k > values.len() {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds the {} grid cells", values.len())));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let tied = k > 0 && k < values.len() && values[order[k - 1]] == values[order[k]];
    order.truncate(k);
    Ok(TopK { cells: order, tied })
}

/// The `k` cells with the largest means; ties go to the earlier cell in
/// row-major order.
pub fn top_k(summary: &GridSummary, k: usize) -> Result<TopK> {
    top_k_of(&summary.mean_counts, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mae {
    pub value: f64,
    pub used: usize,
    /// Cells dropped because their true mean is below the floor.
    pub excluded: usize,
}

pub const DEFAULT_MAE_FLOOR: f64 = 1e-3;

/// Mean of `|truth - est| / truth` over cells whose true mean is at least `floor`.
pub fn relative_mae(truth: &GridSummary, est: &GridSummary, floor: f64) -> Result<Mae> {
    if truth.rows != est.rows || truth.cols != est.cols {
        return Err(Error::Shape(format!(
            "grids differ: {}x{} vs {}x{}",
            truth.rows, truth.cols, est.rows, est.cols
        )));
    }
    let mut sum = 0.0;
    let mut used = 0;
    for (t, e) in truth.mean_counts.iter().zip(&est.mean_counts) {
        if *t >= floor && *t > 0.0 {
            sum += (t - e).abs() / t;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::InvalidArgument(format!("every cell has a true mean below {floor}")));
    }
    Ok(Mae { value: sum / used as f64, used, excluded: truth.mean_counts.len() - used })
}

/// Fraction of `truth` hotspots that also appear in `est`.
pub fn hotspot_accuracy(truth: &[usize], est: &[usize]) -> Result<f64> {
    if truth.len() != est.len() {
        return Err(Error::InvalidArgument(format!("hotspot sets differ in size: {} vs {}", truth.len(), est.len())));
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("hotspot sets are empty".into()));
    }
    let hits = truth.iter().filter(|c| est.contains(c)).count();
    Ok(hits as f64 / truth.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// Use `θ0` itself, isolating Monte Carlo noise.
    Bypass,
    Em(EmConfig),
    Wgan(TrainConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub estimator: Estimator,
    /// Training streams simulated per combination.
    pub n_train: usize,
    pub train_gen: GenConfig,
    pub grid: EvalGrid,
    pub mae_floor: f64,
    /// Estimator starting point as a multiple of `θ0`.
    pub init_factor: [f64; 4],
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            estimator: Estimator::Bypass,
            n_train: 50,
            train_gen: GenConfig::horizon(7.0),
            grid: EvalGrid::default(),
            mae_floor: DEFAULT_MAE_FLOOR,
            init_factor: [1.0; 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub theta0: ModelParams,
    pub theta_hat: ModelParams,
    pub accuracy: f64,
    pub mae: Mae,
    pub truth_tied: bool,
    pub est_tied: bool,
}

/// `{95, 100, 105} × {2, 3, 4} × {0.1, 0.2, 0.3} × {0.1²}`.
pub fn default_sweep_grid() -> Vec<ModelParams> {
    let mut out = Vec::with_capacity(27);
    for mu in [95.0, 100.0, 105.0] {
        for alpha in [2.0, 3.0, 4.0] {
            for beta in [0.1, 0.2, 0.3] {
                out.push(ModelParams::new(mu, alpha, beta, 0.01));
            }
        }
    }
    out
}

fn estimate(theta0: &ModelParams, data: &[EventStream], bg: &BackgroundConfig, map: &RegionMap, cfg: &SweepConfig, seed: u64) -> Result<ModelParams> {
    let f = cfg.init_factor;
    let init = ModelParams {
        mu: theta0.mu * f[0],
        alpha: theta0.alpha * f[1],
        beta: theta0.beta * f[2],
        sigma_sq: theta0.sigma_sq * f[3],
        axis_sq: theta0.axis_sq.map(|[a, b]| [a * f[3], b * f[3]]),
    };
    match &cfg.estimator {
        Estimator::Bypass => Ok(*theta0),
        Estimator::Em(em) => fit_em(data, &init, bg, em).map(|fit| fit.params),
        Estimator::Wgan(tc) => {
            let run = train(data, &init, bg, map, tc, seed)?;
            match run.status {
                RunStatus::Diverged(why) => Err(Error::Numerical(format!("WGAN training diverged: {why}"))),
                _ => Ok(run.theta_hat),
            }
        }
    }
}

const SWEEP_DATA: u64 = 1;
const SWEEP_FIT: u64 = 2;
const SWEEP_TRUTH: u64 = 3;
const SWEEP_EST: u64 = 4;

/// Generate, thin, estimate and evaluate for every `θ0` in `thetas`.
pub fn robustness_sweep(
    thetas: &[ModelParams],
    bg: &BackgroundConfig,
    map: &RegionMap,
    cfg: &SweepConfig,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    cfg.grid.validate()?;
    if cfg.grid.k == 0 {
        return Err(Error::Config("hotspot k must be positive for a sweep".into()));
    }
    thetas
        .iter()
        .enumerate()
        .map(|(i, theta0)| {
            let i = i as u64;
            let theta_hat = match cfg.estimator {
                Estimator::Bypass => *theta0,
                _ => {
                    let seeds = batch_seeds(derive_seed(seed, &[i, SWEEP_DATA]), cfg.n_train);
                    let data = simulate_reported_batch(theta0, bg, map, &seeds, &cfg.train_gen)?;
                    estimate(theta0, &data, bg, map, cfg, derive_seed(seed, &[i, SWEEP_FIT]))?
                }
            };
            let truth = expected_counts(theta0, bg, map, &cfg.grid, derive_seed(seed, &[i, SWEEP_TRUTH]))?;
            let est = expected_counts(&theta_hat, bg, map, &cfg.grid, derive_seed(seed, &[i, SWEEP_EST]))?;
            Ok(SweepRow {
                theta0: *theta0,
                theta_hat,
                accuracy: hotspot_accuracy(&truth.hotspots.cells, &est.hotspots.cells)?,
                mae: relative_mae(&truth, &est, cfg.mae_floor)?,
                truth_tied: truth.hotspots.tied,
                est_tied: est.hotspots.tied,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::background_intensity;
    use proptest::prelude::*;

    fn summary(values: Vec<f64>, rows: usize, cols: usize) -> GridSummary {
        let n = values.len();
        GridSummary {
            rows,
            cols,
            std_errors: vec![0.0; n],
            hotspots: top_k_of(&values, 0).unwrap(),
            mean_counts: values,
            n_mc: 1,
            t_eval: 1.0,
        }
    }

    #[test]
    fn cells_tile_the_domain() {
        let g = EvalGrid::default();
        let mut area = 0.0;
        for r in 0..g.rows {
            for c in 0..g.cols {
                let rect = g.cell_rect(r, c);
                area += rect.width() * rect.height();
                let (mx, my) = ((rect.x_min + rect.x_max) / 2.0, (rect.y_min + rect.y_max) / 2.0);
                assert_eq!(g.cell_of(mx, my), Some(r * g.cols + c));
                assert_eq!(g.cell_of(rect.x_min, rect.y_min), Some(r * g.cols + c));
            }
        }
        assert!((area - 21.0 * 72.0).abs() < 1e-9);
        assert_eq!(g.cell_of(10.5, 36.0), Some(g.cells() - 1));
        assert_eq!(g.cell_of(10.6, 0.0), None);
        assert!((g.cell_rect(0, 0).width() - 3.0).abs() < 1e-12);
        assert!((g.cell_rect(0, 0).height() - 4.5).abs() < 1e-12);
    }

    #[test]
    fn background_only_matches_quadrature() {
        let theta = ModelParams::new(2.0, 0.0, 1.0, 0.01);
        let bg = BackgroundConfig::default();
        let grid = EvalGrid { n_mc: 400, ..EvalGrid::default() };
        let s = expected_counts(&theta, &bg, &RegionMap::uniform(1.0), &grid, 3).unwrap();
        let mut worst: f64 = 0.0;
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                // midpoint rule on a 60x60 sub-grid of the cell
                let rect = grid.cell_rect(r, c);
                let m = 60;
                let (hx, hy) = (rect.width() / m as f64, rect.height() / m as f64);
                let mut q = 0.0;
                for i in 0..m {
                    for j in 0..m {
                        let p = [rect.x_min + (i as f64 + 0.5) * hx, rect.y_min + (j as f64 + 0.5) * hy];
                        q += background_intensity(p, theta.mu, &bg) * hx * hy;
                    }
                }
                let z = (s.at(r, c) - q).abs() / s.std_errors[r * grid.cols + c].max(1e-9);
                worst = worst.max(z);
                assert!(z < 4.5, "cell ({r},{c}): {} vs {q}", s.at(r, c));
            }
        }
        assert!(worst > 0.0);
    }

    #[test]
    fn zero_rates_give_zero_grid() {
        let s = expected_counts(
            &ModelParams::new(5.0, 1.0, 1.0, 0.01),
            &BackgroundConfig::default(),
            &RegionMap::uniform(0.0),
            &EvalGrid { n_mc: 5, ..EvalGrid::default() },
            1,
        )
        .unwrap();
        assert!(s.mean_counts.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fixed_seed_is_reproducible_and_conserves_mass() {
        let theta = ModelParams::new(3.0, 1.0, 1.0, 0.05);
        let bg = BackgroundConfig::default();
        let map = RegionMap::uniform(0.6);
        let grid = EvalGrid { n_mc: 20, ..EvalGrid::default() };
        let a = expected_counts(&theta, &bg, &map, &grid, 8).unwrap();
        let b = expected_counts(&theta, &bg, &map, &grid, 8).unwrap();
        assert_eq!(a, b);
        let total: f64 = batch_seeds(8, 20)
            .iter()
            .map(|&s| simulate_reported(&theta, &bg, &map, s, &GenConfig::horizon(7.0)).unwrap().len() as f64)
            .sum::<f64>()
            / 20.0;
        let grid_total: f64 = a.mean_counts.iter().sum::<f64>() * 7.0;
        assert!((grid_total - total).abs() < 1e-9);
    }

    #[test]
    fn top_k_examples() {
        let s = summary(vec![3.0, 1.0, 4.0, 1.5, 9.0, 2.6], 2, 3);
        assert_eq!(top_k(&s, 6).unwrap().cells.len(), 6);
        assert!(top_k(&s, 0).unwrap().cells.is_empty());
        assert!(top_k(&s, 7).is_err());
        assert_eq!(top_k(&s, 3).unwrap(), TopK { cells: vec![4, 2, 0], tied: false });
        let tie = summary(vec![1.0, 2.0, 2.0, 0.0], 2, 2);
        assert_eq!(top_k(&tie, 1).unwrap(), TopK { cells: vec![1], tied: true });
    }

    #[test]
    fn mae_and_accuracy_examples() {
        let t = summary(vec![1.0, 2.0, 0.0, 4.0], 2, 2);
        let e = summary(t.mean_counts.iter().map(|v| v * 1.1).collect(), 2, 2);
        assert_eq!(relative_mae(&t, &t, 1e-3).unwrap().value, 0.0);
        let m = relative_mae(&t, &e, 1e-3).unwrap();
        assert!((m.value - 0.1).abs() < 1e-12);
        assert_eq!(m.excluded, 1);
        assert!(relative_mae(&summary(vec![0.0; 4], 2, 2), &t, 1e-3).is_err());
        assert!(relative_mae(&t, &summary(vec![0.0; 3], 1, 3), 1e-3).is_err());

        assert_eq!(hotspot_accuracy(&[1, 2, 3], &[3, 2, 1]).unwrap(), 1.0);
        assert_eq!(hotspot_accuracy(&[1, 2, 3], &[4, 5, 6]).unwrap(), 0.0);
        let a: Vec<usize> = (0..10).collect();
        let b: Vec<usize> = (2..12).collect();
        assert_eq!(hotspot_accuracy(&a, &b).unwrap(), 0.8);
        assert!(hotspot_accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn single_combination_sweep() {
        let cfg = SweepConfig { grid: EvalGrid { n_mc: 4, ..EvalGrid::default() }, ..SweepConfig::default() };
        let rows = robustness_sweep(
            &[ModelParams::new(5.0, 1.0, 1.0, 0.01)],
            &BackgroundConfig::default(),
            &RegionMap::uniform(0.5),
            &cfg,
            2,
        )
        .unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].theta_hat, rows[0].theta0);
        assert_eq!(default_sweep_grid().len(), 27);
    }

    #[test]
    fn em_sweep_runs() {
        let cfg = SweepConfig {
            estimator: Estimator::Em(EmConfig { max_iters: 20, ..EmConfig::default() }),
            n_train: 5,
            train_gen: GenConfig::horizon(5.0),
            grid: EvalGrid { n_mc: 3, ..EvalGrid::default() },
            ..SweepConfig::default()
        };
        let rows = robustness_sweep(
            &[ModelParams::new(5.0, 1.0, 1.0, 0.01)],
            &BackgroundConfig::default(),
            &RegionMap::uniform(1.0),
            &cfg,
            2,
        )
        .unwrap();
        assert!(rows[0].theta_hat.mu > 0.0);
        assert!((0.0..=1.0).contains(&rows[0].accuracy));
    }

    proptest! {
        #[test]
        fn top_k_invariances(values in proptest::collection::vec(0.0f64..100.0, 12), k in 0usize..=12, seed in any::<u64>()) {
            let base = top_k_of(&values, k).unwrap();
            let transformed: Vec<f64> = values.iter().map(|v| (v * 0.3).exp() + 2.0).collect();
            prop_assert_eq!(&top_k_of(&transformed, k).unwrap().cells, &base.cells);

            // permuting cells permutes the answer when there are no ties
            let mut perm: Vec<usize> = (0..values.len()).collect();
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let permuted: Vec<f64> = perm.iter().map(|&i| values[i]).collect();
            let got = top_k_of(&permuted, k).unwrap();
            if !base.tied {
                let mut mapped: Vec<usize> = got.cells.iter().map(|&i| perm[i]).collect();
                let mut want = base.cells.clone();
                mapped.sort();
                want.sort();
                prop_assert_eq!(mapped, want);
            }
        }

        #[test]
        fn mae_of_self_is_zero(values in proptest::collection::vec(0.0f64..10.0, 1..40)) {
            let n = values.len();
            let mut v = values;
            v[0] = 1.0;
            let s = summary(v, 1, n);
            prop_assert_eq!(relative_mae(&s, &s, DEFAULT_MAE_FLOOR).unwrap().value, 0.0);
        }
    }
}
