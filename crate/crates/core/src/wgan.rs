//! WGAN-GP estimation of the Hawkes parameters.
//!
//! Each epoch generates `L` reported fake streams at the current `θ`, runs
//! `n_critic` Adam updates of the critic on
//!
//! ```text
//! mean f_w(fake) - mean f_w(real) + λ mean (‖∇ f_w(x̂)‖ - 1)²
//! ```
//!
//! with a fresh real batch and fresh interpolation weights per update, then
//! takes one Adam step on `log θ` that descends `-mean f_w(g_θ(z))` using the
//! generator's pathwise Jacobians. Only coordinates marked free move.
//!
//! Every random choice of epoch `e` is derived from `(seed, e)`, so a run
//! resumed from a [`TrainState`] checkpoint continues exactly as if it had
//! never stopped.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::critic::{
    gradient_penalty_grad, weighted_weight_gradient, CriticParams, FeatureScale, PaddedBatch, SequenceCritic,
    DEFAULT_HIDDEN,
};
use crate::generator::{batch_seeds, simulate_reported_traced, GenConfig, Limit, Traced};
use crate::model::{BackgroundConfig, EventStream, ModelParams};
use crate::noise::derive_seed;
use crate::optim::{Adam, AdamConfig};
use crate::thinning::RegionMap;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_gp: f64,
    pub n_critic: usize,
    pub critic_adam: AdamConfig,
    pub generator_adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Moving-average window `W` of the convergence rule.
    pub window: usize,
    /// Relative change of consecutive window means counted as "no change".
    pub tol: f64,
    /// Consecutive quiet windows required to stop.
    pub patience: usize,
    pub hidden: usize,
    /// Which of `(μ, α, β, σ²)` are estimated; the rest stay at their initial value.
    pub free: [bool; 4],
    pub limit: Limit,
    /// Feature scaling; derived from the training data when absent.
    pub scale: Option<FeatureScale>,
    /// Sanity box for every `log θ` coordinate.
    pub log_bounds: [f64; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_gp: 10.0,
            n_critic: 5,
            critic_adam: AdamConfig::default(),
            generator_adam: AdamConfig::default(),
            batch_size: 256,
            max_epochs: 10_000,
            window: 50,
            tol: 1e-3,
            patience: 3,
            hidden: DEFAULT_HIDDEN,
            free: [true; 4],
            limit: Limit::Count(250),
            scale: None,
            log_bounds: [-20.0, 20.0],
        }
    }
}

fn check_adam(name: &str, a: &AdamConfig) -> Result<()> {
    if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps >= 0.0) {
        return Err(Error::Config(format!("invalid {name} Adam settings {a:?}")));
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_gp >= 0.0) {
            return Err(Error::Config(format!("lambda_gp = {} must be non-negative", self.lambda_gp)));
        }
        for (name, v) in [
            ("n_critic", self.n_critic),
            ("batch_size", self.batch_size),
            ("window", self.window),
            ("patience", self.patience),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Config(format!("tol = {} must be non-negative", self.tol)));
        }
        if !(self.log_bounds[0] < self.log_bounds[1]) {
            return Err(Error::Config("log_bounds must be increasing".into()));
        }
        check_adam("critic", &self.critic_adam)?;
        check_adam("generator", &self.generator_adam)?;
        self.gen_config().validate()
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig { limit: self.limit, batch_size: self.batch_size }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", content = "detail", rename_all = "kebab-case")]
pub enum RunStatus {
    Running,
    Converged,
    MaxEpochs,
    Diverged(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean penalised critic loss over the epoch's critic updates.
    pub critic_loss: f64,
    pub generator_loss: f64,
    /// Parameters after the epoch's generator update.
    pub theta: ModelParams,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub seed: u64,
    pub theta_init: ModelParams,
    pub epoch: usize,
    pub log_theta: [f64; 4],
    pub critic: CriticParams,
    pub critic_adam: Adam,
    pub generator_adam: Adam,
    pub scale: FeatureScale,
    pub history: Vec<EpochRecord>,
    pub quiet_windows: usize,
    pub last_window_mean: Option<f64>,
    pub status: RunStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub seed: u64,
    pub theta_init: ModelParams,
    pub theta_hat: ModelParams,
    pub status: RunStatus,
    pub epochs: usize,
    pub history: Vec<EpochRecord>,
    pub critic: CriticParams,
    pub wall_time_secs: f64,
}

impl TrainRun {
    /// Copy with the wall time zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> TrainRun {
        TrainRun { wall_time_secs: 0.0, ..self.clone() }
    }
}

/// Penalised critic loss, its weight gradient and the loss parts.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticLoss {
    pub loss: f64,
    pub wasserstein: f64,
    pub penalty: f64,
    pub grad: Vec<f64>,
}

fn common_batches(real: &[EventStream], fake: &[EventStream], scale: FeatureScale) -> Result<(PaddedBatch, PaddedBatch)> {
    let n_max = real.iter().chain(fake).map(|s| s.len()).max().unwrap_or(0);
    Ok((PaddedBatch::from_streams(real, scale, Some(n_max))?, PaddedBatch::from_streams(fake, scale, Some(n_max))?))
}

/// `mean f(fake) - mean f(real) + λ · penalty` and its gradient in `w`.
pub fn critic_loss_and_grad(
    real: &PaddedBatch,
    fake: &PaddedBatch,
    eps: &[f64],
    w: &CriticParams,
    lambda_gp: f64,
) -> Result<CriticLoss> {
    let l = real.batch_size();
    if l == 0 || fake.batch_size() != l {
        return Err(Error::Shape(format!("critic step needs equal non-empty batches, got {l} and {}", fake.batch_size())));
    }
    let inv = 1.0 / l as f64;
    let (s_fake, g_fake) = weighted_weight_gradient(fake, w, &vec![inv; l])?;
    let (s_real, g_real) = weighted_weight_gradient(real, w, &vec![-inv; l])?;
    let pg = gradient_penalty_grad(real, fake, eps, w)?;
    let wasserstein = (s_fake.iter().sum::<f64>() - s_real.iter().sum::<f64>()) * inv;
    let grad = g_fake.iter().zip(&g_real).zip(&pg.grad).map(|((a, b), c)| a + b + lambda_gp * c).collect();
    Ok(CriticLoss { loss: wasserstein + lambda_gp * pg.penalty, wasserstein, penalty: pg.penalty, grad })
}

/// One Adam update of the critic; returns the loss before the update.
pub fn critic_step(
    real: &[EventStream],
    fake: &[EventStream],
    eps: &[f64],
    w: &mut CriticParams,
    adam: &mut Adam,
    lambda_gp: f64,
    scale: FeatureScale,
) -> Result<f64> {
    let (rb, fb) = common_batches(real, fake, scale)?;
    let out = critic_loss_and_grad(&rb, &fb, eps, w, lambda_gp)?;
    if !out.loss.is_finite() || out.grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!("critic loss is {}", out.loss)));
    }
    adam.step(&mut w.weights, &out.grad);
    Ok(out.loss)
}

/// `-mean f_w(g_θ(z))` and its gradient in `log θ`.
pub fn generator_loss_and_grad<C: SequenceCritic + ?Sized>(
    fakes: &[Traced],
    critic: &C,
    scale: FeatureScale,
) -> Result<(f64, [f64; 4])> {
    let l = fakes.len();
    if l == 0 {
        return Err(Error::Shape("generator step needs at least one stream".into()));
    }
    let streams: Vec<EventStream> = fakes.iter().map(|t| t.stream.clone()).collect();
    let batch = PaddedBatch::from_streams(&streams, scale, None)?;
    let (scores, g) = critic.input_gradients(&batch)?;
    let inv = 1.0 / l as f64;
    let mut grad = [0.0; 4];
    for (r, tr) in fakes.iter().enumerate() {
        for (i, jac) in tr.jacobians.iter().enumerate() {
            let gi = g[r * batch.n_max + i];
            for (k, gk) in grad.iter_mut().enumerate() {
                *gk -= inv * (gi[0] * scale.time * jac[0][k] + scale.space * (gi[1] * jac[1][k] + gi[2] * jac[2][k]));
            }
        }
    }
    Ok((-scores.iter().sum::<f64>() * inv, grad))
}

/// Traced reported fakes for the given seeds, in seed order.
pub fn generate_fakes(
    theta: &ModelParams,
    bg: &BackgroundConfig,
    map: &RegionMap,
    seeds: &[u64],
    gen: &GenConfig,
) -> Result<Vec<Traced>> {
    seeds
        .par_iter()
        .map(|&s| simulate_reported_traced(theta, bg, map, s, gen))
        .collect::<Vec<_>>()
        .into_iter()
        .enumerate()
        .map(|(index, r)| r.map_err(|e| Error::Stream { index, source: Box::new(e) }))
        .collect()
}

/// `base` with the free coordinates replaced by `exp(log)`; fixed ones are
/// copied bit for bit.
fn compose(base: &ModelParams, log: [f64; 4], free: [bool; 4]) -> ModelParams {
    let mut p = base.with_log_params(log);
    if !free[0] {
        p.mu = base.mu;
    }
    if !free[1] {
        p.alpha = base.alpha;
    }
    if !free[2] {
        p.beta = base.beta;
    }
    if !free[3] {
        p = ModelParams { sigma_sq: base.sigma_sq, axis_sq: base.axis_sq, ..p };
    }
    p
}

/// One WGAN-GP training run, advanced epoch by epoch.
pub struct Trainer<'a> {
    data: &'a [EventStream],
    bg: &'a BackgroundConfig,
    map: &'a RegionMap,
    cfg: TrainConfig,
    state: TrainState,
}

// purposes of the per-epoch derived seeds
const FAKES: u64 = 1;
const SHUFFLE: u64 = 2;
const EPS: u64 = 3;
const GENERATOR: u64 = 4;
const CRITIC_INIT: u64 = 5;

impl<'a> Trainer<'a> {
    pub fn new(
        data: &'a [EventStream],
        theta_init: &ModelParams,
        bg: &'a BackgroundConfig,
        map: &'a RegionMap,
        cfg: &TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        Self::check_inputs(data, bg, map, cfg)?;
        theta_init.validate_positive()?;
        if theta_init.axis_sq.is_some() {
            return Err(Error::Config("WGAN estimation supports the isotropic kernel only".into()));
        }
        let scale = cfg.scale.unwrap_or_else(|| FeatureScale::from_streams(data));
        let critic = CriticParams::random(cfg.hidden, derive_seed(seed, &[CRITIC_INIT]));
        let state = TrainState {
            seed,
            theta_init: *theta_init,
            epoch: 0,
            log_theta: theta_init.log_params(),
            critic_adam: Adam::new(cfg.critic_adam, critic.len()),
            generator_adam: Adam::new(cfg.generator_adam, 4),
            critic,
            scale,
            history: Vec::new(),
            quiet_windows: 0,
            last_window_mean: None,
            status: RunStatus::Running,
        };
        Ok(Self { data, bg, map, cfg: cfg.clone(), state })
    }

    /// Continues from a checkpoint.
    pub fn resume(
        data: &'a [EventStream],
        state: TrainState,
        bg: &'a BackgroundConfig,
        map: &'a RegionMap,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        Self::check_inputs(data, bg, map, cfg)?;
        if state.critic.hidden != cfg.hidden {
            return Err(Error::Config(format!(
                "checkpoint critic has hidden size {}, config asks for {}",
                state.critic.hidden, cfg.hidden
            )));
        }
        state.critic.validate()?;
        Ok(Self { data, bg, map, cfg: cfg.clone(), state })
    }

    fn check_inputs(data: &[EventStream], bg: &BackgroundConfig, map: &RegionMap, cfg: &TrainConfig) -> Result<()> {
        cfg.validate()?;
        bg.validate()?;
        map.validate()?;
        if data.is_empty() {
            return Err(Error::InvalidArgument("training data is empty".into()));
        }
        for (index, s) in data.iter().enumerate() {
            s.validate().map_err(|e| Error::Stream { index, source: Box::new(e) })?;
        }
        Ok(())
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn theta(&self) -> ModelParams {
        compose(&self.state.theta_init, self.state.log_theta, self.cfg.free)
    }

    pub fn is_finished(&self) -> bool {
        self.state.status != RunStatus::Running
    }

    fn real_batches(&self, epoch: u64) -> Vec<Vec<EventStream>> {
        let l = self.cfg.batch_size;
        let mut order: Vec<usize> = Vec::new();
        let mut pass = 0u64;
        let mut batches = Vec::with_capacity(self.cfg.n_critic);
        for _ in 0..self.cfg.n_critic {
            let mut idx = Vec::with_capacity(l);
            while idx.len() < l {
                if order.is_empty() {
                    order = (0..self.data.len()).collect();
                    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.state.seed, &[epoch, SHUFFLE, pass])));
                    order.reverse();
                    pass += 1;
                }
                idx.push(order.pop().expect("refilled"));
            }
            batches.push(idx.into_iter().map(|i| self.data[i].clone()).collect());
        }
        batches
    }

    fn diverge(&mut self, why: String) {
        self.state.status = RunStatus::Diverged(why);
    }

    /// Runs one epoch. Numerical trouble ends the run with a diverged status
    /// instead of an error.
    pub fn step_epoch(&mut self) -> Result<()> {
        if self.is_finished() {
            return Ok(());
        }
        if self.state.epoch >= self.cfg.max_epochs {
            self.state.status = RunStatus::MaxEpochs;
            return Ok(());
        }
        match self.epoch_inner() {
            Ok(record) => {
                self.state.history.push(record);
                self.state.epoch += 1;
                self.update_convergence();
            }
            Err(e) if !e.is_config() => self.diverge(e.to_string()),
            Err(e) => return Err(e),
        }
        Ok(())
    }

    fn epoch_inner(&mut self) -> Result<EpochRecord> {
        let e = self.state.epoch as u64;
        let seed = self.state.seed;
        let l = self.cfg.batch_size;
        let gen = self.cfg.gen_config();
        let theta = self.theta();
        let scale = self.state.scale;

        let fakes: Vec<EventStream> = generate_fakes(&theta, self.bg, self.map, &batch_seeds(derive_seed(seed, &[e, FAKES]), l), &gen)?
            .into_iter()
            .map(|t| t.stream)
            .collect();
        let mut critic_loss = 0.0;
        for (t, real) in self.real_batches(e).into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[e, EPS, t as u64]));
            let eps: Vec<f64> = (0..l).map(|_| rng.random::<f64>()).collect();
            critic_loss += critic_step(
                &real,
                &fakes,
                &eps,
                &mut self.state.critic,
                &mut self.state.critic_adam,
                self.cfg.lambda_gp,
                scale,
            )?;
        }
        critic_loss /= self.cfg.n_critic as f64;

        let traced = generate_fakes(&theta, self.bg, self.map, &batch_seeds(derive_seed(seed, &[e, GENERATOR]), l), &gen)?;
        let (generator_loss, mut grad) = generator_loss_and_grad(&traced, &self.state.critic, scale)?;
        for (g, free) in grad.iter_mut().zip(self.cfg.free) {
            if !free {
                *g = 0.0;
            }
        }
        if !(critic_loss.is_finite() && generator_loss.is_finite() && grad.iter().all(|g| g.is_finite())) {
            return Err(Error::Numerical(format!("losses are critic {critic_loss}, generator {generator_loss}")));
        }
        let before = self.state.log_theta;
        self.state.generator_adam.step(&mut self.state.log_theta, &grad);
        for k in 0..4 {
            if !self.cfg.free[k] {
                self.state.log_theta[k] = before[k];
            }
        }
        let [lo, hi] = self.cfg.log_bounds;
        if let Some(k) = self.state.log_theta.iter().position(|v| !(*v >= lo && *v <= hi)) {
            return Err(Error::Numerical(format!("log θ[{k}] = {} left [{lo}, {hi}]", self.state.log_theta[k])));
        }
        Ok(EpochRecord { epoch: e as usize, critic_loss, generator_loss, theta: self.theta() })
    }

    fn update_convergence(&mut self) {
        let w = self.cfg.window;
        let n = self.state.history.len();
        if n.is_multiple_of(w) {
            let mean = self.state.history[n - w..].iter().map(|r| r.critic_loss).sum::<f64>() / w as f64;
            if let Some(prev) = self.state.last_window_mean {
                let change = (mean - prev).abs() / prev.abs().max(f64::MIN_POSITIVE);
                if change < self.cfg.tol {
                    self.state.quiet_windows += 1;
                } else {
                    self.state.quiet_windows = 0;
                }
            }
            self.state.last_window_mean = Some(mean);
            if self.state.quiet_windows >= self.cfg.patience {
                self.state.status = RunStatus::Converged;
                return;
            }
        }
        if self.state.epoch >= self.cfg.max_epochs {
            self.state.status = RunStatus::MaxEpochs;
        }
    }

    /// Geometric mean of `θ` over the final window of epochs.
    pub fn theta_hat(&self) -> ModelParams {
        let h = &self.state.history;
        if h.is_empty() {
            return self.state.theta_init;
        }
        let tail = &h[h.len().saturating_sub(self.cfg.window)..];
        let mut log = [0.0; 4];
        for r in tail {
            for (acc, v) in log.iter_mut().zip(r.theta.log_params()) {
                *acc += v;
            }
        }
        log.iter_mut().for_each(|v| *v /= tail.len() as f64);
        compose(&self.state.theta_init, log, self.cfg.free)
    }

    /// Trains until convergence, divergence or `max_epochs`.
    pub fn run(mut self) -> Result<TrainRun> {
        let start = Instant::now();
        while !self.is_finished() {
            self.step_epoch()?;
        }
        Ok(self.finish(start.elapsed().as_secs_f64()))
    }

    /// Trains for at most `epochs` more epochs.
    pub fn advance(&mut self, epochs: usize) -> Result<()> {
        for _ in 0..epochs {
            if self.is_finished() {
                break;
            }
            self.step_epoch()?;
        }
        Ok(())
    }

    pub fn finish(self, wall_time_secs: f64) -> TrainRun {
        let theta_hat = self.theta_hat();
        let s = self.state;
        TrainRun {
            seed: s.seed,
            theta_init: s.theta_init,
            theta_hat,
            status: s.status,
            epochs: s.epoch,
            history: s.history,
            critic: s.critic,
            wall_time_secs,
        }
    }
}

pub fn train(
    data: &[EventStream],
    theta_init: &ModelParams,
    bg: &BackgroundConfig,
    map: &RegionMap,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainRun> {
    Trainer::new(data, theta_init, bg, map, cfg, seed)?.run()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedPolicy {
    /// Every run uses the base seed.
    Shared,
    /// Run `k` uses a seed derived from `(seed, k)`.
    #[default]
    Disjoint,
}

impl SeedPolicy {
    pub fn seed_for(self, base: u64, k: usize) -> u64 {
        match self {
            SeedPolicy::Shared => base,
            SeedPolicy::Disjoint => derive_seed(base, &[k as u64]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiStartEntry {
    pub init: ModelParams,
    pub seed: u64,
    pub outcome: std::result::Result<TrainRun, String>,
}

impl MultiStartEntry {
    /// The estimate of a run that finished without diverging.
    pub fn estimate(&self) -> Option<ModelParams> {
        match &self.outcome {
            Ok(run) if !matches!(run.status, RunStatus::Diverged(_)) => Some(run.theta_hat),
            _ => None,
        }
    }
}

/// Independent runs from every initial value; failures are recorded per run.
pub fn multi_start(
    data: &[EventStream],
    inits: &[ModelParams],
    bg: &BackgroundConfig,
    map: &RegionMap,
    cfg: &TrainConfig,
    seed: u64,
    policy: SeedPolicy,
) -> Vec<MultiStartEntry> {
    inits
        .par_iter()
        .enumerate()
        .map(|(k, init)| {
            let s = policy.seed_for(seed, k);
            MultiStartEntry { init: *init, seed: s, outcome: train(data, init, bg, map, cfg, s).map_err(|e| e.to_string()) }
        })
        .collect()
}

/// Factorial grid `{0.5, 1, 2} × centre` over the free coordinates.
pub fn default_init_grid(center: &ModelParams, free: [bool; 4]) -> Vec<ModelParams> {
    let mut grid = vec![*center];
    for k in 0..4 {
        if !free[k] {
            continue;
        }
        grid = grid
            .into_iter()
            .flat_map(|g| {
                [0.5, 1.0, 2.0].map(|f| {
                    let mut h = g;
                    match k {
                        0 => h.mu *= f,
                        1 => h.alpha *= f,
                        2 => h.beta *= f,
                        _ => h.sigma_sq *= f,
                    }
                    h
                })
            })
            .collect();
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::simulate_reported_batch;

    fn setup() -> (Vec<EventStream>, BackgroundConfig, RegionMap, ModelParams) {
        let truth = ModelParams::new(1.0, 8.0, 1.0, 0.01);
        let bg = BackgroundConfig::default();
        let map = RegionMap::uniform(0.5);
        let data = simulate_reported_batch(&truth, &bg, &map, &batch_seeds(1, 40), &GenConfig::count(30)).unwrap();
        (data, bg, map, truth)
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            hidden: 4,
            max_epochs: 3,
            window: 2,
            limit: Limit::Count(30),
            critic_adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
            generator_adam: AdamConfig { lr: 1e-2, ..AdamConfig::default() },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_init() {
        let (data, bg, map, truth) = setup();
        let cfg = TrainConfig { max_epochs: 0, ..small_cfg() };
        let run = train(&data, &truth, &bg, &map, &cfg, 1).unwrap();
        assert_eq!(run.theta_hat, truth);
        assert_eq!(run.status, RunStatus::MaxEpochs);
        assert!(run.history.is_empty());
    }

    #[test]
    fn identical_seeds_identical_runs() {
        let (data, bg, map, truth) = setup();
        let a = train(&data, &truth, &bg, &map, &small_cfg(), 5).unwrap();
        let b = train(&data, &truth, &bg, &map, &small_cfg(), 5).unwrap();
        assert_eq!(a.without_timing(), b.without_timing());
        assert_eq!(a.epochs, 3);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (data, bg, map, truth) = setup();
        let cfg = TrainConfig { max_epochs: 4, ..small_cfg() };
        let full = train(&data, &truth, &bg, &map, &cfg, 9).unwrap();
        let mut t = Trainer::new(&data, &truth, &bg, &map, &cfg, 9).unwrap();
        t.advance(2).unwrap();
        let json = serde_json::to_string(t.state()).unwrap();
        let state: TrainState = serde_json::from_str(&json).unwrap();
        let resumed = Trainer::resume(&data, state, &bg, &map, &cfg).unwrap().run().unwrap();
        assert_eq!(full.without_timing(), resumed.without_timing());
    }

    #[test]
    fn clamped_parameters_stay_fixed() {
        let (data, bg, map, truth) = setup();
        let cfg = TrainConfig { free: [true, false, false, true], ..small_cfg() };
        let run = train(&data, &ModelParams::new(2.0, 8.0, 1.0, 0.02), &bg, &map, &cfg, 2).unwrap();
        for r in &run.history {
            assert_eq!(r.theta.alpha, 8.0);
            assert_eq!(r.theta.beta, 1.0);
        }
        assert_ne!(run.history.last().unwrap().theta.mu, 2.0);
        let _ = truth;
    }

    #[test]
    fn zero_critic_gives_zero_generator_gradient() {
        let (_, bg, map, truth) = setup();
        let fakes = generate_fakes(&truth, &bg, &map, &[1, 2, 3], &GenConfig::count(20)).unwrap();
        let (_, g) = generator_loss_and_grad(&fakes, &CriticParams::zeros(4), FeatureScale::default()).unwrap();
        assert_eq!(g, [0.0; 4]);
    }

    #[test]
    fn generator_gradient_matches_finite_differences() {
        // five-event fixture, keyed noise held fixed
        let bg = BackgroundConfig::unbounded();
        let map = RegionMap::none();
        let theta = ModelParams::new(0.3, 2.0, 1.5, 0.05);
        let gen = GenConfig::count(5);
        let w = CriticParams::random(5, 3);
        let scale = FeatureScale { time: 2.0, space: 0.5 };
        let seeds = [11u64, 12];
        let objective = |p: &ModelParams| {
            let f = generate_fakes(p, &bg, &map, &seeds, &gen).unwrap();
            generator_loss_and_grad(&f, &w, scale).unwrap().0
        };
        let fakes = generate_fakes(&theta, &bg, &map, &seeds, &gen).unwrap();
        let (_, grad) = generator_loss_and_grad(&fakes, &w, scale).unwrap();
        let h = 1e-5;
        for k in [0, 2, 3] {
            let mut up = theta.log_params();
            up[k] += h;
            let mut dn = theta.log_params();
            dn[k] -= h;
            let fd = (objective(&theta.with_log_params(up)) - objective(&theta.with_log_params(dn))) / (2.0 * h);
            assert!(((fd - grad[k]) / fd).abs() < 1e-3, "{k}: {fd} vs {}", grad[k]);
        }
        assert_eq!(grad[1], 0.0);
    }

    #[test]
    fn penalty_dominates_for_huge_lambda() {
        let (data, bg, map, truth) = setup();
        let fakes: Vec<EventStream> =
            generate_fakes(&ModelParams::new(2.0, 8.0, 1.0, 0.01), &bg, &map, &batch_seeds(3, 8), &GenConfig::count(30))
                .unwrap()
                .into_iter()
                .map(|t| t.stream)
                .collect();
        let scale = FeatureScale::from_streams(&data);
        let (rb, fb) = common_batches(&data[..8], &fakes, scale).unwrap();
        let w = CriticParams::random(6, 4);
        let eps: Vec<f64> = (0..8).map(|i| (i as f64 + 0.5) / 8.0).collect();
        let full = critic_loss_and_grad(&rb, &fb, &eps, &w, 1e6).unwrap();
        let pure = gradient_penalty_grad(&rb, &fb, &eps, &w).unwrap();
        let dot: f64 = full.grad.iter().zip(&pure.grad).map(|(a, b)| a * b).sum();
        let na: f64 = full.grad.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb: f64 = pure.grad.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(dot / (na * nb) > 0.99);
        let _ = truth;
    }

    #[test]
    fn identical_batches_have_zero_wasserstein_term() {
        let (data, ..) = setup();
        let scale = FeatureScale::from_streams(&data);
        let (rb, fb) = common_batches(&data[..6], &data[..6], scale).unwrap();
        let w = CriticParams::random(6, 4);
        let out = critic_loss_and_grad(&rb, &fb, &[1.0; 6], &w, 10.0).unwrap();
        assert_eq!(out.wasserstein, 0.0);
    }

    #[test]
    fn init_grid_and_multi_start() {
        let c = ModelParams::new(1.0, 8.0, 1.0, 0.01);
        let g = default_init_grid(&c, [true, false, true, false]);
        assert_eq!(g.len(), 9);
        assert!(g.iter().all(|p| p.alpha == 8.0 && p.sigma_sq == 0.01));
        assert!(g.contains(&c));

        let (data, bg, map, truth) = setup();
        let cfg = TrainConfig { max_epochs: 2, ..small_cfg() };
        let single = multi_start(&data, &[truth], &bg, &map, &cfg, 4, SeedPolicy::Shared);
        let direct = train(&data, &truth, &bg, &map, &cfg, 4).unwrap();
        assert_eq!(single[0].outcome.as_ref().unwrap().without_timing(), direct.without_timing());
        let twins = multi_start(&data, &[truth, truth], &bg, &map, &cfg, 4, SeedPolicy::Shared);
        assert_eq!(
            twins[0].outcome.as_ref().unwrap().without_timing(),
            twins[1].outcome.as_ref().unwrap().without_timing()
        );
        let bad = multi_start(&data, &[ModelParams::new(0.0, 1.0, 1.0, 0.01), truth], &bg, &map, &cfg, 4, SeedPolicy::Disjoint);
        assert!(bad[0].outcome.is_err());
        assert!(bad[1].outcome.is_ok());
    }

    #[test]
    fn divergence_is_recorded() {
        let (data, bg, map, truth) = setup();
        let cfg = TrainConfig { log_bounds: [-0.01, 0.01], ..small_cfg() };
        let run = train(&data, &ModelParams::new(1.0, 1.0, 1.0, 1.0), &bg, &map, &cfg, 1).unwrap();
        assert!(matches!(run.status, RunStatus::Diverged(_)));
        let _ = truth;
    }
}
