//! Hawkes model types and closed-form intensity formulas.
//!
//! The spatiotemporal intensity is
//!
//! ```text
//! λ(t, x, y | H_t) = μ Σ_c N((x, y); c, σ0² I) + Σ_{t_i < t} α e^{-β (t - t_i)} e^{-(Δx² + Δy²) / 2σ²}
//! ```
//!
//! Integrating out space gives a temporal Hawkes process with baseline
//! `μ_tot = μ · |centers|` and kernel `B α e^{-β t}`, `B = 2πσ²`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Hawkes parameters `(μ, α, β, σ²)`.
///
/// `axis_sq` switches on the anisotropic spatial kernel `(σx², σy²)`; in that
/// case `sigma_sq` holds the geometric mean `σx σy`, so the full-plane spatial
/// mass `B = 2π sigma_sq` is correct in both modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub mu: f64,
    pub alpha: f64,
    pub beta: f64,
    pub sigma_sq: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis_sq: Option<[f64; 2]>,
}

impl ModelParams {
    pub fn new(mu: f64, alpha: f64, beta: f64, sigma_sq: f64) -> Self {
        Self { mu, alpha, beta, sigma_sq, axis_sq: None }
    }

    pub fn anisotropic(mu: f64, alpha: f64, beta: f64, sigma_x_sq: f64, sigma_y_sq: f64) -> Self {
        Self {
            mu,
            alpha,
            beta,
            sigma_sq: (sigma_x_sq * sigma_y_sq).sqrt(),
            axis_sq: Some([sigma_x_sq, sigma_y_sq]),
        }
    }

    /// Builds parameters from the `(θ, ω)` branching form, `α = θω`, `β = ω`.
    pub fn from_branching(mu: f64, theta: f64, omega: f64, sigma_sq: f64) -> Self {
        Self::new(mu, theta * omega, omega, sigma_sq)
    }

    /// Default simulation truth `(100, 3, 0.2, 0.1²)`.
    pub fn reference() -> Self {
        Self::new(100.0, 3.0, 0.2, 0.01)
    }

    /// `θ = α / β`.
    pub fn theta(&self) -> f64 {
        self.alpha / self.beta
    }

    /// `ω = β`.
    pub fn omega(&self) -> f64 {
        self.beta
    }

    /// Per-axis spatial variances.
    pub fn variances(&self) -> [f64; 2] {
        self.axis_sq.unwrap_or([self.sigma_sq, self.sigma_sq])
    }

    /// Full-plane integral of the spatial factor, `B = 2π σx σy`.
    pub fn spatial_mass(&self) -> f64 {
        2.0 * PI * self.sigma_sq
    }

    /// Expected direct offspring per event, `A·B = (α/β)·2πσ²`.
    pub fn branching_ratio(&self) -> f64 {
        self.theta() * self.spatial_mass()
    }

    pub fn is_subcritical(&self) -> bool {
        self.branching_ratio() < 1.0
    }

    /// Background may be switched off (`μ = 0`) and triggering removed
    /// (`α = 0`); decay and spread must be strictly positive.
    pub fn validate(&self) -> Result<()> {
        let finite = [self.mu, self.alpha, self.beta, self.sigma_sq].iter().all(|v| v.is_finite());
        if !finite || self.mu < 0.0 || self.alpha < 0.0 || self.beta <= 0.0 || self.sigma_sq <= 0.0 {
            return Err(Error::InvalidParams(format!("{self:?}")));
        }
        if let Some([vx, vy]) = self.axis_sq {
            if !(vx > 0.0 && vy > 0.0 && vx.is_finite() && vy.is_finite()) {
                return Err(Error::InvalidParams(format!("axis variances {vx}, {vy}")));
            }
            let gm = (vx * vy).sqrt();
            if (gm - self.sigma_sq).abs() > 1e-12 * gm {
                return Err(Error::InvalidParams(format!(
                    "sigma_sq {} is not the geometric mean of the axis variances ({gm})",
                    self.sigma_sq
                )));
            }
        }
        Ok(())
    }

    /// Like [`validate`](Self::validate) but every component must be strictly positive,
    /// as required for log-space optimisation.
    pub fn validate_positive(&self) -> Result<()> {
        self.validate()?;
        if self.mu <= 0.0 || self.alpha <= 0.0 {
            return Err(Error::InvalidParams(format!("log-space parameters must be positive: {self:?}")));
        }
        Ok(())
    }

    /// `(log μ, log α, log β, log σ²)`.
    pub fn log_params(&self) -> [f64; 4] {
        [self.mu.ln(), self.alpha.ln(), self.beta.ln(), self.sigma_sq.ln()]
    }

    /// Inverse of [`log_params`](Self::log_params). An anisotropic template keeps
    /// its axis ratio; both axes are rescaled by the new `σ²`.
    pub fn with_log_params(&self, log: [f64; 4]) -> Self {
        let sigma_sq = log[3].exp();
        let axis_sq = self.axis_sq.map(|[vx, vy]| {
            let r = sigma_sq / self.sigma_sq;
            [vx * r, vy * r]
        });
        Self { mu: log[0].exp(), alpha: log[1].exp(), beta: log[2].exp(), sigma_sq, axis_sq }
    }
}

/// Axis-aligned rectangle `[x_min, x_max] × [y_min, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Self {
        Self { x_min, x_max, y_min, y_max }
    }

    /// The whole plane; nothing is ever discarded.
    pub fn everything() -> Self {
        Self::new(f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY)
    }

    /// Closed containment.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn is_bounded(&self) -> bool {
        [self.x_min, self.x_max, self.y_min, self.y_max].iter().all(|v| v.is_finite())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    /// True when the interiors intersect (touching edges do not count).
    pub fn overlaps(&self, other: &Rect) -> bool {
        self.x_min < other.x_max && other.x_min < self.x_max && self.y_min < other.y_max && other.y_min < self.y_max
    }

    pub fn validate(&self) -> Result<()> {
        if self.x_min.is_nan() || self.x_max.is_nan() || self.y_min.is_nan() || self.y_max.is_nan() {
            return Err(Error::Config(format!("rectangle has NaN bounds: {self:?}")));
        }
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::Config(format!("degenerate rectangle {self:?}")));
        }
        Ok(())
    }
}

/// Fixed background geometry: Gaussian centres, their common scale `σ0`
/// and the city limits outside of which events are discarded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackgroundConfig {
    pub centers: Vec<[f64; 2]>,
    pub sigma0: f64,
    pub domain: Rect,
}

impl Default for BackgroundConfig {
    fn default() -> Self {
        Self { centers: default_centers(), sigma0: 4.5, domain: default_domain() }
    }
}

/// The 14 centres `(±6, ±20), (±6, ±10), (±6, ±30), (±6, 0)`.
pub fn default_centers() -> Vec<[f64; 2]> {
    let mut centers = Vec::with_capacity(14);
    for x in [-6.0, 6.0] {
        for y in [-30.0, -20.0, -10.0, 0.0, 10.0, 20.0, 30.0] {
            centers.push([x, y]);
        }
    }
    centers
}

/// Reconstructed city limits: `x ∈ [-10.5, 10.5]`, `y ∈ [-36, 36]`.
pub fn default_domain() -> Rect {
    Rect::new(-10.5, 10.5, -36.0, 36.0)
}

impl BackgroundConfig {
    /// Default centres with no discarding.
    pub fn unbounded() -> Self {
        Self { domain: Rect::everything(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.centers.is_empty() {
            return Err(Error::Config("background needs at least one center".into()));
        }
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(Error::Config(format!("sigma0 must be positive, got {}", self.sigma0)));
        }
        if self.centers.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("background centers must be finite".into()));
        }
        self.domain.validate()
    }

    /// `∬_{R²} μ(x, y) / μ`: each Gaussian integrates to one.
    pub fn total_weight(&self) -> f64 {
        self.centers.len() as f64
    }

    /// `∬_rect Σ_c N((x, y); c, σ0² I) dx dy` via Gaussian CDF products.
    pub fn mass_in(&self, rect: &Rect) -> f64 {
        self.centers
            .iter()
            .map(|c| {
                interval_mass(rect.x_min, rect.x_max, c[0], self.sigma0)
                    * interval_mass(rect.y_min, rect.y_max, c[1], self.sigma0)
            })
            .sum()
    }

    /// Background mass inside the city limits.
    pub fn domain_weight(&self) -> f64 {
        self.mass_in(&self.domain)
    }
}

/// `P(lo ≤ center + σ Z ≤ hi)` for standard normal `Z`.
pub(crate) fn interval_mass(lo: f64, hi: f64, center: f64, sigma: f64) -> f64 {
    let scale = sigma * std::f64::consts::SQRT_2;
    let upper = if hi.is_infinite() { hi.signum() } else { statrs::function::erf::erf((hi - center) / scale) };
    let lower = if lo.is_infinite() { lo.signum() } else { statrs::function::erf::erf((lo - center) / scale) };
    0.5 * (upper - lower)
}

/// Where an event came from, when the simulator recorded it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Ancestry {
    #[default]
    Unknown,
    Background,
    /// Index of the parent within the same stream.
    Offspring(usize),
    /// Triggered by an event that is not part of the stream (discarded or thinned).
    OffspringOfUnobserved,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub ancestry: Ancestry,
}

impl Event {
    pub fn new(t: f64, x: f64, y: f64) -> Self {
        Self { t, x, y, ancestry: Ancestry::Unknown }
    }
}

/// Time-ordered events observed on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub horizon: f64,
    #[serde(default)]
    pub truncation: Option<usize>,
    /// Per-event reporting flags; only present when thinning kept removed events.
    #[serde(default)]
    pub retained: Option<Vec<bool>>,
}

impl EventStream {
    pub fn new(events: Vec<Event>, horizon: f64) -> Self {
        Self { events, horizon, truncation: None, retained: None }
    }

    pub fn empty(horizon: f64) -> Self {
        Self::new(Vec::new(), horizon)
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.events.iter().map(|e| e.t)
    }

    /// Checks finiteness, `t ≥ 0` and strictly increasing timestamps.
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon >= 0.0) {
            return Err(Error::InvalidStream(format!("horizon {} must be non-negative", self.horizon)));
        }
        let mut prev = f64::NEG_INFINITY;
        for (i, e) in self.events.iter().enumerate() {
            if !(e.t.is_finite() && e.x.is_finite() && e.y.is_finite()) || e.t < 0.0 {
                return Err(Error::InvalidStream(format!("event {i} is not finite or has negative time")));
            }
            if e.t <= prev {
                return Err(Error::InvalidStream(format!(
                    "event {i} at t = {} does not come strictly after t = {prev}",
                    e.t
                )));
            }
            prev = e.t;
        }
        if let Some(flags) = &self.retained {
            if flags.len() != self.events.len() {
                return Err(Error::InvalidStream("retained flags do not match event count".into()));
            }
        }
        Ok(())
    }

    /// Drops events flagged as removed; the result carries no flags.
    pub fn reported(&self) -> EventStream {
        match &self.retained {
            None => self.clone(),
            Some(flags) => {
                let keep: Vec<bool> = flags.clone();
                crate::thinning::select(self, &keep)
            }
        }
    }

    /// Events with `t ≤ until`, horizon clipped to `until`.
    pub fn restrict(&self, until: f64) -> EventStream {
        let n = self.events.partition_point(|e| e.t <= until);
        EventStream {
            events: self.events[..n].to_vec(),
            horizon: self.horizon.min(until),
            truncation: self.truncation,
            retained: self.retained.as_ref().map(|r| r[..n].to_vec()),
        }
    }
}

/// `μ Σ_c (2πσ0²)^{-1} exp(-‖p - c‖² / 2σ0²)`.
pub fn background_intensity(p: [f64; 2], mu: f64, bg: &BackgroundConfig) -> f64 {
    if mu == 0.0 {
        return 0.0;
    }
    let s2 = bg.sigma0 * bg.sigma0;
    let norm = 1.0 / (2.0 * PI * s2);
    let sum: f64 = bg
        .centers
        .iter()
        .map(|c| {
            let dx = p[0] - c[0];
            let dy = p[1] - c[1];
            (-(dx * dx + dy * dy) / (2.0 * s2)).exp()
        })
        .sum();
    mu * norm * sum
}

/// `α e^{-β dt} e^{-(dx²/2σx² + dy²/2σy²)}`; triggering is strictly causal.
pub fn triggering_kernel(dt: f64, dx: f64, dy: f64, params: &ModelParams) -> Result<f64> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("triggering needs dt > 0, got {dt}")));
    }
    Ok(kernel_unchecked(dt, dx, dy, params))
}

#[inline]
pub(crate) fn kernel_unchecked(dt: f64, dx: f64, dy: f64, params: &ModelParams) -> f64 {
    if params.alpha == 0.0 {
        return 0.0;
    }
    let [vx, vy] = params.variances();
    params.alpha * (-params.beta * dt - dx * dx / (2.0 * vx) - dy * dy / (2.0 * vy)).exp()
}

/// Spatiotemporal conditional intensity at `(t, p)` given the events of
/// `history` strictly before `t`.
pub fn conditional_intensity(
    t: f64,
    p: [f64; 2],
    history: &EventStream,
    params: &ModelParams,
    bg: &BackgroundConfig,
) -> f64 {
    let base = background_intensity(p, params.mu, bg);
    let triggered: f64 = history
        .events
        .iter()
        .take_while(|e| e.t < t)
        .map(|e| kernel_unchecked(t - e.t, p[0] - e.x, p[1] - e.y, params))
        .sum();
    base + triggered
}

/// `μ_tot = μ · |centers|`.
pub fn total_background_rate(params: &ModelParams, bg: &BackgroundConfig) -> f64 {
    params.mu * bg.total_weight()
}

/// Intensity of the temporal projection: `μ_tot + Σ_{t_i < t} B α e^{-β (t - t_i)}`.
pub fn temporal_projection_intensity(t: f64, history: &EventStream, params: &ModelParams, bg: &BackgroundConfig) -> f64 {
    let scale = params.spatial_mass() * params.alpha;
    let triggered: f64 =
        history.events.iter().take_while(|e| e.t < t).map(|e| scale * (-params.beta * (t - e.t)).exp()).sum();
    total_background_rate(params, bg) + triggered
}

/// `Λ(t) = μ_tot t + Σ_{t_i < t} B (α/β) (1 - e^{-β (t - t_i)})`.
pub fn temporal_compensator(t: f64, history: &EventStream, params: &ModelParams, bg: &BackgroundConfig) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let scale = params.spatial_mass() * params.theta();
    let triggered: f64 =
        history.events.iter().take_while(|e| e.t < t).map(|e| scale * -(-params.beta * (t - e.t)).exp_m1()).sum();
    total_background_rate(params, bg) * t + triggered
}

/// Compensator increments `Λ(t_i) - Λ(t_{i-1})` (with `t_0 = 0`) of the temporal
/// projection, computed with the usual O(n) exponential recursion.
pub fn compensator_increments(stream: &EventStream, params: &ModelParams, bg: &BackgroundConfig) -> Vec<f64> {
    let mu_tot = total_background_rate(params, bg);
    let scale = params.spatial_mass() * params.theta();
    let mut out = Vec::with_capacity(stream.len());
    // decayed = Σ_{t_j ≤ prev} e^{-β (prev - t_j)}
    let mut decayed = 0.0;
    let mut prev = 0.0;
    for e in &stream.events {
        let dt = e.t - prev;
        let gain = -(-params.beta * dt).exp_m1();
        out.push(mu_tot * dt + scale * decayed * gain);
        decayed = decayed * (1.0 - gain) + 1.0;
        prev = e.t;
    }
    out
}
