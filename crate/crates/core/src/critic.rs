//! Masked LSTM critic `f_w` and its gradient penalty.
//!
//! A stream is scored as `Σ_i (vᵀ h_i + c)` over its real steps, where `h_i`
//! is the hidden state of a standard LSTM fed with `(Δt_i, x_i, y_i)`.
//! Padded steps are skipped entirely, so scores do not depend on the padding
//! width. The recurrence is written once over [`Scalar`]; running it with
//! [`Dual`] numbers and an input tangent gives the mixed derivative needed
//! for the weight gradient of the penalty term.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::EventStream;
use crate::{Error, Result};

pub const INPUT_DIM: usize = 3;
pub const DEFAULT_HIDDEN: usize = 64;

pub trait Scalar:
    Copy
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Mul<f64, Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    fn cst(v: f64) -> Self;
    fn value(self) -> f64;
    fn sigmoid(self) -> Self;
    fn tanh(self) -> Self;
}

impl Scalar for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn sigmoid(self) -> Self {
        1.0 / (1.0 + (-self).exp())
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// First-order dual number `v + d ε`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    pub fn new(v: f64, d: f64) -> Self {
        Self { v, d }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.v + o.v, self.d + o.d)
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.v - o.v, self.d - o.d)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.v * o.v, self.v * o.d + self.d * o.v)
    }
}

impl Mul<f64> for Dual {
    type Output = Dual;
    fn mul(self, k: f64) -> Dual {
        Dual::new(self.v * k, self.d * k)
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.v, -self.d)
    }
}

impl AddAssign for Dual {
    fn add_assign(&mut self, o: Dual) {
        self.v += o.v;
        self.d += o.d;
    }
}

impl Scalar for Dual {
    fn cst(v: f64) -> Self {
        Dual::new(v, 0.0)
    }
    fn value(self) -> f64 {
        self.v
    }
    fn sigmoid(self) -> Self {
        let s = self.v.sigmoid();
        Dual::new(s, self.d * s * (1.0 - s))
    }
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        Dual::new(t, self.d * (1.0 - t * t))
    }
}

/// Multiplicative feature scales applied when streams are padded:
/// times by `time`, both coordinates by `space`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureScale {
    pub time: f64,
    pub space: f64,
}

impl Default for FeatureScale {
    fn default() -> Self {
        Self { time: 1.0, space: 1.0 }
    }
}

impl FeatureScale {
    /// `time = 1 / mean inter-arrival`, `space = 1 / pooled coordinate std`.
    pub fn from_streams(streams: &[EventStream]) -> Self {
        let mut gaps = 0.0;
        let mut n = 0usize;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for s in streams {
            let mut prev = 0.0;
            for e in &s.events {
                gaps += e.t - prev;
                prev = e.t;
                n += 1;
                sum += e.x + e.y;
                sum_sq += e.x * e.x + e.y * e.y;
            }
        }
        if n == 0 {
            return Self::default();
        }
        let mean_gap = gaps / n as f64;
        let m = sum / (2 * n) as f64;
        let var = sum_sq / (2 * n) as f64 - m * m;
        let time = if mean_gap > 0.0 { 1.0 / mean_gap } else { 1.0 };
        let space = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        Self { time, space }
    }
}

/// `L` streams padded to a common width `N_max`; row-major `L × N_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub n_max: usize,
    pub lengths: Vec<usize>,
    pub values: Vec<[f64; 3]>,
    pub mask: Vec<bool>,
}

impl PaddedBatch {
    pub fn from_streams(streams: &[EventStream], scale: FeatureScale, n_max: Option<usize>) -> Result<Self> {
        let longest = streams.iter().map(|s| s.len()).max().unwrap_or(0);
        let n_max = n_max.unwrap_or(longest);
        if n_max < longest {
            return Err(Error::Shape(format!("padding width {n_max} is shorter than a stream of {longest} events")));
        }
        let l = streams.len();
        let mut values = vec![[0.0; 3]; l * n_max];
        let mut mask = vec![false; l * n_max];
        for (r, s) in streams.iter().enumerate() {
            for (i, e) in s.events.iter().enumerate() {
                values[r * n_max + i] = [e.t * scale.time, e.x * scale.space, e.y * scale.space];
                mask[r * n_max + i] = true;
            }
        }
        Ok(Self { n_max, lengths: streams.iter().map(|s| s.len()).collect(), values, mask })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn row(&self, r: usize) -> &[[f64; 3]] {
        &self.values[r * self.n_max..r * self.n_max + self.lengths[r]]
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.lengths.len();
        if self.values.len() != l * self.n_max || self.mask.len() != l * self.n_max {
            return Err(Error::Shape(format!(
                "batch of {l} rows × {} needs {} cells, has {} values and {} mask entries",
                self.n_max,
                l * self.n_max,
                self.values.len(),
                self.mask.len()
            )));
        }
        for (r, &len) in self.lengths.iter().enumerate() {
            if len > self.n_max {
                return Err(Error::Shape(format!("row {r} length {len} exceeds width {}", self.n_max)));
            }
            for i in 0..self.n_max {
                let k = r * self.n_max + i;
                if self.mask[k] != (i < len) {
                    return Err(Error::Shape(format!("row {r} mask is not a prefix of length {len}")));
                }
                if i >= len && self.values[k] != [0.0; 3] {
                    return Err(Error::Shape(format!("row {r} has non-zero padding at {i}")));
                }
            }
        }
        Ok(())
    }

    /// Same rows at a different padding width.
    pub fn repad(&self, n_max: usize) -> Result<Self> {
        let longest = self.lengths.iter().copied().max().unwrap_or(0);
        if n_max < longest {
            return Err(Error::Shape(format!("padding width {n_max} is shorter than a row of {longest}")));
        }
        let l = self.batch_size();
        let mut values = vec![[0.0; 3]; l * n_max];
        let mut mask = vec![false; l * n_max];
        for r in 0..l {
            let len = self.lengths[r];
            values[r * n_max..r * n_max + len].copy_from_slice(self.row(r));
            mask[r * n_max..r * n_max + len].iter_mut().for_each(|m| *m = true);
        }
        Ok(Self { n_max, lengths: self.lengths.clone(), values, mask })
    }
}

/// Convex combination `ε x + (1 - ε) x̃` on the common prefix of each pair.
pub fn interpolate(real: &PaddedBatch, fake: &PaddedBatch, eps: &[f64]) -> Result<PaddedBatch> {
    let l = real.batch_size();
    if fake.batch_size() != l || eps.len() != l {
        return Err(Error::Shape(format!(
            "interpolation needs equal batch sizes, got {l} real, {} fake, {} weights",
            fake.batch_size(),
            eps.len()
        )));
    }
    let n_max = real.n_max.min(fake.n_max);
    let lengths: Vec<usize> = real.lengths.iter().zip(&fake.lengths).map(|(a, b)| (*a).min(*b)).collect();
    let mut values = vec![[0.0; 3]; l * n_max];
    let mut mask = vec![false; l * n_max];
    for r in 0..l {
        let e = eps[r];
        for i in 0..lengths[r] {
            let a = real.values[r * real.n_max + i];
            let b = fake.values[r * fake.n_max + i];
            values[r * n_max + i] = std::array::from_fn(|k| e * a[k] + (1.0 - e) * b[k]);
            mask[r * n_max + i] = true;
        }
    }
    Ok(PaddedBatch { n_max, lengths, values, mask })
}

/// Flat LSTM weights. Layout: input map `W` (4H × 3), recurrent map `U`
/// (4H × H), gate bias `b` (4H), head `v` (H), head bias `c`; gate rows
/// are ordered input, forget, candidate, output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticParams {
    pub hidden: usize,
    pub weights: Vec<f64>,
}

impl CriticParams {
    pub fn param_count(hidden: usize) -> usize {
        4 * hidden * (INPUT_DIM + hidden + 1) + hidden + 1
    }

    pub fn zeros(hidden: usize) -> Self {
        Self { hidden, weights: vec![0.0; Self::param_count(hidden)] }
    }

    /// Uniform `±1/√H` initialisation with forget-gate bias 1.
    pub fn random(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut p = Self::zeros(hidden);
        for w in p.weights.iter_mut() {
            *w = rng.random_range(-bound..bound);
        }
        let b = p.off_b();
        for j in 0..hidden {
            p.weights[b + hidden + j] = 1.0;
        }
        let c = p.off_c();
        p.weights[c] = 0.0;
        p
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.weights.len() != Self::param_count(self.hidden) {
            return Err(Error::Shape(format!(
                "critic with hidden size {} needs {} weights, has {}",
                self.hidden,
                Self::param_count(self.hidden),
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numerical("critic weights are not finite".into()));
        }
        Ok(())
    }

    fn off_u(&self) -> usize {
        4 * self.hidden * INPUT_DIM
    }
    fn off_b(&self) -> usize {
        self.off_u() + 4 * self.hidden * self.hidden
    }
    fn off_v(&self) -> usize {
        self.off_b() + 4 * self.hidden
    }
    fn off_c(&self) -> usize {
        self.off_v() + self.hidden
    }
}

/// Per-step features `(Δt, x, y)` of one row, with `t_0 = 0`.
fn features(row: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let mut prev = 0.0;
    row.iter()
        .map(|v| {
            let f = [v[0] - prev, v[1], v[2]];
            prev = v[0];
            f
        })
        .collect()
}

/// Maps feature-space gradients back to the padded values.
fn features_to_values<S: Scalar>(du: &[[S; 3]]) -> Vec<[S; 3]> {
    let n = du.len();
    (0..n)
        .map(|i| {
            let next = if i + 1 < n { du[i + 1][0] } else { S::cst(0.0) };
            [du[i][0] - next, du[i][1], du[i][2]]
        })
        .collect()
}

/// Forward pass over one row plus optional reverse pass.
///
/// `grad_w` receives `coef · ∂f/∂w` added in place; the return value holds
/// the score and, when asked, `∂f/∂u` per step.
fn run_row<S: Scalar>(p: &CriticParams, u: &[[S; 3]], grad_w: Option<(&mut [S], f64)>, want_du: bool) -> (S, Vec<[S; 3]>) {
    let h = p.hidden;
    let w = &p.weights;
    let (ou, ob, ov, oc) = (p.off_u(), p.off_b(), p.off_v(), p.off_c());
    let n = u.len();
    let zero = S::cst(0.0);

    // post-activation gates (i, f, g, o), cell states and hidden states
    let mut gates = vec![zero; n * 4 * h];
    let mut cells = vec![zero; (n + 1) * h];
    let mut hiddens = vec![zero; (n + 1) * h];
    let mut tanh_c = vec![zero; n * h];
    let mut score = zero;
    let mut z = vec![zero; 4 * h];

    for t in 0..n {
        let h_prev = &hiddens[t * h..(t + 1) * h];
        for r in 0..4 * h {
            let wr = &w[r * INPUT_DIM..(r + 1) * INPUT_DIM];
            let mut acc = S::cst(w[ob + r]) + u[t][0] * wr[0] + u[t][1] * wr[1] + u[t][2] * wr[2];
            let ur = &w[ou + r * h..ou + (r + 1) * h];
            for j in 0..h {
                acc += h_prev[j] * ur[j];
            }
            z[r] = acc;
        }
        let g = &mut gates[t * 4 * h..(t + 1) * 4 * h];
        for j in 0..h {
            g[j] = z[j].sigmoid();
            g[h + j] = z[h + j].sigmoid();
            g[2 * h + j] = z[2 * h + j].tanh();
            g[3 * h + j] = z[3 * h + j].sigmoid();
        }
        for j in 0..h {
            let c = g[h + j] * cells[t * h + j] + g[j] * g[2 * h + j];
            cells[(t + 1) * h + j] = c;
            let tc = c.tanh();
            tanh_c[t * h + j] = tc;
            let hj = g[3 * h + j] * tc;
            hiddens[(t + 1) * h + j] = hj;
            score += hj * w[ov + j];
        }
        score += S::cst(w[oc]);
    }

    if grad_w.is_none() && !want_du {
        return (score, Vec::new());
    }

    let mut grad_w = grad_w;
    let mut du = if want_du { vec![[zero; 3]; n] } else { Vec::new() };
    let mut dh_next = vec![zero; h];
    let mut dc_next = vec![zero; h];
    let mut dz = vec![zero; 4 * h];
    let one = S::cst(1.0);
    for t in (0..n).rev() {
        let g = &gates[t * 4 * h..(t + 1) * 4 * h];
        for j in 0..h {
            let (ig, fg, gg, og) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
            let tc = tanh_c[t * h + j];
            let dh = dh_next[j] + S::cst(w[ov + j]);
            let dc = dh * og * (one - tc * tc) + dc_next[j];
            dz[j] = dc * gg * ig * (one - ig);
            dz[h + j] = dc * cells[t * h + j] * fg * (one - fg);
            dz[2 * h + j] = dc * ig * (one - gg * gg);
            dz[3 * h + j] = dh * tc * og * (one - og);
            dc_next[j] = dc * fg;
        }
        let h_prev = &hiddens[t * h..(t + 1) * h];
        for j in 0..h {
            let mut acc = zero;
            for r in 0..4 * h {
                acc += dz[r] * w[ou + r * h + j];
            }
            dh_next[j] = acc;
        }
        if want_du {
            for k in 0..INPUT_DIM {
                let mut acc = zero;
                for r in 0..4 * h {
                    acc += dz[r] * w[r * INPUT_DIM + k];
                }
                du[t][k] = acc;
            }
        }
        if let Some((gw, coef)) = grad_w.as_mut() {
            let coef = *coef;
            let h_t = &hiddens[(t + 1) * h..(t + 2) * h];
            for r in 0..4 * h {
                let d = dz[r] * coef;
                for k in 0..INPUT_DIM {
                    gw[r * INPUT_DIM + k] += d * u[t][k];
                }
                let row = &mut gw[ou + r * h..ou + (r + 1) * h];
                for j in 0..h {
                    row[j] += d * h_prev[j];
                }
                gw[ob + r] += d;
            }
            for j in 0..h {
                gw[ov + j] += h_t[j] * coef;
            }
            gw[oc] += S::cst(coef);
        }
    }
    (score, du)
}

fn check(batch: &PaddedBatch, w: &CriticParams) -> Result<()> {
    batch.validate()?;
    w.validate()
}

fn add_into(mut a: Vec<f64>, b: Vec<f64>) -> Vec<f64> {
    if a.is_empty() {
        return b;
    }
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
    a
}

/// Anything that scores padded batches and exposes input gradients.
pub trait SequenceCritic: Sync {
    fn scores(&self, batch: &PaddedBatch) -> Result<Vec<f64>>;
    /// Scores and `∂f_l / ∂values`, laid out like `batch.values`; padded
    /// positions are zero.
    fn input_gradients(&self, batch: &PaddedBatch) -> Result<(Vec<f64>, Vec<[f64; 3]>)>;
}

impl SequenceCritic for CriticParams {
    fn scores(&self, batch: &PaddedBatch) -> Result<Vec<f64>> {
        critic_forward(batch, self)
    }

    fn input_gradients(&self, batch: &PaddedBatch) -> Result<(Vec<f64>, Vec<[f64; 3]>)> {
        check(batch, self)?;
        let rows: Vec<(f64, Vec<[f64; 3]>)> = (0..batch.batch_size())
            .into_par_iter()
            .map(|r| {
                let (s, du) = run_row(self, &features(batch.row(r)), None, true);
                (s, features_to_values(&du))
            })
            .collect();
        let mut grads = vec![[0.0; 3]; batch.values.len()];
        let mut scores = Vec::with_capacity(rows.len());
        for (r, (s, g)) in rows.into_iter().enumerate() {
            scores.push(s);
            grads[r * batch.n_max..r * batch.n_max + g.len()].copy_from_slice(&g);
        }
        Ok((scores, grads))
    }
}

/// One score per row.
pub fn critic_forward(batch: &PaddedBatch, w: &CriticParams) -> Result<Vec<f64>> {
    check(batch, w)?;
    Ok((0..batch.batch_size()).into_par_iter().map(|r| run_row(w, &features(batch.row(r)), None, false).0).collect())
}

/// Scores and `Σ_l coef_l ∇_w f_l`.
pub fn weighted_weight_gradient(batch: &PaddedBatch, w: &CriticParams, coef: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check(batch, w)?;
    if coef.len() != batch.batch_size() {
        return Err(Error::Shape(format!("{} coefficients for {} rows", coef.len(), batch.batch_size())));
    }
    let rows: Vec<(f64, Vec<f64>)> = (0..batch.batch_size())
        .into_par_iter()
        .map(|r| {
            let mut g = vec![0.0; w.len()];
            let (s, _) = run_row(w, &features(batch.row(r)), Some((&mut g, coef[r])), false);
            (s, g)
        })
        .collect();
    let mut scores = Vec::with_capacity(rows.len());
    let mut total = vec![0.0; w.len()];
    for (s, g) in rows {
        scores.push(s);
        total = add_into(total, g);
    }
    Ok((scores, total))
}

/// Per-row `‖∇_x f(x)‖₂` over the real positions.
pub fn gradient_norms<C: SequenceCritic + ?Sized>(batch: &PaddedBatch, critic: &C) -> Result<Vec<f64>> {
    let (_, g) = critic.input_gradients(batch)?;
    Ok((0..batch.batch_size())
        .map(|r| g[r * batch.n_max..r * batch.n_max + batch.lengths[r]].iter().flatten().map(|v| v * v).sum::<f64>().sqrt())
        .collect())
}

/// `mean_l (‖∇ f(x̂_l)‖ - 1)²` at the interpolates `x̂ = ε x + (1 - ε) x̃`.
pub fn gradient_penalty<C: SequenceCritic + ?Sized>(
    real: &PaddedBatch,
    fake: &PaddedBatch,
    eps: &[f64],
    critic: &C,
) -> Result<f64> {
    let xhat = interpolate(real, fake, eps)?;
    if xhat.batch_size() == 0 {
        return Err(Error::Shape("gradient penalty of an empty batch".into()));
    }
    let norms = gradient_norms(&xhat, critic)?;
    Ok(norms.iter().map(|n| (n - 1.0).powi(2)).sum::<f64>() / norms.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyGrad {
    pub penalty: f64,
    pub norms: Vec<f64>,
    /// `∂ penalty / ∂w`.
    pub grad: Vec<f64>,
}

/// Gradient penalty together with its weight gradient.
///
/// `∂‖g‖/∂w = ∇_w (uᵀ ∇_x f)` with `u = g / ‖g‖` held fixed, which is the
/// tangent of `∇_w f` when the reverse pass runs on dual numbers seeded
/// with the input direction `u`.
pub fn gradient_penalty_grad(real: &PaddedBatch, fake: &PaddedBatch, eps: &[f64], w: &CriticParams) -> Result<PenaltyGrad> {
    let xhat = interpolate(real, fake, eps)?;
    check(&xhat, w)?;
    let l = xhat.batch_size();
    if l == 0 {
        return Err(Error::Shape("gradient penalty of an empty batch".into()));
    }
    let rows: Vec<(f64, Vec<f64>)> = (0..l)
        .into_par_iter()
        .map(|r| {
            let feats = features(xhat.row(r));
            let (_, du) = run_row(w, &feats, None, true);
            let g = features_to_values(&du);
            let norm = g.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
            let dir: Vec<[f64; 3]> = if norm > 0.0 {
                g.iter().map(|v| [v[0] / norm, v[1] / norm, v[2] / norm]).collect()
            } else {
                vec![[0.0; 3]; g.len()]
            };
            let tangent = features(&dir);
            let inputs: Vec<[Dual; 3]> =
                feats.iter().zip(&tangent).map(|(f, d)| std::array::from_fn(|k| Dual::new(f[k], d[k]))).collect();
            let mut gw = vec![Dual::default(); w.len()];
            let coef = 2.0 * (norm - 1.0) / l as f64;
            run_row(w, &inputs, Some((&mut gw, coef)), false);
            (norm, gw.into_iter().map(|d| d.d).collect())
        })
        .collect();
    let mut norms = Vec::with_capacity(l);
    let mut grad = vec![0.0; w.len()];
    for (n, g) in rows {
        norms.push(n);
        grad = add_into(grad, g);
    }
    let penalty = norms.iter().map(|n| (n - 1.0).powi(2)).sum::<f64>() / l as f64;
    Ok(PenaltyGrad { penalty, norms, grad })
}
