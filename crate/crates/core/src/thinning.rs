//! Missing-at-random thinning driven by a rectangular region map.
//!
//! Two independent stages are available. [`victimization_subsample`] keeps
//! each event of region `d` with probability `min(p_d, 1)`, where `p_d` is
//! either given directly or derived from an expected victim count per half
//! year. [`thin_stream`] then keeps each event with the reporting rate `q_d`
//! of its region. Decisions are Bernoulli draws keyed by event index, so they
//! are frozen masks with respect to the model parameters.

use serde::{Deserialize, Serialize};

use crate::model::{default_domain, Ancestry, EventStream, Rect};
use crate::noise::{BaseNoise, Channel};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub rects: Vec<Rect>,
    /// Reporting rate.
    pub q: f64,
    /// Victimization retention probability.
    #[serde(default)]
    pub p: Option<f64>,
    /// Expected victims per half year, used to derive `p` when it is absent.
    #[serde(default)]
    pub victims_per_half_year: Option<f64>,
}

impl Region {
    pub fn new(name: impl Into<String>, rects: Vec<Rect>, q: f64) -> Self {
        Self { name: name.into(), rects, q, p: None, victims_per_half_year: None }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.rects.iter().any(|r| r.contains(x, y))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMap {
    pub regions: Vec<Region>,
    /// Reporting rate for points outside every region.
    pub default_rate: f64,
}

fn check_rate(what: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} = {v} is outside [0, 1]")))
    }
}

impl RegionMap {
    /// No regions; every point gets `q`.
    pub fn uniform(q: f64) -> Self {
        Self { regions: Vec::new(), default_rate: q }
    }

    /// Identity map.
    pub fn none() -> Self {
        Self::uniform(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        check_rate("default_rate", self.default_rate)?;
        for (i, r) in self.regions.iter().enumerate() {
            if r.name.is_empty() {
                return Err(Error::Config(format!("region {i} has an empty name")));
            }
            if self.regions[..i].iter().any(|o| o.name == r.name) {
                return Err(Error::Config(format!("duplicate region name {:?}", r.name)));
            }
            if r.rects.is_empty() {
                return Err(Error::Config(format!("region {:?} has no rectangles", r.name)));
            }
            check_rate(&format!("region {:?} q", r.name), r.q)?;
            if let Some(p) = r.p {
                check_rate(&format!("region {:?} p", r.name), p)?;
            }
            if let Some(v) = r.victims_per_half_year {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::Config(format!("region {:?} victims_per_half_year = {v}", r.name)));
                }
            }
            for rect in &r.rects {
                rect.validate()?;
            }
            for other in &self.regions[..i] {
                for a in &r.rects {
                    if other.rects.iter().any(|b| a.overlaps(b)) {
                        return Err(Error::Config(format!("regions {:?} and {:?} overlap", other.name, r.name)));
                    }
                }
            }
        }
        Ok(())
    }

    /// Index of the region containing the point; shared boundaries go to the
    /// region listed first.
    pub fn region_of(&self, x: f64, y: f64) -> Option<usize> {
        self.regions.iter().position(|r| r.contains(x, y))
    }

    pub fn lookup_rate(&self, x: f64, y: f64) -> f64 {
        self.region_of(x, y).map_or(self.default_rate, |i| self.regions[i].q)
    }

    /// True when every point keeps its events.
    pub fn is_identity(&self) -> bool {
        self.default_rate == 1.0 && self.regions.iter().all(|r| r.q == 1.0)
    }
}

pub fn lookup_rate(p: [f64; 2], map: &RegionMap) -> f64 {
    map.lookup_rate(p[0], p[1])
}

/// Nineteen rectangles tiling the default domain: the western half
/// (`x ≤ 0`) cut into ten equal y-bands, the eastern half into nine.
/// Regions are named `d01` to `d19`, west to east and south to north.
pub fn synthetic_partition(rates: &[f64]) -> Result<RegionMap> {
    const WEST: usize = 10;
    const EAST: usize = 9;
    if rates.len() != WEST + EAST {
        return Err(Error::Config(format!("synthetic partition needs {} rates, got {}", WEST + EAST, rates.len())));
    }
    let d = default_domain();
    let mut regions = Vec::with_capacity(WEST + EAST);
    for (half, bands, x0, x1) in [(0, WEST, d.x_min, 0.0), (1, EAST, 0.0, d.x_max)] {
        let h = d.height() / bands as f64;
        for b in 0..bands {
            let y0 = d.y_min + b as f64 * h;
            let y1 = if b + 1 == bands { d.y_max } else { d.y_min + (b + 1) as f64 * h };
            let k = half * WEST + b;
            regions.push(Region::new(format!("d{:02}", k + 1), vec![Rect::new(x0, x1, y0, y1)], rates[k]));
        }
    }
    let map = RegionMap { regions, default_rate: 1.0 };
    map.validate()?;
    Ok(map)
}

/// Keeps the flagged events. Parent links are remapped to the new indices;
/// links to dropped events become [`Ancestry::OffspringOfUnobserved`].
pub fn select(stream: &EventStream, keep: &[bool]) -> EventStream {
    assert_eq!(keep.len(), stream.len(), "mask length must match the stream");
    let mut new_index = vec![None; stream.len()];
    let mut events = Vec::with_capacity(keep.iter().filter(|&&k| k).count());
    for (i, (e, &k)) in stream.events.iter().zip(keep).enumerate() {
        if !k {
            continue;
        }
        let mut e = *e;
        if let Ancestry::Offspring(j) = e.ancestry {
            e.ancestry = new_index[j].map_or(Ancestry::OffspringOfUnobserved, Ancestry::Offspring);
        }
        new_index[i] = Some(events.len());
        events.push(e);
    }
    EventStream { events, horizon: stream.horizon, truncation: stream.truncation, retained: None }
}

/// Bernoulli reporting decisions, keyed by event index.
pub fn retention_mask(stream: &EventStream, map: &RegionMap, noise: &mut BaseNoise) -> Result<Vec<bool>> {
    stream
        .events
        .iter()
        .enumerate()
        .map(|(i, e)| Ok(noise.uniform(Channel::Thinning, i as u64)? < map.lookup_rate(e.x, e.y)))
        .collect()
}

/// Reporting-rate thinning. With `keep_removed` the full stream is returned
/// with per-event `retained` flags instead.
pub fn thin_stream(stream: &EventStream, map: &RegionMap, noise: &mut BaseNoise, keep_removed: bool) -> Result<EventStream> {
    let keep = retention_mask(stream, map, noise)?;
    if keep_removed {
        let mut out = stream.clone();
        out.retained = Some(keep);
        Ok(out)
    } else {
        Ok(select(stream, &keep))
    }
}

/// Per-region victimization probabilities `p_d` for a given stream.
///
/// A region with an explicit `p` uses it; otherwise
/// `p_d = victims_per_half_year · horizon_ratio / |C_d|` with `|C_d|` the
/// number of events of the stream inside the region.
pub fn victimization_rates(stream: &EventStream, map: &RegionMap, horizon_ratio: f64) -> Result<Vec<f64>> {
    if !(horizon_ratio >= 0.0 && horizon_ratio.is_finite()) {
        return Err(Error::Config(format!("horizon ratio {horizon_ratio} must be finite and non-negative")));
    }
    let mut counts = vec![0usize; map.regions.len()];
    for e in &stream.events {
        if let Some(d) = map.region_of(e.x, e.y) {
            counts[d] += 1;
        }
    }
    map.regions
        .iter()
        .zip(&counts)
        .map(|(r, &n)| match (r.p, r.victims_per_half_year) {
            (Some(p), _) => Ok(p),
            (None, Some(v)) if n == 0 => Ok(if v > 0.0 { 1.0 } else { 0.0 }),
            (None, Some(v)) => Ok(v * horizon_ratio / n as f64),
            (None, None) => Err(Error::Config(format!("region {:?} has neither p nor victims_per_half_year", r.name))),
        })
        .collect()
}

/// Victimization step: each event in region `d` survives with probability
/// `min(p_d, 1)`; events outside every region are kept.
pub fn victimization_subsample(
    stream: &EventStream,
    map: &RegionMap,
    horizon_ratio: f64,
    noise: &mut BaseNoise,
) -> Result<EventStream> {
    let rates = victimization_rates(stream, map, horizon_ratio)?;
    let keep = stream
        .events
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let p = map.region_of(e.x, e.y).map_or(1.0, |d| rates[d].min(1.0));
            Ok(noise.uniform(Channel::Victimization, i as u64)? < p)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(select(stream, &keep))
}
