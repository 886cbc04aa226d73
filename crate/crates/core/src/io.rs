//! File formats: stream CSVs with JSON sidecars, TOML run configuration and
//! region maps, run manifests, and plot images with CSV data twins.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::em::EmConfig;
use crate::generator::{GenConfig, Limit};
use crate::gof::{GofConfig, GofHistogram};
use crate::hotspot::{EvalGrid, DEFAULT_MAE_FLOOR};
use crate::model::{BackgroundConfig, Event, EventStream, ModelParams, Rect};
use crate::thinning::{synthetic_partition, Region, RegionMap};
use crate::wgan::{SeedPolicy, TrainConfig};
use crate::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;
pub const STREAM_FORMAT_VERSION: u32 = 1;

fn parse_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse { path: path.display().to_string(), message: message.into() }
}

/// 17 significant digits, enough for an exact round trip.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| parse_err(path, e.to_string()))?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| parse_err(path, e.to_string()))
}

// ---------------------------------------------------------------------------
// streams

/// Sidecar metadata written next to every stream CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamMeta {
    pub format_version: u32,
    /// Number of streams `K`, including empty ones that have no CSV rows.
    pub n_streams: usize,
    pub horizons: Vec<f64>,
    pub truncations: Vec<Option<usize>>,
    #[serde(default)]
    pub params: Option<ModelParams>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub limit: Option<Limit>,
    /// SHA-256 of the region map used for thinning.
    #[serde(default)]
    pub region_map_hash: Option<String>,
}

impl StreamMeta {
    pub fn describe(streams: &[EventStream]) -> Self {
        Self {
            format_version: STREAM_FORMAT_VERSION,
            n_streams: streams.len(),
            horizons: streams.iter().map(|s| s.horizon).collect(),
            truncations: streams.iter().map(|s| s.truncation).collect(),
            params: None,
            seed: None,
            limit: None,
            region_map_hash: None,
        }
    }
}

/// `streams.csv` → `streams.meta.json`.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta.json")
}

/// CSV text with header `stream_id,t,x,y` and a `retained` column when any
/// stream carries reporting flags.
pub fn streams_to_csv(streams: &[EventStream]) -> Result<Vec<u8>> {
    let flagged = streams.iter().any(|s| s.retained.is_some());
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::InvalidArgument(e.to_string());
    if flagged {
        w.write_record(["stream_id", "t", "x", "y", "retained"]).map_err(csv_err)?;
    } else {
        w.write_record(["stream_id", "t", "x", "y"]).map_err(csv_err)?;
    }
    for (id, s) in streams.iter().enumerate() {
        s.validate().map_err(|e| Error::Stream { index: id, source: Box::new(e) })?;
        for (i, e) in s.events.iter().enumerate() {
            let mut rec = vec![id.to_string(), fmt_f64(e.t), fmt_f64(e.x), fmt_f64(e.y)];
            if flagged {
                let kept = s.retained.as_ref().is_none_or(|r| r[i]);
                rec.push(if kept { "1" } else { "0" }.to_string());
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// Writes `csv` and its sidecar. The sidecar's counts and horizons are
/// always taken from `streams`.
pub fn write_streams(csv: &Path, streams: &[EventStream], meta: &StreamMeta) -> Result<()> {
    let bytes = streams_to_csv(streams)?;
    let d = StreamMeta::describe(streams);
    let meta = StreamMeta { n_streams: d.n_streams, horizons: d.horizons, truncations: d.truncations, ..meta.clone() };
    write_bytes(csv, &bytes)?;
    write_json(&sidecar_path(csv), &meta)
}

fn field<'r>(rec: &'r csv::StringRecord, i: usize, path: &Path, line: u64) -> Result<&'r str> {
    rec.get(i).ok_or_else(|| parse_err(path, format!("row {line}: missing column {}", i + 1)))
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str, path: &Path, line: u64) -> Result<T> {
    s.trim().parse().map_err(|_| parse_err(path, format!("row {line}: cannot parse {what} from {s:?}")))
}

/// Parses stream CSV text. Rows must be sorted by `(stream_id, t)`; the first
/// offending row is named in the error. Without `meta`, the stream count is
/// `max id + 1` and each horizon is the stream's last event time.
pub fn streams_from_csv(text: &str, meta: Option<&StreamMeta>, path: &Path) -> Result<Vec<EventStream>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| parse_err(path, e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let flagged = match header.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["stream_id", "t", "x", "y"] => false,
        ["stream_id", "t", "x", "y", "retained"] => true,
        _ => return Err(parse_err(path, format!("unexpected header {header:?}"))),
    };
    let mut events: Vec<Vec<Event>> = Vec::new();
    let mut flags: Vec<Vec<bool>> = Vec::new();
    let mut prev: Option<(usize, f64)> = None;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(path, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let id: usize = parse_num(field(&rec, 0, path, line)?, "stream_id", path, line)?;
        let t: f64 = parse_num(field(&rec, 1, path, line)?, "t", path, line)?;
        let x: f64 = parse_num(field(&rec, 2, path, line)?, "x", path, line)?;
        let y: f64 = parse_num(field(&rec, 3, path, line)?, "y", path, line)?;
        if !(t.is_finite() && x.is_finite() && y.is_finite()) || t < 0.0 {
            return Err(parse_err(path, format!("row {line}: values must be finite with t >= 0")));
        }
        if let Some((pid, pt)) = prev {
            if id < pid || (id == pid && t <= pt) {
                return Err(parse_err(path, format!("row {line}: rows are not sorted by (stream_id, t)")));
            }
        }
        prev = Some((id, t));
        if events.len() <= id {
            events.resize_with(id + 1, Vec::new);
            flags.resize_with(id + 1, Vec::new);
        }
        events[id].push(Event::new(t, x, y));
        if flagged {
            let kept = match field(&rec, 4, path, line)?.trim() {
                "1" => true,
                "0" => false,
                other => return Err(parse_err(path, format!("row {line}: retained must be 0 or 1, got {other:?}"))),
            };
            flags[id].push(kept);
        }
    }
    let n = match meta {
        Some(m) => {
            if m.format_version != STREAM_FORMAT_VERSION {
                return Err(parse_err(path, format!("unsupported stream format version {}", m.format_version)));
            }
            if events.len() > m.n_streams || m.horizons.len() != m.n_streams || m.truncations.len() != m.n_streams {
                return Err(parse_err(path, "sidecar metadata disagrees with the CSV".to_string()));
            }
            m.n_streams
        }
        None => events.len(),
    };
    events.resize_with(n, Vec::new);
    flags.resize_with(n, Vec::new);
    let mut out = Vec::with_capacity(n);
    for (id, (ev, fl)) in events.into_iter().zip(flags).enumerate() {
        let horizon = match meta {
            Some(m) => m.horizons[id],
            None => ev.last().map_or(0.0, |e| e.t),
        };
        let mut s = EventStream::new(ev, horizon);
        s.truncation = meta.and_then(|m| m.truncations[id]);
        if flagged {
            s.retained = Some(fl);
        }
        s.validate().map_err(|e| parse_err(path, format!("stream {id}: {e}")))?;
        out.push(s);
    }
    Ok(out)
}

/// Reads a stream CSV and, when present, its sidecar.
pub fn read_streams(csv: &Path) -> Result<(Vec<EventStream>, Option<StreamMeta>)> {
    let text = read_text(csv)?;
    let side = sidecar_path(csv);
    let meta: Option<StreamMeta> = if side.exists() { Some(read_json(&side)?) } else { None };
    let streams = streams_from_csv(&text, meta.as_ref(), csv)?;
    Ok((streams, meta))
}

// ---------------------------------------------------------------------------
// region maps

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionSpec {
    name: String,
    q: f64,
    /// `[x0, y0, x1, y1]` per rectangle.
    rects: Vec<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    victims_per_half_year: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionMapFile {
    #[serde(default = "one")]
    default_rate: f64,
    #[serde(default)]
    regions: Vec<RegionSpec>,
}

fn one() -> f64 {
    1.0
}

pub fn region_map_from_toml(text: &str, path: &Path) -> Result<RegionMap> {
    let file: RegionMapFile = toml::from_str(text).map_err(|e| parse_err(path, e.to_string()))?;
    let map = RegionMap {
        default_rate: file.default_rate,
        regions: file
            .regions
            .into_iter()
            .map(|r| Region {
                name: r.name,
                q: r.q,
                p: r.p,
                victims_per_half_year: r.victims_per_half_year,
                rects: r.rects.iter().map(|[x0, y0, x1, y1]| Rect::new(*x0, *x1, *y0, *y1)).collect(),
            })
            .collect(),
    };
    map.validate().map_err(|e| parse_err(path, e.to_string()))?;
    Ok(map)
}

pub fn region_map_to_toml(map: &RegionMap) -> Result<String> {
    let file = RegionMapFile {
        default_rate: map.default_rate,
        regions: map
            .regions
            .iter()
            .map(|r| RegionSpec {
                name: r.name.clone(),
                q: r.q,
                p: r.p,
                victims_per_half_year: r.victims_per_half_year,
                rects: r.rects.iter().map(|b| [b.x_min, b.y_min, b.x_max, b.y_max]).collect(),
            })
            .collect(),
    };
    toml::to_string(&file).map_err(|e| Error::InvalidArgument(e.to_string()))
}

pub fn read_region_map(path: &Path) -> Result<RegionMap> {
    region_map_from_toml(&read_text(path)?, path)
}

/// Hex SHA-256 of the map's canonical TOML form.
pub fn region_map_hash(map: &RegionMap) -> Result<String> {
    let digest = Sha256::digest(region_map_to_toml(map)?.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

// ---------------------------------------------------------------------------
// run configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub streams: usize,
    pub limit: Limit,
    pub batch_size: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self { streams: 100, limit: Limit::Horizon(7.0), batch_size: 256 }
    }
}

impl SimulateSection {
    pub fn gen(&self) -> GenConfig {
        GenConfig { limit: self.limit, batch_size: self.batch_size }
    }
}

/// At most one source of reporting rates; none means no thinning.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThinningSection {
    /// Region-map TOML, relative to the config file.
    pub region_map: Option<PathBuf>,
    /// One reporting rate everywhere.
    pub rate: Option<f64>,
    /// 19 rates for the built-in synthetic partition.
    pub synthetic_rates: Option<Vec<f64>>,
    /// Apply victimization subsampling with this horizon ratio before reporting.
    pub victimization_horizon_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultiStartSection {
    /// Explicit initial values; empty means the factorial grid around `model`.
    pub inits: Vec<ModelParams>,
    pub seed_policy: SeedPolicy,
}

impl Default for MultiStartSection {
    fn default() -> Self {
        Self { inits: Vec::new(), seed_policy: SeedPolicy::Disjoint }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HotspotSection {
    pub mae_floor: f64,
    /// Estimated parameters to compare against `model`; `model` itself when absent.
    pub estimate: Option<ModelParams>,
    /// Pixels per grid cell in heatmaps.
    pub cell_pixels: u32,
}

impl Default for HotspotSection {
    fn default() -> Self {
        Self { mae_floor: DEFAULT_MAE_FLOOR, estimate: None, cell_pixels: 24 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    #[default]
    Bypass,
    Em,
    Wgan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub estimator: EstimatorKind,
    pub n_train: usize,
    pub limit: Limit,
    pub init_factor: [f64; 4],
    /// Parameter grid; the 27-point default grid when empty.
    pub thetas: Vec<ModelParams>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { estimator: EstimatorKind::Bypass, n_train: 50, limit: Limit::Horizon(7.0), init_factor: [1.0; 4], thetas: Vec::new() }
    }
}

/// The whole pipeline configuration. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub seed: Option<u64>,
    pub model: ModelParams,
    pub background: BackgroundConfig,
    pub simulate: SimulateSection,
    pub thinning: ThinningSection,
    pub em: EmConfig,
    pub wgan: TrainConfig,
    pub multistart: MultiStartSection,
    pub gof: GofConfig,
    pub grid: EvalGrid,
    pub hotspots: HotspotSection,
    pub sweep: SweepSection,
    /// Directory of the config file, for resolving relative paths.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: None,
            model: ModelParams::reference(),
            background: BackgroundConfig::default(),
            simulate: SimulateSection::default(),
            thinning: ThinningSection::default(),
            em: EmConfig::default(),
            wgan: TrainConfig::default(),
            multistart: MultiStartSection::default(),
            gof: GofConfig::default(),
            grid: EvalGrid::default(),
            hotspots: HotspotSection::default(),
            sweep: SweepSection::default(),
            base_dir: PathBuf::new(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "{}: config version {} is not supported (expected {CONFIG_VERSION})",
                path.display(),
                cfg.version
            )));
        }
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    pub fn region_map_path(&self) -> Option<PathBuf> {
        self.thinning.region_map.as_ref().map(|p| self.base_dir.join(p))
    }

    /// The reporting map selected by the `[thinning]` section.
    pub fn region_map(&self) -> Result<RegionMap> {
        let t = &self.thinning;
        let sources = [t.region_map.is_some(), t.rate.is_some(), t.synthetic_rates.is_some()];
        if sources.iter().filter(|s| **s).count() > 1 {
            return Err(Error::Config("[thinning] sets more than one of region_map, rate, synthetic_rates".into()));
        }
        if let Some(path) = self.region_map_path() {
            if !path.exists() {
                return Err(Error::Config(format!("region map file {} does not exist", path.display())));
            }
            return read_region_map(&path).map_err(|e| Error::Config(e.to_string()));
        }
        let map = match (&t.rate, &t.synthetic_rates) {
            (Some(q), _) => RegionMap::uniform(*q),
            (_, Some(rates)) => synthetic_partition(rates)?,
            _ => RegionMap::none(),
        };
        map.validate()?;
        Ok(map)
    }
}

// ---------------------------------------------------------------------------
// manifests

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    /// Resolved configuration as TOML.
    pub config: String,
    pub inputs: Vec<String>,
    /// Artifact paths relative to the run directory.
    pub outputs: Vec<String>,
    pub code_version: String,
    pub wall_time_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: &RunConfig) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            seed,
            config: config.to_toml()?,
            inputs: Vec::new(),
            outputs: Vec::new(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_secs: 0.0,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_NAME), self)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        read_json(&dir.join(MANIFEST_NAME))
    }
}

// ---------------------------------------------------------------------------
// plots

fn ramp(v: f64) -> Rgb<u8> {
    // dark blue → teal → yellow
    const STOPS: [[f64; 3]; 5] =
        [[68.0, 1.0, 84.0], [59.0, 82.0, 139.0], [33.0, 145.0, 140.0], [94.0, 201.0, 98.0], [253.0, 231.0, 37.0]];
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let pos = v * (STOPS.len() - 1) as f64;
    let i = (pos.floor() as usize).min(STOPS.len() - 2);
    let f = pos - i as f64;
    let c = |k: usize| (STOPS[i][k] + f * (STOPS[i + 1][k] - STOPS[i][k])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// Matrix rows as CSV lines of 17-digit floats.
pub fn matrix_to_csv(m: &[Vec<f64>]) -> String {
    let mut s = String::new();
    for row in m {
        s.push_str(&row.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(","));
        s.push('\n');
    }
    s
}

pub fn matrix_from_csv(text: &str, path: &Path) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| parse_err(path, format!("line {}: bad number {v:?}", i + 1))))
                .collect()
        })
        .collect()
}

fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    })?;
    write_bytes(path, buf.get_ref())
}

/// Heatmap of a `rows × cols` matrix with x (rows) left to right and y
/// (cols) bottom to top, plus `<stem>.csv` holding the exact values.
/// Colours run from 0 to `vmax`.
pub fn write_heatmap(png: &Path, matrix: &[Vec<f64>], vmax: f64, cell_pixels: u32) -> Result<()> {
    let rows = matrix.len() as u32;
    let cols = matrix.first().map_or(0, Vec::len) as u32;
    if rows == 0 || cols == 0 || matrix.iter().any(|r| r.len() != cols as usize) {
        return Err(Error::Shape("heatmap needs a non-empty rectangular matrix".into()));
    }
    let px = cell_pixels.max(1);
    let img = RgbImage::from_fn(rows * px, cols * px, |u, v| {
        let r = (u / px) as usize;
        let c = (cols - 1 - v / px) as usize;
        ramp(if vmax > 0.0 { matrix[r][c] / vmax } else { 0.0 })
    });
    write_png(png, &img)?;
    write_bytes(&png.with_extension("csv"), matrix_to_csv(matrix).as_bytes())
}

/// Histogram data `bin_lo,bin_hi,training,synthetic` and a bar chart.
pub fn write_histogram(png: &Path, h: &GofHistogram) -> Result<()> {
    let mut csv = String::from("bin_lo,bin_hi,training,synthetic\n");
    for k in 0..h.training.len() {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            fmt_f64(h.edges[k]),
            fmt_f64(h.edges[k + 1]),
            fmt_f64(h.training[k]),
            fmt_f64(h.synthetic[k])
        ));
    }
    write_bytes(&png.with_extension("csv"), csv.as_bytes())?;

    let (bar, height) = (8u32, 200u32);
    let n = h.training.len() as u32;
    let top = h.training.iter().chain(&h.synthetic).cloned().fold(0.0, f64::max);
    let mut img = RgbImage::from_pixel((n * 2 * bar).max(1), height, Rgb([255, 255, 255]));
    for k in 0..n as usize {
        for (j, (v, colour)) in [(h.training[k], Rgb([40, 80, 160])), (h.synthetic[k], Rgb([220, 120, 30]))].into_iter().enumerate() {
            let len = if top > 0.0 { ((v / top) * (height - 1) as f64).round() as u32 } else { 0 };
            let x0 = (2 * k as u32 + j as u32) * bar;
            for x in x0..x0 + bar - 1 {
                for y in height - len..height {
                    img.put_pixel(x, y, colour);
                }
            }
        }
    }
    write_png(png, &img)
}

/// QQ data `theoretical,empirical` and a scatter plot with the diagonal.
pub fn write_qq(png: &Path, pairs: &[(f64, f64)]) -> Result<()> {
    let mut csv = String::from("theoretical,empirical\n");
    for (a, b) in pairs {
        csv.push_str(&format!("{},{}\n", fmt_f64(*a), fmt_f64(*b)));
    }
    write_bytes(&png.with_extension("csv"), csv.as_bytes())?;

    let size = 300u32;
    let top = pairs.iter().flat_map(|(a, b)| [*a, *b]).filter(|v| v.is_finite()).fold(1e-12, f64::max);
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let to_px = |v: f64| ((v / top).clamp(0.0, 1.0) * (size - 1) as f64).round() as u32;
    for i in 0..size {
        img.put_pixel(i, size - 1 - i, Rgb([180, 180, 180]));
    }
    for (a, b) in pairs {
        img.put_pixel(to_px(*a), size - 1 - to_px(*b), Rgb([20, 20, 20]));
    }
    write_png(png, &img)
}

/// Appends a line to a text file, creating it when needed.
pub fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{batch_seeds, simulate_batch};
    use crate::thinning::thin_stream;
    use crate::noise::BaseNoise;

    fn sample() -> Vec<EventStream> {
        let p = ModelParams::new(0.5, 1.0, 1.0, 0.05);
        let mut s = simulate_batch(&p, &BackgroundConfig::default(), &batch_seeds(3, 6), &GenConfig::count(12)).unwrap();
        s.push(EventStream::empty(4.0));
        s
    }

    #[test]
    fn stream_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let streams = sample();
        let meta = StreamMeta { seed: Some(3), ..StreamMeta::describe(&[]) };
        write_streams(&path, &streams, &meta).unwrap();
        let (back, m) = read_streams(&path).unwrap();
        let m = m.unwrap();
        assert_eq!(m.n_streams, streams.len());
        assert_eq!(m.seed, Some(3));
        assert_eq!(back.len(), streams.len());
        for (a, b) in streams.iter().zip(&back) {
            assert_eq!(a.horizon, b.horizon);
            assert_eq!(a.truncation, b.truncation);
            assert_eq!(a.len(), b.len());
            for (e, f) in a.events.iter().zip(&b.events) {
                assert_eq!((e.t.to_bits(), e.x.to_bits(), e.y.to_bits()), (f.t.to_bits(), f.x.to_bits(), f.y.to_bits()));
            }
        }
    }

    #[test]
    fn retained_column_round_trips() {
        let streams: Vec<EventStream> = sample()
            .iter()
            .enumerate()
            .map(|(i, s)| thin_stream(s, &RegionMap::uniform(0.5), &mut BaseNoise::new(i as u64), true).unwrap())
            .collect();
        let text = String::from_utf8(streams_to_csv(&streams).unwrap()).unwrap();
        assert!(text.starts_with("stream_id,t,x,y,retained\n"));
        let meta = StreamMeta::describe(&streams);
        let back = streams_from_csv(&text, Some(&meta), Path::new("x.csv")).unwrap();
        for (a, b) in streams.iter().zip(&back) {
            assert_eq!(a.retained, b.retained);
        }
    }

    #[test]
    fn unsorted_rows_are_named() {
        let text = "stream_id,t,x,y\n0,1.0,0,0\n0,2.0,0,0\n0,1.5,0,0\n";
        let err = streams_from_csv(text, None, Path::new("bad.csv")).unwrap_err().to_string();
        assert!(err.contains("row 4"), "{err}");
        let text = "stream_id,t,x,y\n1,1.0,0,0\n0,2.0,0,0\n";
        assert!(streams_from_csv(text, None, Path::new("bad.csv")).unwrap_err().to_string().contains("row 3"));
        assert!(streams_from_csv("a,b\n", None, Path::new("bad.csv")).is_err());
    }

    #[test]
    fn region_map_toml_round_trip_and_hash() {
        let map = synthetic_partition(&[0.5; 19]).unwrap();
        let text = region_map_to_toml(&map).unwrap();
        let back = region_map_from_toml(&text, Path::new("m.toml")).unwrap();
        assert_eq!(back, map);
        assert_eq!(region_map_hash(&map).unwrap(), region_map_hash(&back).unwrap());
        assert_ne!(region_map_hash(&map).unwrap(), region_map_hash(&RegionMap::uniform(0.5)).unwrap());
        let manual = "default_rate = 1.0\n[[regions]]\nname = \"a\"\nq = 0.3\nrects = [[-1.0, -2.0, 1.0, 2.0]]\n";
        let m = region_map_from_toml(manual, Path::new("m.toml")).unwrap();
        assert_eq!(m.regions[0].rects[0], Rect::new(-1.0, 1.0, -2.0, 2.0));
        assert!(region_map_from_toml("default_rate = 1.0\ntypo = 2\n", Path::new("m.toml")).is_err());
    }

    #[test]
    fn config_defaults_and_strictness() {
        let cfg = RunConfig::from_toml("version = 1\n", Path::new("c.toml")).unwrap();
        assert_eq!(cfg.wgan, TrainConfig::default());
        assert_eq!(cfg.grid, EvalGrid::default());
        let round = RunConfig::from_toml(&cfg.to_toml().unwrap(), Path::new("c.toml")).unwrap();
        assert_eq!(round, cfg);
        assert!(RunConfig::from_toml("version = 1\nsede = 3\n", Path::new("c.toml")).unwrap_err().is_config());
        assert!(RunConfig::from_toml("version = 1\n[wgan]\nlamda_gp = 1.0\n", Path::new("c.toml")).is_err());
        assert!(RunConfig::from_toml("version = 2\n", Path::new("c.toml")).is_err());
        let t = "version = 1\n[simulate]\nstreams = 3\nlimit = { count = 50 }\n[thinning]\nrate = 0.4\n";
        let c = RunConfig::from_toml(t, Path::new("c.toml")).unwrap();
        assert_eq!(c.simulate.limit, Limit::Count(50));
        assert_eq!(c.region_map().unwrap(), RegionMap::uniform(0.4));
    }

    #[test]
    fn missing_region_map_names_path() {
        let c = RunConfig::from_toml("version = 1\n[thinning]\nregion_map = \"nope.toml\"\n", Path::new("/tmp/x/c.toml")).unwrap();
        let err = c.region_map().unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("/tmp/x/nope.toml"));
    }

    #[test]
    fn heatmap_twin_equals_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let m = vec![vec![0.1, 1.0 / 3.0, 2.0], vec![0.0, 5.5, 1e-17]];
        let png = dir.path().join("h.png");
        write_heatmap(&png, &m, 5.5, 4).unwrap();
        let back = matrix_from_csv(&fs::read_to_string(dir.path().join("h.csv")).unwrap(), &png).unwrap();
        assert_eq!(back, m);
        let img = image::open(&png).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (8, 12));
        assert_eq!(*img.get_pixel(0, 0), ramp(2.0 / 5.5));
    }
}
