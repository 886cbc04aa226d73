use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sthawkes::em::fit_em;
use sthawkes::generator::{batch_seeds, simulate_batch, simulate_reported_batch};
use sthawkes::gof::{compensator_residuals, qq_residuals, select_best, GofSetup};
use sthawkes::hotspot::{
    default_sweep_grid, expected_counts, hotspot_accuracy, relative_mae, robustness_sweep, Estimator, SweepConfig,
};
use sthawkes::io::{
    read_json, read_streams, region_map_hash, write_bytes, write_heatmap, write_histogram, write_json, write_qq,
    write_streams, EstimatorKind, RunConfig, RunManifest, StreamMeta, MANIFEST_NAME,
};
use sthawkes::model::{EventStream, ModelParams};
use sthawkes::noise::{derive_seed, BaseNoise};
use sthawkes::stats::ks_exp1;
use sthawkes::thinning::{thin_stream, victimization_subsample, RegionMap};
use sthawkes::wgan::{default_init_grid, multi_start};
use sthawkes::{Error, Result};

use crate::Common;

// purposes of derived seeds
const DATA: u64 = 1;
const THIN: u64 = 2;
const FIT: u64 = 3;
const GOF: u64 = 4;
const TRUTH: u64 = 5;
const EST: u64 = 6;

struct Run {
    out: PathBuf,
    cfg: RunConfig,
    seed: u64,
    manifest: RunManifest,
}

impl Run {
    /// Records `name` as an output and returns its full path.
    fn output(&mut self, name: &str) -> PathBuf {
        self.manifest.outputs.push(name.to_string());
        self.out.join(name)
    }

    /// Records an image together with its CSV data twin.
    fn plot(&mut self, name: &str) -> PathBuf {
        let p = self.output(name);
        self.manifest.outputs.push(Path::new(name).with_extension("csv").display().to_string());
        p
    }

    fn input(&mut self, p: &Path) {
        self.manifest.inputs.push(p.display().to_string());
    }

    fn json<T: Serialize + ?Sized>(&mut self, name: &str, v: &T) -> Result<()> {
        let p = self.output(name);
        write_json(&p, v)
    }

    fn streams(&mut self, name: &str, streams: &[EventStream], meta: StreamMeta) -> Result<()> {
        let p = self.output(name);
        self.manifest.outputs.push(Path::new(name).with_extension("meta.json").display().to_string());
        write_streams(&p, streams, &meta)
    }

    fn meta(&self, map: Option<&RegionMap>) -> Result<StreamMeta> {
        Ok(StreamMeta {
            params: Some(self.cfg.model),
            seed: Some(self.seed),
            limit: Some(self.cfg.simulate.limit),
            region_map_hash: map.map(region_map_hash).transpose()?,
            ..StreamMeta::describe(&[])
        })
    }

    fn n_streams(&self) -> usize {
        self.cfg.simulate.streams
    }
}

pub fn run(command: &str, common: &Common, candidates: Option<PathBuf>) -> Result<()> {
    let start = Instant::now();
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(n) = common.streams {
        cfg.simulate.streams = n;
    }
    let seed = common.seed.or(cfg.seed).unwrap_or(0);
    cfg.seed = Some(seed);
    let manifest = RunManifest::new(command, seed, &cfg)?;
    let mut run = Run { out: common.out.clone(), cfg, seed, manifest };
    if let Some(p) = &common.config {
        run.input(p);
    }
    fs::create_dir_all(&run.out).map_err(|e| Error::Config(format!("cannot create {}: {e}", run.out.display())))?;
    match command {
        "simulate" => simulate(&mut run)?,
        "thin" => thin(&mut run, common.input.as_deref())?,
        "fit-em" => fit_em_cmd(&mut run, common.input.as_deref())?,
        "fit-wgan" => fit_wgan(&mut run, common.input.as_deref())?,
        "gof" => gof(&mut run, common.input.as_deref(), candidates.as_deref())?,
        "hotspots" => hotspots(&mut run)?,
        "sweep" => sweep(&mut run)?,
        "report" => report(&mut run, common.input.as_deref())?,
        other => return Err(Error::Config(format!("unknown command {other}"))),
    }
    run.manifest.wall_time_secs = start.elapsed().as_secs_f64();
    run.manifest.write(&run.out)
}

fn simulate(run: &mut Run) -> Result<()> {
    let cfg = &run.cfg;
    let seeds = batch_seeds(derive_seed(run.seed, &[DATA]), run.n_streams());
    let streams = simulate_batch(&cfg.model, &cfg.background, &seeds, &cfg.simulate.gen())?;
    let meta = run.meta(None)?;
    run.streams("streams.csv", &streams, meta)
}

fn require_input<'a>(input: Option<&'a Path>, command: &str) -> Result<&'a Path> {
    let p = input.ok_or_else(|| Error::Config(format!("{command} needs --input")))?;
    if !p.exists() {
        return Err(Error::Config(format!("input {} does not exist", p.display())));
    }
    Ok(p)
}

fn thin(run: &mut Run, input: Option<&Path>) -> Result<()> {
    let input = require_input(input, "thin")?;
    run.input(input);
    let (streams, meta) = read_streams(input)?;
    let map = run.cfg.region_map()?;
    let base = derive_seed(run.seed, &[THIN]);
    let flagged = streams
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut noise = BaseNoise::new(derive_seed(base, &[i as u64]));
            let s = match run.cfg.thinning.victimization_horizon_ratio {
                Some(ratio) => victimization_subsample(s, &map, ratio, &mut noise)?,
                None => s.clone(),
            };
            thin_stream(&s, &map, &mut noise, true)
        })
        .collect::<Result<Vec<_>>>()?;
    let reported: Vec<EventStream> = flagged.iter().map(EventStream::reported).collect();
    let mut m = run.meta(Some(&map))?;
    if let Some(src) = meta {
        m.params = src.params;
        m.limit = src.limit;
    }
    run.streams("flagged.csv", &flagged, m.clone())?;
    run.streams("reported.csv", &reported, m)
}

/// Reported training streams: read from `--input` or simulated and thinned
/// from the config.
fn training_data(run: &mut Run, input: Option<&Path>) -> Result<(Vec<EventStream>, RegionMap)> {
    let map = run.cfg.region_map()?;
    if let Some(p) = input {
        let p = require_input(Some(p), "this command")?;
        run.input(p);
        let (streams, _) = read_streams(p)?;
        return Ok((streams.iter().map(EventStream::reported).collect(), map));
    }
    let cfg = &run.cfg;
    let seeds = batch_seeds(derive_seed(run.seed, &[DATA]), run.n_streams());
    let data = simulate_reported_batch(&cfg.model, &cfg.background, &map, &seeds, &cfg.simulate.gen())?;
    let meta = run.meta(Some(&map))?;
    run.streams("training.csv", &data, meta)?;
    Ok((data, map))
}

#[derive(Serialize)]
struct EmSummary {
    truth: ModelParams,
    estimate: ModelParams,
    converged: bool,
    iterations: usize,
    mu_ratio: f64,
    theta_ratio: f64,
    branching_ratio_ratio: f64,
}

fn fit_em_cmd(run: &mut Run, input: Option<&Path>) -> Result<()> {
    let (data, _) = training_data(run, input)?;
    let cfg = &run.cfg;
    let fit = fit_em(&data, &cfg.model, &cfg.background, &cfg.em)?;
    let summary = EmSummary {
        truth: cfg.model,
        estimate: fit.params,
        converged: fit.converged,
        iterations: fit.trace.len().saturating_sub(1),
        mu_ratio: fit.params.mu / cfg.model.mu,
        theta_ratio: fit.params.theta() / cfg.model.theta(),
        branching_ratio_ratio: fit.params.branching_ratio() / cfg.model.branching_ratio(),
    };
    run.json("em_fit.json", &fit)?;
    run.json("summary.json", &summary)
}

fn gof_setup<'a>(cfg: &'a RunConfig, seed: u64, data: &'a [EventStream], map: &'a RegionMap) -> GofSetup<'a> {
    GofSetup {
        training: data,
        bg: &cfg.background,
        map,
        gen: cfg.simulate.gen(),
        config: cfg.gof,
        seed: derive_seed(seed, &[GOF]),
    }
}

fn fit_wgan(run: &mut Run, input: Option<&Path>) -> Result<()> {
    let (data, map) = training_data(run, input)?;
    let cfg = run.cfg.clone();
    let mut tc = cfg.wgan.clone();
    tc.limit = cfg.simulate.limit;
    let inits = if cfg.multistart.inits.is_empty() { default_init_grid(&cfg.model, tc.free) } else { cfg.multistart.inits.clone() };
    let entries = multi_start(&data, &inits, &cfg.background, &map, &tc, derive_seed(run.seed, &[FIT]), cfg.multistart.seed_policy);
    for (k, e) in entries.iter().enumerate() {
        match &e.outcome {
            Ok(r) => {
                run.json(&format!("runs/run_{k:03}.json"), &r.without_timing())?;
                let mut csv = String::from("epoch,critic_loss,generator_loss,mu,alpha,beta,sigma_sq\n");
                for h in &r.history {
                    csv.push_str(&format!(
                        "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                        h.epoch, h.critic_loss, h.generator_loss, h.theta.mu, h.theta.alpha, h.theta.beta, h.theta.sigma_sq
                    ));
                }
                let p = run.output(&format!("runs/run_{k:03}_history.csv"));
                write_bytes(&p, csv.as_bytes())?;
            }
            Err(msg) => run.json(&format!("runs/run_{k:03}_error.json"), &serde_json::json!({ "seed": e.seed, "error": msg }))?,
        }
    }
    let candidates: Vec<Option<ModelParams>> = entries.iter().map(|e| e.estimate()).collect();
    let setup = gof_setup(&cfg, run.seed, &data, &map);
    let selection = select_best(&candidates, &setup)?;
    let best = candidates[selection.index].expect("selected candidates are present");
    let hist = setup.histogram(&best)?;
    run.json("selection.json", &selection)?;
    run.json("theta_hat.json", &best)?;
    let p = run.plot("gof_histogram.png");
    write_histogram(&p, &hist)
}

fn gof(run: &mut Run, input: Option<&Path>, candidates: Option<&Path>) -> Result<()> {
    let (data, map) = training_data(run, input)?;
    let cands: Vec<ModelParams> = match candidates {
        Some(p) => {
            let p = require_input(Some(p), "gof --candidates")?;
            run.input(p);
            read_json(p).map_err(|e| Error::Config(e.to_string()))?
        }
        None => std::iter::once(run.cfg.model).chain(run.cfg.multistart.inits.iter().copied()).collect(),
    };
    let wrapped: Vec<Option<ModelParams>> = cands.iter().copied().map(Some).collect();
    let cfg = run.cfg.clone();
    let setup = gof_setup(&cfg, run.seed, &data, &map);
    let selection = select_best(&wrapped, &setup)?;
    for (k, c) in cands.iter().enumerate() {
        let h = setup.histogram(c)?;
        let p = run.plot(&format!("histograms/candidate_{k:03}.png"));
        write_histogram(&p, &h)?;
    }
    let best = cands[selection.index];
    let pairs = qq_residuals(&data, &best, &cfg.background);
    let residuals = compensator_residuals(&data, &best, &cfg.background);
    let ks = if residuals.is_empty() { None } else { Some(ks_exp1(&residuals)?) };
    run.json("selection.json", &serde_json::json!({
        "candidates": cands,
        "index": selection.index,
        "score": selection.score,
        "scores": selection.scores,
        "residual_ks": ks.map(|k| serde_json::json!({ "statistic": k.statistic, "p_value": k.p_value })),
    }))?;
    let p = run.plot("qq.png");
    write_qq(&p, &pairs)
}

fn hotspots(run: &mut Run) -> Result<()> {
    let cfg = run.cfg.clone();
    let map = cfg.region_map()?;
    let est_params = cfg.hotspots.estimate.unwrap_or(cfg.model);
    let truth = expected_counts(&cfg.model, &cfg.background, &map, &cfg.grid, derive_seed(run.seed, &[TRUTH]))?;
    let est = expected_counts(&est_params, &cfg.background, &map, &cfg.grid, derive_seed(run.seed, &[EST]))?;
    let mae = relative_mae(&truth, &est, cfg.hotspots.mae_floor)?;
    let accuracy = if cfg.grid.k > 0 { Some(hotspot_accuracy(&truth.hotspots.cells, &est.hotspots.cells)?) } else { None };
    let vmax = truth.mean_counts.iter().chain(&est.mean_counts).cloned().fold(0.0, f64::max);
    let p = run.plot("heatmap_true.png");
    write_heatmap(&p, &truth.matrix(), vmax, cfg.hotspots.cell_pixels)?;
    let p = run.plot("heatmap_estimated.png");
    write_heatmap(&p, &est.matrix(), vmax, cfg.hotspots.cell_pixels)?;
    run.json("truth_grid.json", &truth)?;
    run.json("estimated_grid.json", &est)?;
    run.json("summary.json", &serde_json::json!({
        "truth": cfg.model,
        "estimate": est_params,
        "relative_mae": mae,
        "top_k_accuracy": accuracy,
        "truth_hotspots": truth.hotspots,
        "estimated_hotspots": est.hotspots,
    }))
}

fn sweep(run: &mut Run) -> Result<()> {
    let cfg = run.cfg.clone();
    let map = cfg.region_map()?;
    let s = &cfg.sweep;
    let mut wgan = cfg.wgan.clone();
    wgan.limit = s.limit;
    let estimator = match s.estimator {
        EstimatorKind::Bypass => Estimator::Bypass,
        EstimatorKind::Em => Estimator::Em(cfg.em),
        EstimatorKind::Wgan => Estimator::Wgan(wgan),
    };
    let sc = SweepConfig {
        estimator,
        n_train: s.n_train,
        train_gen: sthawkes::generator::GenConfig { limit: s.limit, batch_size: cfg.simulate.batch_size },
        grid: cfg.grid,
        mae_floor: cfg.hotspots.mae_floor,
        init_factor: s.init_factor,
    };
    let thetas = if s.thetas.is_empty() { default_sweep_grid() } else { s.thetas.clone() };
    let rows = robustness_sweep(&thetas, &cfg.background, &map, &sc, run.seed)?;
    let mut csv = String::from("mu0,alpha0,beta0,sigma_sq0,mu_hat,alpha_hat,beta_hat,sigma_sq_hat,accuracy,relative_mae,mae_excluded\n");
    for r in &rows {
        let a = r.theta0;
        let b = r.theta_hat;
        csv.push_str(&format!(
            "{},{},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{},{:.16e},{}\n",
            a.mu, a.alpha, a.beta, a.sigma_sq, b.mu, b.alpha, b.beta, b.sigma_sq, r.accuracy, r.mae.value, r.mae.excluded
        ));
    }
    let p = run.output("sweep.csv");
    write_bytes(&p, csv.as_bytes())?;
    let acc: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
    let mean = acc.iter().sum::<f64>() / acc.len().max(1) as f64;
    let min = acc.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    run.json("sweep.json", &serde_json::json!({
        "rows": rows,
        "accuracy": { "mean": mean, "min": min, "max": max },
    }))
}

fn report(run: &mut Run, input: Option<&Path>) -> Result<()> {
    let dir = require_input(input, "report")?;
    run.input(dir);
    let mut run_dirs = Vec::new();
    if dir.join(MANIFEST_NAME).exists() {
        run_dirs.push(dir.to_path_buf());
    }
    let mut children: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_NAME).exists())
        .collect();
    children.sort();
    run_dirs.extend(children);
    if run_dirs.is_empty() {
        return Err(Error::Config(format!("no run artifacts (manifest.json) under {}", dir.display())));
    }
    let mut entries = Vec::new();
    let mut md = String::from("# Run report\n\n| run | command | seed | outputs | summary |\n|---|---|---|---|---|\n");
    for d in &run_dirs {
        let m = RunManifest::read(d)?;
        let name = d.strip_prefix(dir).ok().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).display().to_string();
        let summary: Option<serde_json::Value> = ["summary.json", "selection.json"]
            .iter()
            .map(|f| d.join(f))
            .find(|p| p.exists())
            .map(|p| read_json(&p))
            .transpose()?;
        md.push_str(&format!(
            "| {name} | {} | {} | {} | {} |\n",
            m.command,
            m.seed,
            m.outputs.len(),
            summary.as_ref().map_or("-".to_string(), |s| s.to_string().replace('|', "/"))
        ));
        entries.push(serde_json::json!({
            "run": name,
            "command": m.command,
            "seed": m.seed,
            "code_version": m.code_version,
            "outputs": m.outputs,
            "summary": summary,
        }));
    }
    run.json("report.json", &entries)?;
    let p = run.output("report.md");
    write_bytes(&p, md.as_bytes())
}
