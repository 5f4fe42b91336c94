//! The `transit-reid` command line.
//!
//! Every command writes its artifacts into a fresh run directory under
//! `--out-dir` and prints one JSON summary line on stdout that embeds the
//! seed and effective configuration. Exit status is 0 on success, 1 on a
//! usage error and 2 on a runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use transit_reid_core::behavior::Behavior;
use transit_reid_core::grading::{hist_similarity, log_map, mse_similarity, raw_score, ssim};
use transit_reid_core::hsdm::{MatchMode, Matcher};
use transit_reid_core::sim::{
    calibrate_noise, evaluate, generate_route, summarize, sweep_cell, ObservationMode, RouteSpec, SweepRun,
};
use transit_reid_core::vindex::{EntryMeta, FlatIndex, Metric};
use transit_reid_core::{Door, EngineConfig, PassengerId, ScoreWeights};

use crate::config::RunConfig;
use crate::error::{AppError, Result};
use crate::io::output::{
    create_run_dir, save_index, write_csv, write_json, write_ledger, CHANNELS_CSV_VERSION, METRICS_CSV_VERSION,
    SWEEP_TABLE_CSV_VERSION, TIMING_CSV_VERSION,
};
use crate::io::pgm::read_pgm;
use crate::io::trajfile::read_trajectories;
use crate::pipeline::{
    backpressure_check, run_pipeline, ClockKind, DelayedFeaturizer, DirSource, MemorySource, PipelineOptions,
    RoiDetector, SqfaFeaturizer,
};
use crate::scenario::{from_route, write_dir};

/// Target band of naive-mode mean R-1 used by `--calibrate`.
pub const CALIBRATION_BAND: (f64, f64) = (0.85, 0.90);
pub const CALIBRATION_SEEDS: u64 = 20;

#[derive(Debug, Parser)]
#[command(name = "transit-reid", version, about = "Occlusion-aware passenger re-identification for bus OD estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one route and score the matcher against ground truth.
    Simulate(SimulateArgs),
    /// Evaluate both matching modes over a range of stop counts.
    Sweep(SweepArgs),
    /// Score a reconstruction against its original image.
    Grade(GradeArgs),
    /// Classify trajectories as boarding, alighting or neither.
    Classify(ClassifyArgs),
    /// Run a scenario through the concurrent stage pipeline.
    Pipeline(PipelineArgs),
    /// Time exact search on a random gallery.
    IndexBench(IndexBenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Hsdm,
    Naive,
    Both,
}

impl ModeArg {
    fn modes(self) -> Vec<MatchMode> {
        match self {
            ModeArg::Hsdm => vec![MatchMode::Hsdm],
            ModeArg::Naive => vec![MatchMode::Naive],
            ModeArg::Both => vec![MatchMode::Naive, MatchMode::Hsdm],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    L2,
    Cosine,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::L2 => Metric::L2,
            MetricArg::Cosine => Metric::Cosine,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Parent directory of the run directory.
    #[arg(long, default_value = "runs")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Default, Args)]
pub struct EngineArgs {
    /// Hot-match confidence threshold.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub log_k: Option<f64>,
    #[arg(long)]
    pub sqfa_threshold: Option<f64>,
    #[arg(long)]
    pub d_part: Option<usize>,
    #[arg(long)]
    pub tracklet_len: Option<usize>,
    #[arg(long, value_enum)]
    pub metric: Option<MetricArg>,
    /// SSIM, histogram and MSE weights, e.g. `0.2,0.6,0.2`.
    #[arg(long, value_parser = parse_weights)]
    pub weights: Option<ScoreWeights>,
}

impl EngineArgs {
    fn apply(&self, cfg: &mut EngineConfig) {
        if let Some(v) = self.sigma {
            cfg.sigma = v;
        }
        if let Some(v) = self.top_k {
            cfg.top_k = v;
        }
        if let Some(v) = self.log_k {
            cfg.log_k = v;
        }
        if let Some(v) = self.sqfa_threshold {
            cfg.sqfa_threshold = v;
        }
        if let Some(v) = self.d_part {
            cfg.d_part = v;
        }
        if let Some(v) = self.tracklet_len {
            cfg.tracklet_len = v;
        }
        if let Some(v) = self.metric {
            cfg.distance = v.into();
        }
        if let Some(v) = self.weights {
            cfg.score_weights = v;
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct RouteArgs {
    #[arg(long)]
    pub passengers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Per-dimension observation noise.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub occlusion_rate: Option<f64>,
    #[arg(long)]
    pub occlusion_mult: Option<f64>,
    /// Render, grade and embed part images instead of drawing embeddings.
    #[arg(long)]
    pub images: bool,
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    /// Choose the noise so naive-mode mean R-1 lands in [0.85, 0.90].
    #[arg(long)]
    pub calibrate: bool,
}

impl RouteArgs {
    fn apply(&self, spec: &mut RouteSpec) {
        if let Some(v) = self.passengers {
            spec.num_passengers = v;
        }
        if let Some(v) = self.seed {
            spec.seed = v;
        }
        if let Some(v) = self.noise {
            spec.noise_sigma = v;
        }
        if let Some(v) = self.occlusion_rate {
            spec.occlusion_rate = v;
        }
        if let Some(v) = self.occlusion_mult {
            spec.occlusion_noise_multiplier = v;
        }
        if self.images {
            spec.observation = ObservationMode::Images {
                size: self.image_size,
                blur_passes: 1,
            };
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[command(flatten)]
    pub route: RouteArgs,
    #[arg(long)]
    pub stops: Option<u32>,
    #[arg(long, value_enum, default_value = "hsdm")]
    pub mode: ModeArg,
    /// Also write the route as a pipeline scenario directory.
    #[arg(long)]
    pub emit_scenario: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[command(flatten)]
    pub route: RouteArgs,
    /// Inclusive stop-count range `A..B`, or a single count.
    #[arg(long, default_value = "5..15", value_parser = parse_range)]
    pub stops: (u32, u32),
    #[arg(long, default_value_t = 20)]
    pub repeats: u64,
}

#[derive(Debug, Clone, Args)]
pub struct GradeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[arg(long)]
    pub original: PathBuf,
    #[arg(long)]
    pub recon: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ClassifyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Trajectory CSV with columns `track,x,y[,t]`.
    #[arg(long)]
    pub trajectories: PathBuf,
    /// TOML file with a `[rois]` section; defaults to `--config`'s.
    #[arg(long)]
    pub rois: Option<PathBuf>,
    /// Door region `x_min,y_min,x_max,y_max`.
    #[arg(long, value_parser = parse_rect)]
    pub door: Option<[f64; 4]>,
    /// Inside region `x_min,y_min,x_max,y_max`.
    #[arg(long, value_parser = parse_rect)]
    pub inside: Option<[f64; 4]>,
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[command(flatten)]
    pub route: RouteArgs,
    /// Directory of `stop_NNN.json` files; simulates a route when absent.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub stops: Option<u32>,
    /// Per-stop processing budget, seconds.
    #[arg(long)]
    pub budget: Option<f64>,
    #[arg(long)]
    pub capacity: Option<usize>,
    /// Extra featurize latency per passenger, seconds.
    #[arg(long)]
    pub latency: Option<f64>,
    /// Measure time on a virtual clock that only advances on stub latency.
    #[arg(long)]
    pub virtual_clock: bool,
    #[arg(long, value_enum, default_value = "hsdm")]
    pub mode: ModeArg,
    /// Write the visualization event log.
    #[arg(long)]
    pub viz: bool,
    /// Also run the backpressure check over this many frames.
    #[arg(long)]
    pub check_frames: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct IndexBenchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 768)]
    pub d: usize,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    #[arg(long, default_value_t = 100)]
    pub queries: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "l2")]
    pub metric: MetricArg,
    /// Compare every result with a full sort of all distances.
    #[arg(long)]
    pub verify: bool,
}

fn parse_floats<const N: usize>(s: &str) -> std::result::Result<[f64; N], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|v: Vec<f64>| format!("expected {N} comma-separated numbers, got {}", v.len()))
}

fn parse_weights(s: &str) -> std::result::Result<ScoreWeights, String> {
    let [ssim, hist, mse] = parse_floats::<3>(s)?;
    Ok(ScoreWeights { ssim, hist, mse })
}

fn parse_rect(s: &str) -> std::result::Result<[f64; 4], String> {
    parse_floats::<4>(s)
}

fn parse_range(s: &str) -> std::result::Result<(u32, u32), String> {
    let num = |p: &str| p.trim().parse::<u32>().map_err(|e| format!("`{p}`: {e}"));
    let (a, b) = match s.split_once("..") {
        Some((a, b)) => (num(a)?, num(b.trim_start_matches('='))?),
        None => {
            let a = num(s)?;
            (a, a)
        }
    };
    if a > b {
        return Err(format!("empty range {a}..{b}"));
    }
    Ok((a, b))
}

/// Parses `args` (program name first), runs the command and returns the exit
/// status. The summary line goes to stdout, diagnostics to stderr.
pub fn main_with_args(args: impl IntoIterator<Item = OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(AppError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

pub fn execute(command: Command) -> Result<Value> {
    match command {
        Command::Simulate(a) => simulate(a),
        Command::Sweep(a) => sweep(a),
        Command::Grade(a) => grade(a),
        Command::Classify(a) => classify(a),
        Command::Pipeline(a) => pipeline(a),
        Command::IndexBench(a) => index_bench(a),
    }
}

/// Defaults < file < flags, validated, with the route following the engine's
/// embedding shape.
fn resolve(common: &CommonArgs, engine: &EngineArgs, route: &RouteArgs, stops: Option<u32>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    engine.apply(&mut cfg.engine);
    route.apply(&mut cfg.route);
    if let Some(s) = stops {
        cfg.route.num_stops = s;
    }
    cfg.engine = cfg.engine.clone().validate().map_err(invalid_value)?;
    cfg.route = cfg.route.clone().matching(&cfg.engine);
    cfg.route.validate().map_err(invalid_value)?;
    Ok(cfg)
}

/// Bad configuration values are the caller's mistake, so they exit as usage errors.
fn invalid_value(e: transit_reid_core::Error) -> AppError {
    AppError::Usage(e.to_string())
}

fn calibrate(cfg: &mut RunConfig) -> Result<Option<f64>> {
    let found = calibrate_noise(&cfg.route, &cfg.engine, CALIBRATION_BAND, CALIBRATION_SEEDS)?;
    let (sigma, r1) = found.ok_or_else(|| AppError::Usage("noise calibration did not reach the target band".into()))?;
    eprintln!("calibrated noise_sigma = {sigma} (naive mean R-1 {r1:.4})");
    cfg.route.noise_sigma = sigma;
    Ok(Some(sigma))
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let p = dir.join("config.toml");
    std::fs::write(&p, cfg.to_toml()).map_err(|e| AppError::io(p, e))
}

fn mode_name(m: MatchMode) -> &'static str {
    match m {
        MatchMode::Hsdm => "hsdm",
        MatchMode::Naive => "naive",
    }
}

fn simulate(a: SimulateArgs) -> Result<Value> {
    let mut cfg = resolve(&a.common, &a.engine, &a.route, a.stops)?;
    if a.route.calibrate {
        calibrate(&mut cfg)?;
    }
    let dir = create_run_dir(&a.common.out_dir, &format!("seed{}", cfg.route.seed))?;
    write_config(&dir, &cfg)?;
    let (stops, truth) = generate_route(&cfg.route)?;
    if a.emit_scenario {
        let (door, inside) = cfg.rois.rois()?;
        write_dir(&dir.join("scenario"), &from_route(&stops, &door, &inside, cfg.route.seed, true)?)?;
    }

    let mut runs = Vec::new();
    let mut results = Vec::new();
    for mode in a.mode.modes() {
        let e = evaluate(&stops, &truth, &cfg.engine, mode)?;
        let m = &e.metrics;
        let name = mode_name(mode);
        write_json(&dir.join(format!("od_{name}.json")), &e.od)?;
        write_ledger(&dir.join(format!("ledger_{name}.jsonl")), &e.ledger.export_rows(|q, g| q == g))?;
        write_csv(&dir.join(format!("stops_{name}.csv")), "stops", METRICS_CSV_VERSION, &m.per_stop)?;
        save_index(&dir.join(format!("gallery_{name}.idx")), &e.remaining)?;
        runs.push(SweepRun {
            stops: cfg.route.num_stops,
            mode,
            seed: cfg.route.seed,
            r1: m.r1,
            r5: m.r5,
            r10: m.r10,
            r20: m.r20,
            map: m.map,
            od_accuracy: m.od_accuracy,
        });
        results.push(json!({
            "mode": name, "r1": m.r1, "r5": m.r5, "r10": m.r10, "r20": m.r20,
            "map": m.map, "od_accuracy": m.od_accuracy,
        }));
    }
    write_csv(&dir.join("metrics.csv"), "metrics", METRICS_CSV_VERSION, &runs)?;
    Ok(json!({
        "command": "simulate",
        "seed": cfg.route.seed,
        "run_dir": dir,
        "results": results,
        "config": cfg,
    }))
}

fn sweep(a: SweepArgs) -> Result<Value> {
    let mut cfg = resolve(&a.common, &a.engine, &a.route, None)?;
    let (lo, hi) = a.stops;
    if lo < 2 {
        return Err(AppError::Usage("stop counts start at 2".into()));
    }
    if a.repeats == 0 {
        return Err(AppError::Usage("--repeats must be at least 1".into()));
    }
    if a.route.calibrate {
        calibrate(&mut cfg)?;
    }
    let dir = create_run_dir(&a.common.out_dir, &format!("seed{}", cfg.route.seed))?;
    write_config(&dir, &cfg)?;
    let cells: Vec<(u32, u64)> = (lo..=hi).flat_map(|s| (0..a.repeats).map(move |r| (s, r))).collect();
    let nested: Vec<Vec<SweepRun>> = cells
        .par_iter()
        .map(|&(stops, r)| {
            let spec = RouteSpec {
                seed: cfg.route.seed.wrapping_add(r),
                ..cfg.route.clone()
            };
            sweep_cell(&spec, &cfg.engine, stops, 1)
        })
        .collect::<std::result::Result<_, _>>()?;
    let runs: Vec<SweepRun> = nested.into_iter().flatten().collect();
    let rows = summarize(&runs);
    write_csv(&dir.join("metrics.csv"), "metrics", METRICS_CSV_VERSION, &runs)?;
    write_csv(&dir.join("sweep_table.csv"), "sweep-table", SWEEP_TABLE_CSV_VERSION, &rows)?;
    Ok(json!({
        "command": "sweep",
        "seed": cfg.route.seed,
        "run_dir": dir,
        "stops": [lo, hi],
        "repeats": a.repeats,
        "rows": rows,
        "config": cfg,
    }))
}

fn grade(a: GradeArgs) -> Result<Value> {
    let mut cfg = RunConfig::load_or_default(a.common.config.as_deref())?;
    a.engine.apply(&mut cfg.engine);
    let engine = cfg.engine.clone().validate().map_err(invalid_value)?;
    let original = read_pgm(&a.original)?;
    let recon = read_pgm(&a.recon)?;
    let raw = raw_score(&original, &recon, engine.score_weights)?;
    let score = log_map(raw, engine.log_min, engine.log_max, engine.log_k)?.get();
    Ok(json!({
        "command": "grade",
        "seed": null,
        "ssim": ssim(&original, &recon)?,
        "hist": hist_similarity(&original, &recon)?,
        "mse": mse_similarity(&original, &recon)?,
        "raw": raw,
        "score": score,
        "config": { "engine": engine },
    }))
}

#[derive(Serialize)]
struct ClassifiedTrack {
    track: u64,
    behavior: Behavior,
}

fn classify(a: ClassifyArgs) -> Result<Value> {
    let mut cfg = RunConfig::load_or_default(a.common.config.as_deref())?;
    if let Some(p) = &a.rois {
        cfg.rois = RunConfig::load(p)?.rois;
    }
    if let Some(r) = a.door {
        cfg.rois.door = r;
    }
    if let Some(r) = a.inside {
        cfg.rois.inside = r;
    }
    let (door, inside) = cfg.rois.rois()?;
    let tracks = read_trajectories(&a.trajectories)?;
    let mut rows = Vec::with_capacity(tracks.len());
    for (id, traj) in &tracks {
        rows.push(ClassifiedTrack {
            track: *id,
            behavior: transit_reid_core::behavior::classify(traj, &door, &inside)?,
        });
    }
    let count = |b: Behavior| rows.iter().filter(|r| r.behavior == b).count();
    let dir = create_run_dir(&a.common.out_dir, "classify")?;
    write_csv(&dir.join("behaviors.csv"), "behaviors", 1, &rows)?;
    Ok(json!({
        "command": "classify",
        "seed": null,
        "run_dir": dir,
        "tracks": rows.len(),
        "boarding": count(Behavior::Boarding),
        "alighting": count(Behavior::Alighting),
        "moving_inside": count(Behavior::MovingInside),
        "remaining_outside": count(Behavior::RemainingOutside),
        "unclassified": count(Behavior::Unclassified),
        "config": { "rois": cfg.rois },
    }))
}

fn pipeline(a: PipelineArgs) -> Result<Value> {
    let mut cfg = resolve(&a.common, &a.engine, &a.route, a.stops)?;
    if let Some(b) = a.budget {
        cfg.pipeline.budget_secs = b;
    }
    if let Some(c) = a.capacity {
        cfg.pipeline.capacity = c;
    }
    if a.route.calibrate && a.scenario.is_none() {
        calibrate(&mut cfg)?;
    }
    let modes = a.mode.modes();
    if modes.len() != 1 {
        return Err(AppError::Usage("pipeline runs one mode at a time".into()));
    }
    let (door, inside) = cfg.rois.rois()?;
    let detector = RoiDetector { door, inside };
    let opts = PipelineOptions {
        capacity: cfg.pipeline.capacity,
        budget_secs: cfg.pipeline.budget_secs,
        clock: if a.virtual_clock { ClockKind::Virtual } else { ClockKind::Real },
    };
    let dir = create_run_dir(&a.common.out_dir, &format!("seed{}", cfg.route.seed))?;
    write_config(&dir, &cfg)?;
    let viz: Option<Box<dyn std::io::Write + Send>> = if a.viz {
        let p = dir.join("viz.jsonl");
        let f = std::fs::File::create(&p).map_err(|e| AppError::io(&p, e))?;
        Some(Box::new(std::io::BufWriter::new(f)))
    } else {
        None
    };
    let featurizer = DelayedFeaturizer {
        inner: SqfaFeaturizer {
            cfg: cfg.engine.clone(),
        },
        latency_secs: a.latency.unwrap_or(0.0),
    };
    let matcher = Matcher::new(cfg.engine.clone(), modes[0])?;
    let outcome = match &a.scenario {
        Some(d) => run_pipeline(DirSource::open(d)?, &detector, featurizer, matcher, &opts, viz)?,
        None => {
            let (stops, _) = generate_route(&cfg.route)?;
            let files = from_route(&stops, &door, &inside, cfg.route.seed, true)?;
            run_pipeline(MemorySource::new(files), &detector, featurizer, matcher, &opts, viz)?
        }
    };
    let report = &outcome.report;
    write_csv(&dir.join("timing.csv"), "timing", TIMING_CSV_VERSION, &report.stops)?;
    write_csv(&dir.join("channels.csv"), "channels", CHANNELS_CSV_VERSION, &report.channels)?;
    write_ledger(&dir.join("ledger.jsonl"), &outcome.ledger.export_rows(|q, g| q == g))?;
    let check = match a.check_frames {
        Some(n) => Some(backpressure_check(opts.capacity, n, Duration::ZERO)?),
        None => None,
    };
    Ok(json!({
        "command": "pipeline",
        "seed": cfg.route.seed,
        "run_dir": dir,
        "scenario": a.scenario,
        "stops": report.stops.len(),
        "budget_violations": report.violations(),
        "discarded_tracks": report.discarded,
        "hot": outcome.ledger.count_hot(),
        "unmatched": outcome.ledger.count_unmatched(),
        "backpressure": check,
        "config": cfg,
    }))
}

fn index_bench(a: IndexBenchArgs) -> Result<Value> {
    if a.n == 0 || a.d == 0 || a.k == 0 {
        return Err(AppError::Usage("--n, --d and --k must be positive".into()));
    }
    let metric: Metric = a.metric.into();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let meta = EntryMeta {
        boarding_stop: 1,
        door: Door::Front,
    };
    let t0 = Instant::now();
    let mut index = FlatIndex::new(a.d, metric);
    let mut row = vec![0.0; a.d];
    for i in 0..a.n {
        row.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        index.add_vector(PassengerId(i as u64), &row, meta)?;
    }
    let build_secs = t0.elapsed().as_secs_f64();
    let queries: Vec<Vec<f64>> = (0..a.queries)
        .map(|_| (0..a.d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let t1 = Instant::now();
    let results = queries
        .iter()
        .map(|q| index.search(q, a.k))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let search_secs = t1.elapsed().as_secs_f64();
    let mismatches = a.verify.then(|| {
        queries
            .iter()
            .zip(&results)
            .filter(|(q, got)| {
                let mut all: Vec<(f64, u64)> = index
                    .ids()
                    .iter()
                    .map(|id| (metric.distance(index.vector(*id).unwrap(), q), id.0))
                    .collect();
                all.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
                let want: Vec<u64> = all.iter().take(a.k).map(|p| p.1).collect();
                got.iter().map(|n| n.id.0).collect::<Vec<_>>() != want
            })
            .count()
    });
    let dir = create_run_dir(&a.common.out_dir, &format!("seed{}", a.seed))?;
    let summary = json!({
        "command": "index-bench",
        "seed": a.seed,
        "run_dir": dir,
        "n": a.n, "d": a.d, "k": a.k, "queries": a.queries,
        "metric": metric,
        "build_secs": build_secs,
        "search_secs_per_query": search_secs / a.queries.max(1) as f64,
        "mismatches": mismatches,
        "config": { "n": a.n, "d": a.d, "k": a.k, "queries": a.queries, "metric": metric, "seed": a.seed },
    });
    write_json(&dir.join("bench.json"), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges() {
        assert_eq!(parse_range("5..15"), Ok((5, 15)));
        assert_eq!(parse_range("5..=15"), Ok((5, 15)));
        assert_eq!(parse_range("7"), Ok((7, 7)));
        assert!(parse_range("9..3").is_err());
        assert!(parse_range("a..3").is_err());
    }

    #[test]
    fn weights_and_rects() {
        assert_eq!(
            parse_weights("0.1, 0.2,0.7"),
            Ok(ScoreWeights {
                ssim: 0.1,
                hist: 0.2,
                mse: 0.7
            })
        );
        assert!(parse_weights("1,2").is_err());
        assert_eq!(parse_rect("0,0,10,20"), Ok([0.0, 0.0, 10.0, 20.0]));
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[engine]\nsigma = 0.3\ntop_k = 7\n[route]\nnum_passengers = 9\n").unwrap();
        let common = CommonArgs {
            config: Some(p),
            out_dir: dir.path().into(),
        };
        let engine = EngineArgs {
            sigma: Some(0.05),
            ..Default::default()
        };
        let cfg = resolve(&common, &engine, &RouteArgs::default(), Some(4)).unwrap();
        assert_eq!(cfg.engine.sigma, 0.05);
        assert_eq!(cfg.engine.top_k, 7);
        assert_eq!(cfg.route.num_passengers, 9);
        assert_eq!(cfg.route.num_stops, 4);
        assert_eq!(cfg.route.d_part, cfg.engine.d_part);
    }
}
