//! Command-line front end: argument parsing, config resolution, manifests.
//!
//! Values resolve as flag, then config file, then built-in default. Every
//! command writes a manifest with the resolved config and the sha256 of each
//! input and output; passing that manifest back through `--config` reruns the
//! command with the same values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controller::DEFAULT_DELTA;
use crate::data::{load_demonstration, save_demonstration};
use crate::policy::{
    load_model, save_model, train_segment, PolicyKind, TrainedModel, TrainedPolicy,
    TrainingConfig,
};
use crate::segment::{
    segment_with, validate_segments, SegmentOptions, SegmentsFile, DEFAULT_DEBOUNCE,
};
use crate::sim::{
    evaluate, simulate, synthetic_task, table_csv, Condition, EvalReport, SeedModels, SimConfig,
    SyntheticKind, SyntheticOptions, TaskSpec,
};
use crate::waypoint::{filtered_segment, select_waypoints_dp, WaypointsFile};

type Res<T> = anyhow::Result<T>;

#[derive(Debug, Parser)]
#[command(
    name = "subgoal-ds",
    version,
    about = "Segment a demonstration at gripper events, train one stable policy per segment and evaluate the cascade"
)]
pub struct Cli {
    /// TOML config file, or a manifest.json written by an earlier run.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads for training and evaluation. Defaults to all cores.
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split a demonstration at gripper events.
    Segment(SegmentArgs),
    /// Select minimal waypoints for every segment.
    Waypoints(WaypointsArgs),
    /// Train one policy per segment for each seed.
    Train(TrainArgs),
    /// Run the cascade once and write the trajectory.
    Rollout(RolloutArgs),
    /// Monte-Carlo success rates of trained cascades.
    Eval(EvalArgs),
    /// Sample a model's vector field and Lyapunov value on a plane.
    ExportField(ExportFieldArgs),
    /// Demonstration to evaluation report in one go.
    Pipeline(PipelineArgs),
    /// Write one of the built-in synthetic demonstrations.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// Demonstration JSON.
    #[arg(long = "in", value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// Output segments JSON.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Warn about segments shorter than this many samples.
    #[arg(long)]
    pub min_len: Option<usize>,
    /// Gripper transitions closer than this many samples merge into one event.
    #[arg(long)]
    pub debounce: Option<usize>,
}

#[derive(Debug, Args)]
pub struct WaypointsArgs {
    /// Segments JSON.
    #[arg(long = "in", value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// Reconstruction threshold, meters.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Output waypoints JSON.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct TrainingFlags {
    /// Policy family: stable or bc.
    #[arg(long)]
    pub kind: Option<PolicyKind>,
    /// Weight of the velocity term in the loss.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Optimizer steps, one minibatch each.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Euler steps per rollout start in the loss.
    #[arg(long)]
    pub rollout_window: Option<usize>,
    /// Rollout starts per optimizer step.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Decay rate of the Lyapunov constraint.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Weight of the quadratic floor of the Lyapunov candidate.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Hidden width of both networks.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Train one policy on the whole demonstration instead of one per segment.
    #[arg(long)]
    pub whole: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Waypoints JSON.
    #[arg(long, value_name = "FILE")]
    pub segments: Option<PathBuf>,
    /// Training seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub seed: Option<Vec<u64>>,
    /// Output directory; models go to DIR/seed_S/segment_K.json.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub training: TrainingFlags,
}

#[derive(Debug, Args, Default)]
pub struct SimFlags {
    /// Observation noise std, meters.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Kicks per segment.
    #[arg(long)]
    pub perturb_count: Option<usize>,
    /// Kick length, meters.
    #[arg(long)]
    pub perturb_magnitude: Option<f64>,
    /// Control steps allowed per subgoal.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Simulator seed.
    #[arg(long)]
    pub sim_seed: Option<u64>,
    /// Attainment radius for every subgoal, meters.
    #[arg(long)]
    pub delta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    /// Model directory: either the segment files or a parent of seed_S dirs.
    #[arg(long, value_name = "DIR")]
    pub models: Option<PathBuf>,
    /// Waypoints or segments JSON describing the task.
    #[arg(long, value_name = "FILE")]
    pub segments: Option<PathBuf>,
    /// Start position, comma separated. Defaults to the demonstrated start.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub start: Option<Vec<f64>>,
    /// Training seed whose models to use when DIR holds seed_S dirs.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Trajectory CSV.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub sim: SimFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory with seed_S subdirectories. Repeat to compare methods.
    #[arg(long = "models-dir", value_name = "DIR")]
    pub models_dir: Vec<PathBuf>,
    /// Task JSON, waypoints JSON or segments JSON.
    #[arg(long, value_name = "FILE")]
    pub task: Option<PathBuf>,
    /// deterministic, noisy, perturbed+noisy or all. Comma separated.
    #[arg(long, value_delimiter = ',')]
    pub condition: Option<Vec<String>>,
    /// Training seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Rollouts per seed.
    #[arg(long)]
    pub rollouts: Option<usize>,
    /// Report JSON.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Also write a success-rate table as CSV.
    #[arg(long, value_name = "FILE")]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub sim: SimFlags,
}

#[derive(Debug, Args)]
pub struct ExportFieldArgs {
    /// Model JSON.
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Coordinate plane through the goal: xy, xz or yz.
    #[arg(long, default_value = "xy")]
    pub plane: String,
    /// Grid points per side.
    #[arg(long, default_value_t = 40)]
    pub grid: usize,
    /// Half-width of the grid, meters. Defaults to one goal-frame unit.
    #[arg(long)]
    pub extent: Option<f64>,
    /// Output CSV.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Demonstration JSON.
    #[arg(long, value_name = "FILE")]
    pub demo: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// Waypoint reconstruction threshold, meters.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Training seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// deterministic, noisy or perturbed+noisy.
    #[arg(long)]
    pub condition: Option<Condition>,
    /// Rollouts per seed.
    #[arg(long)]
    pub rollouts: Option<usize>,
    #[command(flatten)]
    pub training: TrainingFlags,
    #[command(flatten)]
    pub sim: SimFlags,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// pick-place-3seg, s-curve or square-nut-like.
    #[arg(long)]
    pub task: SyntheticKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Half-width of the key-point jitter, meters.
    #[arg(long, default_value_t = 0.01)]
    pub jitter: f64,
    /// Std of Gaussian noise on recorded positions, meters.
    #[arg(long, default_value_t = 0.0)]
    pub recording_noise: f64,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub demo: Option<PathBuf>,
    pub segments: Option<PathBuf>,
    pub waypoints: Option<PathBuf>,
    pub models: Option<PathBuf>,
    pub reports: Option<PathBuf>,
}

/// Every tunable value of every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub min_len: usize,
    pub debounce: usize,
    pub eta: f64,
    pub kind: PolicyKind,
    pub whole: bool,
    pub seeds: Vec<u64>,
    pub condition: Condition,
    pub rollouts: usize,
    pub delta: f64,
    pub training: TrainingConfig,
    pub sim: SimConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            paths: Paths::default(),
            min_len: 5,
            debounce: DEFAULT_DEBOUNCE,
            eta: 0.01,
            kind: PolicyKind::Stable,
            whole: false,
            seeds: vec![0],
            condition: Condition::Deterministic,
            rollouts: 10,
            delta: DEFAULT_DELTA,
            training: TrainingConfig::default(),
            sim: SimConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Res<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            bail!("eta must be positive, got {}", self.eta);
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            bail!("delta must be positive, got {}", self.delta);
        }
        if self.seeds.is_empty() {
            bail!("need at least one seed");
        }
        if self.rollouts == 0 {
            bail!("rollouts must be at least 1");
        }
        if self.debounce == 0 {
            bail!("debounce must be at least 1");
        }
        self.training.validate().context("policy")?;
        self.sim.validate().context("sim")?;
        Ok(())
    }

    fn apply_training(&mut self, f: &TrainingFlags) {
        let t = &mut self.training;
        set(&mut self.kind, f.kind);
        set(&mut t.gamma, f.gamma);
        set(&mut t.epochs, f.epochs);
        set(&mut t.lr, f.lr);
        set(&mut t.rollout_window, f.rollout_window);
        set(&mut t.batch, f.batch);
        set(&mut t.alpha, f.alpha);
        set(&mut t.epsilon, f.epsilon);
        set(&mut t.hidden, f.hidden);
        self.whole |= f.whole;
    }

    fn apply_sim(&mut self, f: &SimFlags) {
        set(&mut self.sim.noise_sigma, f.noise);
        set(&mut self.sim.perturb.count_per_segment, f.perturb_count);
        set(&mut self.sim.perturb.magnitude, f.perturb_magnitude);
        set(&mut self.sim.horizon_per_subgoal, f.horizon);
        set(&mut self.sim.seed, f.sim_seed);
        set(&mut self.delta, f.delta);
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if flag.is_some() {
        slot.clone_from(flag);
    }
}

/// Resolved config plus checksums of everything read and written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: PipelineConfig,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Default)]
struct Artifacts {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

pub fn load_config(path: &Path) -> Res<PipelineConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        let value: serde_json::Value = serde_json::from_str(&text)?;
        if value.get("config").is_some() && value.get("command").is_some() {
            let m: Manifest = serde_json::from_value(value)?;
            return Ok(m.config);
        }
        return Ok(serde_json::from_value(value)?);
    }
    Ok(toml::from_str(&text)?)
}

pub fn sha256_file(path: &Path) -> Res<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn checksums(paths: &[PathBuf]) -> Res<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for p in paths {
        if p.is_dir() {
            let mut files = Vec::new();
            collect_files(p, &mut files)?;
            for f in files {
                out.insert(f.display().to_string(), sha256_file(&f)?);
            }
        } else {
            out.insert(p.display().to_string(), sha256_file(p)?);
        }
    }
    Ok(out)
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Res<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(&p, out)?;
        } else if p.file_name().is_some_and(|n| n != "manifest.json") {
            out.push(p);
        }
    }
    Ok(())
}

fn write_manifest(path: &Path, command: &str, cfg: &PipelineConfig, art: &Artifacts) -> Res<()> {
    let m = Manifest {
        tool: "subgoal-ds".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        config: cfg.clone(),
        inputs: checksums(&art.inputs)?,
        outputs: checksums(&art.outputs)?,
    };
    write(path, &serde_json::to_string_pretty(&m)?)
}

/// `out.json` gets `out.manifest.json`; directories get `dir/manifest.json`.
fn manifest_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        return out.join("manifest.json");
    }
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.manifest.json"))
}

fn write(path: &Path, text: &str) -> Res<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn require(path: &Option<PathBuf>, flag: &str) -> Res<PathBuf> {
    path.clone().ok_or_else(|| anyhow!("missing {flag} (flag or config paths)"))
}

fn require_input(path: &Option<PathBuf>, flag: &str) -> Res<PathBuf> {
    let p = require(path, flag)?;
    if !p.exists() {
        bail!("{flag} {} does not exist", p.display());
    }
    Ok(p)
}

/// Parses `args` and runs the command. `args[0]` is the program name.
pub fn run_from<I, T>(args: I) -> Res<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    run(Cli::parse_from(args))
}

pub fn run(cli: Cli) -> Res<()> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p).context("cli")?,
        None => PipelineConfig::default(),
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.jobs {
        if n == 0 {
            bail!("cli: --jobs must be at least 1");
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().context("cli")?;
    pool.install(|| match &cli.command {
        Command::Segment(a) => cmd_segment(a, &mut cfg),
        Command::Waypoints(a) => cmd_waypoints(a, &mut cfg),
        Command::Train(a) => cmd_train(a, &mut cfg),
        Command::Rollout(a) => cmd_rollout(a, &mut cfg),
        Command::Eval(a) => cmd_eval(a, &mut cfg),
        Command::ExportField(a) => cmd_export_field(a),
        Command::Pipeline(a) => cmd_pipeline(a, &mut cfg),
        Command::Synth(a) => cmd_synth(a),
    })
}

fn cmd_segment(a: &SegmentArgs, cfg: &mut PipelineConfig) -> Res<()> {
    set_path(&mut cfg.paths.demo, &a.input);
    set_path(&mut cfg.paths.segments, &a.out);
    set(&mut cfg.min_len, a.min_len);
    set(&mut cfg.debounce, a.debounce);
    let input = require_input(&cfg.paths.demo, "--in").context("cli")?;
    let out = require(&cfg.paths.segments, "--out").context("cli")?;
    cfg.validate().context("cli")?;

    let file = segment_file(&input, cfg)?;
    write(&out, &file.to_json())?;
    info!("{} segments -> {}", file.segments.len(), out.display());
    let art = Artifacts {
        inputs: vec![input],
        outputs: vec![out.clone()],
    };
    write_manifest(&manifest_path(&out), "segment", cfg, &art)
}

fn segment_file(demo_path: &Path, cfg: &PipelineConfig) -> Res<SegmentsFile> {
    let demo = load_demonstration(demo_path).context("core-data")?;
    let seg = segment_with(
        &demo,
        SegmentOptions {
            debounce: cfg.debounce,
        },
    );
    for w in validate_segments(&seg, cfg.min_len) {
        warn!("segmentation: {w}");
    }
    Ok(SegmentsFile::from(&seg))
}

fn cmd_waypoints(a: &WaypointsArgs, cfg: &mut PipelineConfig) -> Res<()> {
    set_path(&mut cfg.paths.segments, &a.input);
    set_path(&mut cfg.paths.waypoints, &a.out);
    set(&mut cfg.eta, a.eta);
    let input = require_input(&cfg.paths.segments, "--in").context("cli")?;
    let out = require(&cfg.paths.waypoints, "--out").context("cli")?;
    cfg.validate().context("cli")?;

    let segments = SegmentsFile::load(&input).context("segmentation")?;
    let file = WaypointsFile::select(segments, cfg.eta).context("waypoint")?;
    write(&out, &file.to_json())?;
    info!("{} waypoints -> {}", file.total_waypoints(), out.display());
    let art = Artifacts {
        inputs: vec![input],
        outputs: vec![out.clone()],
    };
    write_manifest(&manifest_path(&out), "waypoints", cfg, &art)
}

/// Trains every (seed, segment) pair in parallel. Returns models grouped by
/// seed, in seed order.
pub fn train_all(file: &WaypointsFile, cfg: &PipelineConfig) -> Res<Vec<SeedModels>> {
    let data: Vec<(crate::data::Demonstration, Vec<f64>)> = if cfg.whole {
        let seg = SegmentsFile {
            dim: file.dim,
            segments: file.segments.iter().map(|e| e.segment.clone()).collect(),
        }
        .into_segmented()
        .context("segmentation")?;
        let demo = seg.reassemble().context("segmentation")?;
        let w = select_waypoints_dp(&demo, file.eta).context("waypoint")?;
        let goal = demo.last().x.clone();
        vec![(filtered_segment(&demo, &w).context("waypoint")?, goal)]
    } else {
        file.segments
            .iter()
            .map(|e| {
                let f = filtered_segment(&e.segment.demo, &e.waypoints)?;
                Ok((f, e.segment.subgoal.clone()))
            })
            .collect::<crate::Result<_>>()
            .context("waypoint")?
    };
    let jobs: Vec<(u64, usize)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| (0..data.len()).map(move |k| (s, k)))
        .collect();
    let trained = jobs
        .par_iter()
        .map(|&(seed, k)| {
            let tc = TrainingConfig {
                seed,
                ..cfg.training.clone()
            };
            let (demo, goal) = &data[k];
            let m = train_segment(demo, goal, &tc, cfg.kind)?;
            info!(
                "seed {seed} segment {k}: loss {:.4e} after {} epochs",
                m.log.final_loss, m.log.epochs
            );
            Ok(m)
        })
        .collect::<crate::Result<Vec<_>>>()
        .context("policy")?;
    let mut it = trained.into_iter();
    Ok(cfg
        .seeds
        .iter()
        .map(|&seed| SeedModels {
            seed,
            models: it.by_ref().take(data.len()).collect(),
        })
        .collect())
}

pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed_{seed}"))
}

pub fn save_seed_models(root: &Path, models: &[SeedModels]) -> Res<()> {
    for sm in models {
        let dir = seed_dir(root, sm.seed);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        for (k, m) in sm.models.iter().enumerate() {
            save_model(m, dir.join(format!("segment_{k}.json"))).context("policy")?;
        }
    }
    Ok(())
}

/// Loads `segment_0.json, segment_1.json, ...` from `dir`.
pub fn load_segment_models(dir: &Path) -> Res<Vec<TrainedModel>> {
    let mut models = Vec::new();
    loop {
        let p = dir.join(format!("segment_{}.json", models.len()));
        if !p.exists() {
            break;
        }
        models.push(load_model(&p).with_context(|| format!("policy: {}", p.display()))?);
    }
    if models.is_empty() {
        bail!("policy: no segment_0.json in {}", dir.display());
    }
    Ok(models)
}

fn cmd_train(a: &TrainArgs, cfg: &mut PipelineConfig) -> Res<()> {
    set_path(&mut cfg.paths.waypoints, &a.segments);
    set_path(&mut cfg.paths.models, &a.out);
    set(&mut cfg.seeds, a.seed.clone());
    cfg.apply_training(&a.training);
    let input = require_input(&cfg.paths.waypoints, "--segments").context("cli")?;
    let out = require(&cfg.paths.models, "--out").context("cli")?;
    cfg.validate().context("cli")?;

    let file = WaypointsFile::load(&input).context("waypoint")?;
    let models = train_all(&file, cfg)?;
    save_seed_models(&out, &models)?;
    let art = Artifacts {
        inputs: vec![input],
        outputs: vec![out.clone()],
    };
    write_manifest(&out.join("manifest.json"), "train", cfg, &art)
}

/// Task from a task JSON, a waypoints JSON or a segments JSON.
pub fn load_task(path: &Path) -> Res<TaskSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(task) = serde_json::from_str::<TaskSpec>(&text) {
        return Ok(task);
    }
    if let Ok(file) = serde_json::from_str::<WaypointsFile>(&text) {
        return TaskSpec::from_waypoints(&file).context("sim");
    }
    let seg = serde_json::from_str::<SegmentsFile>(&text)
        .map_err(crate::Error::from_json)
        .and_then(|f| f.into_segmented())
        .with_context(|| format!("sim: {} is not a task, waypoints or segments file", path.display()))?;
    Ok(TaskSpec::from_segmented(&seg))
}

fn cmd_rollout(a: &RolloutArgs, cfg: &mut PipelineConfig) -> Res<()> {
    set_path(&mut cfg.paths.models, &a.models);
    set_path(&mut cfg.paths.waypoints, &a.segments);
    cfg.apply_sim(&a.sim);
    if let Some(s) = a.seed {
        cfg.seeds = vec![s];
    }
    let models_root = require_input(&cfg.paths.models, "--models").context("cli")?;
    let task_path = require_input(&cfg.paths.waypoints, "--segments").context("cli")?;
    let out = a.out.clone().ok_or_else(|| anyhow!("cli: missing --out"))?;
    cfg.validate().context("cli")?;

    let mut task = load_task(&task_path)?.with_delta(cfg.delta);
    if let Some(start) = &a.start {
        if start.len() != task.start.len() {
            bail!(
                "cli: --start has {} coordinates, task has {}",
                start.len(),
                task.start.len()
            );
        }
        task.start = start.clone();
    }
    let seed = cfg.seeds[0];
    let dir = if seed_dir(&models_root, seed).is_dir() {
        seed_dir(&models_root, seed)
    } else {
        models_root.clone()
    };
    let models = load_segment_models(&dir)?;
    let (rollout, kicks) = simulate(
        &models,
        &task,
        &cfg.sim,
        crate::sim::rollout_seed(cfg.sim.seed, seed, 0),
        true,
    )
    .context("controller")?;
    write(&out, &rollout.to_csv(task.start.len()))?;
    info!(
        "{} steps, {} resets, {kicks} kicks, success {}",
        rollout.trajectory.len(),
        rollout.resets,
        rollout.total_success
    );
    let art = Artifacts {
        inputs: vec![dir, task_path],
        outputs: vec![out.clone()],
    };
    write_manifest(&manifest_path(&out), "rollout", cfg, &art)
}

fn parse_conditions(list: &[String]) -> Res<Vec<Condition>> {
    let mut out = Vec::new();
    for s in list {
        if s == "all" {
            out.extend(Condition::ALL);
        } else {
            out.push(s.parse().context("cli")?);
        }
    }
    Ok(out)
}

fn method_label(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn load_seed_models(root: &Path, seeds: &[u64]) -> Res<Vec<SeedModels>> {
    seeds
        .iter()
        .map(|&seed| {
            Ok(SeedModels {
                seed,
                models: load_segment_models(&seed_dir(root, seed))?,
            })
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct LabelledReport<'a> {
    method: String,
    report: &'a EvalReport,
}

fn cmd_eval(a: &EvalArgs, cfg: &mut PipelineConfig) -> Res<()> {
    let mut dirs = a.models_dir.clone();
    if dirs.is_empty() {
        dirs.extend(cfg.paths.models.clone());
    }
    set_path(&mut cfg.paths.waypoints, &a.task);
    set_path(&mut cfg.paths.reports, &a.out);
    set(&mut cfg.seeds, a.seeds.clone());
    set(&mut cfg.rollouts, a.rollouts);
    cfg.apply_sim(&a.sim);
    let conditions = match &a.condition {
        Some(list) => parse_conditions(list)?,
        None => vec![cfg.condition],
    };
    if let [c] = conditions[..] {
        cfg.condition = c;
    }
    if dirs.is_empty() {
        bail!("cli: missing --models-dir (flag or config paths)");
    }
    cfg.paths.models = Some(dirs[0].clone());
    let task_path = require_input(&cfg.paths.waypoints, "--task").context("cli")?;
    let out = require(&cfg.paths.reports, "--out").context("cli")?;
    cfg.validate().context("cli")?;
    for d in &dirs {
        if !d.is_dir() {
            bail!("cli: models dir {} does not exist", d.display());
        }
    }

    let task = load_task(&task_path)?.with_delta(cfg.delta);
    let mut reports = Vec::new();
    for d in &dirs {
        let models = load_seed_models(d, &cfg.seeds)?;
        for &c in &conditions {
            let r = evaluate(&models, &task, c, cfg.rollouts, &cfg.sim).context("sim")?;
            info!("{} {c}: total {}", method_label(d), r.total);
            reports.push((method_label(d), r));
        }
    }
    let json = if reports.len() == 1 {
        reports[0].1.to_json()
    } else {
        let labelled: Vec<LabelledReport> = reports
            .iter()
            .map(|(m, r)| LabelledReport {
                method: m.clone(),
                report: r,
            })
            .collect();
        serde_json::to_string_pretty(&labelled)?
    };
    write(&out, &json)?;
    let mut art = Artifacts {
        inputs: dirs.clone(),
        outputs: vec![out.clone()],
    };
    art.inputs.push(task_path);
    if let Some(csv) = &a.csv {
        let cols: Vec<(String, &EvalReport)> = reports.iter().map(|(m, r)| (m.clone(), r)).collect();
        write(csv, &table_csv(&cols))?;
        art.outputs.push(csv.clone());
    }
    write_manifest(&manifest_path(&out), "eval", cfg, &art)
}

fn plane_axes(plane: &str, dim: usize) -> Res<(usize, usize)> {
    let axis = |c: char| match c {
        'x' => Ok(0),
        'y' => Ok(1),
        'z' => Ok(2),
        _ => Err(anyhow!("cli: unknown axis {c:?} in plane {plane:?}")),
    };
    let cs: Vec<char> = plane.chars().collect();
    if cs.len() != 2 {
        bail!("cli: plane must name two axes, got {plane:?}");
    }
    let (i, j) = (axis(cs[0])?, axis(cs[1])?);
    if i == j || i >= dim || j >= dim {
        bail!("cli: plane {plane:?} does not fit a {dim}-dimensional model");
    }
    Ok((i, j))
}

/// Grid over a plane through the goal: world position, commanded velocity and
/// (for stable models) the Lyapunov value, one row per grid point.
pub fn field_csv(model: &TrainedModel, plane: &str, grid: usize, extent: Option<f64>) -> Res<String> {
    let dim = model.policy.dim();
    let (i, j) = plane_axes(plane, dim)?;
    if grid < 2 {
        bail!("cli: grid must be at least 2");
    }
    let frame = model.policy.frame();
    let half = extent.unwrap_or(1.0 / frame.scale[i].min(frame.scale[j]));
    if !(half > 0.0 && half.is_finite()) {
        bail!("cli: extent must be positive");
    }
    let mut out = String::new();
    let names: Vec<String> = (0..dim).map(|k| format!("x{k}")).collect();
    let vels: Vec<String> = (0..dim).map(|k| format!("xdot{k}")).collect();
    writeln!(out, "{},{},v", names.join(","), vels.join(","))?;
    for a in 0..grid {
        for b in 0..grid {
            let mut x = frame.goal.clone();
            x[i] += -half + 2.0 * half * a as f64 / (grid - 1) as f64;
            x[j] += -half + 2.0 * half * b as f64 / (grid - 1) as f64;
            let v = model.command(&x).context("policy")?;
            let lyap = match &model.policy {
                TrainedPolicy::Stable(p) => {
                    let xf = frame.point_to_frame(&x).context("policy")?;
                    p.lyapunov.value(&xf).to_string()
                }
                TrainedPolicy::Bc(_) => String::new(),
            };
            let row: Vec<String> = x.iter().chain(&v).map(|c| c.to_string()).collect();
            writeln!(out, "{},{lyap}", row.join(","))?;
        }
    }
    Ok(out)
}

fn cmd_export_field(a: &ExportFieldArgs) -> Res<()> {
    let model = load_model(&a.model).context("policy")?;
    write(&a.out, &field_csv(&model, &a.plane, a.grid, a.extent)?)
}

fn cmd_pipeline(a: &PipelineArgs, cfg: &mut PipelineConfig) -> Res<()> {
    set_path(&mut cfg.paths.demo, &a.demo);
    set(&mut cfg.eta, a.eta);
    set(&mut cfg.seeds, a.seeds.clone());
    set(&mut cfg.condition, a.condition);
    set(&mut cfg.rollouts, a.rollouts);
    cfg.apply_training(&a.training);
    cfg.apply_sim(&a.sim);
    let demo = require_input(&cfg.paths.demo, "--demo").context("cli")?;
    let out_dir = a
        .out_dir
        .clone()
        .or_else(|| cfg.paths.reports.as_ref().and_then(|p| p.parent().map(Path::to_path_buf)))
        .unwrap_or_else(|| PathBuf::from("run"));
    cfg.paths.segments = Some(out_dir.join("segments.json"));
    cfg.paths.waypoints = Some(out_dir.join("waypoints.json"));
    cfg.paths.models = Some(out_dir.join("models"));
    cfg.paths.reports = Some(out_dir.join("report.json"));
    cfg.validate().context("cli")?;

    let segments = segment_file(&demo, cfg)?;
    let seg_path = out_dir.join("segments.json");
    write(&seg_path, &segments.to_json())?;
    let waypoints = WaypointsFile::select(segments, cfg.eta).context("waypoint")?;
    let wp_path = out_dir.join("waypoints.json");
    write(&wp_path, &waypoints.to_json())?;
    let models = train_all(&waypoints, cfg)?;
    let models_dir = out_dir.join("models");
    save_seed_models(&models_dir, &models)?;
    let task = TaskSpec::from_waypoints(&waypoints)
        .context("sim")?
        .with_delta(cfg.delta);
    let report = evaluate(&models, &task, cfg.condition, cfg.rollouts, &cfg.sim).context("sim")?;
    info!("{}: total {}", cfg.condition, report.total);
    let report_path = out_dir.join("report.json");
    write(&report_path, &report.to_json())?;
    let art = Artifacts {
        inputs: vec![demo],
        outputs: vec![seg_path, wp_path, models_dir, report_path],
    };
    write_manifest(&out_dir.join("manifest.json"), "pipeline", cfg, &art)
}

fn cmd_synth(a: &SynthArgs) -> Res<()> {
    let task = synthetic_task(
        a.task,
        &SyntheticOptions {
            seed: a.seed,
            jitter: a.jitter,
            recording_noise: a.recording_noise,
        },
    )
    .context("sim")?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_demonstration(&task.demo, &a.out).context("core-data")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config() {
        let cli = Cli::parse_from(["subgoal-ds", "train", "--epochs", "7", "--seed", "1,2"]);
        let Command::Train(a) = cli.command else { panic!() };
        let mut cfg = PipelineConfig {
            seeds: vec![9],
            ..Default::default()
        };
        cfg.training.epochs = 100;
        cfg.training.gamma = 0.25;
        cfg.apply_training(&a.training);
        set(&mut cfg.seeds, a.seed.clone());
        assert_eq!(cfg.training.epochs, 7);
        assert_eq!(cfg.training.gamma, 0.25);
        assert_eq!(cfg.seeds, vec![1, 2]);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<PipelineConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        assert!(toml::from_str::<PipelineConfig>("etaa = 0.1").is_err());
    }

    #[test]
    fn plane_parsing() {
        assert_eq!(plane_axes("xz", 3).unwrap(), (0, 2));
        assert!(plane_axes("xx", 3).is_err());
        assert!(plane_axes("xz", 2).is_err());
        assert!(plane_axes("xyz", 3).is_err());
    }
}
