//! Command-line front end: `simulate`, `train`, `eval` and `ablate`.
//!
//! Every command is driven by an [`ExperimentConfig`] (JSON file, flags
//! override fields) and is deterministic in it. Output files are written to
//! a temporary file in the destination directory and renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::ControllerConfig;
use crate::geometry::BBox;
use crate::metrics::{coco_map, Detection, EvalReport, GroundTruth};
use crate::simulator::{run_closed_loop, run_open_loop, Ablation, ClosedLoopConfig, OpenLoopConfig, SimError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("run failed ({context}): {source}")]
    Run { context: String, source: SimError },
    #[error("{failed} of {total} runs failed; see {summary}")]
    Partial {
        failed: usize,
        total: usize,
        summary: PathBuf,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    OpenLoop,
    ClosedLoop,
}

/// Controller parameter swept by `ablate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum GridParam {
    KIou,
    KBeta,
    UpdateInterval,
}

impl GridParam {
    fn name(self) -> &'static str {
        match self {
            GridParam::KIou => "k_iou",
            GridParam::KBeta => "k_beta",
            GridParam::UpdateInterval => "update_interval",
        }
    }

    fn apply(self, c: &mut ControllerConfig, value: usize) {
        match self {
            GridParam::KIou => c.k_iou = value,
            GridParam::KBeta => c.k_beta = value,
            GridParam::UpdateInterval => c.update_interval = value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub param: GridParam,
    pub values: Vec<usize>,
}

/// One experiment. Top-level `controller`, `ablations` and `seeds` take
/// precedence over the same fields inside `open_loop` / `closed_loop`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub ablations: Vec<Ablation>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub parallel: usize,
    pub controller: ControllerConfig,
    pub open_loop: OpenLoopConfig,
    pub closed_loop: ClosedLoopConfig,
    pub grid: Option<Grid>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::OpenLoop,
            ablations: vec![Ablation::DlaDsl],
            seeds: vec![0],
            out_dir: PathBuf::from("out"),
            parallel: 1,
            controller: ControllerConfig::default(),
            open_loop: OpenLoopConfig::default(),
            closed_loop: ClosedLoopConfig::default(),
            grid: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("at least one seed is required".into()));
        }
        if self.ablations.is_empty() {
            return Err(CliError::Config("at least one ablation is required".into()));
        }
        self.controller.validate().map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn open_loop_for(&self, seed: u64) -> OpenLoopConfig {
        OpenLoopConfig {
            seed,
            controller: self.controller,
            ..self.open_loop.clone()
        }
    }

    pub fn closed_loop_for(&self, ablation: Ablation, seed: u64) -> ClosedLoopConfig {
        ClosedLoopConfig {
            seed,
            ablation,
            controller: self.controller,
            ..self.closed_loop.clone()
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "dynhead",
    version,
    about = "Dynamic label assignment / dynamic SmoothL1 training experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default, Clone)]
pub struct CommonArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated seeds, e.g. 1,2,3.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Worker threads for independent runs.
    #[arg(long)]
    pub parallel: Option<usize>,
    /// Training iterations per run.
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Open-loop run: scripted proposal quality, controller trends only.
    Simulate(CommonArgs),
    /// Closed-loop toy training for one or more ablations.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated subset of baseline, dla, dsl, dla+dsl; or `all`.
        #[arg(long, value_delimiter = ',')]
        ablation: Option<Vec<String>>,
    },
    /// COCO-style evaluation of a detections file against ground truth.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long = "ground-truth")]
        ground_truth: PathBuf,
    },
    /// Closed-loop sweep over one controller parameter.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        param: Option<GridParam>,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        ablation: Option<Vec<String>>,
    },
}

fn parse_ablations(list: &[String]) -> Result<Vec<Ablation>, CliError> {
    if list.len() == 1 && list[0] == "all" {
        return Ok(Ablation::ALL.to_vec());
    }
    list.iter()
        .map(|s| s.parse::<Ablation>().map_err(CliError::Config))
        .collect()
}

fn resolve(common: &CommonArgs, mode: Mode) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.mode = mode;
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = &common.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(p) = common.parallel {
        cfg.parallel = p;
    }
    if let Some(n) = common.iterations {
        cfg.open_loop.iterations = n;
        cfg.closed_loop.iterations = n;
    }
    Ok(cfg)
}

/// Writes `data` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, data: &[u8]) -> Result<(), CliError> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(data).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("serializable");
    s.push(b'\n');
    s
}

fn pool(parallel: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateRun {
    pub seed: u64,
    pub trend_file: String,
    pub updates: usize,
    pub first_t_now: f64,
    pub last_t_now: f64,
    pub first_beta_now: f64,
    pub last_beta_now: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub mode: Mode,
    pub iterations: usize,
    pub controller: ControllerConfig,
    pub runs: Vec<SimulateRun>,
}

pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<SimulateSummary, CliError> {
    cfg.validate()?;
    let logs = pool(cfg.parallel)?.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                run_open_loop(&cfg.open_loop_for(seed)).map_err(|source| CliError::Run {
                    context: format!("open loop, seed {seed}"),
                    source,
                })
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    let mut runs = Vec::new();
    for (&seed, log) in cfg.seeds.iter().zip(&logs) {
        let name = format!("trend_seed{seed}.csv");
        write_atomic(&cfg.out_dir.join(&name), &log.to_csv())?;
        let (first, last) = (log.rows.first(), log.rows.last());
        runs.push(SimulateRun {
            seed,
            trend_file: name,
            updates: log.rows.len().saturating_sub(1),
            first_t_now: first.map_or(f64::NAN, |r| r.t_now),
            last_t_now: last.map_or(f64::NAN, |r| r.t_now),
            first_beta_now: first.map_or(f64::NAN, |r| r.beta_now),
            last_beta_now: last.map_or(f64::NAN, |r| r.beta_now),
        });
    }
    let summary = SimulateSummary {
        mode: Mode::OpenLoop,
        iterations: cfg.open_loop.iterations,
        controller: cfg.controller,
        runs,
    };
    write_atomic(&cfg.out_dir.join("summary.json"), &json_bytes(&summary))?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub ablation: Ablation,
    pub seed: u64,
    pub mean_ap: f64,
    pub ap90: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub ablation: Ablation,
    pub seeds: Vec<u64>,
    pub mean_ap: f64,
    pub ap90: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub iterations: usize,
    pub controller: ControllerConfig,
    pub runs: Vec<TrainRun>,
    pub ablations: Vec<AblationSummary>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let jobs: Vec<(Ablation, u64)> = cfg
        .ablations
        .iter()
        .flat_map(|&a| cfg.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let outcomes = pool(cfg.parallel)?.install(|| {
        jobs.par_iter()
            .map(|&(a, seed)| {
                run_closed_loop(&cfg.closed_loop_for(a, seed)).map_err(|source| CliError::Run {
                    context: format!("{} seed {seed}", a.name()),
                    source,
                })
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    let mut runs = Vec::new();
    for (&(a, seed), out) in jobs.iter().zip(&outcomes) {
        let dir = cfg.out_dir.join(a.name());
        write_atomic(&dir.join(format!("trend_seed{seed}.csv")), &out.trend.to_csv())?;
        write_atomic(&dir.join(format!("eval_seed{seed}.json")), &json_bytes(&out.report))?;
        runs.push(TrainRun {
            ablation: a,
            seed,
            mean_ap: out.report.mean_ap,
            ap90: out.report.ap90(),
        });
    }
    let ablations = cfg
        .ablations
        .iter()
        .map(|&a| {
            let of = || runs.iter().filter(move |r| r.ablation == a);
            AblationSummary {
                ablation: a,
                seeds: cfg.seeds.clone(),
                mean_ap: mean(of().map(|r| r.mean_ap)),
                ap90: mean(of().map(|r| r.ap90)),
            }
        })
        .collect();
    let summary = TrainSummary {
        iterations: cfg.closed_loop.iterations,
        controller: cfg.controller,
        runs,
        ablations,
    };
    write_atomic(&cfg.out_dir.join("summary.json"), &json_bytes(&summary))?;
    Ok(summary)
}

fn parse_json_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Parses the detection and ground-truth files and evaluates them.
pub fn cmd_eval(detections: &Path, ground_truth: &Path) -> Result<EvalReport, CliError> {
    let dets: Vec<Detection> = parse_json_file(detections)?;
    if let Some((i, d)) = dets
        .iter()
        .enumerate()
        .find(|(_, d)| !(d.score.is_finite() && (0.0..=1.0).contains(&d.score)))
    {
        return Err(CliError::Parse {
            path: detections.to_path_buf(),
            msg: format!("entry {i}: field `score` = {} outside [0, 1]", d.score),
        });
    }
    let gts: Vec<GroundTruth> = parse_json_file(ground_truth)?;
    let gts: Vec<BBox> = gts.into_iter().map(|g| g.bbox).collect();
    Ok(coco_map(&dets, &gts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateRow {
    pub param: String,
    pub value: usize,
    pub ablation: Ablation,
    pub seed: u64,
    pub status: String,
    pub mean_ap: Option<f64>,
    pub ap90: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblatePoint {
    pub param: String,
    pub value: usize,
    pub ablation: Ablation,
    pub runs_ok: usize,
    pub mean_ap: f64,
    pub ap90: f64,
}

/// Per-run rows and per-point means of an `ablate` sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct AblateOutput {
    pub rows: Vec<AblateRow>,
    pub points: Vec<AblatePoint>,
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory CSV write");
    }
    w.into_inner().expect("in-memory CSV flush")
}

/// Runs every (grid value, ablation, seed) combination. Failed runs are
/// recorded in `runs.csv` and the sweep continues; the command then reports
/// a partial failure.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<AblateOutput, CliError> {
    cfg.validate()?;
    let grid = cfg
        .grid
        .as_ref()
        .ok_or_else(|| CliError::Config("ablate needs a grid (config `grid` or --param/--values)".into()))?;
    if grid.values.is_empty() {
        return Err(CliError::Config("grid has no values".into()));
    }
    let mut jobs = Vec::new();
    for &v in &grid.values {
        for &a in &cfg.ablations {
            for &s in &cfg.seeds {
                jobs.push((v, a, s));
            }
        }
    }
    let results: Vec<Result<EvalReport, String>> = pool(cfg.parallel)?.install(|| {
        jobs.par_iter()
            .map(|&(v, a, seed)| {
                let mut c = cfg.closed_loop_for(a, seed);
                grid.param.apply(&mut c.controller, v);
                run_closed_loop(&c).map(|o| o.report).map_err(|e| e.to_string())
            })
            .collect()
    });
    let rows: Vec<AblateRow> = jobs
        .iter()
        .zip(&results)
        .map(|(&(v, a, seed), r)| AblateRow {
            param: grid.param.name().to_string(),
            value: v,
            ablation: a,
            seed,
            status: if r.is_ok() { "ok" } else { "failed" }.to_string(),
            mean_ap: r.as_ref().ok().map(|r| r.mean_ap),
            ap90: r.as_ref().ok().map(|r| r.ap90()),
            error: r.as_ref().err().cloned(),
        })
        .collect();
    let mut points = Vec::new();
    for &v in &grid.values {
        for &a in &cfg.ablations {
            let ok: Vec<&AblateRow> = rows
                .iter()
                .filter(|r| r.value == v && r.ablation == a && r.status == "ok")
                .collect();
            points.push(AblatePoint {
                param: grid.param.name().to_string(),
                value: v,
                ablation: a,
                runs_ok: ok.len(),
                mean_ap: mean(ok.iter().filter_map(|r| r.mean_ap)),
                ap90: mean(ok.iter().filter_map(|r| r.ap90)),
            });
        }
    }
    write_atomic(&cfg.out_dir.join("runs.csv"), &csv_bytes(&rows))?;
    let summary_path = cfg.out_dir.join("summary.csv");
    write_atomic(&summary_path, &csv_bytes(&points))?;
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    if failed > 0 {
        return Err(CliError::Partial {
            failed,
            total: rows.len(),
            summary: cfg.out_dir.join("runs.csv"),
        });
    }
    Ok(AblateOutput { rows, points })
}

/// Dispatches a parsed command line. `stdout` receives the `eval` report.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(common) => {
            let cfg = resolve(&common, Mode::OpenLoop)?;
            cmd_simulate(&cfg).map(|_| ())
        }
        Command::Train { common, ablation } => {
            let mut cfg = resolve(&common, Mode::ClosedLoop)?;
            if let Some(a) = ablation {
                cfg.ablations = parse_ablations(&a)?;
            }
            cmd_train(&cfg).map(|_| ())
        }
        Command::Eval {
            detections,
            ground_truth,
        } => {
            let report = cmd_eval(&detections, &ground_truth)?;
            stdout
                .write_all(&json_bytes(&report))
                .map_err(io_err(Path::new("<stdout>")))
        }
        Command::Ablate {
            common,
            param,
            values,
            ablation,
        } => {
            let mut cfg = resolve(&common, Mode::ClosedLoop)?;
            if let Some(a) = ablation {
                cfg.ablations = parse_ablations(&a)?;
            }
            match (param, values) {
                (Some(param), Some(values)) => cfg.grid = Some(Grid { param, values }),
                (None, None) => {}
                _ => return Err(CliError::Config("--param and --values must be given together".into())),
            }
            cmd_ablate(&cfg).map(|_| ())
        }
    }
}
