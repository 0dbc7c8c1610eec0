//! Command-line front end: data collection, training, single runs,
//! evaluation grids, the WebSocket server and the parser corpus check.

pub mod config;
pub mod serve;
pub mod session;
pub mod ws;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sfd_core::checkpoint;
use sfd_core::closed_loop::{run_episode, InstructionSource, LoopConfig, LoopMode};
use sfd_core::eval::{run_eval, EvalPlan, ModelCell, ReportFormat};
use sfd_core::learn::{collect_demos, train, CollectConfig, DemoDataset, ScriptedExpert, TrainConfig};
use sfd_core::planner::corpus::check_corpus;
use sfd_core::planner::{BackendSpec, LatencyModel, PlannerBackend, PromptStyle};
use sfd_core::policy::{NetConfig, PolicyNet};
use sfd_core::world::load_scenario;
use sfd_core::Instruction;

use config::{resolve, ProjectConfig};
use session::{SessionConfig, SimSession, WatchSetup};
use ws::SessionMode;

#[derive(Debug, Parser)]
#[command(name = "sfd", version, about = "Closed-loop driving with a fast policy and a slow planner")]
pub struct Cli {
    /// Project configuration file (TOML or JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record demonstration routes with the scripted expert or by teleop.
    Collect(CollectArgs),
    /// Train a policy on a demonstration dataset.
    Train(TrainArgs),
    /// Run one closed-loop episode.
    Run(RunArgs),
    /// Run a success-rate grid.
    Eval(EvalArgs),
    /// Serve the simulator over WebSocket for the browser client.
    Serve(ServeArgs),
    /// Check the answer parser against a directory of recorded answers.
    ParseCorpus(CorpusArgs),
}

#[derive(Debug, Args)]
pub struct CollectArgs {
    #[arg(long, default_value = "builtin:S010")]
    pub scenario: String,
    /// Output dataset (.jsonl, or .jsonl.gz for gzip).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 60)]
    pub routes: usize,
    #[arg(long, default_value_t = 10)]
    pub fps: u32,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Record routes driven through `serve` instead of the scripted expert.
    #[arg(long)]
    pub teleop: bool,
    #[arg(long, default_value_t = 8765)]
    pub port: u16,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Weight of the class cross-entropy term.
    #[arg(long)]
    pub k: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Where to write the per-epoch loss curve (default: `<out>.loss.json`).
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlannerChoice {
    Oracle,
    Scripted,
    Vlm,
    /// No planner: the policy samples its own instruction.
    Solo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StyleChoice {
    Naive,
    Cot,
}

#[derive(Debug, Args)]
pub struct PlannerArgs {
    #[arg(long, value_enum, default_value = "oracle")]
    pub planner: PlannerChoice,
    /// Fixed planner latency in seconds.
    #[arg(long, conflicts_with = "latency_preset")]
    pub latency: Option<f64>,
    /// Standard deviation turning `--latency` into a Gaussian.
    #[arg(long, requires = "latency")]
    pub latency_std: Option<f64>,
    /// Gaussian latency of a measured model, e.g. llava-llama2-13b.
    #[arg(long)]
    pub latency_preset: Option<String>,
    /// Instruction list for the scripted planner, e.g. RIGHT,RIGHT,LEFT.
    #[arg(long, value_delimiter = ',')]
    pub script: Vec<String>,
    /// Endpoint name from the config file, for the vlm planner.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long, value_enum, default_value = "cot")]
    pub style: StyleChoice,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub scenario: String,
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub planner: PlannerArgs,
    /// Drive with one fixed instruction instead of the planner.
    #[arg(long, conflicts_with = "planner")]
    pub fixed: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the per-tick trace as JSON lines.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Tick in real time with the planner on a worker thread.
    #[arg(long)]
    pub wall_clock: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Evaluation plan file (TOML or JSON). Without it, the grid is every
    /// `--scenario` against the planner flags and the solo policy.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub scenario: Vec<String>,
    #[command(flatten)]
    pub planner: PlannerArgs,
    #[arg(long)]
    pub trials: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: FormatChoice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatChoice {
    Csv,
    Markdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeChoice {
    Teleop,
    Watch,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8765)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value = "builtin:S010")]
    pub scenario: String,
    #[arg(long, value_enum, default_value = "teleop")]
    pub mode: ModeChoice,
    /// Policy checkpoint, required for watch mode.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub planner: PlannerArgs,
    #[arg(long, default_value_t = 4)]
    pub frame_every: u64,
    /// Save teleop routes here as they are completed.
    #[arg(long)]
    pub record: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    pub dir: PathBuf,
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let cfg = ProjectConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Collect(a) => collect(&cfg, a),
        Command::Train(a) => train_cmd(&cfg, a),
        Command::Run(a) => run_cmd(&cfg, a),
        Command::Eval(a) => eval_cmd(&cfg, a),
        Command::Serve(a) => serve_cmd(&cfg, a),
        Command::ParseCorpus(a) => parse_corpus(a),
    }
}

fn parse_instruction_flag(s: &str) -> Result<Instruction> {
    s.parse::<Instruction>().map_err(|e| anyhow::anyhow!("{e}"))
}

fn latency_model(a: &PlannerArgs) -> Result<LatencyModel> {
    let m = match (&a.latency_preset, a.latency, a.latency_std) {
        (Some(name), _, _) => LatencyModel::preset(name).with_context(|| format!("unknown latency preset `{name}`"))?,
        (None, Some(mean), Some(stddev)) => LatencyModel::Gaussian { mean, stddev },
        (None, Some(seconds), None) => LatencyModel::Fixed { seconds },
        (None, None, _) => LatencyModel::ZERO,
    };
    m.validate()?;
    Ok(m)
}

/// The planner described by the flags; `None` for the solo policy.
fn planner_backend(cfg: &ProjectConfig, a: &PlannerArgs) -> Result<Option<PlannerBackend>> {
    let latency = latency_model(a)?;
    let backend = match a.planner {
        PlannerChoice::Solo => return Ok(None),
        PlannerChoice::Oracle => PlannerBackend::oracle(latency),
        PlannerChoice::Scripted => {
            if a.script.is_empty() {
                bail!("--planner scripted needs --script");
            }
            let seq = a.script.iter().map(|s| parse_instruction_flag(s)).collect::<Result<_>>()?;
            PlannerBackend::scripted(seq, latency)
        }
        PlannerChoice::Vlm => {
            let name = a.endpoint.as_deref().context("--planner vlm needs --endpoint")?;
            let style = match a.style {
                StyleChoice::Naive => PromptStyle::Naive,
                StyleChoice::Cot => PromptStyle::Cot,
            };
            let measured = a.latency.is_none() && a.latency_preset.is_none();
            PlannerBackend {
                backend: BackendSpec::Vlm { endpoint: cfg.endpoint(name)?, style },
                latency: if measured { None } else { Some(latency) },
            }
        }
    };
    backend.validate()?;
    Ok(Some(backend))
}

fn load_net(cfg: &ProjectConfig, path: &Path) -> Result<PolicyNet> {
    let path = resolve(cfg.paths.checkpoints.as_deref(), path);
    checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// The configured camera at the network's input size.
fn camera_for(cfg: &ProjectConfig, net: &PolicyNet) -> sfd_core::sensor::CameraSpec {
    let nc = net.config();
    sfd_core::sensor::CameraSpec { width: nc.input_width, height: nc.input_height, ..cfg.camera }
}

fn collect(cfg: &ProjectConfig, a: CollectArgs) -> Result<()> {
    let out = resolve(cfg.paths.datasets.as_deref(), &a.out);
    let scenario_ref = cfg.scenario_ref(&a.scenario);
    if a.teleop {
        return collect_teleop(cfg, &a, &scenario_ref, &out);
    }
    let scenario = load_scenario(&scenario_ref)?;
    let cc = CollectConfig {
        routes: a.routes,
        fps: a.fps,
        camera: cfg.camera,
        seed: a.seed.unwrap_or(cfg.loop_defaults.seed),
        ..Default::default()
    };
    let data = collect_demos(&scenario, &mut ScriptedExpert::default(), &cc)?;
    data.save(&out)?;
    println!("{} routes, {} samples -> {}", data.routes.len(), data.len(), out.display());
    Ok(())
}

fn collect_teleop(cfg: &ProjectConfig, a: &CollectArgs, scenario: &str, out: &Path) -> Result<()> {
    let mut sc = SessionConfig::new(SessionMode::Teleop, scenario);
    sc.camera = cfg.camera;
    sc.dt = cfg.loop_defaults.dt;
    sc.record_fps = a.fps;
    let session = SimSession::new(sc)?;
    let listener = std::net::TcpListener::bind(("127.0.0.1", a.port))?;
    eprintln!("teleop: connect to ws://{}{}, {} routes to go", listener.local_addr()?, serve::WS_PATH, a.routes);
    let target = a.routes;
    let mut saved = 0;
    let out = out.to_path_buf();
    let session = serve::run(session, listener, cfg.loop_defaults.dt, Arc::new(AtomicBool::new(false)), |s| {
        let n = s.dataset().routes.len();
        if n > saved {
            saved = n;
            match s.dataset().save(&out) {
                Ok(()) => eprintln!("route {n}/{target} saved to {}", out.display()),
                Err(e) => eprintln!("saving {}: {e}", out.display()),
            }
        }
        n >= target
    })?;
    session.dataset().save(&out)?;
    println!("{} routes, {} samples -> {}", session.dataset().routes.len(), session.dataset().len(), out.display());
    Ok(())
}

fn train_cmd(cfg: &ProjectConfig, a: TrainArgs) -> Result<()> {
    let data_path = resolve(cfg.paths.datasets.as_deref(), &a.data);
    let data = DemoDataset::load(&data_path).with_context(|| format!("loading {}", data_path.display()))?;
    let first = data.samples.first().context("dataset is empty")?;
    let seed = a.seed.unwrap_or(cfg.loop_defaults.seed);
    let defaults = TrainConfig::default();
    let tc = TrainConfig {
        epochs: a.epochs,
        seed,
        learning_rate: a.lr.unwrap_or(defaults.learning_rate),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        k: a.k.unwrap_or(defaults.k),
        weight_decay: a.weight_decay.unwrap_or(defaults.weight_decay),
        ..defaults
    };
    let net = PolicyNet::new(NetConfig::standard(first.obs.width, first.obs.height, seed))?;
    let (net, curve) = train(net, &data, &tc)?;
    let out = resolve(cfg.paths.checkpoints.as_deref(), &a.out);
    checkpoint::save(&net, &out)?;
    let curve_path = a.curve.unwrap_or_else(|| {
        let mut p = out.clone().into_os_string();
        p.push(".loss.json");
        PathBuf::from(p)
    });
    std::fs::write(&curve_path, serde_json::to_string_pretty(&curve)?)?;
    println!(
        "loss {:.5} -> {:.5} over {} epochs; checkpoint {}",
        curve.first().unwrap_or(f64::NAN),
        curve.last().unwrap_or(f64::NAN),
        curve.epochs.len(),
        out.display()
    );
    Ok(())
}

fn run_cmd(cfg: &ProjectConfig, a: RunArgs) -> Result<()> {
    let net = load_net(cfg, &a.model)?;
    let scenario = load_scenario(&cfg.scenario_ref(&a.scenario))?;
    let (source, backend) = match &a.fixed {
        Some(i) => (InstructionSource::Fixed(parse_instruction_flag(i)?), PlannerBackend::oracle(LatencyModel::ZERO)),
        None => match planner_backend(cfg, &a.planner)? {
            Some(b) => (InstructionSource::Planner, b),
            None => (InstructionSource::SelfSampled, PlannerBackend::oracle(LatencyModel::ZERO)),
        },
    };
    let lc = LoopConfig {
        dt: cfg.loop_defaults.dt,
        mode: if a.wall_clock { LoopMode::WallClock } else { LoopMode::VirtualTime },
        max_ticks: cfg.loop_defaults.max_ticks,
        seed: a.seed.unwrap_or(cfg.loop_defaults.seed),
        camera: camera_for(cfg, &net),
        ..LoopConfig::new(backend, source)
    };
    let result = run_episode(&scenario, &net, &lc)?;
    if let Some(path) = &a.trace {
        let w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        result.write_trace(w)?;
    }
    let summary = serde_json::json!({
        "scenario": scenario.name,
        "source": source.to_string(),
        "success": result.success,
        "termination": result.termination,
        "ticks_run": result.ticks_run,
        "final_state": result.final_state,
        "decisions": result.decisions,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn read_plan(path: &Path) -> Result<EvalPlan> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let plan = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        serde_json::from_str(&text)?
    } else {
        toml::from_str(&text)?
    };
    Ok(plan)
}

fn eval_cmd(cfg: &ProjectConfig, a: EvalArgs) -> Result<()> {
    let net = load_net(cfg, &a.model)?;
    let mut plan = match &a.plan {
        Some(p) => read_plan(p)?,
        None => {
            if a.scenario.is_empty() {
                bail!("give --plan or at least one --scenario");
            }
            let mut models = Vec::new();
            if let Some(b) = planner_backend(cfg, &a.planner)? {
                models.push(ModelCell::planner(b));
            }
            models.push(ModelCell::solo());
            let mut p = EvalPlan::new(a.scenario.clone(), models);
            p.camera = camera_for(cfg, &net);
            p.max_ticks = cfg.loop_defaults.max_ticks;
            p.seed_base = cfg.loop_defaults.seed;
            p
        }
    };
    plan.scenarios = plan.scenarios.iter().map(|s| cfg.scenario_ref(s)).collect();
    if let Some(t) = a.trials {
        plan.trials = t;
    }
    if let Some(s) = a.seed {
        plan.seed_base = s;
    }
    let report = run_eval(&plan, &net)?;
    let format = match a.format {
        FormatChoice::Csv => ReportFormat::Csv,
        FormatChoice::Markdown => ReportFormat::Markdown,
    };
    let text = report.emit(format)?;
    match &a.out {
        Some(p) => {
            let p = resolve(cfg.paths.reports.as_deref(), p);
            std::fs::write(&p, &text).with_context(|| format!("writing {}", p.display()))?;
            eprintln!("report -> {}", p.display());
            if format == ReportFormat::Csv {
                print!("{}", report.to_markdown());
            }
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn serve_cmd(cfg: &ProjectConfig, a: ServeArgs) -> Result<()> {
    let mode = match a.mode {
        ModeChoice::Teleop => SessionMode::Teleop,
        ModeChoice::Watch => SessionMode::Watch,
    };
    let mut sc = SessionConfig::new(mode, cfg.scenario_ref(&a.scenario));
    sc.camera = cfg.camera;
    sc.dt = cfg.loop_defaults.dt;
    sc.frame_every = a.frame_every;
    if let Some(m) = &a.model {
        let net = load_net(cfg, m)?;
        sc.camera = camera_for(cfg, &net);
        let (source, backend) = match planner_backend(cfg, &a.planner)? {
            Some(b) => (InstructionSource::Planner, b),
            None => (InstructionSource::SelfSampled, PlannerBackend::oracle(LatencyModel::ZERO)),
        };
        let loop_config = LoopConfig {
            dt: cfg.loop_defaults.dt,
            max_ticks: cfg.loop_defaults.max_ticks,
            seed: cfg.loop_defaults.seed,
            camera: sc.camera,
            ..LoopConfig::new(backend, source)
        };
        sc.watch = Some(WatchSetup { net: Arc::new(net), loop_config });
    }
    let session = SimSession::new(sc)?;
    let listener = std::net::TcpListener::bind((a.host.as_str(), a.port))
        .with_context(|| format!("binding {}:{}", a.host, a.port))?;
    eprintln!("serving ws://{}{}", listener.local_addr()?, serve::WS_PATH);
    let record = a.record.map(|p| resolve(cfg.paths.datasets.as_deref(), &p));
    let mut saved = 0;
    serve::run(session, listener, cfg.loop_defaults.dt, Arc::new(AtomicBool::new(false)), |s| {
        let n = s.dataset().routes.len();
        if let (Some(path), true) = (&record, n > saved) {
            saved = n;
            if let Err(e) = s.dataset().save(path) {
                log::error!("saving {}: {e}", path.display());
            }
        }
        false
    })?;
    Ok(())
}

fn parse_corpus(a: CorpusArgs) -> Result<()> {
    let verdicts = check_corpus(&a.dir)?;
    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    for v in &verdicts {
        writeln!(w, "{v}")?;
    }
    let failed = verdicts.iter().filter(|v| !v.passed()).count();
    writeln!(w, "{} files, {} mismatches", verdicts.len(), failed)?;
    if failed > 0 {
        bail!("{failed} corpus answers did not parse to their pinned verdict");
    }
    Ok(())
}
