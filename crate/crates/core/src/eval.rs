//! Repeated-trial success-rate evaluation over a grid of scenarios and
//! instruction sources, with CSV and markdown reports.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::closed_loop::{run_episode, InstructionSource, LoopConfig, LoopError, LoopMode, Termination};
use crate::planner::{LatencyModel, PlannerBackend};
use crate::policy::PolicyNet;
use crate::sensor::CameraSpec;
use crate::world::{load_scenario, Scenario, WorldError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid evaluation plan: {0}")]
    Plan(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Loop(#[from] LoopError),
    #[error("report: {0}")]
    Csv(#[from] csv::Error),
}

/// One column of the model grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCell {
    pub source: InstructionSource,
    /// Ignored unless `source` is the planner.
    #[serde(default = "default_backend")]
    pub planner: PlannerBackend,
    /// Overrides the plan-wide trial count for this column.
    #[serde(default)]
    pub trials: Option<u32>,
}

fn default_backend() -> PlannerBackend {
    PlannerBackend::oracle(LatencyModel::ZERO)
}

impl ModelCell {
    pub fn planner(planner: PlannerBackend) -> Self {
        Self { source: InstructionSource::Planner, planner, trials: None }
    }

    pub fn solo() -> Self {
        Self { source: InstructionSource::SelfSampled, planner: default_backend(), trials: None }
    }

    pub fn backend_label(&self) -> String {
        match self.source {
            InstructionSource::Planner => self.planner.kind().to_string(),
            _ => "none".into(),
        }
    }

    pub fn latency_mean(&self) -> f64 {
        match self.source {
            InstructionSource::Planner => self.planner.latency.map_or(0.0, |l| l.mean()),
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalPlan {
    /// Scenario references as accepted by `load_scenario`.
    pub scenarios: Vec<String>,
    pub models: Vec<ModelCell>,
    #[serde(default = "default_trials")]
    pub trials: u32,
    #[serde(default)]
    pub seed_base: u64,
    /// Start-pose spread that makes trials differ.
    #[serde(default = "default_lateral")]
    pub lateral_jitter: f64,
    #[serde(default = "default_heading")]
    pub heading_jitter_deg: f64,
    #[serde(default)]
    pub camera: CameraSpec,
    #[serde(default)]
    pub max_ticks: Option<u32>,
}

fn default_trials() -> u32 {
    30
}

fn default_lateral() -> f64 {
    0.05
}

fn default_heading() -> f64 {
    1.0
}

impl EvalPlan {
    pub fn new(scenarios: Vec<String>, models: Vec<ModelCell>) -> Self {
        Self {
            scenarios,
            models,
            trials: default_trials(),
            seed_base: 0,
            lateral_jitter: default_lateral(),
            heading_jitter_deg: default_heading(),
            camera: CameraSpec::default(),
            max_ticks: None,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.trials == 0 || self.models.iter().any(|m| m.trials == Some(0)) {
            return Err(EvalError::Plan("trials must be at least 1".into()));
        }
        if !(self.lateral_jitter >= 0.0 && self.heading_jitter_deg >= 0.0) {
            return Err(EvalError::Plan("jitter must be non-negative".into()));
        }
        Ok(())
    }

    /// Seed of one trial. Depends only on the cell's grid position and the
    /// trial number, so resizing one cell leaves the others untouched.
    pub fn trial_seed(&self, cell: usize, trial: u32) -> u64 {
        self.seed_base.wrapping_add((cell as u64) << 32).wrapping_add(trial as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub scenario: String,
    pub source: String,
    pub backend: String,
    pub latency_mean_s: f64,
    pub trials: u32,
    pub successes: u32,
    pub success_rate: f64,
    pub mean_ticks: f64,
    #[serde(default)]
    pub terminations: BTreeMap<Termination, u32>,
}

impl CellReport {
    /// Success percentage rounded half away from zero.
    pub fn percent(&self) -> u32 {
        if self.trials == 0 {
            return 0;
        }
        (200 * self.successes + self.trials) / (2 * self.trials)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SuccessReport {
    pub cells: Vec<CellReport>,
}

pub fn jittered_start(scenario: &Scenario, plan: &EvalPlan, seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = scenario.clone();
    if plan.lateral_jitter > 0.0 {
        s.start.pose.y += rng.random_range(-plan.lateral_jitter..=plan.lateral_jitter);
    }
    if plan.heading_jitter_deg > 0.0 {
        s.start.pose.heading += rng.random_range(-plan.heading_jitter_deg..=plan.heading_jitter_deg).to_radians();
    }
    s
}

fn scenario_label(spec: &str, s: &Scenario) -> String {
    if s.name.is_empty() {
        spec.to_string()
    } else {
        s.name.clone()
    }
}

/// Runs one cell of the grid.
pub fn run_cell(
    plan: &EvalPlan,
    cell_index: usize,
    scenario: &Scenario,
    model: &ModelCell,
    net: &PolicyNet,
) -> Result<CellReport, EvalError> {
    let trials = model.trials.unwrap_or(plan.trials);
    let mut terminations = BTreeMap::new();
    let mut successes = 0;
    let mut ticks = 0u64;
    for trial in 0..trials {
        let seed = plan.trial_seed(cell_index, trial);
        let s = jittered_start(scenario, plan, seed);
        let cfg = LoopConfig {
            mode: LoopMode::VirtualTime,
            max_ticks: plan.max_ticks,
            seed,
            camera: plan.camera,
            ..LoopConfig::new(model.planner.clone(), model.source)
        };
        let r = run_episode(&s, net, &cfg)?;
        successes += r.success as u32;
        ticks += r.ticks_run;
        *terminations.entry(r.termination).or_insert(0) += 1;
    }
    Ok(CellReport {
        scenario: scenario.name.clone(),
        source: model.source.to_string(),
        backend: model.backend_label(),
        latency_mean_s: model.latency_mean(),
        trials,
        successes,
        success_rate: successes as f64 / trials as f64,
        mean_ticks: ticks as f64 / trials as f64,
        terminations,
    })
}

pub fn run_eval(plan: &EvalPlan, net: &PolicyNet) -> Result<SuccessReport, EvalError> {
    plan.validate()?;
    let mut cells = Vec::new();
    for (si, spec) in plan.scenarios.iter().enumerate() {
        let scenario = load_scenario(spec)?;
        for (mi, model) in plan.models.iter().enumerate() {
            let index = si * plan.models.len() + mi;
            let mut cell = run_cell(plan, index, &scenario, model, net)?;
            cell.scenario = scenario_label(spec, &scenario);
            log::info!(
                "{} {} {}: {}/{}",
                cell.scenario,
                cell.source,
                cell.backend,
                cell.successes,
                cell.trials
            );
            cells.push(cell);
        }
    }
    Ok(SuccessReport { cells })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Markdown,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    scenario: String,
    source: String,
    backend: String,
    latency_mean_s: f64,
    trials: u32,
    successes: u32,
    success_rate: f64,
    mean_ticks: f64,
}

pub const CSV_HEADER: &str = "scenario,source,backend,latency_mean_s,trials,successes,success_rate,mean_ticks";

impl SuccessReport {
    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(CSV_HEADER.split(','))?;
        for c in &self.cells {
            w.serialize(CsvRow {
                scenario: c.scenario.clone(),
                source: c.source.clone(),
                backend: c.backend.clone(),
                latency_mean_s: c.latency_mean_s,
                trials: c.trials,
                successes: c.successes,
                success_rate: c.success_rate,
                mean_ticks: c.mean_ticks,
            })?;
        }
        let bytes = w.into_inner().map_err(|e| EvalError::Plan(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Reads a CSV report back. Termination histograms are not part of the
    /// CSV and come back empty.
    pub fn from_csv(text: &str) -> Result<Self, EvalError> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let cells = r
            .deserialize::<CsvRow>()
            .map(|row| {
                row.map(|c| CellReport {
                    scenario: c.scenario,
                    source: c.source,
                    backend: c.backend,
                    latency_mean_s: c.latency_mean_s,
                    trials: c.trials,
                    successes: c.successes,
                    success_rate: c.success_rate,
                    mean_ticks: c.mean_ticks,
                    terminations: BTreeMap::new(),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { cells })
    }

    /// Grid with one row per model and one column per scenario.
    pub fn to_markdown(&self) -> String {
        let mut scenarios: Vec<&str> = Vec::new();
        let mut models: Vec<(String, String, String)> = Vec::new();
        for c in &self.cells {
            if !scenarios.contains(&c.scenario.as_str()) {
                scenarios.push(&c.scenario);
            }
            let m = (c.source.clone(), c.backend.clone(), format!("{}", c.latency_mean_s));
            if !models.contains(&m) {
                models.push(m);
            }
        }
        let mut out = String::from("| source | backend | latency (s) |");
        for s in &scenarios {
            out.push_str(&format!(" {s} |"));
        }
        out.push_str("\n|---|---|---|");
        out.push_str(&"---|".repeat(scenarios.len()));
        out.push('\n');
        for (source, backend, latency) in &models {
            out.push_str(&format!("| {source} | {backend} | {latency} |"));
            for s in &scenarios {
                let cell = self
                    .cells
                    .iter()
                    .find(|c| c.scenario == *s && c.source == *source && c.backend == *backend && format!("{}", c.latency_mean_s) == *latency);
                match cell {
                    Some(c) => out.push_str(&format!(" {}% |", c.percent())),
                    None => out.push_str(" - |"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn emit(&self, format: ReportFormat) -> Result<String, EvalError> {
        match format {
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Markdown => Ok(self.to_markdown()),
        }
    }
}
