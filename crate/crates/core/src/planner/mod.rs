//! Slow high-level planners behind one interface: the geometric oracle, a
//! scripted instruction sequence, and a remote vision-language model.

pub mod corpus;
mod oracle;
mod prompt;
mod vlm;

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use oracle::{free_gaps, nearest_group, oracle_plan, third_of, widest_gap, Gap, OracleConfig};
pub use prompt::{
    build_prompt, parse_instruction, PromptBundle, PromptImage, PromptStyle, COT_CONTEXT, COT_QUESTION,
    NAIVE_CONTEXT, NAIVE_QUESTION,
};
pub use vlm::{request_body, vlm_request, EndpointConfig, VlmError, VlmReply};

use crate::policy::Instruction;
use crate::sensor::{Observation, SensorError};
use crate::world::{Scenario, VehicleState};

#[derive(Debug, thiserror::Error)]
pub enum PlannerError {
    #[error(transparent)]
    Vlm(#[from] VlmError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error("invalid planner configuration: {0}")]
    Config(String),
}

/// How long a planner reply takes to land, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LatencyModel {
    Fixed { seconds: f64 },
    /// Normal distribution with negative draws rejected.
    Gaussian { mean: f64, stddev: f64 },
}

/// Measured inference times of the four language models the architecture
/// was demonstrated with: (name, mean s, std s).
pub const LATENCY_PRESETS: [(&str, f64, f64); 4] = [
    ("llava-llama2-13b", 7.76, 0.56),
    ("llava-llama3-8b", 5.86, 1.17),
    ("chatgpt-4o", 7.09, 2.80),
    ("minigpt-v2", 7.30, 1.24),
];

impl LatencyModel {
    pub const ZERO: LatencyModel = LatencyModel::Fixed { seconds: 0.0 };

    pub fn preset(name: &str) -> Option<Self> {
        LATENCY_PRESETS
            .iter()
            .find(|(n, _, _)| n.eq_ignore_ascii_case(name))
            .map(|&(_, mean, stddev)| LatencyModel::Gaussian { mean, stddev })
    }

    pub fn validate(&self) -> Result<(), PlannerError> {
        let ok = match *self {
            LatencyModel::Fixed { seconds } => seconds.is_finite() && seconds >= 0.0,
            LatencyModel::Gaussian { mean, stddev } => {
                mean.is_finite() && mean >= 0.0 && stddev.is_finite() && stddev >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(PlannerError::Config(format!("bad latency model {self:?}")))
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            LatencyModel::Fixed { seconds } => seconds,
            LatencyModel::Gaussian { mean, .. } => mean,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            LatencyModel::Fixed { seconds } => seconds,
            LatencyModel::Gaussian { mean, stddev } => {
                let Ok(normal) = Normal::new(mean, stddev) else { return mean.max(0.0) };
                for _ in 0..1000 {
                    let x = normal.sample(rng);
                    if x >= 0.0 {
                        return x;
                    }
                }
                0.0
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Oracle,
    Scripted,
    Vlm,
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackendKind::Oracle => "oracle",
            BackendKind::Scripted => "scripted",
            BackendKind::Vlm => "vlm",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BackendSpec {
    Oracle {
        #[serde(default = "default_lookahead")]
        lookahead: f64,
        #[serde(default = "default_group_depth")]
        group_depth: f64,
    },
    /// Replays a fixed list, holding the last entry once it runs out.
    Scripted { sequence: Vec<Instruction> },
    Vlm { endpoint: EndpointConfig, style: PromptStyle },
}

fn default_lookahead() -> f64 {
    OracleConfig::default().lookahead
}

fn default_group_depth() -> f64 {
    OracleConfig::default().group_depth
}

/// A configured planner: what answers, and how long answers take.
///
/// Without a latency model the reply is applied when it actually lands,
/// which only makes sense for remote backends in wall-clock mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerBackend {
    pub backend: BackendSpec,
    #[serde(default)]
    pub latency: Option<LatencyModel>,
}

impl PlannerBackend {
    pub fn oracle(latency: LatencyModel) -> Self {
        let o = OracleConfig::default();
        Self {
            backend: BackendSpec::Oracle { lookahead: o.lookahead, group_depth: o.group_depth },
            latency: Some(latency),
        }
    }

    pub fn scripted(sequence: Vec<Instruction>, latency: LatencyModel) -> Self {
        Self { backend: BackendSpec::Scripted { sequence }, latency: Some(latency) }
    }

    pub fn kind(&self) -> BackendKind {
        match self.backend {
            BackendSpec::Oracle { .. } => BackendKind::Oracle,
            BackendSpec::Scripted { .. } => BackendKind::Scripted,
            BackendSpec::Vlm { .. } => BackendKind::Vlm,
        }
    }

    pub fn validate(&self) -> Result<(), PlannerError> {
        if let Some(l) = &self.latency {
            l.validate()?;
        }
        match &self.backend {
            BackendSpec::Oracle { lookahead, group_depth } => {
                if !(lookahead.is_finite() && *lookahead > 0.0 && group_depth.is_finite() && *group_depth >= 0.0) {
                    return Err(PlannerError::Config("oracle lookahead and group depth must be positive".into()));
                }
            }
            BackendSpec::Scripted { sequence } => {
                if sequence.is_empty() {
                    return Err(PlannerError::Config("scripted sequence is empty".into()));
                }
            }
            BackendSpec::Vlm { endpoint, .. } => endpoint.validate()?,
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn Planner>, PlannerError> {
        self.validate()?;
        Ok(match &self.backend {
            &BackendSpec::Oracle { lookahead, group_depth } => {
                Box::new(OraclePlanner { config: OracleConfig { lookahead, group_depth } })
            }
            BackendSpec::Scripted { sequence } => Box::new(ScriptedPlanner { sequence: sequence.clone(), next: 0 }),
            BackendSpec::Vlm { endpoint, style } => {
                Box::new(VlmPlanner { endpoint: endpoint.clone(), style: *style })
            }
        })
    }
}

/// Everything a planner may look at when asked for an instruction.
#[derive(Debug, Clone)]
pub struct PlanQuery {
    pub tick: u64,
    pub t: f64,
    pub state: VehicleState,
    pub scenario: Arc<Scenario>,
    pub observation: Observation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanAnswer {
    /// `None` when the reply named no direction; the caller keeps its cache.
    pub instruction: Option<Instruction>,
    pub raw: String,
}

pub trait Planner: Send {
    fn plan(&mut self, query: &PlanQuery) -> Result<PlanAnswer, PlannerError>;
}

#[derive(Debug, Clone)]
pub struct OraclePlanner {
    pub config: OracleConfig,
}

impl Planner for OraclePlanner {
    fn plan(&mut self, q: &PlanQuery) -> Result<PlanAnswer, PlannerError> {
        let i = oracle_plan(&q.state, &q.scenario, q.t, &self.config);
        Ok(PlanAnswer { instruction: Some(i), raw: i.as_str().into() })
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedPlanner {
    sequence: Vec<Instruction>,
    next: usize,
}

impl Planner for ScriptedPlanner {
    fn plan(&mut self, _q: &PlanQuery) -> Result<PlanAnswer, PlannerError> {
        let i = self.sequence[self.next.min(self.sequence.len() - 1)];
        self.next += 1;
        Ok(PlanAnswer { instruction: Some(i), raw: i.as_str().into() })
    }
}

#[derive(Debug, Clone)]
pub struct VlmPlanner {
    pub endpoint: EndpointConfig,
    pub style: PromptStyle,
}

impl Planner for VlmPlanner {
    fn plan(&mut self, q: &PlanQuery) -> Result<PlanAnswer, PlannerError> {
        let bundle = build_prompt(self.style, &PromptImage::Raster(q.observation.clone()))?;
        let reply = vlm_request(&bundle, &self.endpoint)?;
        log::debug!("planner reply after {:.2}s: {:?}", reply.latency_s, reply.text);
        Ok(PlanAnswer { instruction: parse_instruction(&reply.text), raw: reply.text })
    }
}

/// A planner result as held by the controller's cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerDecision {
    pub instruction: Instruction,
    pub raw_response: String,
    pub issued_at_tick: u64,
    pub available_at_tick: u64,
}
