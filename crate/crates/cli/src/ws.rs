//! JSON text frames exchanged on `/ws`. Every frame is a flat object with a
//! `seq` number and a `type` tag; the remaining fields depend on the type.

use serde::{Deserialize, Serialize};

use sfd_core::closed_loop::Termination;
use sfd_core::world::VehicleState;
use sfd_core::Instruction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionMode {
    /// The client drives; its latest control is held every tick.
    Teleop,
    /// The hybrid loop drives; the client only watches.
    Watch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientBody {
    Hello,
    Control { steering: f64, throttle: f64 },
    SetMode { mode: SessionMode },
    /// Scenario reference as accepted by the `--scenario` flag.
    StartEpisode { scenario: String },
    Stop,
    /// Label for the teleop route recorded from the next episode on.
    MarkRoute { class: Instruction },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub success: bool,
    pub termination: Option<Termination>,
    pub ticks_run: u64,
    /// Teleop routes kept so far in this session.
    pub routes_recorded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerBody {
    State { tick: u64, t: f64, state: VehicleState },
    Frame { tick: u64, digest: String, png_base64: String },
    Instruction { tick: u64, instruction: Instruction, age_ticks: u64 },
    EpisodeEnd { summary: EpisodeSummary },
    Error { text: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub seq: u64,
    #[serde(flatten)]
    pub body: T,
}

pub type ClientMessage = Envelope<ClientBody>;
pub type ServerMessage = Envelope<ServerBody>;

impl<T: Serialize> Envelope<T> {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("message serialises")
    }
}

pub fn parse_client(text: &str) -> Result<ClientMessage, serde_json::Error> {
    serde_json::from_str(text)
}

pub fn parse_server(text: &str) -> Result<ServerMessage, serde_json::Error> {
    serde_json::from_str(text)
}
