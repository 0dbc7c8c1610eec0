//! The simulator side of `serve`, free of sockets and clocks so it can be
//! driven tick by tick from tests.
//!
//! Teleop: the latest accepted control is held every tick until replaced.
//! Watch: the hybrid loop is run to completion when the episode starts and
//! its trace is then played back one tick per tick.

use std::sync::Arc;

use base64::Engine;
use sfd_core::closed_loop::{run_episode, EpisodeResult, LoopConfig, TickLog, Termination};
use sfd_core::learn::{DemoDataset, Sample};
use sfd_core::policy::PolicyNet;
use sfd_core::sensor::{render, CameraSpec};
use sfd_core::world::{check_collision, load_scenario, step_dynamics, Action, Scenario, VehicleParams, VehicleState};
use sfd_core::Instruction;

use crate::ws::{ClientBody, ClientMessage, EpisodeSummary, ServerBody, ServerMessage, SessionMode};

/// What the watch mode needs to run the hybrid loop.
#[derive(Debug, Clone)]
pub struct WatchSetup {
    pub net: Arc<PolicyNet>,
    pub loop_config: LoopConfig,
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub mode: SessionMode,
    pub scenario: String,
    pub camera: CameraSpec,
    pub dt: f64,
    /// Send a frame every this many ticks.
    pub frame_every: u64,
    /// Teleop recording rate in samples per second; must divide the tick rate.
    pub record_fps: u32,
    pub watch: Option<WatchSetup>,
}

impl SessionConfig {
    pub fn new(mode: SessionMode, scenario: impl Into<String>) -> Self {
        Self {
            mode,
            scenario: scenario.into(),
            camera: CameraSpec::default(),
            dt: sfd_core::world::DT,
            frame_every: 4,
            record_fps: 10,
            watch: None,
        }
    }
}

/// A finished teleop episode, kept for replay checks.
#[derive(Debug, Clone, PartialEq)]
pub struct TeleopEpisode {
    pub class: Option<Instruction>,
    pub termination: Option<Termination>,
    pub trace: Vec<TickLog>,
    pub final_state: VehicleState,
}

pub struct SimSession {
    cfg: SessionConfig,
    params: VehicleParams,
    mode: SessionMode,
    scenario: Scenario,
    state: VehicleState,
    tick: u64,
    running: bool,
    control: Action,
    control_seq: Option<u64>,
    last_seq: Option<u64>,
    out_seq: u64,
    route_class: Option<Instruction>,
    recording: Vec<Sample>,
    trace: Vec<TickLog>,
    watch_run: Option<EpisodeResult>,
    dataset: DemoDataset,
    episodes: Vec<TeleopEpisode>,
}

impl SimSession {
    pub fn new(cfg: SessionConfig) -> anyhow::Result<Self> {
        anyhow::ensure!(cfg.frame_every > 0, "frame_every must be positive");
        let ticks_per_s = (1.0 / cfg.dt).round() as u32;
        anyhow::ensure!(
            cfg.record_fps > 0 && ticks_per_s % cfg.record_fps == 0,
            "record fps {} must divide the tick rate {ticks_per_s}",
            cfg.record_fps
        );
        if cfg.mode == SessionMode::Watch {
            anyhow::ensure!(cfg.watch.is_some(), "watch mode needs a model");
        }
        let scenario = load_scenario(&cfg.scenario)?;
        let mut s = Self {
            params: VehicleParams::default(),
            mode: cfg.mode,
            state: scenario.start,
            scenario,
            cfg,
            tick: 0,
            running: false,
            control: Action::IDLE,
            control_seq: None,
            last_seq: None,
            out_seq: 0,
            route_class: None,
            recording: Vec::new(),
            trace: Vec::new(),
            watch_run: None,
            dataset: DemoDataset::default(),
            episodes: Vec::new(),
        };
        let mut sink = Vec::new();
        s.begin_episode(&mut sink);
        Ok(s)
    }

    pub fn mode(&self) -> SessionMode {
        self.mode
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn sim_time(&self) -> f64 {
        self.tick as f64 * self.cfg.dt
    }

    pub fn state(&self) -> VehicleState {
        self.state
    }

    pub fn running(&self) -> bool {
        self.running
    }

    /// The control held on the next teleop tick and the sequence number it came with.
    pub fn held_control(&self) -> (Action, Option<u64>) {
        (self.control, self.control_seq)
    }

    pub fn dataset(&self) -> &DemoDataset {
        &self.dataset
    }

    pub fn episodes(&self) -> &[TeleopEpisode] {
        &self.episodes
    }

    fn emit(&mut self, out: &mut Vec<ServerMessage>, body: ServerBody) {
        self.out_seq += 1;
        out.push(ServerMessage { seq: self.out_seq, body });
    }

    fn begin_episode(&mut self, out: &mut Vec<ServerMessage>) {
        self.state = self.scenario.start;
        self.tick = 0;
        self.recording.clear();
        self.trace.clear();
        self.watch_run = None;
        self.running = true;
        if self.mode == SessionMode::Watch {
            let setup = self.cfg.watch.as_ref().expect("checked when the mode was set");
            match run_episode(&self.scenario, &setup.net, &setup.loop_config) {
                Ok(r) => self.watch_run = Some(r),
                Err(e) => {
                    self.running = false;
                    self.emit(out, ServerBody::Error { text: format!("hybrid loop failed: {e}") });
                }
            }
        }
    }

    fn end_episode(&mut self, termination: Option<Termination>, out: &mut Vec<ServerMessage>) {
        if !self.running {
            return;
        }
        self.running = false;
        let success = termination == Some(Termination::Goal);
        if self.mode == SessionMode::Teleop {
            if success {
                if let Some(class) = self.route_class {
                    self.dataset.push_route(class, std::mem::take(&mut self.recording));
                }
            }
            self.episodes.push(TeleopEpisode {
                class: self.route_class,
                termination,
                trace: std::mem::take(&mut self.trace),
                final_state: self.state,
            });
        }
        let summary = EpisodeSummary {
            success,
            termination,
            ticks_run: self.tick,
            routes_recorded: self.dataset.routes.len(),
        };
        self.emit(out, ServerBody::EpisodeEnd { summary });
    }

    /// Applies one client message. Messages whose sequence number does not
    /// increase are dropped.
    pub fn handle(&mut self, msg: ClientMessage) -> Vec<ServerMessage> {
        let mut out = Vec::new();
        if matches!(msg.body, ClientBody::Hello) {
            self.last_seq = Some(msg.seq);
            self.control_seq = None;
            let body = ServerBody::State { tick: self.tick, t: self.sim_time(), state: self.state };
            self.emit(&mut out, body);
            return out;
        }
        if self.last_seq.is_some_and(|last| msg.seq <= last) {
            log::debug!("dropping out-of-order message {} (last {:?})", msg.seq, self.last_seq);
            return out;
        }
        self.last_seq = Some(msg.seq);
        match msg.body {
            ClientBody::Hello => unreachable!("handled above"),
            ClientBody::Control { steering, throttle } => match Action::new(steering, throttle) {
                Ok(a) => {
                    self.control = a;
                    self.control_seq = Some(msg.seq);
                }
                Err(e) => self.emit(&mut out, ServerBody::Error { text: e.to_string() }),
            },
            ClientBody::SetMode { mode } => {
                if mode == SessionMode::Watch && self.cfg.watch.is_none() {
                    self.emit(&mut out, ServerBody::Error { text: "watch mode needs a model (--model)".into() });
                } else if mode != self.mode {
                    self.end_episode(None, &mut out);
                    self.mode = mode;
                    self.control = Action::IDLE;
                    self.begin_episode(&mut out);
                }
            }
            ClientBody::StartEpisode { scenario } => match load_scenario(&scenario) {
                Ok(s) => {
                    self.end_episode(None, &mut out);
                    self.scenario = s;
                    self.begin_episode(&mut out);
                }
                Err(e) => self.emit(&mut out, ServerBody::Error { text: e.to_string() }),
            },
            ClientBody::Stop => self.end_episode(None, &mut out),
            ClientBody::MarkRoute { class } => self.route_class = Some(class),
        }
        out
    }

    /// The client went away: teleop stops driving, watch carries on.
    pub fn disconnect(&mut self) {
        self.last_seq = None;
        if self.mode == SessionMode::Teleop {
            self.control = Action::IDLE;
            self.control_seq = None;
        }
    }

    /// Advances the simulation by exactly one controller period.
    pub fn step(&mut self) -> Vec<ServerMessage> {
        let mut out = Vec::new();
        if !self.running {
            return out;
        }
        match self.mode {
            SessionMode::Teleop => self.step_teleop(&mut out),
            SessionMode::Watch => self.step_watch(&mut out),
        }
        out
    }

    fn terminal(&self) -> Option<Termination> {
        let hit = check_collision(&self.state, &self.scenario, self.sim_time(), &self.params);
        if hit.obstacle.is_some() {
            Some(Termination::CollisionObstacle)
        } else if hit.wall {
            Some(Termination::CollisionWall)
        } else if self.state.pose.x >= self.scenario.goal_x {
            Some(Termination::Goal)
        } else if self.tick >= self.scenario.max_ticks as u64 {
            Some(Termination::Timeout)
        } else {
            None
        }
    }

    fn frame(&mut self, out: &mut Vec<ServerMessage>, state: &VehicleState) {
        let mut obs = render(state, &self.scenario, self.sim_time(), &self.cfg.camera);
        obs.tick = self.tick;
        match obs.to_png() {
            Ok(png) => {
                let body = ServerBody::Frame {
                    tick: self.tick,
                    digest: obs.digest(),
                    png_base64: base64::engine::general_purpose::STANDARD.encode(png),
                };
                self.emit(out, body);
            }
            Err(e) => self.emit(out, ServerBody::Error { text: e.to_string() }),
        }
    }

    fn step_teleop(&mut self, out: &mut Vec<ServerMessage>) {
        if let Some(end) = self.terminal() {
            self.end_episode(Some(end), out);
            return;
        }
        let t = self.sim_time();
        let stride = (1.0 / self.cfg.dt).round() as u64 / self.cfg.record_fps as u64;
        let mut obs = render(&self.state, &self.scenario, t, &self.cfg.camera);
        obs.tick = self.tick;
        let action = self.control;
        let class = self.route_class.unwrap_or(Instruction::Middle);
        self.trace.push(TickLog {
            tick: self.tick,
            state: self.state,
            obs_digest: obs.digest(),
            instruction_used: class,
            instruction_age_ticks: 0,
            action,
            planner_events: Vec::new(),
        });
        if self.route_class.is_some() && self.tick % stride == 0 {
            self.recording.push(Sample { obs, y_s: action.steering, y_t: action.throttle, y_c: class });
        }
        let body = ServerBody::State { tick: self.tick, t, state: self.state };
        self.emit(out, body);
        if self.tick % self.cfg.frame_every == 0 {
            let s = self.state;
            self.frame(out, &s);
        }
        match step_dynamics(&self.state, &action, self.cfg.dt, &self.params) {
            Ok(next) => {
                self.state = next;
                self.tick += 1;
            }
            Err(e) => {
                self.emit(out, ServerBody::Error { text: e.to_string() });
                self.end_episode(None, out);
            }
        }
    }

    fn step_watch(&mut self, out: &mut Vec<ServerMessage>) {
        let Some(run) = self.watch_run.as_ref() else {
            self.running = false;
            return;
        };
        let Some(log) = run.trace.get(self.tick as usize).cloned() else {
            self.state = run.final_state;
            let end = Some(run.termination);
            self.end_episode(end, out);
            return;
        };
        self.state = log.state;
        let t = self.sim_time();
        self.emit(out, ServerBody::State { tick: self.tick, t, state: log.state });
        let body = ServerBody::Instruction {
            tick: self.tick,
            instruction: log.instruction_used,
            age_ticks: log.instruction_age_ticks,
        };
        self.emit(out, body);
        if self.tick % self.cfg.frame_every == 0 {
            self.frame(out, &log.state);
        }
        self.tick += 1;
    }
}
