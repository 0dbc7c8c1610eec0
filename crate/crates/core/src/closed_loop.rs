//! The hybrid control loop: a fast policy ticking every `dt` on whatever
//! instruction is cached, while a slow planner refreshes that cache one
//! request at a time.

use std::io::Write;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::planner::{PlanAnswer, PlanQuery, Planner, PlannerBackend, PlannerDecision, PlannerError};
use crate::policy::{act, self_instruct, Instruction, PolicyError, PolicyNet};
use crate::sensor::{render, CameraSpec};
use crate::world::{check_collision, step_dynamics, Action, Scenario, VehicleParams, VehicleState, WorldError, DT};

#[derive(Debug, thiserror::Error)]
pub enum LoopError {
    #[error("invalid loop configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Where the controller's instruction comes from on each tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionSource {
    /// The planner's cached decision.
    Planner,
    /// A fresh draw from the policy's own class head.
    SelfSampled,
    Fixed(Instruction),
}

impl std::fmt::Display for InstructionSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InstructionSource::Planner => f.write_str("planner"),
            InstructionSource::SelfSampled => f.write_str("self_sampled"),
            InstructionSource::Fixed(i) => write!(f, "fixed_{}", i.as_str().to_lowercase()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopMode {
    /// Planner latency becomes a deterministic tick count; no threads, no sleeping.
    VirtualTime,
    /// Real-time ticking with the planner on a worker thread.
    WallClock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopConfig {
    /// Controller period in seconds; the dynamics always integrate at this step.
    pub dt: f64,
    pub planner: PlannerBackend,
    pub source: InstructionSource,
    pub mode: LoopMode,
    /// Overrides the scenario's own tick budget.
    #[serde(default)]
    pub max_ticks: Option<u32>,
    pub seed: u64,
    #[serde(default)]
    pub camera: CameraSpec,
}

impl LoopConfig {
    pub fn new(planner: PlannerBackend, source: InstructionSource) -> Self {
        Self {
            dt: DT,
            planner,
            source,
            mode: LoopMode::VirtualTime,
            max_ticks: None,
            seed: 0,
            camera: CameraSpec::default(),
        }
    }

    pub fn validate(&self, net: &PolicyNet) -> Result<(), LoopError> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(LoopError::Config(format!("controller period must be positive, got {}", self.dt)));
        }
        self.camera.validate().map_err(|e| LoopError::Config(e.to_string()))?;
        let nc = net.config();
        if (nc.input_width, nc.input_height) != (self.camera.width, self.camera.height) {
            return Err(LoopError::Config(format!(
                "camera {}x{} does not match network input {}x{}",
                self.camera.width, self.camera.height, nc.input_width, nc.input_height
            )));
        }
        if self.mode == LoopMode::VirtualTime && self.planner.latency.is_none() && self.source == InstructionSource::Planner {
            return Err(LoopError::Config("virtual time needs a planner latency model".into()));
        }
        self.planner.validate()?;
        Ok(())
    }
}

/// Latency in whole controller ticks; a hair of tolerance keeps exact
/// multiples such as 0.5 s at 60 Hz from rounding up an extra tick.
pub fn latency_ticks(latency_s: f64, dt: f64) -> u64 {
    ((latency_s / dt) - 1e-9).ceil().max(0.0) as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum PlannerEvent {
    Issued,
    Arrived { instruction: Instruction },
    /// A reply landed but was discarded; the cache is unchanged.
    Dropped { reason: String },
}

/// One controller tick. `state` is the state the tick started from.
///
/// A tick can carry both an arrival and the request issued right after it,
/// so planner events are a list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickLog {
    pub tick: u64,
    pub state: VehicleState,
    pub obs_digest: String,
    pub instruction_used: Instruction,
    pub instruction_age_ticks: u64,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub planner_events: Vec<PlannerEvent>,
}

impl TickLog {
    pub fn arrived(&self) -> Option<Instruction> {
        self.planner_events.iter().find_map(|e| match e {
            PlannerEvent::Arrived { instruction } => Some(*instruction),
            _ => None,
        })
    }

    pub fn issued(&self) -> bool {
        self.planner_events.contains(&PlannerEvent::Issued)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Goal,
    CollisionWall,
    CollisionObstacle,
    Timeout,
}

impl Termination {
    pub const ALL: [Termination; 4] =
        [Termination::Goal, Termination::CollisionWall, Termination::CollisionObstacle, Termination::Timeout];

    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::Goal => "goal",
            Termination::CollisionWall => "collision_wall",
            Termination::CollisionObstacle => "collision_obstacle",
            Termination::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    pub termination: Termination,
    pub ticks_run: u64,
    pub final_state: VehicleState,
    pub decisions: Vec<PlannerDecision>,
    pub trace: Vec<TickLog>,
}

impl EpisodeResult {
    pub fn write_trace<W: Write>(&self, mut w: W) -> Result<(), LoopError> {
        for log in &self.trace {
            serde_json::to_writer(&mut w, log)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Cache {
    instruction: Instruction,
    since_tick: u64,
}

fn terminal(state: &VehicleState, scenario: &Scenario, t: f64, params: &VehicleParams) -> Option<Termination> {
    let hit = check_collision(state, scenario, t, params);
    if hit.obstacle.is_some() {
        Some(Termination::CollisionObstacle)
    } else if hit.wall {
        Some(Termination::CollisionWall)
    } else if state.pose.x >= scenario.goal_x {
        Some(Termination::Goal)
    } else {
        None
    }
}

/// Runs one episode from `scenario.start`.
pub fn run_episode(scenario: &Scenario, net: &PolicyNet, cfg: &LoopConfig) -> Result<EpisodeResult, LoopError> {
    cfg.validate(net)?;
    let params = VehicleParams::default();
    scenario.validate(&params)?;
    let shared = Arc::new(scenario.clone());
    let planner = match cfg.source {
        InstructionSource::Planner => Some(cfg.planner.build()?),
        _ => None,
    };
    match cfg.mode {
        LoopMode::VirtualTime => run_virtual(shared, net, cfg, planner, &params),
        LoopMode::WallClock => run_wall_clock(shared, net, cfg, planner, &params),
    }
}

struct Pending {
    answer: Result<PlanAnswer, PlannerError>,
    issued_at: u64,
    arrives_at: u64,
}

fn run_virtual(
    scenario: Arc<Scenario>,
    net: &PolicyNet,
    cfg: &LoopConfig,
    mut planner: Option<Box<dyn Planner>>,
    params: &VehicleParams,
) -> Result<EpisodeResult, LoopError> {
    let mut latency_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_rng.set_stream(1);
    let latency = cfg.planner.latency.unwrap_or(crate::planner::LatencyModel::ZERO);
    let max_ticks = cfg.max_ticks.unwrap_or(scenario.max_ticks) as u64;

    let mut state = scenario.start;
    let mut cache = Cache { instruction: Instruction::Middle, since_tick: 0 };
    let mut pending: Option<Pending> = None;
    let mut decisions = Vec::new();
    let mut trace = Vec::new();

    for tick in 0..max_ticks {
        let t = tick as f64 * cfg.dt;
        if let Some(end) = terminal(&state, &scenario, t, params) {
            return Ok(finish(end, tick, state, decisions, trace));
        }
        let mut obs = render(&state, &scenario, t, &cfg.camera);
        obs.tick = tick;
        let mut events = Vec::new();

        if let Some(p) = planner.as_mut() {
            let land = |pending: &mut Option<Pending>, cache: &mut Cache, events: &mut Vec<PlannerEvent>, decisions: &mut Vec<PlannerDecision>| {
                if pending.as_ref().is_some_and(|q| q.arrives_at <= tick) {
                    let q = pending.take().expect("checked");
                    apply_answer(q.answer, q.issued_at, tick, cache, events, decisions);
                }
            };
            land(&mut pending, &mut cache, &mut events, &mut decisions);
            if pending.is_none() {
                let query = PlanQuery { tick, t, state, scenario: scenario.clone(), observation: obs.clone() };
                let answer = p.plan(&query);
                let delay = latency_ticks(latency.sample(&mut latency_rng), cfg.dt);
                pending = Some(Pending { answer, issued_at: tick, arrives_at: tick + delay });
                events.push(PlannerEvent::Issued);
            }
            land(&mut pending, &mut cache, &mut events, &mut decisions);
        }

        let out = net.forward(&obs)?;
        let (instruction, age) = match cfg.source {
            InstructionSource::Planner => (cache.instruction, tick - cache.since_tick),
            InstructionSource::SelfSampled => (self_instruct(&out, &mut sample_rng), 0),
            InstructionSource::Fixed(i) => (i, tick),
        };
        let action = act(&out, instruction);
        trace.push(TickLog {
            tick,
            state,
            obs_digest: obs.digest(),
            instruction_used: instruction,
            instruction_age_ticks: age,
            action,
            planner_events: events,
        });
        state = step_dynamics(&state, &action, cfg.dt, params)?;
    }
    let end = terminal(&state, &scenario, max_ticks as f64 * cfg.dt, params).unwrap_or(Termination::Timeout);
    Ok(finish(end, max_ticks, state, decisions, trace))
}

fn apply_answer(
    answer: Result<PlanAnswer, PlannerError>,
    issued_at: u64,
    tick: u64,
    cache: &mut Cache,
    events: &mut Vec<PlannerEvent>,
    decisions: &mut Vec<PlannerDecision>,
) {
    match answer {
        Ok(PlanAnswer { instruction: Some(i), raw }) => {
            cache.instruction = i;
            cache.since_tick = tick;
            events.push(PlannerEvent::Arrived { instruction: i });
            decisions.push(PlannerDecision {
                instruction: i,
                raw_response: raw,
                issued_at_tick: issued_at,
                available_at_tick: tick,
            });
        }
        Ok(PlanAnswer { instruction: None, raw }) => {
            log::info!("tick {tick}: planner reply names no direction, keeping {}", cache.instruction);
            events.push(PlannerEvent::Dropped { reason: format!("unparseable: {}", raw.chars().take(80).collect::<String>()) });
        }
        Err(e) => {
            log::warn!("tick {tick}: planner failed: {e}");
            events.push(PlannerEvent::Dropped { reason: e.to_string() });
        }
    }
}

fn finish(
    termination: Termination,
    ticks_run: u64,
    final_state: VehicleState,
    decisions: Vec<PlannerDecision>,
    trace: Vec<TickLog>,
) -> EpisodeResult {
    EpisodeResult { success: termination == Termination::Goal, termination, ticks_run, final_state, decisions, trace }
}

struct Reply {
    seq: u64,
    answer: Result<PlanAnswer, PlannerError>,
    issued_at: u64,
}

fn run_wall_clock(
    scenario: Arc<Scenario>,
    net: &PolicyNet,
    cfg: &LoopConfig,
    planner: Option<Box<dyn Planner>>,
    params: &VehicleParams,
) -> Result<EpisodeResult, LoopError> {
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_rng.set_stream(1);
    let max_ticks = cfg.max_ticks.unwrap_or(scenario.max_ticks) as u64;

    // latest reply cell, replaced whole by the worker
    let cell: Arc<Mutex<Option<Arc<Reply>>>> = Arc::new(Mutex::new(None));
    let busy = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel::<(u64, PlanQuery)>();
    let worker = planner.map(|mut p| {
        let cell = cell.clone();
        let busy = busy.clone();
        let latency = cfg.planner.latency;
        let seed = cfg.seed;
        thread::spawn(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (seq, query) in rx {
                let started = Instant::now();
                let answer = p.plan(&query);
                if let Some(model) = latency {
                    let target = Duration::from_secs_f64(model.sample(&mut rng));
                    if let Some(rest) = target.checked_sub(started.elapsed()) {
                        thread::sleep(rest);
                    }
                }
                *cell.lock().expect("reply cell") = Some(Arc::new(Reply { seq, answer, issued_at: query.tick }));
                busy.store(false, Ordering::Release);
            }
        })
    });

    let mut state = scenario.start;
    let mut cache = Cache { instruction: Instruction::Middle, since_tick: 0 };
    let mut seen_seq = 0u64;
    let mut next_seq = 1u64;
    let mut decisions = Vec::new();
    let mut trace = Vec::new();
    let period = Duration::from_secs_f64(cfg.dt);
    let clock = Instant::now();
    let mut end = None;

    for tick in 0..max_ticks {
        let t = tick as f64 * cfg.dt;
        if let Some(e) = terminal(&state, &scenario, t, params) {
            end = Some((e, tick));
            break;
        }
        let mut obs = render(&state, &scenario, t, &cfg.camera);
        obs.tick = tick;
        let mut events = Vec::new();
        if worker.is_some() {
            let latest = cell.lock().expect("reply cell").clone();
            if let Some(reply) = latest.filter(|r| r.seq > seen_seq) {
                seen_seq = reply.seq;
                let answer = match &reply.answer {
                    Ok(a) => Ok(a.clone()),
                    Err(e) => Err(PlannerError::Config(e.to_string())),
                };
                apply_answer(answer, reply.issued_at, tick, &mut cache, &mut events, &mut decisions);
            }
            if !busy.load(Ordering::Acquire) && seen_seq + 1 == next_seq {
                busy.store(true, Ordering::Release);
                let query = PlanQuery { tick, t, state, scenario: scenario.clone(), observation: obs.clone() };
                if tx.send((next_seq, query)).is_ok() {
                    next_seq += 1;
                    events.push(PlannerEvent::Issued);
                }
            }
        }
        let out = net.forward(&obs)?;
        let (instruction, age) = match cfg.source {
            InstructionSource::Planner => (cache.instruction, tick - cache.since_tick),
            InstructionSource::SelfSampled => (self_instruct(&out, &mut sample_rng), 0),
            InstructionSource::Fixed(i) => (i, tick),
        };
        let action = act(&out, instruction);
        trace.push(TickLog {
            tick,
            state,
            obs_digest: obs.digest(),
            instruction_used: instruction,
            instruction_age_ticks: age,
            action,
            planner_events: events,
        });
        state = step_dynamics(&state, &action, cfg.dt, params)?;
        let deadline = period * (tick as u32 + 1);
        if let Some(rest) = deadline.checked_sub(clock.elapsed()) {
            thread::sleep(rest);
        }
    }
    drop(tx);
    // an in-flight request may still be waiting on the network; let it finish
    // in the background rather than stall the caller
    drop(worker);
    let (termination, ticks) = end.unwrap_or_else(|| {
        let t = max_ticks as f64 * cfg.dt;
        (terminal(&state, &scenario, t, params).unwrap_or(Termination::Timeout), max_ticks)
    });
    Ok(finish(termination, ticks, state, decisions, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Match,
    /// The action logged at `tick` does not reproduce the next logged state.
    Diverged { tick: u64, error: f64 },
}

pub const REPLAY_TOLERANCE: f64 = 1e-9;

/// Re-integrates logged actions and checks every logged successor state.
pub fn replay(trace: &[TickLog], final_state: Option<&VehicleState>, dt: f64) -> Result<Verdict, LoopError> {
    let params = VehicleParams::default();
    for (i, log) in trace.iter().enumerate() {
        let next = step_dynamics(&log.state, &log.action, dt, &params)?;
        let expected = match trace.get(i + 1) {
            Some(n) => &n.state,
            None => match final_state {
                Some(s) => s,
                None => break,
            },
        };
        let error = next.max_abs_diff(expected);
        if error > REPLAY_TOLERANCE {
            return Ok(Verdict::Diverged { tick: log.tick, error });
        }
    }
    Ok(Verdict::Match)
}

pub fn replay_episode(result: &EpisodeResult, dt: f64) -> Result<Verdict, LoopError> {
    replay(&result.trace, Some(&result.final_state), dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::LatencyModel;
    use crate::policy::NetConfig;
    use crate::world::{scenario_library, ScenarioName};

    fn small_cam() -> CameraSpec {
        CameraSpec { width: 32, height: 16, ..Default::default() }
    }

    /// Untrained net whose MIDDLE row drives straight at walking pace.
    fn cruiser() -> PolicyNet {
        let mut net = PolicyNet::new(NetConfig::standard(32, 16, 1)).unwrap();
        net.zero_heads();
        let throttle = VehicleParams::default().cruise_throttle(crate::world::CRUISE_SPEED);
        let logit = (throttle / (1.0 - throttle)).ln();
        for t in net.params_mut() {
            if t.name == "head_v.bias" {
                // rows: LEFT, MIDDLE, RIGHT; columns: steering, throttle
                t.data = vec![-0.3, logit, 0.0, logit, 0.3, logit];
            }
        }
        net
    }

    fn cfg(latency: f64, source: InstructionSource) -> LoopConfig {
        let mut c = LoopConfig::new(PlannerBackend::oracle(LatencyModel::Fixed { seconds: latency }), source);
        c.camera = small_cam();
        c
    }

    #[test]
    fn ceil_arithmetic() {
        assert_eq!(latency_ticks(7.76, DT), 466);
        assert_eq!(latency_ticks(0.5, DT), 30);
        assert_eq!(latency_ticks(0.0, DT), 0);
        assert_eq!(latency_ticks(2.0, DT), 120);
        assert_eq!(latency_ticks(15.0, DT), 900);
    }

    #[test]
    fn arrivals_land_every_466_ticks() {
        let mut s = scenario_library(ScenarioName::S010);
        s.max_ticks = 1500;
        s.goal_x = 100.0;
        s.length = 120.0;
        s.obstacles.clear();
        let mut c = cfg(7.76, InstructionSource::Planner);
        c.planner = PlannerBackend::scripted(vec![Instruction::Middle], LatencyModel::Fixed { seconds: 7.76 });
        let r = run_episode(&s, &cruiser(), &c).unwrap();
        let arrivals: Vec<u64> = r.trace.iter().filter(|l| l.arrived().is_some()).map(|l| l.tick).collect();
        assert_eq!(arrivals, vec![466, 932, 1398]);
        let issues: Vec<u64> = r.trace.iter().filter(|l| l.issued()).map(|l| l.tick).collect();
        assert_eq!(issues, vec![0, 466, 932, 1398]);
        for l in &r.trace {
            let last_arrival = arrivals.iter().rev().find(|&&a| a <= l.tick).copied().unwrap_or(0);
            assert_eq!(l.instruction_age_ticks, l.tick - last_arrival);
        }
        for d in &r.decisions {
            assert!(d.available_at_tick >= d.issued_at_tick);
        }
    }

    #[test]
    fn zero_latency_tracks_the_oracle_every_tick() {
        let s = scenario_library(ScenarioName::S010);
        let c = cfg(0.0, InstructionSource::Planner);
        let r = run_episode(&s, &cruiser(), &c).unwrap();
        let oc = crate::planner::OracleConfig::default();
        for l in &r.trace {
            let want = crate::planner::oracle_plan(&l.state, &s, l.tick as f64 * DT, &oc);
            assert_eq!(l.instruction_used, want, "tick {}", l.tick);
            assert_eq!(l.instruction_age_ticks, 0);
        }
    }

    #[test]
    fn fixed_middle_reaches_the_goal_in_an_empty_corridor() {
        let mut s = scenario_library(ScenarioName::S010);
        s.obstacles.clear();
        let r = run_episode(&s, &cruiser(), &cfg(0.0, InstructionSource::Fixed(Instruction::Middle))).unwrap();
        assert_eq!(r.termination, Termination::Goal);
        assert!(r.success);
        assert!(r.trace.iter().all(|l| l.state.pose.y.abs() < 1e-9 && l.planner_events.is_empty()));
    }

    #[test]
    fn single_flight_and_cache_monotonicity() {
        let s = scenario_library(ScenarioName::Zigzag);
        for latency in [0.0, 0.3, 2.0] {
            let mut c = cfg(latency, InstructionSource::Planner);
            c.planner.latency = Some(LatencyModel::Gaussian { mean: latency, stddev: 0.2 });
            c.max_ticks = Some(900);
            let r = run_episode(&s, &cruiser(), &c).unwrap();
            let mut outstanding = false;
            let mut prev = Instruction::Middle;
            for l in &r.trace {
                for e in &l.planner_events {
                    match e {
                        PlannerEvent::Issued => {
                            assert!(!outstanding, "second request at tick {}", l.tick);
                            outstanding = true;
                        }
                        _ => outstanding = false,
                    }
                }
                if l.instruction_used != prev {
                    assert!(l.arrived().is_some(), "instruction changed without arrival at {}", l.tick);
                }
                prev = l.instruction_used;
            }
        }
    }

    #[test]
    fn latency_never_changes_cadence() {
        let mut s = scenario_library(ScenarioName::S010);
        s.obstacles.clear();
        let mut runs = Vec::new();
        for latency in [0.0, 2.0, 7.76, 15.0] {
            let mut c = cfg(latency, InstructionSource::Planner);
            c.planner = PlannerBackend::scripted(vec![Instruction::Middle], LatencyModel::Fixed { seconds: latency });
            let r = run_episode(&s, &cruiser(), &c).unwrap();
            assert!(r.trace.iter().enumerate().all(|(i, l)| l.tick == i as u64));
            runs.push(r);
        }
        for r in &runs[1..] {
            assert_eq!(r.ticks_run, runs[0].ticks_run);
            assert_eq!(r.final_state, runs[0].final_state);
        }
    }

    #[test]
    fn replay_matches_and_detects_perturbation() {
        let s = scenario_library(ScenarioName::S110);
        let r = run_episode(&s, &cruiser(), &cfg(1.0, InstructionSource::Planner)).unwrap();
        assert_eq!(replay_episode(&r, DT).unwrap(), Verdict::Match);
        let mut bad = r.trace.clone();
        bad[40].action.steering += 1e-3;
        assert!(matches!(replay(&bad, None, DT).unwrap(), Verdict::Diverged { tick: 40, .. }));
    }

    #[test]
    fn random_episodes_replay_exactly() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let net = cruiser();
        for i in 0..100 {
            let name = ScenarioName::ALL[i % ScenarioName::ALL.len()];
            let mut s = scenario_library(name);
            s.start.pose.y += rng.random_range(-0.05..0.05);
            s.start.pose.heading += rng.random_range(-0.02..0.02);
            let source = [InstructionSource::Planner, InstructionSource::SelfSampled][i % 2];
            let mut c = cfg(rng.random_range(0.0..3.0), source);
            c.seed = i as u64;
            c.max_ticks = Some(400);
            let r = run_episode(&s, &net, &c).unwrap();
            assert_eq!(replay_episode(&r, DT).unwrap(), Verdict::Match, "episode {i}");
        }
    }

    #[test]
    fn same_seed_same_trace() {
        let s = scenario_library(ScenarioName::Zigzag);
        let mut c = cfg(0.0, InstructionSource::Planner);
        c.planner.latency = Some(LatencyModel::Gaussian { mean: 1.0, stddev: 0.5 });
        c.seed = 5;
        c.max_ticks = Some(600);
        let a = run_episode(&s, &cruiser(), &c).unwrap();
        let b = run_episode(&s, &cruiser(), &c).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn planner_failures_keep_the_cache() {
        let mut cache = Cache { instruction: Instruction::Left, since_tick: 3 };
        let mut events = Vec::new();
        let mut decisions = Vec::new();
        apply_answer(
            Ok(PlanAnswer { instruction: None, raw: "no idea".into() }),
            0,
            10,
            &mut cache,
            &mut events,
            &mut decisions,
        );
        apply_answer(Err(PlannerError::Config("down".into())), 10, 20, &mut cache, &mut events, &mut decisions);
        assert_eq!(cache.instruction, Instruction::Left);
        assert_eq!(cache.since_tick, 3);
        assert!(decisions.is_empty());
        assert!(events.iter().all(|e| matches!(e, PlannerEvent::Dropped { .. })));
    }

    #[test]
    fn wall_clock_controller_does_not_wait() {
        let mut s = scenario_library(ScenarioName::S010);
        s.obstacles.clear();
        let mut c = cfg(0.25, InstructionSource::Planner);
        c.mode = LoopMode::WallClock;
        c.max_ticks = Some(60);
        let started = Instant::now();
        let r = run_episode(&s, &cruiser(), &c).unwrap();
        let took = started.elapsed().as_secs_f64();
        assert_eq!(r.trace.len(), 60);
        assert!(took < 1.5, "took {took}");
        let arrivals = r.trace.iter().filter(|l| l.arrived().is_some()).count();
        assert!((2..=4).contains(&arrivals), "{arrivals} arrivals");
        assert!(r.trace[..10].iter().all(|l| l.instruction_used == Instruction::Middle));
    }

    #[test]
    fn rejects_mismatched_camera() {
        let s = scenario_library(ScenarioName::S010);
        let mut c = cfg(0.0, InstructionSource::Planner);
        c.camera = CameraSpec::default();
        assert!(matches!(run_episode(&s, &cruiser(), &c), Err(LoopError::Config(_))));
    }

    #[test]
    fn trace_lines_are_json() {
        let s = scenario_library(ScenarioName::S010);
        let mut c = cfg(0.0, InstructionSource::Planner);
        c.max_ticks = Some(5);
        let r = run_episode(&s, &cruiser(), &c).unwrap();
        let mut buf = Vec::new();
        r.write_trace(&mut buf).unwrap();
        let lines: Vec<TickLog> =
            String::from_utf8(buf).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines, r.trace);
    }
}
