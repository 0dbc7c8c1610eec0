//! Deterministic 2D corridor world.
//!
//! Frame convention: `x` runs along the corridor, `y` is lateral with 0 on the
//! centerline and positive values on the right-hand side when facing `+x`.
//! Heading is measured from `+x` towards `+y`, so a positive steering command
//! turns the vehicle right, matching the steering range of the car
//! (`-1` leftmost, `+1` rightmost).

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Controller and simulator period, 60 Hz.
pub const DT: f64 = 1.0 / 60.0;

#[derive(Debug, Error, PartialEq)]
pub enum WorldError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

/// Kinematic bicycle parameters for a toy-scale car.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    pub wheelbase: f64,
    pub max_steer: f64,
    pub max_accel: f64,
    pub drag: f64,
    pub max_speed: f64,
    pub radius: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            wheelbase: 0.3,
            max_steer: 30f64.to_radians(),
            max_accel: 3.0,
            drag: 0.5,
            max_speed: 4.5,
            radius: 0.15,
        }
    }
}

impl VehicleParams {
    /// Path curvature at full steering lock.
    pub fn max_curvature(&self) -> f64 {
        self.max_steer.tan() / self.wheelbase
    }

    /// Throttle that holds `speed` in steady state.
    pub fn cruise_throttle(&self, speed: f64) -> f64 {
        (self.drag * speed / self.max_accel).clamp(0.0, 1.0)
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { x, y, heading: normalize_angle(heading) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub pose: Pose,
    pub speed: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, heading: f64, speed: f64) -> Self {
        Self { pose: Pose::new(x, y, heading), speed }
    }

    fn is_finite(&self) -> bool {
        self.pose.x.is_finite()
            && self.pose.y.is_finite()
            && self.pose.heading.is_finite()
            && self.speed.is_finite()
    }

    /// Largest absolute component difference, used by replay checks.
    pub fn max_abs_diff(&self, other: &VehicleState) -> f64 {
        let dh = normalize_angle(self.pose.heading - other.pose.heading).abs();
        (self.pose.x - other.pose.x)
            .abs()
            .max((self.pose.y - other.pose.y).abs())
            .max(dh)
            .max((self.speed - other.speed).abs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub steering: f64,
    pub throttle: f64,
}

impl Action {
    pub const IDLE: Action = Action { steering: 0.0, throttle: 0.0 };

    pub fn new(steering: f64, throttle: f64) -> Result<Self, WorldError> {
        let a = Self { steering, throttle };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        if !self.steering.is_finite() || !self.throttle.is_finite() {
            return Err(WorldError::InvalidInput(format!("non-finite action {self:?}")));
        }
        if !(-1.0..=1.0).contains(&self.steering) || !(0.0..=1.0).contains(&self.throttle) {
            return Err(WorldError::InvalidInput(format!("action out of range {self:?}")));
        }
        Ok(())
    }
}

/// Advances the kinematic bicycle by one explicit step.
///
/// Speed is updated first from throttle and linear drag; heading integrates
/// the pre-step speed through the steering curvature; position then moves
/// along the new heading at the new speed.
pub fn step_dynamics(
    state: &VehicleState,
    action: &Action,
    dt: f64,
    params: &VehicleParams,
) -> Result<VehicleState, WorldError> {
    if !dt.is_finite() || dt <= 0.0 {
        return Err(WorldError::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    if !state.is_finite() {
        return Err(WorldError::InvalidInput(format!("non-finite state {state:?}")));
    }
    action.validate()?;

    let speed = (state.speed + (action.throttle * params.max_accel - params.drag * state.speed) * dt)
        .clamp(0.0, params.max_speed);
    let yaw_rate = state.speed / params.wheelbase * (action.steering * params.max_steer).tan();
    let heading = normalize_angle(state.pose.heading + yaw_rate * dt);
    let (sin, cos) = heading.sin_cos();
    Ok(VehicleState {
        pose: Pose {
            x: state.pose.x + speed * cos * dt,
            y: state.pose.y + speed * sin * dt,
            heading,
        },
        speed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObstacleKind {
    Cone,
    Bin,
    Pedestrian,
    Car,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
    #[serde(default)]
    pub velocity: [f64; 2],
    pub kind: ObstacleKind,
}

impl Obstacle {
    pub fn fixed(kind: ObstacleKind, x: f64, y: f64, radius: f64) -> Self {
        Self { center: [x, y], radius, velocity: [0.0, 0.0], kind }
    }

    pub fn moving(kind: ObstacleKind, x: f64, y: f64, radius: f64, velocity: [f64; 2]) -> Self {
        Self { center: [x, y], radius, velocity, kind }
    }

    /// Center at time `t` under constant-velocity motion.
    pub fn position_at(&self, t: f64) -> [f64; 2] {
        [self.center[0] + self.velocity[0] * t, self.center[1] + self.velocity[1] * t]
    }
}

/// One piece of the corridor: from `from_x` onwards the half-width is
/// `half_width` until the next section starts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorridorSection {
    pub from_x: f64,
    pub half_width: f64,
}

/// Piecewise-constant corridor half-width along `x`. The first section also
/// covers everything before its `from_x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HalfWidthProfile(pub Vec<CorridorSection>);

impl HalfWidthProfile {
    pub fn uniform(half_width: f64) -> Self {
        Self(vec![CorridorSection { from_x: 0.0, half_width }])
    }

    pub fn at(&self, x: f64) -> f64 {
        let mut hw = self.0[0].half_width;
        for s in &self.0 {
            if x >= s.from_x {
                hw = s.half_width;
            } else {
                break;
            }
        }
        hw
    }

    pub fn min(&self) -> f64 {
        self.0.iter().map(|s| s.half_width).fold(f64::INFINITY, f64::min)
    }

    pub fn sections(&self) -> &[CorridorSection] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub corridor_half_width: HalfWidthProfile,
    pub length: f64,
    pub obstacles: Vec<Obstacle>,
    pub start: VehicleState,
    pub goal_x: f64,
    pub max_ticks: u32,
}

impl Scenario {
    /// Obstacle-free corridor of uniform width.
    pub fn empty(half_width: f64, length: f64, start: VehicleState, goal_x: f64) -> Self {
        Self {
            name: "EMPTY".into(),
            corridor_half_width: HalfWidthProfile::uniform(half_width),
            length,
            obstacles: Vec::new(),
            start,
            goal_x,
            max_ticks: DEFAULT_MAX_TICKS,
        }
    }

    pub fn half_width_at(&self, x: f64) -> f64 {
        self.corridor_half_width.at(x)
    }

    pub fn validate(&self, params: &VehicleParams) -> Result<(), WorldError> {
        let bad = |m: String| Err(WorldError::InvalidScenario(format!("{}: {m}", self.name)));
        let sections = self.corridor_half_width.sections();
        if sections.is_empty() {
            return bad("corridor has no sections".into());
        }
        if sections.windows(2).any(|w| w[1].from_x <= w[0].from_x) {
            return bad("corridor sections must be sorted by from_x".into());
        }
        if self.corridor_half_width.min() <= params.radius {
            return bad("corridor narrower than the vehicle".into());
        }
        if self.goal_x <= self.start.pose.x {
            return bad("goal_x must lie ahead of the start".into());
        }
        if self.max_ticks == 0 {
            return bad("max_ticks must be positive".into());
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            if !(o.radius > 0.0) {
                return bad(format!("obstacle {i} has non-positive radius"));
            }
            if o.center[1].abs() >= self.half_width_at(o.center[0]) {
                return bad(format!("obstacle {i} starts outside the corridor"));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, WorldError> {
        let s: Scenario = serde_json::from_str(text)
            .map_err(|e| WorldError::InvalidScenario(e.to_string()))?;
        s.validate(&VehicleParams::default())?;
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CollisionReport {
    pub wall: bool,
    /// Index of the first obstacle touched, if any.
    pub obstacle: Option<usize>,
}

impl CollisionReport {
    pub fn any(&self) -> bool {
        self.wall || self.obstacle.is_some()
    }
}

pub fn check_collision(
    state: &VehicleState,
    scenario: &Scenario,
    t: f64,
    params: &VehicleParams,
) -> CollisionReport {
    let Pose { x, y, .. } = state.pose;
    let wall = y.abs() + params.radius > scenario.half_width_at(x);
    let obstacle = scenario.obstacles.iter().position(|o| {
        let [ox, oy] = o.position_at(t);
        (x - ox).hypot(y - oy) < params.radius + o.radius
    });
    CollisionReport { wall, obstacle }
}

pub const DEFAULT_MAX_TICKS: u32 = 3600;
/// Cruise speed of the scripted expert and of every library start state.
pub const CRUISE_SPEED: f64 = 0.3;
pub const CORRIDOR_HALF_WIDTH: f64 = 1.0;
pub const WIDE_HALF_WIDTH: f64 = 1.4;
pub const CONE_RADIUS: f64 = 0.2;
pub const BIN_RADIUS: f64 = 0.25;
pub const PEDESTRIAN_SPEED: f64 = 0.5;
pub const CAR_SPEED: f64 = 1.5;
/// Along-corridor position of the single training cone.
pub const TRAIN_CONE_X: f64 = 2.5;
/// Distance past the last obstacle at which an episode counts as a pass.
pub const GOAL_MARGIN: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScenarioName {
    S010,
    S110,
    S011,
    Zigzag,
    MovingCar,
    MovingPed,
    MovingCarPed,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 7] = [
        ScenarioName::S010,
        ScenarioName::S110,
        ScenarioName::S011,
        ScenarioName::Zigzag,
        ScenarioName::MovingCar,
        ScenarioName::MovingPed,
        ScenarioName::MovingCarPed,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioName::S010 => "S010",
            ScenarioName::S110 => "S110",
            ScenarioName::S011 => "S011",
            ScenarioName::Zigzag => "ZIGZAG",
            ScenarioName::MovingCar => "MOVING_CAR",
            ScenarioName::MovingPed => "MOVING_PED",
            ScenarioName::MovingCarPed => "MOVING_CAR_PED",
        }
    }
}

impl fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioName {
    type Err = WorldError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ScenarioName::ALL
            .into_iter()
            .find(|n| n.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| WorldError::UnknownScenario(s.to_string()))
    }
}

fn lane_center(lane: i32, half_width: f64) -> f64 {
    // lanes are the corridor thirds: -1 left, 0 middle, 1 right
    lane as f64 * 2.0 * half_width / 3.0
}

fn three_lane(name: &str, lanes: &[i32]) -> Scenario {
    let hw = CORRIDOR_HALF_WIDTH;
    let obstacles = lanes
        .iter()
        .map(|&l| Obstacle::fixed(ObstacleKind::Cone, TRAIN_CONE_X, lane_center(l, hw), CONE_RADIUS))
        .collect();
    Scenario {
        name: name.into(),
        corridor_half_width: HalfWidthProfile::uniform(hw),
        length: TRAIN_CONE_X + 2.0,
        obstacles,
        start: VehicleState::new(0.0, 0.0, 0.0, CRUISE_SPEED),
        goal_x: TRAIN_CONE_X + GOAL_MARGIN,
        max_ticks: DEFAULT_MAX_TICKS,
    }
}

pub const ZIGZAG_FIRST_X: f64 = 4.0;
pub const ZIGZAG_WIDEN_X: f64 = 5.0;
pub const ZIGZAG_SECOND_X: f64 = 8.8;

fn zigzag() -> Scenario {
    use ObstacleKind::*;
    Scenario {
        name: "ZIGZAG".into(),
        corridor_half_width: HalfWidthProfile(vec![
            CorridorSection { from_x: 0.0, half_width: CORRIDOR_HALF_WIDTH },
            CorridorSection { from_x: ZIGZAG_WIDEN_X, half_width: WIDE_HALF_WIDTH },
        ]),
        length: ZIGZAG_SECOND_X + 2.0,
        obstacles: vec![
            // first group closes the left and middle of the hallway
            Obstacle::fixed(Bin, ZIGZAG_FIRST_X, -0.72, BIN_RADIUS),
            Obstacle::fixed(Cone, ZIGZAG_FIRST_X, -0.2, CONE_RADIUS),
            // second group sits centre-right in the wider section
            Obstacle::fixed(Cone, ZIGZAG_SECOND_X, 0.0, CONE_RADIUS),
            Obstacle::fixed(Cone, ZIGZAG_SECOND_X, 0.55, CONE_RADIUS),
            Obstacle::fixed(Bin, ZIGZAG_SECOND_X, 1.1, BIN_RADIUS),
        ],
        start: VehicleState::new(0.0, 0.0, 0.0, CRUISE_SPEED),
        goal_x: ZIGZAG_SECOND_X + GOAL_MARGIN,
        max_ticks: DEFAULT_MAX_TICKS,
    }
}

/// Time for the ego car to reach `x` from the origin at cruise speed.
fn arrival_time(x: f64) -> f64 {
    x / CRUISE_SPEED
}

fn moving(name: &str, movers: &[(ObstacleKind, i32)]) -> Scenario {
    let mut s = three_lane(name, &[0]);
    s.name = name.into();
    let hw = CORRIDOR_HALF_WIDTH;
    let meet = arrival_time(TRAIN_CONE_X);
    for &(kind, lane) in movers {
        let (speed, radius) = match kind {
            ObstacleKind::Car => (CAR_SPEED, 0.25),
            _ => (PEDESTRIAN_SPEED, 0.15),
        };
        // starts far ahead and walks or drives towards the ego car so it is
        // level with the centre cone when the ego car gets there
        let x0 = TRAIN_CONE_X + speed * meet;
        s.obstacles.push(Obstacle::moving(kind, x0, lane_center(lane, hw), radius, [-speed, 0.0]));
    }
    s.length = s.obstacles.iter().map(|o| o.center[0]).fold(s.length, f64::max) + 1.0;
    s
}

fn moving_car_ped() -> Scenario {
    use ObstacleKind::*;
    let mut s = zigzag();
    s.name = "MOVING_CAR_PED".into();
    let first = arrival_time(ZIGZAG_FIRST_X);
    let second = arrival_time(ZIGZAG_SECOND_X);
    s.obstacles = vec![
        Obstacle::fixed(Cone, ZIGZAG_FIRST_X, -0.2, CONE_RADIUS),
        Obstacle::moving(Car, ZIGZAG_FIRST_X + CAR_SPEED * first, -0.7, 0.25, [-CAR_SPEED, 0.0]),
        Obstacle::fixed(Cone, ZIGZAG_SECOND_X, 0.0, CONE_RADIUS),
        Obstacle::moving(
            Pedestrian,
            ZIGZAG_SECOND_X + PEDESTRIAN_SPEED * second,
            0.7,
            0.15,
            [-PEDESTRIAN_SPEED, 0.0],
        ),
    ];
    s.length = s.obstacles.iter().map(|o| o.center[0]).fold(s.length, f64::max) + 1.0;
    s
}

/// Canonical train and test layouts.
pub fn scenario_library(name: ScenarioName) -> Scenario {
    use ObstacleKind::*;
    match name {
        ScenarioName::S010 => three_lane("S010", &[0]),
        ScenarioName::S110 => three_lane("S110", &[-1, 0]),
        ScenarioName::S011 => three_lane("S011", &[0, 1]),
        ScenarioName::Zigzag => zigzag(),
        ScenarioName::MovingCar => moving("MOVING_CAR", &[(Car, -1)]),
        ScenarioName::MovingPed => moving("MOVING_PED", &[(Pedestrian, 1)]),
        ScenarioName::MovingCarPed => moving_car_ped(),
    }
}

/// Resolves `builtin:NAME` or a path to a scenario JSON file.
pub fn load_scenario(spec: &str) -> Result<Scenario, WorldError> {
    if let Some(name) = spec.strip_prefix("builtin:") {
        return Ok(scenario_library(name.parse()?));
    }
    let text = std::fs::read_to_string(spec)
        .map_err(|e| WorldError::InvalidScenario(format!("{spec}: {e}")))?;
    Scenario::from_json(&text)
}
