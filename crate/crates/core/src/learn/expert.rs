use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DemoDataset, LearnError, Sample};
use crate::policy::Instruction;
use crate::sensor::{render, CameraSpec};
use crate::world::{
    check_collision, step_dynamics, Action, Scenario, VehicleParams, VehicleState, CRUISE_SPEED, DT,
};

/// Anything that can drive a demonstration route.
pub trait ExpertDriver {
    fn begin_route(&mut self, class: Instruction);
    fn control(&mut self, state: &VehicleState, scenario: &Scenario, t: f64) -> Action;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    /// Lateral target on the commanded side of the obstacle.
    pub side_offset: f64,
    /// Pure-pursuit look-ahead distance.
    pub lookahead: f64,
    pub cruise_speed: f64,
    pub speed_gain: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self { side_offset: 0.5, lookahead: 0.8, cruise_speed: CRUISE_SPEED, speed_gain: 0.5 }
    }
}

/// Pure pursuit towards a constant lateral offset: left or right of the
/// obstacle, or the centerline for `MIDDLE`.
#[derive(Debug, Clone)]
pub struct ScriptedExpert {
    pub config: ExpertConfig,
    pub params: VehicleParams,
    target_y: f64,
}

impl ScriptedExpert {
    pub fn new(config: ExpertConfig, params: VehicleParams) -> Self {
        Self { config, params, target_y: 0.0 }
    }

    pub fn target_y(&self) -> f64 {
        self.target_y
    }
}

impl Default for ScriptedExpert {
    fn default() -> Self {
        Self::new(ExpertConfig::default(), VehicleParams::default())
    }
}

impl ExpertDriver for ScriptedExpert {
    fn begin_route(&mut self, class: Instruction) {
        self.target_y = match class {
            Instruction::Left => -self.config.side_offset,
            Instruction::Middle => 0.0,
            Instruction::Right => self.config.side_offset,
        };
    }

    fn control(&mut self, state: &VehicleState, _scenario: &Scenario, _t: f64) -> Action {
        let c = &self.config;
        let p = &self.params;
        let alpha = (self.target_y - state.pose.y).atan2(c.lookahead) - state.pose.heading;
        let delta = (2.0 * p.wheelbase * alpha.sin() / c.lookahead).atan();
        let steering = (delta / p.max_steer).clamp(-1.0, 1.0);
        let throttle = (p.cruise_throttle(c.cruise_speed) + c.speed_gain * (c.cruise_speed - state.speed)).clamp(0.0, 1.0);
        Action { steering, throttle }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollectConfig {
    pub routes: usize,
    /// Recording rate; the simulator itself always runs at 60 Hz.
    pub fps: u32,
    pub camera: CameraSpec,
    pub seed: u64,
    /// Start-pose spread for routes that pass an obstacle.
    pub lateral_jitter: f64,
    pub heading_jitter_deg: f64,
    pub distance_jitter: f64,
    /// Start-pose spread for straight routes.
    pub middle_lateral_jitter: f64,
    pub middle_heading_jitter_deg: f64,
    pub max_attempts: usize,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            routes: 60,
            fps: 10,
            camera: CameraSpec::default(),
            seed: 0,
            lateral_jitter: 0.2,
            heading_jitter_deg: 4.0,
            distance_jitter: 0.5,
            middle_lateral_jitter: 0.05,
            middle_heading_jitter_deg: 1.0,
            max_attempts: 20,
        }
    }
}

fn sym(rng: &mut ChaCha8Rng, half: f64) -> f64 {
    if half > 0.0 {
        rng.random_range(-half..=half)
    } else {
        0.0
    }
}

/// Drives `routes` labelled demonstration routes in `scenario`.
///
/// Classes cycle LEFT, MIDDLE, RIGHT. LEFT and RIGHT routes pass the
/// obstacles on that side; MIDDLE routes drive the same corridor with the
/// obstacles removed. A route that ends in a collision is discarded and
/// re-rolled with a fresh start pose.
pub fn collect_demos(
    scenario: &Scenario,
    driver: &mut dyn ExpertDriver,
    cfg: &CollectConfig,
) -> Result<DemoDataset, LearnError> {
    let params = VehicleParams::default();
    scenario.validate(&params)?;
    if cfg.fps == 0 || 60 % cfg.fps != 0 {
        return Err(LearnError::InvalidConfig(format!("fps must divide 60, got {}", cfg.fps)));
    }
    let stride = (60 / cfg.fps) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut data = DemoDataset::default();
    let mut empty = scenario.clone();
    empty.obstacles.clear();

    for route in 0..cfg.routes {
        let class = Instruction::ALL[route % 3];
        let world = if class == Instruction::Middle { &empty } else { scenario };
        let (lat, head) = if class == Instruction::Middle {
            (cfg.middle_lateral_jitter, cfg.middle_heading_jitter_deg)
        } else {
            (cfg.lateral_jitter, cfg.heading_jitter_deg)
        };
        let mut done = None;
        for _ in 0..cfg.max_attempts {
            let mut state = world.start;
            state.pose.x += sym(&mut rng, cfg.distance_jitter);
            state.pose.y += sym(&mut rng, lat);
            state.pose.heading += sym(&mut rng, head).to_radians();
            driver.begin_route(class);
            if let Some(samples) = drive_route(world, driver, state, &params, &cfg.camera, stride, class)? {
                done = Some(samples);
                break;
            }
        }
        let samples = done.ok_or(LearnError::ExpertFailed(cfg.max_attempts))?;
        data.push_route(class, samples);
    }
    Ok(data)
}

fn drive_route(
    world: &Scenario,
    driver: &mut dyn ExpertDriver,
    mut state: VehicleState,
    params: &VehicleParams,
    camera: &CameraSpec,
    stride: u64,
    class: Instruction,
) -> Result<Option<Vec<Sample>>, LearnError> {
    let mut samples = Vec::new();
    for tick in 0..world.max_ticks as u64 {
        let t = tick as f64 * DT;
        if check_collision(&state, world, t, params).any() {
            return Ok(None);
        }
        if state.pose.x >= world.goal_x {
            return Ok(Some(samples));
        }
        let action = driver.control(&state, world, t);
        action.validate()?;
        if tick % stride == 0 {
            let mut obs = render(&state, world, t, camera);
            obs.tick = tick;
            samples.push(Sample { obs, y_s: action.steering, y_t: action.throttle, y_c: class });
        }
        state = step_dynamics(&state, &action, DT, params)?;
    }
    Ok(None)
}
