//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfd_core::learn::{grad, loss, Sample};
use sfd_core::policy::{Instruction, LayerSpec, NetConfig, PolicyNet};
use sfd_core::sensor::Observation;
use sfd_core::world::{
    check_collision, CorridorSection, HalfWidthProfile, Obstacle, ObstacleKind, Scenario, VehicleParams,
    VehicleState,
};

/// Small conv + dense net, under 5 000 parameters.
pub fn small_net(seed: u64) -> PolicyNet {
    PolicyNet::new(NetConfig {
        input_width: 24,
        input_height: 12,
        layers: vec![LayerSpec::Conv { out_channels: 4, kernel: 3, stride: 2 }, LayerSpec::Dense { units: 16 }],
        seed,
    })
    .unwrap()
}

pub fn random_samples(n: usize, w: usize, h: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut obs = Observation::blank(w, h);
            for p in obs.pixels.iter_mut() {
                *p = rng.random_range(0.0..1.0);
            }
            Sample {
                obs,
                y_s: rng.random_range(-1.0..=1.0),
                y_t: rng.random_range(0.0..=1.0),
                y_c: Instruction::from_index(i % 3).unwrap(),
            }
        })
        .collect()
}

fn mean_loss(net: &PolicyNet, batch: &[&Sample], k: f64) -> f64 {
    batch.iter().map(|s| loss(&net.forward(&s.obs).unwrap(), s, k).total).sum::<f64>() / batch.len() as f64
}

/// Largest relative difference between the analytic gradient and central
/// differences with step `h`, over every parameter. Also returns the
/// parameter count.
pub fn gradient_check(seed: u64, h: f64) -> (f64, usize) {
    let mut net = small_net(seed);
    let samples = random_samples(4, 24, 12, seed + 1);
    let batch: Vec<&Sample> = samples.iter().collect();
    let k = 0.7;
    let (analytic, _) = grad(&net, &batch, k).unwrap();
    let mut worst: f64 = 0.0;
    for t in 0..net.params().len() {
        for j in 0..net.params()[t].data.len() {
            let w = net.params()[t].data[j];
            net.params_mut()[t].data[j] = w + h;
            let up = mean_loss(&net, &batch, k);
            net.params_mut()[t].data[j] = w - h;
            let down = mean_loss(&net, &batch, k);
            net.params_mut()[t].data[j] = w;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.0[t][j];
            let scale = a.abs().max(numeric.abs()).max(1e-7);
            worst = worst.max((a - numeric).abs() / scale);
        }
    }
    (worst, net.param_count())
}

/// Collision verdict from first principles: the wall is found by scanning
/// the corridor sections, the obstacle by densely sampling the obstacle rim.
pub fn brute_collision(s: &VehicleState, sc: &Scenario, t: f64, p: &VehicleParams) -> (bool, bool) {
    let x = s.pose.x;
    let mut hw = sc.corridor_half_width.0[0].half_width;
    for sec in &sc.corridor_half_width.0 {
        if x >= sec.from_x {
            hw = sec.half_width;
        }
    }
    let wall = s.pose.y.abs() + p.radius > hw;
    let obstacle = sc.obstacles.iter().any(|o| {
        let c = [o.center[0] + o.velocity[0] * t, o.center[1] + o.velocity[1] * t];
        let inside = (x - c[0]).powi(2) + (s.pose.y - c[1]).powi(2) < o.radius * o.radius;
        let n = 7200;
        let rim = (0..n).any(|i| {
            let a = i as f64 / n as f64 * std::f64::consts::TAU;
            let q = [c[0] + o.radius * a.cos(), c[1] + o.radius * a.sin()];
            (x - q[0]).powi(2) + (s.pose.y - q[1]).powi(2) < p.radius * p.radius
        });
        inside || rim
    });
    (wall, obstacle)
}

/// Draws `n` random states in random two-section corridors with random
/// fixed and moving obstacles and counts verdicts that disagree with the
/// brute-force oracle. States within 1e-6 m of a contact are redrawn since
/// rim sampling cannot resolve them.
pub fn collision_mismatches(n: usize, seed: u64) -> usize {
    let p = VehicleParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    let mut done = 0;
    while done < n {
        let narrow = rng.random_range(0.6..1.2);
        let mut sc = Scenario::empty(narrow, 12.0, VehicleState::new(0.0, 0.0, 0.0, 0.3), 11.0);
        sc.corridor_half_width = HalfWidthProfile(vec![
            CorridorSection { from_x: 0.0, half_width: narrow },
            CorridorSection { from_x: rng.random_range(2.0..8.0), half_width: narrow + rng.random_range(0.0..0.6) },
        ]);
        sc.obstacles = (0..rng.random_range(0..5))
            .map(|_| {
                let v = if rng.random_bool(0.3) { [rng.random_range(-1.5..0.0), rng.random_range(-0.3..0.3)] } else { [0.0; 2] };
                Obstacle::moving(
                    ObstacleKind::Cone,
                    rng.random_range(0.0..10.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(0.1..0.4),
                    v,
                )
            })
            .collect();
        let t = rng.random_range(0.0..5.0);
        let s = VehicleState::new(rng.random_range(0.0..10.0), rng.random_range(-1.5..1.5), rng.random_range(-3.0..3.0), 0.3);
        let near_contact = sc.obstacles.iter().any(|o| {
            let c = o.position_at(t);
            ((s.pose.x - c[0]).hypot(s.pose.y - c[1]) - (o.radius + p.radius)).abs() < 1e-6
        }) || (s.pose.y.abs() + p.radius - sc.half_width_at(s.pose.x)).abs() < 1e-9;
        if near_contact {
            continue;
        }
        let got = check_collision(&s, &sc, t, &p);
        let (wall, obstacle) = brute_collision(&s, &sc, t, &p);
        if got.wall != wall || got.obstacle.is_some() != obstacle {
            mismatches += 1;
        }
        done += 1;
    }
    mismatches
}
