//! Geometric stand-in for the vision-language planner: find the obstacles
//! ahead, measure the free lateral gaps between them and the walls, and head
//! for the widest one.

use serde::{Deserialize, Serialize};

use crate::policy::Instruction;
use crate::world::{Scenario, VehicleState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    /// How far ahead (meters) obstacles are considered.
    pub lookahead: f64,
    /// Obstacles within this along-corridor distance of the nearest one form
    /// a single group.
    pub group_depth: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { lookahead: 5.0, group_depth: 1.0 }
    }
}

/// A free lateral interval `[lo, hi]` across the corridor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gap {
    pub lo: f64,
    pub hi: f64,
}

impl Gap {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

/// Lateral blocking intervals of the nearest obstacle group ahead, together
/// with the corridor half-width at that group. `None` when nothing is ahead.
pub fn nearest_group(
    state: &VehicleState,
    scenario: &Scenario,
    t: f64,
    cfg: &OracleConfig,
) -> Option<(f64, Vec<(f64, f64)>)> {
    let x = state.pose.x;
    let ahead: Vec<([f64; 2], f64)> = scenario
        .obstacles
        .iter()
        .map(|o| (o.position_at(t), o.radius))
        .filter(|&([ox, _], r)| ox + r > x && ox - r - x <= cfg.lookahead)
        .collect();
    let nearest = ahead.iter().map(|(c, _)| c[0]).fold(f64::INFINITY, f64::min);
    if !nearest.is_finite() {
        return None;
    }
    let blocks = ahead
        .iter()
        .filter(|(c, _)| c[0] <= nearest + cfg.group_depth)
        .map(|&([_, oy], r)| (oy - r, oy + r))
        .collect();
    Some((scenario.half_width_at(nearest), blocks))
}

/// Free intervals of `[-half_width, half_width]` not covered by `blocks`,
/// ordered left to right.
pub fn free_gaps(half_width: f64, blocks: &[(f64, f64)]) -> Vec<Gap> {
    let mut blocks: Vec<(f64, f64)> = blocks.to_vec();
    blocks.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut gaps = Vec::new();
    let mut cursor = -half_width;
    for (lo, hi) in blocks {
        if lo > cursor {
            gaps.push(Gap { lo: cursor, hi: lo.min(half_width) });
        }
        cursor = cursor.max(hi);
        if cursor >= half_width {
            break;
        }
    }
    if cursor < half_width {
        gaps.push(Gap { lo: cursor, hi: half_width });
    }
    gaps.retain(|g| g.width() > 0.0);
    gaps
}

const TIE_EPS: f64 = 1e-9;

/// Maps a lateral position to the corridor third that contains it.
pub fn third_of(y: f64, half_width: f64) -> Instruction {
    if y < -half_width / 3.0 {
        Instruction::Left
    } else if y > half_width / 3.0 {
        Instruction::Right
    } else {
        Instruction::Middle
    }
}

/// Widest gap; equal widths resolve towards the right.
pub fn widest_gap(gaps: &[Gap]) -> Option<Gap> {
    let mut best: Option<Gap> = None;
    for g in gaps {
        if best.is_none_or(|b| g.width() >= b.width() - TIE_EPS) {
            best = Some(*g);
        }
    }
    best
}

pub fn oracle_plan(state: &VehicleState, scenario: &Scenario, t: f64, cfg: &OracleConfig) -> Instruction {
    let Some((hw, blocks)) = nearest_group(state, scenario, t, cfg) else {
        return Instruction::Middle;
    };
    match widest_gap(&free_gaps(hw, &blocks)) {
        Some(g) => third_of(g.center(), hw),
        None => Instruction::Middle,
    }
}
