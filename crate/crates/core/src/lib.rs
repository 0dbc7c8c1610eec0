//! Hybrid driving stack: a fast instruction-conditioned imitation policy in a
//! closed loop with a slow high-level planner, exercised in a 2D corridor
//! simulator.

pub mod checkpoint;
pub mod closed_loop;
pub mod eval;
pub mod learn;
pub mod planner;
pub mod policy;
pub mod sensor;
pub mod world;

pub use policy::Instruction;
