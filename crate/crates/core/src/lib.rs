//! Cooperative trajectory planning for human-machine shared control.
//!
//! A human agent and an automation agent each form a trajectory desire.
//! The desires are fused by one of several arbitration policies (including
//! an agreement process in which neither agent can outvote the other) and
//! the result is executed on a shared double-integrator plant, where the
//! action-level control conflict between the two agents is measured.
//!
//! Module map:
//!
//! * [`trajectory`]: sampled trajectories, quintic generation, metrics.
//! * [`planner`]: automation-side quadratic-cost planning.
//! * [`human`]: simulated human desires, online desire estimation, deformations.
//! * [`arbitration`]: the five fusion policies and the safety checker.
//! * [`agreement`]: iterative best response and monotone-concession negotiation.
//! * [`sim`]: coupled-plant execution and conflict reporting.
//! * [`scenario`]: scenario files, the batch runner and packaged demos.
//! * [`session`]: the live negotiation protocol state machine.

pub mod agreement;
pub mod arbitration;
pub mod error;
pub mod human;
pub mod planner;
pub mod scenario;
pub mod session;
pub mod sim;
pub mod trajectory;

pub use error::{Error, Result};
pub use trajectory::{BoundaryState, Sample, Trajectory, Vec2};
