//! Closed-loop driving planner core: rule-based proposal planning, internal
//! constant-velocity scoring, driving metrics, and LLM-assisted replanning.
//!
//! The crate is `no_std` + `alloc` so the planning and scoring logic can be
//! embedded anywhere; IO, CLI, and live backends live in the companion
//! `drivebench-cli` crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod assist;
pub mod backend;
pub mod geom;
pub mod harness;
pub mod idm;
pub mod metrics;
pub mod model;
pub mod sim;

pub use geom::{normalize_angle, OrientedBox, Point2, Polyline, Pose2D};
pub use model::{AgentKind, AgentState, EgoState, Lane, Scenario, Trajectory, TrajectorySample};
