//! Multi-robot navigation stack with edge-offloaded trajectory optimization.
//!
//! The stack has four layers:
//! - a conservative onboard tracking planner with a braking rule
//!   ([`local_planner`]),
//! - an aggressive trajectory optimizer that enforces polytope clearance
//!   constraints through their dual certificates and a penalty-dual
//!   outer loop ([`pdd`]),
//! - a decision engine that selects which robots offload planning to a
//!   shared edge server under communication and compute budgets
//!   ([`decision`]),
//! - a deterministic discrete-time simulator that injects communication
//!   latency and serializes edge compute ([`sim`]).
//!
//! [`geometry`], [`dynamics`], and [`convex`] provide the shared
//! substrate: exact polygon distance oracles, Ackermann kinematics and
//! linearization, and small convex subsolvers.

pub mod convex;
pub mod dynamics;
pub mod geometry;
pub mod local_planner;
pub mod decision;
pub mod pdd;
pub mod scenario;
pub mod sim;
pub mod trace;

pub use dynamics::{ControlBounds, ControlInput, LinearizedDynamics};
pub use geometry::{ConvexPolytope, ObstacleState, PlanarState};
pub use local_planner::{LocalPlan, Path};
pub use decision::{ComputeModel, DecisionOutcome, PruneReason, RadioMap};
pub use pdd::{PddConfig, PddPlan, PddStatus, PddWorkspace};
pub use scenario::{load_scenario, save_scenario, Scenario};
pub use sim::{run_episode, EpisodeMetrics, SimOptions, Simulation};
