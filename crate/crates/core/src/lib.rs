//! Discrete-time simulator for collaborative service offloading across edge
//! servers, driven by a quadratic-Lyapunov drift-plus-penalty scheduler.
//!
//! A run advances in logical slots. Each slot follows the same pipeline:
//!
//! ```text
//! workload ──▶ policy (greedy matching) ──▶ cost ──▶ queueing ──▶ lyapunov ──▶ metrics
//!    ▲                                                   │
//!    └──────────────── deferred demand ◀─────────────────┘
//! ```
//!
//! * [`domain`] holds the typed configuration and its validation.
//! * [`topology`] places small base stations and users with a Poisson point process.
//! * [`workload`] produces time-varying request probabilities and per-slot demand.
//! * [`queueing`] applies the per-server, per-service backlog update law.
//! * [`cost`] evaluates the energy and delay terms of the slot cost.
//! * [`lyapunov`] computes the Lyapunov value, drift, bounds and candidate costs.
//! * [`policies`] contains the greedy matcher, the exhaustive oracle and baselines.
//! * [`engine`] runs the slot loop, enforces constraints and orchestrates sweeps.
//! * [`cli`] is the command-line front end used by the `offload-sim` binary.

pub mod cli;
pub mod cost;
pub mod domain;
pub mod engine;
pub mod lyapunov;
pub mod policies;
pub mod presets;
pub mod queueing;
pub mod topology;
pub mod workload;

pub use domain::{Bits, SystemConfig, ValidationReport};
pub use engine::{run, RunRecord, SlotMetrics};
pub use policies::{OffloadDecision, Policy};
