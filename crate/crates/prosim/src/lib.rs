//! Planar human-prosthesis gait toolkit.
//!
//! The crate covers the full workflow for a 12-DOF sagittal-plane model of a
//! human walking on a powered transfemoral prosthesis:
//!
//! 1. synthesize or ingest marker data ([`synth`], [`mocap`]);
//! 2. reconstruct joint trajectories, segment steps, and fit phase-indexed
//!    Bezier outputs ([`mocap`], [`bezier`], [`gait`]);
//! 3. optimize the fitted outputs into an impact-invariant walking gait
//!    ([`gait`]);
//! 4. play recorded steps back through the model to recover the socket
//!    interaction wrench and bound it with a force tube ([`force`]);
//! 5. run the prosthesis-side robust control-Lyapunov controller against the
//!    tube and compare it with simpler trackers ([`control`]).
//!
//! The supporting numerics live in [`dynamics`] (constrained Euler-Lagrange
//! dynamics, impacts, event-driven integration) and [`qp`] (a dense
//! active-set quadratic-program solver, also used for the tube linear
//! programs).
//!
//! # Examples
//!
//! Each major capability has a runnable example:
//!
//! ```text
//! cargo run --release --example bezier_fit        # curve algebra and fitting
//! cargo run --release --example walk_simulation   # hybrid walking simulation
//! cargo run --release --example marker_pipeline   # markers -> joints -> steps
//! cargo run --release --example gait_from_mocap   # fit + optimize a gait
//! cargo run --release --example force_tube        # playback + force tube
//! cargo run --release --example robust_controller # robust CLF-QP vs PD
//! ```
//!
//! The `prosim` binary chains the same stages behind subcommands
//! (`synth`, `process`, `fit`, `optimize`, `playback`, `tube`, `simulate`,
//! `compare`); see the README for the file formats it reads and writes.

pub mod bezier;
pub mod control;
pub mod dynamics;
pub mod error;
pub mod force;
pub mod gait;
pub mod mocap;
pub mod pipeline;
pub mod qp;
pub mod synth;

pub use error::{Error, Result};
