//! Rigid-body dynamics for planar link trees with holonomic constraints.
//!
//! The human-prosthesis model is a 12-DOF planar tree: a floating torso with
//! a full left leg and a right thigh on the human side, and a separately
//! floating prosthesis (thigh, shin, foot) tied to the right thigh by a
//! 3-DOF rigid-interface constraint whose reaction is the socket wrench.
//! Walking alternates between two domains, each holding the stance sole and
//! the socket interface with six constraint rows in total; steps end at
//! swing-sole touchdown, which triggers a plastic impact.
//!
//! Submodules:
//! - [`model`]: link-tree description, the default subject model, file io;
//! - [`kinematics`]: world poses, point Jacobians, and their exact
//!   time/configuration derivatives;
//! - [`lagrangian`]: mass matrix, Christoffel-symbol Coriolis matrix,
//!   gravity vector, energies;
//! - [`constrained`]: constraint rows, KKT accelerations and reaction
//!   wrenches, plastic impacts, static equilibrium;
//! - [`integrate`]: adaptive Runge-Kutta integration with guard detection
//!   and constraint stabilization;
//! - [`prosthesis`]: the 2-DOF prosthesis-only subsystem driven by the
//!   socket wrench;
//! - [`reconstruct`]: configurations and velocities from joint angles and a
//!   stance-foot pose.

pub mod constrained;
pub mod integrate;
pub mod kinematics;
pub mod lagrangian;
pub mod model;
pub mod prosthesis;
pub mod reconstruct;

pub use constrained::{
    constrained_dynamics, impact_map, socket_wrench_from_inputs, static_equilibrium, ConstraintRow,
    DomainSpec,
};
pub use integrate::{simulate_domain, ControlMode, DomainOutcome, OdeOptions, StopReason};
pub use kinematics::Kin;
pub use lagrangian::{
    bias_forces, coriolis_matrix, gravity_vector, kinetic_energy, mass_matrix, mass_matrix_partials,
    potential_energy,
};
pub use model::{Anatomy, Body, Domain, HybridState, Joint, MarkerPlacement, RobotModel};
pub use prosthesis::{
    prosthesis_affine, prosthesis_dynamics, ProsthesisAffine, ProsthesisModel, ProsthesisState,
};
pub use reconstruct::{joint_angles_of, state_from_joints, velocity_from_joint_rates};
