//! Exact linearization of minimally underactuated Lagrangian systems by
//! quasi-static flatness-based feedback.
//!
//! The pipeline: build equations of motion from a Lagrangian
//! ([`mechanics`]), promote configuration variables to inputs, attach a flat
//! parameterization and certify it against the dynamics ([`flatness`]),
//! enumerate the integrator-chain lengths reachable by equilibrium-regular
//! quasi-static feedback, synthesize the feedback law ([`feedback`]) and
//! verify the closed loop by simulation ([`sim`]). The [`cli`] module wires
//! everything to a config-file surface.

pub mod config;
pub mod expr;
pub mod feedback;
pub mod flatness;
pub mod jets;
pub mod mechanics;
pub mod numeric;
pub mod scenario;
pub mod sim;
pub mod symmat;

pub use expr::{parse as parse_expr, Expr, ExprError, VarBinding};
pub use jets::{JetPoint, MultiIndex};
pub use mechanics::{euler_lagrange, find_equilibrium, promote, LagrangianSystem};
