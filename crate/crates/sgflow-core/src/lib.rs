//! Semigeostrophic flows in dual variables.
//!
//! Potential vorticity is carried by weighted particles in dual space. At each
//! instant the convex modified pressure `P` is recovered by semidiscrete
//! optimal transport from the physical domain to the particles, the particles
//! move with the dual velocity `J[X − ∇P*(X)]`, and the Lagrangian flow in
//! physical space is rebuilt as `F_t = ∇P*_t ∘ Φ_t ∘ ∇P_0`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod error;
pub mod measure;
pub mod orlicz;
pub mod ot;
pub mod physical;
pub mod potential;
pub mod search;
pub mod shallow;
pub mod sum;
pub mod vec2;
pub mod vortex;

pub use error::{Result, SgError};
pub use measure::{DiscreteMeasure, GridField, MassRule, PhysicalDomain, QuadratureGrid, Shape};
pub use ot::{KantorovichWeights, LaguerreTessellation, SolverOptions};
pub use vec2::Vec2;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
