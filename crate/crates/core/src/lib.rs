//! Constrained controllability of coupled linear reaction-diffusion systems
//!
//! ```text
//! ∂t Y − D ΔY = A Y + B U 1_ω   on (0,1), Neumann boundary conditions
//! ```
//!
//! in a truncated cosine basis: structural checks, exponential-integrator
//! propagation, minimal-norm (Gramian) steering, staircase constructions that
//! keep the state above a floor, and a minimal-time probe.

pub mod control;
pub mod error;
pub mod evolution;
pub mod hum;
pub mod linalg;
pub mod minimal_time;
pub mod qp;
pub mod spectral;
pub mod staircase;
pub mod system;

pub use control::{ControlSchedule, ControlSignal, Envelope};
pub use error::{Error, Result};
pub use evolution::{ConstraintReport, Evolver, TrajectoryRecord};
pub use spectral::{NeumannBasis, SpectralState};
pub use system::{Interval, StructureReport, SystemSpec};
