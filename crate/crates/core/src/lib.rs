//! Continuous matrix product states (cMPS) of a one-dimensional bosonic
//! field, described through the dissipative dynamics of their
//! zero-dimensional boundary system.
//!
//! A state is fixed by two `D x D` matrices: a Hermitian `K` and an
//! arbitrary `R`. Bulk expectation values follow from propagating the
//! vectorized boundary density matrix with the Liouvillian
//! `L = -iK⊗1 + i1⊗Kᵀ - ½(R†R⊗1 - 2R⊗R̄ + 1⊗RᵀR̄)` and inserting fixed
//! superoperators at the positions of the field operators.
//!
//! Two independent routes cross-check the insertion calculus:
//!
//! * [`discretizer`]: the finite-step sequential preparation circuit, a
//!   lattice MPS whose transfer matrix tends to `1 + εL`.
//! * [`trajectories`]: quantum-jump unravelings of the boundary dynamics,
//!   whose jump statistics reproduce the bulk densities and pair
//!   correlations.

pub mod correlators;
pub mod discretizer;
pub mod error;
pub mod general_lindblad;
pub mod linalg;
pub mod liouvillian;
pub mod params;
pub mod trajectories;

pub use correlators::{
    CorrelatorResult, DecayFit, Evaluator, Insertion, InsertionKind, SourceField, SourceSlot,
};
pub use error::{CmpsError, Result};
pub use general_lindblad::{FieldMoments, FormComparison, JumpSet};
pub use linalg::{CMatrix, CVector};
pub use liouvillian::{SpectralData, Superoperator};
pub use params::{CmpsParams, GeneratorQ, Geometry, Tolerances};
pub use trajectories::{JumpRecord, TrajectoryStats};

pub use num_complex::Complex64;
