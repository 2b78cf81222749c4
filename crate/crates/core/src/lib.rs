//! Super-resolution of coarse network telemetry.
//!
//! The crate turns coarse monitoring measurements (per-interval max, sums,
//! periodic samples, ...) back into millisecond-level series. The pipeline is:
//!
//! 1. [`series`]: fine/coarse series types and the coarsening operators.
//! 2. [`datagen`]: a single-queue traffic simulator producing ground truth.
//! 3. [`constraints`]: declarative measurement and operational constraints.
//! 4. [`model`]: a small transformer encoder plus the MSE/EMD losses.
//! 5. [`kal`]: augmented-Lagrangian training over the constraint set.
//! 6. [`refine`]: consolidation of colliding training targets.
//! 7. [`cem`]: exact minimal repair of model outputs with a MILP solver.
//! 8. [`eval`]: metrics, burst analysis and baselines.
//! 9. [`pipeline`]: the file-based commands tying the steps together.

pub mod cem;
pub mod constraints;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod io;
pub mod kal;
pub mod manifest;
pub mod model;
pub mod pipeline;
pub mod refine;
pub mod series;

pub use error::{Error, Result};
