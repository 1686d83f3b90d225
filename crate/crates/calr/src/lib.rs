//! Boundary-integral laboratory for cloaking due to anomalous localized
//! resonance (CALR) in 2D core-shell structures.
//!
//! The crate assembles Nyström discretizations of the Neumann–Poincaré block
//! operators on a pair of nested smooth curves, symmetrizes the block system
//! through the Calderón identity, solves the lossy dielectric transmission
//! problem across a loss sweep, and classifies sources as CALR / weak CALR /
//! no CALR. Concentric disks admit closed-form mode solutions which serve as
//! an independent oracle for the dense solver.

pub mod annulus;
pub mod app;
pub mod geometry;
pub mod linalg;
pub mod npsystem;
pub mod potentials;
pub mod sources;

pub use num_complex::Complex64;
