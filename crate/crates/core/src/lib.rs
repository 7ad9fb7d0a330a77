//! Sparse domination of dyadic shifts on finite dyadic grids.
//!
//! The crate works on the standard dyadic lattice of `[0,1)^d` (`d = 1, 2`) down to a
//! fixed finest level and provides:
//!
//! * [`dyadic`]: cubes, piecewise-constant grid functions, exact averages and pyramids;
//! * [`shift`]: dyadic shift kernels, bilinear forms, A2 normalization and norm oracles;
//! * [`sparse`]: stopping cubes, sparse collections, sparse forms;
//! * [`czd`]: Calderón–Zygmund decompositions and main-iteration checkers;
//! * [`convex`]: zonotope body averages, John ellipsoids, Minkowski products;
//! * [`weights`]: matrix A2 weights and weighted operator norms;
//! * [`harness`]: seeded campaigns and report generation.

pub mod dyadic;
pub mod error;
pub mod format;
pub mod linalg;
pub mod numeric;
pub mod shift;
pub mod sparse;
pub mod convex;
pub mod czd;
pub mod weights;
pub mod harness;

pub use dyadic::{DyadicCube, GridFunction, Norms, Pyramid};
pub use error::{Error, Result};
