//! Numerical laboratory for dyadic Calderón–Zygmund theory.
//!
//! Everything lives on a finite dyadic model of `[0,1)^d` at depth `N`:
//! step functions, A2 weights with exact pointwise duals, Haar shift
//! operators of complexity `(m, n)`, weighted martingale differences, and
//! the stopping-time (corona) decomposition of the weighted bilinear form
//! `<S(fσ), g>_w`. The [`verify`] module turns the weighted norm
//! inequalities into measurements.

pub mod corona;
pub mod error;
pub mod grid;
pub mod linalg;
pub mod martingale;
pub mod shift;
pub mod verify;
pub mod weights;

pub use error::{LabError, Result};
pub use grid::{average, inner_product, maximal_function, norm, CubeId, FiniteModel, Measure, StepFunction};
