//! Numerical laboratory for the hyperboloidal Cauchy problem of semilinear
//! waves and wave maps on compactified Minkowski space.

pub mod geometry;
pub mod grid;
pub mod spaces;
pub mod odekit;
pub mod evolution;
pub mod diagnostics;
