//! Unscented Kalman inversion over Gaussian random fields with an adaptively
//! refined operator-network surrogate.

pub mod grf;
pub mod linalg;
pub mod observe;
pub mod pde;
pub mod uki;
pub mod linear_theory;
pub mod deeponet;
pub mod adaptive;
pub mod experiment;
