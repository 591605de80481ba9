//! Conditional polynomial expansions: coupled and nested recursive
//! polynomials over several input variables, with the tensor algebra,
//! autodiff and training utilities they need.

pub mod autodiff;
pub mod models;
pub mod oracle;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;
