//! Second-order optimization lab: Kronecker-factored curvature with
//! exponential averaging, KL-wake-regularized step engines, and brute-force
//! dense oracles that check every closed form the step engines rely on.

pub mod curvature;
pub mod data;
pub mod error;
pub mod network;
pub mod oracle;
pub mod qe;
pub mod steps;
pub mod tensor;

pub use error::{Error, Result};
