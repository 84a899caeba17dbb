//! Person re-identification with an interleaved-class-token bidirectional
//! Mamba backbone, a multi-granularity branch head and ranking-aware triplet
//! regularization.

pub mod autograd;
pub mod error;
pub mod harness;
pub mod layout;
pub mod losses;
pub mod metrics;
pub mod mgfe;
pub mod model;
pub mod nn;
pub mod params;
pub mod ssm;

pub use error::{Error, Result};
pub use nn::Mode;
