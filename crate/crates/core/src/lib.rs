//! Multi-task adversarial feature separation for facial action unit
//! detection, on a deterministic f64 scalar compute core.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nets;
pub mod gradsuite;
pub mod runcfg;
pub mod train;

pub use error::{Error, Result};
