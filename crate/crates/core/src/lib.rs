pub mod ablation;
pub mod checks;
pub mod config;
pub mod datasets;
pub mod error;
pub mod figures;
pub mod metrics;
pub mod models;
pub mod objectives;
pub mod oracles;
pub mod run;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use difflab_autodiff as autodiff;
pub use error::{LabError, Result};
