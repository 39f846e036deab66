//! Low-rank tensor-on-vector regression with partially observed, sparse and
//! temporally fused CP coefficients.

pub mod benchmark;
pub mod constraints;
pub mod error;
pub mod init;
pub mod io;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sim;
pub mod solver;
pub mod tensor;
pub mod tuning;

pub use error::{Error, Result};
pub use init::{InitConfig, InitStrategy};
pub use model::{masked_loss, CpModel, RegressionDataset};
pub use sim::{GroundTruth, SimSpec};
pub use solver::{fit, FitReport, SolverConfig};
pub use tensor::{DenseTensor, ObservationMask};
