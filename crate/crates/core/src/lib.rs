//! Sample-aware test-time adaptation for image-to-image translation.

pub mod dab;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod net;
pub mod recon;
pub mod rng;
pub mod search;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use net::{FeatureTrace, TaskConfig, TaskModel, TrainReport};
pub use recon::{concat_symmetric, train_recon_suite, Member, ReconSuite, ShiftErrors};
pub use tensor::{AdamState, LrSchedule, Tape, Tensor, Var};
