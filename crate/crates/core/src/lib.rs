pub mod batch;
pub mod corrector;
pub mod error;
pub mod harness;
pub mod logconcave;
pub mod metrics;
pub mod parallel;
pub mod pool;
pub mod predictor;
pub mod reference;
pub mod rng;
pub mod schedule;
pub mod sequential;
pub mod target;

pub use batch::Batch;
pub use error::{Result, SamplerError};
pub use pool::WorkerPool;
pub use rng::RngStream;
pub use target::{ScoreSource, TargetModel};
