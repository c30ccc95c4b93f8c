pub mod decoder;
pub mod deformer;
pub mod error;
pub mod features;
pub mod losses;
pub mod mesh;
pub mod metrics;
pub mod pipeline;
pub mod spatial;
pub mod synth;
pub mod tensor;
pub mod vol2pc;
pub mod volume;

pub use error::{Error, Result};
