//! Generating speech by optimizing the inputs of a convolutional CTC acoustic
//! model against activation and Gram-tensor statistics.

pub mod autodiff;
pub mod cli;
pub mod ctc;
pub mod error;
pub mod frontend;
pub mod losses;
pub mod net;
pub mod optim;
pub mod phase;
pub mod speaker;
pub mod synth;

pub use autodiff::{Graph, NodeId, Precision, Tensor};
pub use error::{Error, Result};
