//! Online adaptation of a light grid detector by distilling from a heavy
//! oracle on selected key frames.

pub mod detection;
pub mod distill;
pub mod error;
pub mod eval;
pub mod models;
pub mod pipeline;
pub mod selector;
pub mod sim;

pub use detection::{BoundingBox, CellMask, Detection, DetectionTensor, GridShape};
pub use error::{Error, Result};
