//! Region-to-text object understanding at desk scale.

pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod extractor;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod render;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use extractor::BBox;
pub use tensor::{Tape, Tensor, Var};
pub use tokenizer::Vocabulary;
