//! Self-attentional semantic role tagger: a compact tensor/autograd engine,
//! a deep attentional encoder over (word, predicate-mask) inputs, training
//! with Adadelta and label smoothing, BIO decoding, and span-level metrics.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod decode;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod graph;
pub mod real;
pub mod runconfig;
pub mod sublayers;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
