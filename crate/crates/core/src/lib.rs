//! Extractive reader for list-form answers.
//!
//! The model encodes a packed `[CLS] question [SEP] passage` sequence with a
//! small transformer, pools sentence vectors with self-attention, then runs a
//! stack of interaction layers that alternate question/passage alignment with a
//! graph convolution over a sentence/word graph. Two heads tag passage tokens
//! with BIO labels and score whole sentences; both are trained jointly.
//!
//! All numeric code is generic over [`Scalar`]; the `*64` / `*32` aliases below
//! name the concrete instantiations.

pub mod config;
pub mod encoder;
pub mod error;
pub mod extractor;
pub mod interaction;
pub mod layers;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod text;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ListReader64 = model::ListReader<f64>;
pub type ListReader32 = model::ListReader<f32>;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type ParamStore64 = tensor::ParamStore<f64>;
