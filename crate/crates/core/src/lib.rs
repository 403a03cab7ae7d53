//! Shallow-syntax toolkit: treebank and chunk I/O, a neural CRF chunker,
//! chunk-conditioned transformer language models and frozen-representation
//! consumers.

pub mod chunk;
pub mod checks;
pub mod chunker;
pub mod config;
pub mod corpus;
pub mod crf;
pub mod downstream;
pub mod msync;
mod error;
pub mod nn;
pub mod synth;

pub use error::{Error, Result};

pub use msync_autodiff::Scalar;

pub type Chunker32 = chunker::ChunkerModel<f32>;
pub type Chunker64 = chunker::ChunkerModel<f64>;
pub type MSynC32 = msync::MSynCModel<f32>;
pub type MSynC64 = msync::MSynCModel<f64>;
pub type Tagger32 = downstream::TaggerModel<f32>;
pub type Tagger64 = downstream::TaggerModel<f64>;
