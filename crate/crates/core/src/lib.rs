//! Image-based phenotypic profiling.
//!
//! The crate covers the whole path from multi-channel cell images to
//! evaluated treatment profiles:
//!
//! * [`tensor`]: dense tensors with reverse-mode autodiff and a finite-difference checker
//! * [`model`]: difference-convolution gradient encoder, transformer block, projection and classifier head
//! * [`objectives`]: classification, regression and contrastive losses and their weighted sum
//! * [`train`]: stepwise training with a staged learning-rate table and checkpoints
//! * [`profiles`]: site/well/treatment tables, aggregation, control-mean correction and sphering
//! * [`eval`]: cosine retrieval, folds of enrichment, MAP, recall@K and IMAD
//! * [`dataio`]: index/image ingestion, label encoding, regression targets and a synthetic generator
//! * [`pipeline`]: training on a dataset directory and embedding its sites

pub mod dataio;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod profiles;
pub mod tensor;
pub mod train;
pub mod util;

pub use error::{Error, Result};
