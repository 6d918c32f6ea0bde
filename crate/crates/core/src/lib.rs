//! Cross-view completion pretraining and dense correspondence extraction
//! from an encoder-decoder's cross-attention.

pub mod checkpoint;
pub mod config;
pub mod costvol;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod flow;
pub mod flowhead;
pub mod image;
pub mod model;
pub mod ops;
pub mod optim;
pub mod pretrain;

pub use error::{Error, Result};
pub use flow::FlowField;
pub use image::Image;
pub use model::{AttentionRecord, ModelConfig, ModelParams, ParamStore, TokenGrid};
