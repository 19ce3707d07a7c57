pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod model;
pub mod nn;
pub mod proposal;
pub mod rg_block;
pub mod roi_head;
pub mod sm_block;
pub mod tensor;
pub mod train;

pub use backbone::{FeatureExtractor, FeaturePyramid};
pub use config::Config;
pub use model::OreFsDet;
pub use error::{Error, Result};
pub use proposal::Proposal;
pub use roi_head::Detection;
pub use tensor::{RoiBox, Tensor};
