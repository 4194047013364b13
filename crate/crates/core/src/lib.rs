//! Multispectral (visible + thermal) pedestrian detection: dual-branch
//! feature extraction, gated cross-modality fusion, illumination feature
//! decoupling with contrastive alignment, and a dense anchor head — all on a
//! small from-scratch f32 tape engine with finite-difference verification.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod contrastive;
pub mod error;
pub mod extractor;
pub mod head;
pub mod irfdm;
pub mod model;
pub mod metrics;
pub mod msfpm;
pub mod params;
pub mod train;
pub mod tensor;

pub use config::{Config, FusionMode, TripletSource};
pub use data::{GtBox, Sample};
pub use error::{Error, Result};
pub use params::{Init, ParamId, ParamStore};
pub use tensor::{NodeId, Tape, Tensor};
