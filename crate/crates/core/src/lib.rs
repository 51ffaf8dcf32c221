//! Hybrid convolution/transformer image classifier that fuses subject
//! metadata (age, sex) through class and meta tokens, together with the
//! autodiff engine, synthetic data generator and evaluation tools it needs.

pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod params;
pub mod run_config;
pub mod saliency;
pub mod tensor;
pub mod train;

pub use backbone::{build_model, param_count, MetaInput, Model};
pub use config::{FusionMode, ModelConfig};
pub use fusion::{MetaMask, MetaRecord, Sex};
pub use autodiff::{Gradients, Padding, Tape, Var};
pub use error::{Error, Result};
pub use params::ParamStore;
pub use run_config::RunConfig;
pub use tensor::Tensor;
