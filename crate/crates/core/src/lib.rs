//! Joint retinal-vessel segmentation and super-resolution from
//! low-resolution inputs.
//!
//! A shared U-Net encoder feeds a segmentation decoder and an auxiliary
//! super-resolution decoder; a feature interaction module couples the two
//! outputs at high resolution during training. At test time only the
//! segmentation path runs.
//!
//! ```no_run
//! use supervessel::data::{generate_synthetic, Dataset, SyntheticConfig};
//! use supervessel::engine::{train, evaluate_model, TrainConfig};
//! use supervessel::model::{build_model, ModelConfig};
//!
//! let samples = generate_synthetic(&SyntheticConfig::default())?;
//! let data = Dataset::from_samples("synthetic", samples, 6);
//! let model_cfg = ModelConfig { encoder_widths: vec![16, 32, 64], fim_dim: 12, ..Default::default() };
//! let train_cfg = TrainConfig { epochs: 20, ..Default::default() };
//! let outcome = train(build_model(&model_cfg, 0)?, &data, &train_cfg)?;
//! println!("{}", evaluate_model(&outcome.best, &data.test)?.to_csv());
//! # Ok::<(), supervessel::Error>(())
//! ```

pub mod checkpoint;
pub mod data;
pub mod engine;
mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod overlay;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{build_model, ModelConfig, ModelHandle, Phase, SuperVesselOutputs};
pub use tensor::FeatureMap;
