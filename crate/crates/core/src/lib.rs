pub mod ablation;
pub mod attention;
pub mod bench;
pub mod csm;
pub mod error;
pub mod gradreport;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod numerics;
pub mod projector;
pub mod pyramid;

pub use error::{FormatError, HsqError, Result};
pub use model::{HsqModel, ModelConfig, Preset};
pub use numerics::{Backend, Eval, Matrix, Module, Param, Tape};
pub use pyramid::FeaturePyramid;
