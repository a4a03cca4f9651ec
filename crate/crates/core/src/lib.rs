//! Gradient-free saliency for convolutional classifiers.
//!
//! The last convolutional feature map is treated as a cooperative game whose
//! players are spatial positions; a coalition's worth is the target-class
//! probability when every other position is replaced by its channel mean.
//! Shapley values of that game, exact or sampled from permutations, form
//! the saliency map. [`eval`] holds the faithfulness and localization
//! metrics, [`baselines`] the comparison methods.

pub mod baselines;
pub mod error;
pub mod eval;
pub mod imageio;
pub mod model;
pub mod protocol;
pub mod shapley;
pub mod tensor;
pub mod toynet;
pub mod worth;

pub use error::{Error, Result};
pub use eval::{BBox, Curve, EvalRecord, Metric, Report};
pub use model::{load_model, ModelSpec, NetworkSplit, WeightBundle};
pub use protocol::ExternalOracle;
pub use shapley::{
    exact_shapley, sample_shapley, shap_cam, Method, SaliencyMap, SamplerConfig, ShapCamConfig, ShapleyEstimate,
};
pub use tensor::Tensor;
pub use worth::{BaselineMode, CoalitionGame, Game, NetworkOracle, ScoreOracle, TailOracle};
