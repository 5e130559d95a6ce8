//! Learned Kalman-gain networks, their input features, and two end-to-end
//! recurrent baselines.

pub mod checkpoint;
mod features;
mod filter;
mod layers;
mod nets;
mod params;

pub use features::{compute_features, FeatureMask, FeatureScaling, FeatureVector, Features, KNetState};
pub use filter::LearnedFilter;
pub use layers::{Gru, Linear, GRU_CONVENTION};
pub use nets::{
    flatten_gain, learned_gain_step, unflatten_gain, Architecture, GainNetConfig, Network, NetworkSpec, Rollout, StepOutput,
};
pub use params::{Bound, ParamId, ParamSet};
