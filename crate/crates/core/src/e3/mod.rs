//! Expert embedders, the replay buffer, and the fusion network.

pub mod buffer;
pub mod ekfn;
pub mod expert;

pub use buffer::{quota, MemoryBuffer};
pub use ekfn::{build_ekfn, train_fusion, EkfnArch, EkfnTrainConfig, FusionNetwork, FusionVariant};
pub use expert::{e3_predict, train_ekfn, train_expert, train_expert_detector, ExpertEnsemble};
