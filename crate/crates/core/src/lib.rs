//! Multiway principal components of tensor-valued observations under a
//! spiked covariance model, with debiased estimates and Gaussian inference
//! for linear forms of the components.

pub mod analyze;
pub mod covariance;
pub mod debias;
pub mod error;
pub mod estimator;
pub mod inference;
pub mod io;
pub mod linalg;
#[cfg(any(test, feature = "oracle"))]
pub mod oracle;
pub mod rng;
pub mod scalar;
pub mod simulate;
pub mod spiked;
pub mod tensor;

pub use covariance::{estimate_variances, CovarianceView, VarianceEstimates};
pub use error::{MpcaError, Result};
pub use estimator::{fit_mpca, match_permutation, rank_one_als, AlsConfig, AlsFit, InitMode, MatchResult, MpcaFit};
pub use scalar::Scalar;
pub use spiked::{make_components, ComponentsMode, ModelConfig, NoiseDistribution, SampleSet, SpikedModel};
pub use tensor::{RankOnePC, Tensor, UnitVector};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type UnitVector64 = UnitVector<f64>;
pub type RankOnePC64 = RankOnePC<f64>;
pub type SampleSet64 = SampleSet<f64>;
pub type SpikedModel64 = SpikedModel<f64>;
