//! Federated estimation of low-rank plus sparse vector autoregressions
//! with differentially private gradient sharing.
//!
//! Every client `k` observes a VAR(p) series whose stacked coefficient
//! matrix splits as `A_k = A0 + Delta_k`: a shared low-rank part and a
//! client-specific weakly sparse deviation. The crate provides the
//! single-client ADMM estimator, the two-stage federated procedure, the
//! Gaussian mechanism, rank selection, cross-validation and forecast
//! metrics. All numerical code is generic over [`Real`]; the `*64`
//! aliases fix the scalar to `f64`.

pub mod dp;
pub mod error;
pub mod federated;
pub mod matops;
pub mod metrics;
pub mod rank_select;
pub mod rng;
pub mod scalar;
pub mod single_client;
pub mod tuning;
pub mod var;

pub use error::{Error, Result};
pub use matops::Mat;
pub use rng::SeedTree;
pub use scalar::Real;

pub type Mat64 = Mat<f64>;
pub type Panel64 = var::TimeSeriesPanel<f64>;
pub type Design64 = var::LagDesign<f64>;
pub type Decomposition64 = var::CoefDecomposition<f64>;
pub type FedConfig64 = federated::FedConfig<f64>;
pub type AdmmConfig64 = single_client::AdmmConfig<f64>;

pub type Mat32 = Mat<f32>;
pub type Panel32 = var::TimeSeriesPanel<f32>;
