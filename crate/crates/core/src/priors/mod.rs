//! Count distributions and flow start distributions.

pub mod learned;
pub mod start;
pub mod zinb;

pub use learned::{pretrain_prior, PretrainReport, PriorConfig, PriorNet};
pub use start::{sample_start, spatial_empirical_sample, PriorKind, SpatialEmpiricalConfig, StartPrior};
pub use zinb::{FixedZinbConfig, ZinbGrad, ZinbParams};
