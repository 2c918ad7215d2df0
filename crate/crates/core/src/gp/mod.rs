//! Kernels, dense linear algebra, Gaussian sampling and KL, and the exact-GP baseline.

pub mod exact;
pub mod kernel;
pub mod kl;
pub mod linalg;
pub mod mvn;

pub use exact::{exact_gp_fit, exact_gp_predict, ExactGpModel};
pub use kernel::{kernel_matrix, KernelGrad, KernelParams, KernelVariant, Point};
pub use kl::gaussian_kl;
pub use linalg::{cholesky, pivoted_cholesky, CholFactor, PivotedFactor, DEFAULT_JITTER};
pub use mvn::mvn_sample;
