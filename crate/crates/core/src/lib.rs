//! Region mutual information (RMI) loss for semantic segmentation.
//!
//! Each pixel is represented by the `R x R` window around it, turning a
//! label map and a probability map into two clouds of `R^2`-dimensional
//! points. The loss maximizes a Gaussian lower bound on the mutual
//! information between those clouds, computed from a Schur-complement
//! conditional covariance and its Cholesky log-determinant.
//!
//! * [`tensor`]: dense arrays, Cholesky, SPD solves, `RMT1` files
//! * [`region`]: one-hot encoding, downsampling, window unfolding
//! * [`rmi`]: covariance statistics and the lower bound
//! * [`autodiff`]: the full objective, its analytic gradient, gradcheck
//! * [`oracle`]: closed-form Gaussian references and brute-force checks
//! * [`trainer`]: synthetic shapes, a small conv net, SGD, mIoU

pub mod autodiff;
pub mod error;
pub mod oracle;
pub mod region;
pub mod rmi;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
