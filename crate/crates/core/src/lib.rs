//! Dilated fully-convolutional networks for dense texture segmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `C×H×W` storage, label maps, and the `TSR1` file format.
//! - [`ops`]: forward/backward kernels (dilated convolution, instance norm,
//!   the norm-skip block, ReLU, dropout, concatenation, softmax).
//! - [`model`]: network configuration, construction, forward/backward,
//!   checkpoints, and receptive-field / sampling analysis.
//! - [`loss`]: the semi-supervised weighted loss, class weights, confusion
//!   matrices and balanced accuracy.
//! - [`data`]: sample records, lung cropping, dihedral augmentation, the
//!   hill-climbing fold splitter and the synthetic mosaic generator.
//! - [`train`]: Adam, early stopping, epochs, folds and cross-validation.
//! - [`gradcheck`]: the finite-difference suite.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod ops;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use loss::{ClassWeights, EvalReport, LossConfig};
pub use model::{Mode, Network, NetworkConfig};
pub use tensor::{LabelMap, Mask, Scalar, Tensor, UNLABELED};
