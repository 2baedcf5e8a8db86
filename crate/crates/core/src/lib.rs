//! Convolutional sparse coding for stereo video, and the machinery to compare
//! a sparse-coding first layer against supervised convolutional first layers
//! on a windowed vehicle-detection task.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`conv`]: dense channels-last tensors and the strided 3D
//!   correlation / transposed-correlation pair.
//! * [`lca`] and [`ista`]: sparse inference by the locally competitive
//!   algorithm, plus a dense proximal-gradient reference solver.
//! * [`dict`]: unsupervised dictionary learning.
//! * [`net`]: the layered window detector and its five first-layer variants.
//! * [`data`]: image/label ingestion, preprocessing, window ground truth and
//!   the synthetic stereo scene generator.
//! * [`eval`]: precision-recall AUC, the experiment matrix and the depth
//!   selectivity analysis.

pub mod conv;
pub mod data;
pub mod dict;
pub mod error;
pub mod eval;
pub mod ista;
pub mod lca;
pub mod net;
pub mod rng;
pub mod sten;
pub mod tensor;

pub use conv::{correlate, reconstruct, KernelStack};
pub use error::{Error, Result};
pub use lca::{lca_encode, EnergyReport, LcaConfig, LcaState};
pub use net::{NetworkParams, NetworkSpec, VariantKind};
pub use tensor::{AxisRole, Tensor};
