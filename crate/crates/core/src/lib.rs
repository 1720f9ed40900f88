//! Audio-visual matchmap networks.
//!
//! Two convolutional encoders map an image to a spatial feature grid and a
//! spoken caption to a temporal feature sequence. Their matchmap (every image
//! cell dotted with every audio frame) drives a margin ranking objective and
//! all downstream analyses: retrieval, speech-prompted localization, joint
//! audio-visual clustering and concept-dictionary scoring.

pub mod alignment;
pub mod audio;
pub mod concepts;
pub mod checkpoint;
pub mod data;
pub mod discovery;
pub mod error;
pub mod eval;
pub mod graph;
pub mod image;
pub mod kernels;
pub mod mmtf;
pub mod model;
pub mod optim;
pub mod par;
pub mod post;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{BnStats, Gradients, Graph, NodeId};
pub use par::Exec;
pub use tensor::{DType, LabelTensor, Scalar, Tensor};
