//! Locally specialized CNNs for face anti-spoofing.
//!
//! Nine small PatchNets are trained on the fixed 3×3 grid of facial regions,
//! their convolutional weights are composed block-diagonally into one large
//! network, and the large network is fine-tuned on whole faces. The crate
//! also carries the evaluation protocol (ROC, EER, HTER, per-video votes)
//! and a deterministic synthetic face/attack generator.

pub mod arch;
pub mod augment;
pub mod checkpoint;
pub mod compose;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Rng, Scalar, Tensor};
