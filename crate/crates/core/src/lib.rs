//! Attribute-conditioned face aging with a wavelet-packet discriminator.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`conv`], [`optim`]: dense tensors,
//!   reverse-mode differentiation over a per-iteration tape, and Adam;
//! - [`wavelet`]: the 2D wavelet packet transform, both standalone and as
//!   frozen convolution kernels;
//! - [`networks`]: the hourglass generator and multi-pathway
//!   discriminator, with switches for attribute embedding and the
//!   wavelet front end;
//! - [`objectives`]: the least-squares adversarial losses, pixel and
//!   identity critics, and critic-weight auto-scaling;
//! - [`dataset`]: manifest ingestion, age binning, the unpaired pairing
//!   policy, and the synthetic desk-scale dataset;
//! - [`trainer`]: the alternating optimization loop with checkpointing
//!   and bitwise-reproducible resume;
//! - [`eval`]: texture-age statistics, attribute/identity preservation,
//!   and the four-cell ablation grid;
//! - [`gradcheck`]: the finite-difference oracle for every op and loss.

pub mod attributes;
pub mod autodiff;
pub mod checkpoint;
pub mod conv;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod imageio;
pub mod kvconfig;
pub mod networks;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod wavelet;

pub use attributes::{AttributeSchema, AttributeVector};
pub use autodiff::{Graph, Var};
pub use dataset::{AgeGroup, BatchStream, Dataset, PairingPolicy, SyntheticAgingSpec, TrainingSample};
pub use error::{CoreError, Result};
pub use networks::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
pub use objectives::{FrozenEncoder, IdentityEncoder, LossWeights};
pub use optim::AdamState;
pub use params::ParamSet;
pub use tensor::{Scalar, Tensor};
pub use wavelet::{CoefficientPacket, WaveletFamily, WaveletFilterPair};
