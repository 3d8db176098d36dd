//! Fast-dropout recurrent neural networks.
//!
//! Units are treated as Gaussian random variables: every layer propagates a
//! mean and a variance instead of sampling Bernoulli dropout masks. The crate
//! provides the moment maps, the recurrent forward passes, hand-written
//! backpropagation through time, the loss/regularizer decomposition of the
//! fast-dropout gradient, an rmsprop + Nesterov optimizer with clipping and
//! spectral-radius initialization, piano-roll data handling, and a training
//! and random-search harness driven by the `fdrnn` binary.

pub mod data;
pub mod error;
pub mod gradients;
pub mod losses;
pub mod moments;
pub mod network;
pub mod optim;
pub mod real;
pub mod run;

pub use error::{Error, Result};
pub use moments::{GaussianVec, KeepProb, TransferKind, WeightDist};
pub use network::{DropoutConfig, RnnParams, SequenceBatch};
pub use real::Real;
