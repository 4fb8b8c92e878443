//! Simulator for federated gradient descent over a bandwidth-limited fading
//! multiple-access channel.
//!
//! A fleet of `M` devices holds local data shards and computes full-batch
//! gradients of a shared softmax-regression model. Each training iteration the
//! gradients must cross a noisy fading uplink with `s` parallel subchannels
//! before the parameter server can update the model. The crate implements the
//! transport schemes under study:
//!
//! - **error_free** — ideal baseline, the server receives the exact gradient
//!   average;
//! - **d_dsgd / d_qsgd / d_signsgd** — digital transport: one opportunistically
//!   scheduled device quantizes its gradient to the bit budget given by a
//!   waterfilling capacity bound (sparse binary compression, QSGD or SignSGD);
//! - **od_dsgd** — orthogonal digital transport: every device gets a disjoint
//!   subchannel slice;
//! - **esa_dsgd / ecesa_dsgd** — analog over-the-air transport: devices invert
//!   their channels above a gain threshold and the superposition of all
//!   transmissions is scaled back into a gradient estimate, without or with
//!   per-entry error accumulation;
//! - **ca_dsgd** — compressed analog transport: top-k sparsified,
//!   error-compensated gradients are pushed through a shared random projection
//!   and recovered at the server with approximate message passing.
//!
//! The [`runner`] module drives whole experiments and writes CSV metric
//! traces; `selftest` hosts the independent numeric oracles used by the
//! `fedair selftest` subcommand.

pub mod channel;
pub mod compress;
pub mod data;
pub mod learner;
pub mod power;
pub mod project;
pub mod runner;
pub mod schemes;
pub mod selftest;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Errors surfaced by the simulator library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty batch")]
    EmptyBatch,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("bad IDX magic: expected {expected}, found {found}")]
    BadMagic { expected: u32, found: u32 },
    #[error("IDX count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("truncated IDX file: {0}")]
    Truncated(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Derives a child seed from a master seed and a stream label.
///
/// Every consumer of randomness in a run (per-device channel gains, CSI
/// noise, receiver noise, data partition, codec dithering, projection
/// matrix) owns a stream derived from a fixed label, so adding or removing
/// one consumer never perturbs the draws seen by the others.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    // FNV-1a over the label, then mix in the master seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in label.as_bytes() {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ master.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// A deterministic random stream for the given master seed and label.
pub fn seeded_stream(master: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label))
}
