//! Spectral-efficiency-aware codebook design for digital task-oriented
//! semantic communication.
//!
//! An encoder maps inputs to `Q` latent vectors, each quantized to one of `K`
//! codewords. Codeword indices ride one `K`-QAM symbol each over an AWGN
//! channel, and a task head classifies from the received codewords. Training
//! adds a Wasserstein penalty that transports a hybrid target (batch latents
//! mixed with a Gaussian prior) onto the codebook measure weighted by
//! `softmax(beta)`, which spreads codeword usage and shapes the symbol
//! distribution toward the capacity-achieving input.
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`codebook`] | quantization, activation pmf, softmax weights, perplexity, Lloyd |
//! | [`ot`] | cost matrices, exact transport, log-domain Sinkhorn, Danskin gradients |
//! | [`modem`] | Gray-coded square QAM, AWGN, demodulation, SER and capacity formulas |
//! | [`wsdc`] | hybrid target and the composite regularized objective |
//! | [`nn`] | encoder/head networks, straight-through training loop, gradient checks |
//! | [`data`] | Gaussian-mixture task, CIFAR-10 binary batches, augmentation |
//! | [`metrics`] | accuracy, plug-in MI, index error rate, symbol-space transport |
//! | [`container`] | versioned binary model artifact |

pub mod codebook;
pub mod container;
pub mod data;
pub mod error;
pub mod metrics;
pub mod modem;
pub mod nn;
pub mod ot;
pub mod par;
pub mod wsdc;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator for `(seed, stream)`; distinct streams are independent.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
