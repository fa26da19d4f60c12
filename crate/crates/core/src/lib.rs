//! Compression-aware training at desk scale.
//!
//! Fine-tunes a small quantized CNN with an entropy-reducing activation
//! regularizer, then losslessly compresses the quantized feature maps with
//! a canonical Huffman codec. The crate exposes:
//!
//! * [`tensor`] / [`tape`] — a minimal dense-tensor engine with
//!   reverse-mode gradients, enough to train the toy CNN;
//! * [`quant`] — learnable-clip activation quantization and 8-bit shadow
//!   weights with straight-through gradients;
//! * [`entropy`] — empirical entropy, the differentiable soft-entropy
//!   surrogate, and the l1/l2 compressibility loss;
//! * [`codec`] — canonical Huffman coding of quantized feature maps with a
//!   self-describing bitstream;
//! * [`model`] — the toy CNN, the training loop, evaluation, and
//!   checkpointing;
//! * [`data`] — synthetic dataset generation and CSV ingestion;
//! * [`config`] / [`harness`] — experiment configuration, sweeps over the
//!   regularization strength, and robustness repeats.

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod entropy;
pub mod harness;
pub mod model;
pub mod quant;
pub mod tape;
pub mod tensor;

pub use tensor::{Tensor, TensorError};
