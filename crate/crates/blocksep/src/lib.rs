//! Block-online joint source separation, speaker counting and diarization.
//!
//! The toolkit processes long recordings in fixed-length time blocks. In every
//! block a recurrent mask-estimation network first performs a guided
//! extraction for each speaker discovered in earlier blocks, then keeps
//! running blind extractions on the leftover signal until a residual
//! attention map is empty. Speaker embeddings are threaded from block to
//! block so each speaker stays bound to a stable output slot, which yields
//! separation, counting and diarization from a single model.
//!
//! Crate layout:
//! - [`signal`]: STFT/iSTFT, masking, block segmentation, WAV I/O
//! - [`mixsim`]: meeting-style mixture simulation with per-block ground truth
//! - [`masknet`]: the mask/embedding network (forward + analytic gradients)
//! - [`engine`]: the block-online control loop and speaker-slot tracking
//! - [`learn`]: multi-task losses, block-wise permutation alignment, training
//! - [`evalkit`]: SDR, DER/SCER and counting metrics
//! - [`baselines`]: PIT, clustering baselines, IRM oracle, guess level

pub mod baselines;
pub mod engine;
pub mod error;
pub mod evalkit;
pub mod learn;
pub mod masknet;
pub mod mixsim;
pub mod signal;

pub use error::{Error, Result};
