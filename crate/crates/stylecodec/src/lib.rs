//! Style-controllable text-to-token synthesis over a synthetic factorized
//! codec.
//!
//! The pipeline generates a T×N grid of discrete tokens whose channels are
//! partitioned into content, prosody, and acoustic groups, from three
//! prompts: content tokens, a textual style description, and a timbre
//! reference. The codec space is an invertible symbolic construction, so
//! every control metric has an exact decode oracle instead of a learned
//! classifier.
//!
//! Main pieces:
//!
//! - [`codec`]: the factorized token space, dataset generator, and exact
//!   attribute/degree decode.
//! - [`style_text`]: template-based style prompts and the keyword encoder.
//! - [`style_mdn`]: mixture-density head over style semantics with four
//!   variance-tying noise modes, its exact NLL, gradients, and sampler.
//! - [`generator`]: text encoding, style fusion, duration prediction,
//!   length regulation, cosine-schedule masking, masked-channel training
//!   loss, and confidence-based iterative decoding.
//! - [`fusion`]: timbre extraction and conditional-normalization fusion
//!   into the decoded output.
//! - [`training`]: joint optimization, checkpointing, deterministic resume.
//! - [`eval`]: exact-oracle evaluation, many-to-many diversity metrics,
//!   ablation grids.

pub mod codec;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod fusion;
pub mod generator;
pub mod model;
pub mod nn;
pub mod par;
pub mod rng;
pub mod style_mdn;
pub mod style_text;
pub mod tensor;
pub mod training;

pub use par::ExecMode;
