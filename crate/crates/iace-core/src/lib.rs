//! Bimanual imitation-learning at desk scale.
//!
//! The crate bundles everything needed to train and evaluate action-chunking
//! policies for a two-arm setup on a CPU:
//!
//! * [`math`] / [`autograd`] — a small f64 matrix type and a reverse-mode tape.
//! * [`nn`] — transformer building blocks (attention, encoder/decoder blocks,
//!   layer norm, positional embeddings, a strided convolutional image
//!   tokenizer) plus parameter storage and initialization.
//! * [`gradcheck`] — central finite-difference verification of analytic
//!   gradients.
//! * [`policy`] — the segmented-token policy: per-arm local encoders, the
//!   inter-arm coordination encoder (IACE), single or split decoders, and the
//!   CVAE style pathway.
//! * [`ensemble`] — temporal ensembling of overlapping action chunks.
//! * [`sim`] — a deterministic planar two-arm kinematic simulator with
//!   scripted experts and success scoring.
//! * [`dataset`] — bit-exact episode storage, rate decimation, and
//!   normalization statistics.
//! * [`harness`] — training, evaluation, the ablation grid, and report
//!   emission; drives everything the CLI exposes.

pub mod autograd;
pub mod dataset;
pub mod ensemble;
pub mod gradcheck;
pub mod harness;
pub mod math;
pub mod nn;
pub mod optim;
pub mod policy;
pub mod sim;

pub use math::Matrix;
pub use nn::{ParamStore, GradStore};
pub use policy::{ActionChunk, ObservationFrame, PolicyVariant};
