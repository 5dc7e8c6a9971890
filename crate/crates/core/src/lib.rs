//! Long-range multimodal pretraining on shot sequences.
//!
//! A movie-like recording is dissected into an ordered sequence of shots; each
//! shot carries a video feature, an audio feature, and a variable number of
//! language token features (stand-ins for frozen base-encoder outputs). Three
//! per-modality contextual transformers and one shared cross-modal
//! encoder-decoder transformer are pretrained with masked-token, inter-modal
//! contrastive, and cross-modal contrastive objectives, then evaluated with
//! linear probes, ordering/selection tasks, and cross-modal retrieval.
//!
//! Everything runs on a small dense-tensor reverse-mode autodiff engine
//! ([`numerics`]) with a finite-difference gradient verifier.

pub mod ablate;
pub mod backbone;
pub mod checkpoint;
pub mod corpus;
pub mod frontend;
pub mod numerics;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod probes;
pub mod rng;
pub mod trainer;

pub use numerics::{Element, NumericsError, Tape, Tensor, Var};
