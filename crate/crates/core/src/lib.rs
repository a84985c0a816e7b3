//! Semantic embeddings of spoken utterances, learned without transcriptions.
//!
//! The crate provides:
//! - an MFCC+log-energy audio frontend ([`audio_frontend`]),
//! - a small reverse-mode autodiff tape and the layers built on it
//!   ([`tape`], [`nn`]),
//! - the shared conv/GRU/attention utterance encoder ([`encoder`]),
//! - two training objectives: context prediction ([`audio2vec`]) and
//!   segment matching with an optional speaker adversary ([`segmatch`]),
//! - paraphrase-retrieval and representational-similarity evaluation
//!   ([`evaluation`]),
//! - corpus manifests, batching and a synthetic corpus generator
//!   ([`corpus`]),
//! - binary formats for features/embeddings ([`ssem`]) and model
//!   checkpoints ([`checkpoint`]).

pub mod audio2vec;
pub mod audio_frontend;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod segmatch;
pub mod ssem;
pub mod tape;
pub mod training;
pub mod util;

pub use error::{Error, Result};
