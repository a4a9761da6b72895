//! Entity-aware blank-infilling pretraining for text-based recommendation.
//!
//! The pipeline: interaction logs are textualized into documents whose item
//! titles and user attributes are registered as entities ([`entity_pool`]);
//! spans are masked without ever splitting an entity ([`masking`]); every
//! token gets an inter- and intra-position id ([`positions`]); a small
//! GLM-style transformer learns to fill the blanks in chronological order
//! ([`model`]); and at inference the intra ids are decided token by token from
//! a Trie walk ([`decode`]).

pub mod cli;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod entity_pool;
pub mod error;
pub mod evaluation;
pub mod manifest;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod positions;
pub mod seed;
pub mod synth;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
