//! Desk-scale engine for preference-aware diffusion over item embeddings.
//!
//! The crate trains a conditional denoiser to regenerate the embedding of the
//! next item a user will interact with, scores candidates by inner product
//! against the recovered embedding, and ranks the full catalogue. Training
//! couples a generation term with a preference term that pushes the denoiser
//! away from the centroid of sampled negative items.

pub mod cli;
pub mod config;
pub mod data;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod trainer;
