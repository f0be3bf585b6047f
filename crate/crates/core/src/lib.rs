//! Latent-to-latent redirection of gaze and head pose.
//!
//! A small reverse-mode engine ([`tensor`]) drives a per-layer
//! projector/deprojector ([`redirector`]) that turns latent vectors into
//! rotatable 3×16 attribute embeddings, rotates them to new pitch/yaw
//! conditions ([`geometry`]) and writes the residual back into the latent.
//! Everything is trained and scored against a synthetic generator whose
//! ground truth is known ([`world`]).

pub mod cli;
pub mod eval;
pub mod format;
pub mod geometry;
pub mod losses;
pub mod redirector;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod world;
