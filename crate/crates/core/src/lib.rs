//! Contrastive latent action pretraining (CLAP) at desk scale.
//!
//! A self-contained pipeline that aligns video-derived latent actions with a
//! quantized trajectory codebook and trains two downstream policies on top of
//! the shared discrete action space: an autoregressive token policy and a
//! rectified-flow action expert. Everything runs on a synthetic 2-D tabletop
//! world in 64-bit floats, single process, deterministic under fixed seeds.

pub mod actvae;
pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod nn;
pub mod ntp;
pub mod pipeline;
pub mod quantize;
pub mod rf;
pub mod rngs;
pub mod sim;
pub mod vdvae;

pub use error::{CoreError, Result};
