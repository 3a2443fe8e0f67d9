//! Streaming diffusion over staggered noise levels.
//!
//! A window of `K` latent frames is split into `G` groups of `g = K / G`
//! frames; each group sits `T / G` timesteps noisier than the one before it.
//! Every denoiser call lowers all frames by one step, the head group comes out
//! clean, gets popped, and a fresh group of noise is pushed at the tail. The
//! crate holds that engine plus everything needed to check it: closed-form
//! Gaussian oracles, a tiny temporal-attention denoiser with hand-written
//! gradients, consistency distillation, landmark retargeting and metrics.

pub mod denoiser;
pub mod diffusion;
pub mod distill;
pub mod engine;
pub mod error;
pub mod io;
pub mod landmarks;
pub mod metrics;
pub mod rng;
pub mod temporal;
pub mod toynet;

pub use denoiser::{DenoiseRequest, Denoiser};
pub use engine::{run_stream, Engine, EngineOptions, FrameEvent, Startup, StepRecord, StreamOutput};
pub use error::{Error, Result};
