pub mod audio;
pub mod checkpoint;
pub mod clap_lite;
pub mod config;
pub mod diffusion;
pub mod embedding;
pub mod error;
pub mod fad;
pub mod mel_vae;
pub mod nn;
pub mod pipeline;
pub mod selector;
pub mod synth;
pub mod tuner;
pub mod vocoder;

pub use error::{FlabError, Result};
