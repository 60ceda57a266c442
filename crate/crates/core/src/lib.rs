//! Multi-granularity feature caching for diffusion transformer inference.
//!
//! The crate bundles a small diffusion transformer ([`dit`]), a DDIM sampler
//! with classifier-free guidance ([`sampler`]), the cache controller that
//! decides per timestep between full computation and step-, cfg- or
//! block-level reuse ([`controller`]), and the offline profiler that feeds it
//! ([`profiler`]).

// Negated float comparisons below are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod controller;
pub mod dit;
pub mod error;
pub mod profiler;
pub mod sampler;
pub mod tensor;

pub use controller::{
    CacheMode, CacheState, ControllerConfig, IntervalMode, MixCache, ModeKey, ProfileArtifact,
    TimestepTrace,
};
pub use dit::{build_model, Conditioning, ModelConfig, ToyDiT};
pub use error::{Error, Result};
pub use sampler::{build_schedule, generate, DiffusionSchedule, GenerationResult, GuidanceConfig};
pub use tensor::Tensor;
