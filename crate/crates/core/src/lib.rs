//! Retrieval-conditioned two-branch motion diffusion at desk scale.
//!
//! Pipeline: [`synth`] builds a compositional corpus, [`decompose`] turns
//! prompts into scripts, [`retrieval`] finds reference motions, [`denoiser`]
//! is the two-branch network trained by [`train`], [`sampler`] runs guided
//! reverse diffusion and editing, and [`metrics`] scores the results.

pub mod decompose;
pub mod denoiser;
pub mod diffusion;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod render;
pub mod retrieval;
pub mod sampler;
pub mod synth;
pub mod train;
