//! Mixture-of-world-models action planning on a synthetic tabletop benchmark.

pub mod blockworld;
pub mod checkpoint;
pub mod episodes;
pub mod latent_encoder;
pub mod latent_wm;
pub mod nn;
pub mod optim;
pub mod rngs;
pub mod tensor;
