//! Adversarial camouflage textures against vision-language driving models.
//!
//! The pipeline: a UV-mapped vehicle mesh is rasterized into scene samples
//! (background, UV map, mask) under many camera poses; a texture is rendered
//! into each sample, randomly cropped and rescaled, and fed to a victim
//! model. The attack pushes victim features at several layers away from
//! their clean-texture values and is evaluated on perception, planning and
//! prediction prompts.

pub mod attack;
pub mod camera;
pub mod error;
pub mod eval;
pub mod imageio;
pub mod loss;
pub mod mesh;
pub mod raster;
pub mod render;
pub mod sampler;
pub mod scene;
pub mod texture;
pub mod transforms;
pub mod victim;

pub use error::{Error, Result};
