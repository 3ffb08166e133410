//! Material maps, a Cook-Torrance/GGX renderer, procedural SVBRDF data,
//! strip-file IO and map metrics.
//!
//! Nothing here depends on the networks, so the crate also builds for the
//! browser demo.

pub mod dataset;
pub mod error;
pub mod material;
pub mod metrics;
pub mod procedural;
pub mod renderer;
pub mod vec3;

pub use error::{Error, Result};
pub use material::{
    decode_normal, encode_normal, validate_maps, MapKind, MaterialMaps, Raster, SurfacePoint,
    ValidateOptions, ValidationReport,
};
pub use metrics::{rmse_maps, rmse_renderings, scalar_reduce, PerMap, ScalarMaterial};
pub use procedural::{generate_procedural, Pattern};
pub use renderer::{
    fresnel_schlick, ggx_distribution, render, render_environment, render_flash, shade_pixel,
    smith_geometry, tonemap, EnvironmentSample, LightSetup, RenderedImage,
};
pub use vec3::Vec3;
