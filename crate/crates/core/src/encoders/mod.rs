//! Frozen text/image encoders and the synthetic benchmark generator.

mod gap;
mod image;
mod text;
mod world;

pub use gap::{modality_gap_decompose, orthonormal_rows, GapDecomposition};
pub use image::FrozenImageEncoder;
pub use text::{
    BoundTextEncoder, FrozenTextEncoder, TextEncoderConfig, EOT_TOKEN, FIRST_FREE_TOKEN, MAX_TOKENS, PREFIX_TOKENS,
};
pub use world::{generate_world, SyntheticWorldConfig, WorldGeometry};
