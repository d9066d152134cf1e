//! Transformer building blocks on top of the autodiff graph.
//!
//! Token matrices are `[N, D]`; images entering or leaving the token domain
//! are `[C, H, W]`.

mod attention;
mod conv;
mod linear;
mod patch;
mod transformer;

pub use attention::CrossAttention;
pub use conv::Conv2d;
pub use linear::{Init, LayerNorm, Linear};
pub use patch::{grid_to_tokens, resample_matrix, tokens_to_grid, PatchEmbed, PatchUnembed, TokenGrid};
pub use transformer::TransformerBlock;
