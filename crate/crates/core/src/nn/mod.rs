//! Differentiable building blocks: convolution, pooling, resampling and
//! windowed attention, each with an explicit backward pass.

pub mod attention;
pub mod conv;
mod gemm;
pub mod grid;
pub mod pool;

pub use attention::{AttentionSpec, SwinBlockWeights, Tokens, WindowLayout};
pub use conv::ConvSpec;
pub use grid::FeatureGrid;
