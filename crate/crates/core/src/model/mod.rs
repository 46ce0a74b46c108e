//! Network definition, parameters and initialization.

pub mod config;
pub mod net;
pub mod params;
mod tape;

pub use config::{Ablation, InitScheme, ModelConfig};
pub use net::{block_output_stride, reflect_pad, ForwardPass, MsfaNet, OUTPUT_STRIDE};
pub use params::{save_backbone, Gradients, InitTag, ParamRole, ParamSpec, Parameter, ParameterStore};
