//! Dense layers, reverse-mode autodiff and initialization.

mod init;
mod kernels;
mod model;
mod tape;

pub use init::{gaussian_init, kaiming_uniform_init, ConvInit, InitScheme};
pub use model::{
    forward, Architecture, BufferSpec, ForwardOptions, ForwardPass, LayerSpec, Mode, Network,
    ParamRole, ParamSpec,
};
pub use tape::{ConvGeom, GradTape, Gradients, Var};
