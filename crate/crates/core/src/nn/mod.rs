//! Layers and forward execution of a model graph.

pub mod conv;
pub mod layers;
pub mod model;

pub(crate) use conv::valid_taps;
pub use conv::{conv2d, conv2d_fixed, conv2d_fixed_reference, conv2d_reference, ConvSpec};
pub use layers::{maxpool2d, maxpool2d_fixed, relu, relu_fixed, softmax, softmax_channels};
pub use model::{
    forward, forward_visit, layer_output_shape, ConvFormats, ConvParams, ConvSite, FixedConvParams, ForwardOutput,
    Layer, LayerOp, LayerSpec, Mode, Model,
};
