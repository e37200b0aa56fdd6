//! Minimal neural-network building blocks on top of candle.

mod conv;
mod layers;
mod params;

pub use layers::{
    adain, celu, dropout, leaky_relu, log_softmax, pixel_shuffle_1d, resize_nearest, BatchNorm, Conv1d, Conv2d,
    Linear,
};
pub use params::ParamStore;
