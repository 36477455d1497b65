//! Minimal convolutional network stack with explicit backpropagation.
//!
//! Activations use a channel-major `[C, N, H, W]` layout so a 3x3
//! convolution over the whole batch is a single GEMM on im2col columns and
//! channel concatenation is a buffer append.

mod layers;
mod optim;
mod real;
mod tensor;
mod unet;

pub use layers::{sinusoidal_embedding, Conv2d, Linear, Param, Silu};
pub use optim::{Adam, AdamConfig};
pub use real::Real;
pub use tensor::Tensor;
pub use unet::{Latent, Unet, UnetConfig, UnetError};
