pub mod blocks;
pub mod cli;
pub mod codec;
pub mod config;
pub mod error;
pub mod graph;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod neuron;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{RealTensor, Shape, SpikeTensor};
