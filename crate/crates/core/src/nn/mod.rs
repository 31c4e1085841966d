//! Minimal f64 neural-network stack: layer primitives with hand-written
//! backward passes, two concrete architectures and an Adam/EMA optimizer.
//!
//! Deliberately framework-free so the whole pipeline is deterministic given
//! a seed and cheap to audit against finite differences.

pub mod cnn;
pub mod layers;
pub mod optim;
pub mod unet;

pub use cnn::{CnnBackwardSignal, CnnCache, CnnConfig, SmallCnn};
pub use layers::Parameterized;
pub use optim::{accumulate, scale_grads, Adam, Ema};
pub use unet::{UNet, UNetConfig};
