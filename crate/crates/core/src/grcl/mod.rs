//! Gated recurrent convolutional layer, network assembly, and probes.

pub mod block;
pub mod network;
pub mod probe;

pub use block::*;
pub use network::*;
pub use probe::{receptive_field_probe, ProbeTarget, SupportMap};
