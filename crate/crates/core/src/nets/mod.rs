//! The hybrid reconstruction network and its building blocks.

mod hybrid;
mod layers;
mod unet;

pub use hybrid::{
    bridge_backward, bridge_forward, BaselineModel, BridgeTape, HybridModel, HybridOutput, HybridTape, MAX_PARAMS,
};
pub use unet::{ParamEntry, UNet, UNetConfig, UNetTape};
