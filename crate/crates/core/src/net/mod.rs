//! The segmentation network.

mod config;
mod model;

pub use config::{DamiConfig, FdmdsConfig, NetConfig};
pub use model::{
    ConvBlockP, ConvP, CrossBlockP, DabsegNet, Encoded, FdmdsP, Forward, ForwardOptions, LinearP,
    NetParams, NetView, NormP, QkvP, StageP,
};
