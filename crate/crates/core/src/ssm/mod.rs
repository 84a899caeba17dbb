//! Selective state-space backbone: the scan, the bidirectional block and the block stack.

mod block;
pub mod scan;

pub use block::{
    backbone_forward, bimb_forward, state_decay_factor, Backbone, BackboneMode, BiMbBlock, SsmConfig,
    SsmParams,
};
pub(crate) use block::run_blocks;
pub use scan::{selective_scan, Direction, ScanParams};
