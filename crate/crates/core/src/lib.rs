//! Basic-block level binary similarity dataset construction.

pub mod bmerge;
pub mod bpair;
pub mod dataset;
pub mod ingest;
pub mod linemap;
pub mod normalize;
pub mod objdump;
pub mod pipeline;
pub mod toolchain;
