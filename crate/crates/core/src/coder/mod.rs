//! Range coding and the bitstream container.

pub mod container;
pub mod range;
