#![allow(dead_code)]

pub mod adam_ref;
pub mod freeze;
pub mod golden;
pub mod gradcheck;
pub mod props;
pub mod runs;
