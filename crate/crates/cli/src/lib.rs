//! Implementation of the `sal` command-line driver.
//!
//! Every command records the exact configuration it ran with as a JSON file
//! next to its outputs, so any artifact can be reproduced from its config
//! echo and the dataset alone.

pub mod config;
pub mod evaluate;
pub mod fit;
pub mod localize;
pub mod records;
pub mod synth_cmd;
pub mod viz;
