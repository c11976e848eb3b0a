#![allow(dead_code)]

pub mod bss;
pub mod props;
pub mod streaming;
