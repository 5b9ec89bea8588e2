#![allow(dead_code)]

pub mod criteria;
pub mod grads;
pub mod oracles;
