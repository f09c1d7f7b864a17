//! Cycle-level out-of-order core and cache hierarchy simulator with a
//! timestamp-guarded speculative buffer.

pub mod attacks;
pub mod cache;
pub mod config;
pub mod fuzz;
pub mod ghost;
pub mod harness;
pub mod isa;
pub mod memsys;
pub mod mshr;
pub mod order;
pub mod pipeline;
pub mod predictor;
pub mod prefetch;
pub mod sim;
pub mod timeline;
