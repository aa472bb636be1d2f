pub mod chat;
pub mod config;
pub mod debias;
pub mod embedding;
pub mod error;
pub mod fill;
mod fsutil;
pub mod generator;
pub mod metrics;
pub mod persona;
pub mod pipeline;
pub mod resample;
pub mod similarity;
pub mod transport;
