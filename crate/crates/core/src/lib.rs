//! Windowed quantized-MLP intrusion detection for automotive CAN traffic.
//!
//! The crate covers the full desk workflow: parsing or synthesizing labeled
//! CAN logs, building sliding-window byte features, training the float MLP
//! detectors with transfer learning, deterministic INT8 quantization with
//! optional quantization-aware fine-tuning, a concurrent dual-detector
//! replay engine, and classification/latency reporting.

pub mod canlog;
pub mod cli;
pub mod config;
pub mod container;
pub mod engine;
pub mod metrics;
pub mod nn;
pub mod quant;
pub mod window;
