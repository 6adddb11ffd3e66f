//! Benchmarks live in `benches/`; this crate only re-exports the core API for them.

pub use ldc_core;
