//! Benchmark-only crate; the actual suites live in `benches/`.
