//! Criterion benchmarks for the latent-bridge pipeline; see `benches/`.
