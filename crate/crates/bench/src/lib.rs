//! Criterion benchmarks for the decoder's hot paths; see `benches/`.
