//! Criterion benchmarks for the graphvec pipeline; see `benches/`.
