//! Criterion benchmarks for the contrast-lab kernels live in `benches/`.
