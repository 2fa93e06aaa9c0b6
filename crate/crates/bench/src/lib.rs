//! Criterion benchmarks for the factorization and refinement kernels; see `benches/`.
