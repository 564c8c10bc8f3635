//! Criterion benchmarks for the defectkan kernels live in `benches/`.
