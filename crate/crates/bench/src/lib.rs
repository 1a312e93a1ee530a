//! Criterion benchmarks for the solver and gradient estimators; see `benches/`.
