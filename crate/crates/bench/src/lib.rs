//! Criterion benchmarks for mkt-core live in benches/.
