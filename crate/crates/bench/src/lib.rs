//! Criterion benchmarks for `embsig-core`; see `benches/`.
