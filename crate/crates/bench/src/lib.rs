//! Criterion benchmarks for llmq-core live under `benches/`.
