//! Shared input builders for the benchmarks.
