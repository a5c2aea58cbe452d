//! Criterion benches for the hot paths live in `benches/`.
