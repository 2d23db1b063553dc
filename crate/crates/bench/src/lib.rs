//! Empty library crate hosting the criterion benchmark target
//! (`benches/pipeline.rs`); run with `cargo bench -p spikenav-bench`.
