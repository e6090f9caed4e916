//! Holds the `acceptance` test target; run it with
//! `cargo test -p monoflow-validation --test acceptance`.
