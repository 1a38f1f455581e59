//! Holds the end-to-end acceptance suite in `tests/acceptance.rs`. The
//! checks train real generators against a cached frozen model, so they run
//! after every other crate's tests.
