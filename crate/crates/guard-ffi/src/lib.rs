//! C ABI surface (placeholder while the core crate is built).
