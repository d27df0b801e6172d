//! The book chapters, compiled as doc-tests.
//!
//! mdbook renders `book/` for reading; including the same markdown here makes
//! `cargo test --doc` compile and run every snippet, so the guide cannot
//! drift from the library.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
