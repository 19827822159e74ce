//! Feature-space data augmentation for low-shot classification.
//!
//! Classes with plentiful examples ("base") are translated into classes with
//! very few ("novel") by conditional generator networks trained episodically
//! against per-class discriminators. Four variants are provided, differing in
//! which loss terms are active: plain adversarial translation, cycle-consistent
//! translation, cycle-consistent translation with mixture noise, and the full
//! form that additionally matches second moments of generated and real
//! features through a truncated nuclear norm.
//!
//! The crate is self-contained: dense linear algebra, reverse-mode
//! differentiation, prototype computation, training, augmentation, and
//! evaluation all live here, driven by the `covaug` command line tool.

pub mod augeval;
pub mod datakit;
pub mod diffengine;
pub mod episodic;
pub mod error;
pub mod ganstack;
pub mod linalg;
pub mod protospace;

pub use error::{Error, Result};
