//! Teacher-student metric learning over symmetric and asymmetric similarity.
//!
//! A small MLP student is trained against a frozen teacher embedding table
//! with one of seven per-anchor losses, then evaluated on retrieval either
//! with both sides embedded by the student (symmetric testing) or with the
//! database embedded by the teacher (asymmetric testing).

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod geometry;
pub mod losses;
pub mod matrix;
pub mod mining;
pub mod models;
pub mod parallel;
pub mod trainer;

pub use error::{Error, Result};
