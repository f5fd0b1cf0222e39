//! Block-sparse refitting for ℓ₁,₂ analysis regularization.

pub mod blocks;
pub mod error;
pub mod operators;
pub mod penalties;
pub mod solvers;
pub mod experiments;

pub use blocks::{BlockVector, SupportSet};
pub use error::{Error, Result};
pub use operators::{AnalysisKind, AnalysisOperator, ForwardOperator, ImageGrid, Kernel};
pub use penalties::{BlockPenalty, PenaltyTag, ProxContext};
