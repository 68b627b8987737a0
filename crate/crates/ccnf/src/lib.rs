//! Conditional continuous normalizing flows over attribute-conditioned
//! embedding vectors: density estimation by maximum likelihood through a
//! neural ODE, conditional sampling, and continuous attribute editing via a
//! two-pass manipulation block, evaluated against closed-form synthetic
//! benchmarks.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod field;
pub mod flow;
pub mod io;
pub mod linalg;
pub mod solver;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use field::{Field, FieldKind, LinearField, MlpField, TraceEstimate, TraceMethod};
pub use flow::{AttrStats, AttributeVector, EmbeddingVector, FlowModel};
pub use solver::{AugmentedState, Method, SolverConfig, TraceMode};
pub use synth::{AttrSampler, ConditionalGaussianGenerator};
pub use train::{TraceChoice, TrainConfig, TrainReport, Trainer};
