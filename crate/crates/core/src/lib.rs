//! Proxy-based embedding learning with normalized softmax losses, and the
//! retrieval/clustering metrics used to evaluate the embeddings.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod sampling;
pub mod trainer;

pub use error::{Error, Result};
pub use eval::{evaluate, EmbeddingSet, EvalMode, EvalOptions, EvalReport, Evaluation};
pub use linalg::Matrix;
pub use losses::{LossConfig, LossKind, ProxyMatrix};
pub use sampling::{BatchSpec, Dataset, SeededRng};
pub use trainer::{fit, EmbeddingModel, TrainConfig};
