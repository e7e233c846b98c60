//! Probability signatures, embedding models and the alignment between them.

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod signature;
pub mod task;
pub mod train;

pub use corpus::{BigramCounts, CorpusFormat, MarkovSpec, TokenStream};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use signature::{
    AnalyticSignatures, Signature, SignatureCounts, SignatureKind, SignatureMatrix, SignatureVector,
};
pub use task::{Dataset, Sample, TaskKind, TaskSpec, Token, Vocabulary};
pub use model::{Activation, InitScale, ModelParams};
pub use train::{TrainConfig, TrainOutcome};
