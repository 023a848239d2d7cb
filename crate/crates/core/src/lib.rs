//! Weight-space similarity of transformer attention heads.
//!
//! Heads are compared through the column spaces of their projection weights
//! (projection kernel over principal angles) and through composition-score
//! style baselines. See the README for the CLI.

pub mod analysis;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod head_scores;
pub mod preprocessing;
pub mod rand_baseline;
pub mod similarity;
pub mod subspace;
pub mod tensor_io;
pub mod unembed;
pub mod weights;

pub use error::{Error, ErrorCategory, Result};
pub use similarity::{score_all_pairs, Metric, PairMode, PairingType, SimilarityTable};
pub use subspace::{normalized_pk, principal_angles, projection_kernel, Subspace};
pub use tensor_io::{load_bundle, HeadId, ModelConfig, TensorBundle, WType, WeightRef};
pub use weights::ModelWeights;
