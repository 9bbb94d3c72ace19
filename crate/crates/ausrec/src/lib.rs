//! Social recommender that trains a light graph-convolution encoder jointly
//! with seven self-supervised auxiliary link-prediction tasks, where the
//! per-sample task weights are produced by a small weighting network trained
//! through a three-stage bi-level update.
//!
//! The crate is organized around the data flow of a run:
//!
//! - [`sparse`] — CSR matrices, the joint user/item adjacency and its
//!   symmetric normalization, boolean products and exact-k-hop reachability.
//! - [`tasks`] — mining the seven auxiliary relation sets from the
//!   interaction and social graphs.
//! - [`tape`] — a reverse-mode differentiation tape over dense `f64`
//!   matrices. The backward sweep can itself be recorded, which is what lets
//!   the meta update differentiate through the one-step virtual descent.
//! - [`encoder`] — embedding table, propagation over the normalized
//!   adjacency, inner-product scoring, checkpoints.
//! - [`weightnet`] — the weighting network mapping `[loss; task one-hot]`
//!   to a scalar in (0, 1).
//! - [`trainer`] — splits, negative sampling, BPR losses and the
//!   three-stage training loop with its ablation modes.
//! - [`eval`] — top-K ranking, Recall@K and NDCG@K.
//! - [`data`] — TSV edge-list ingestion and run configuration.
//! - [`synth`] — planted block-structure datasets for smoke tests.

pub mod data;
pub mod encoder;
pub mod eval;
pub mod fdcheck;
pub mod sparse;
pub mod synth;
pub mod tape;
pub mod tasks;
pub mod trainer;
pub mod weightnet;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible shapes passed to an operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An argument violated an operation's contract.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A matrix or dataset failed a structural invariant.
    #[error("structural error: {0}")]
    Structure(String),

    /// A computation produced non-finite values.
    #[error("numerical error in {context}: {detail}")]
    Numerical { context: String, detail: String },

    /// Malformed input file.
    #[error("{path}:{line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Caps the rayon worker pool from `AUSREC_THREADS` if set.
///
/// Call once at process start; later calls (or an already-initialized pool)
/// are ignored. Results are deterministic for a fixed thread count.
pub fn init_threads_from_env() {
    if let Ok(v) = std::env::var("AUSREC_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
        }
    }
}
