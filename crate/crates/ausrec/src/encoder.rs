//! Light graph-convolution encoder: propagation of node embeddings over the
//! symmetric-normalized joint adjacency, inner-product scoring, and the
//! checkpoint format.
//!
//! There are no feature transforms or nonlinearities; a layer is one sparse
//! product with the normalized adjacency and the final embedding is the mean
//! of all layers including the input.

use base64::Engine;
use ndarray::Array2;
use rand::prelude::*;
use rand_distr::Normal;

use crate::tape::{SpmmOperand, Tape, Var};
use crate::{Error, Result};

/// Trainable node embeddings: users occupy rows `0..m`, items `m..m+n`.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub e0: Array2<f64>,
    m: usize,
    n: usize,
    k_layers: usize,
}

impl EmbeddingTable {
    /// Fresh table with entries drawn from a zero-mean normal with standard
    /// deviation 0.01, so initial inner products are near zero.
    pub fn init_random(m: usize, n: usize, d: usize, k_layers: usize, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, 0.01).unwrap();
        Self {
            e0: Array2::from_shape_fn((m + n, d), |_| rng.sample(dist)),
            m,
            n,
            k_layers,
        }
    }

    pub fn from_parts(m: usize, n: usize, k_layers: usize, e0: Array2<f64>) -> Result<Self> {
        if e0.nrows() != m + n {
            return Err(Error::Structure(format!(
                "embedding table has {} rows, expected {}",
                e0.nrows(),
                m + n
            )));
        }
        if k_layers == 0 {
            return Err(Error::Structure(
                "need at least one propagation layer".into(),
            ));
        }
        Ok(Self { e0, m, n, k_layers })
    }

    pub fn num_users(&self) -> usize {
        self.m
    }

    pub fn num_items(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.e0.ncols()
    }

    pub fn k_layers(&self) -> usize {
        self.k_layers
    }
}

/// Tape-recorded propagation output: all layers plus their mean.
pub struct Propagation {
    pub layers: Vec<Var>,
    pub e_final: Var,
}

/// Records `k_layers` propagation steps from `e0` and averages layers
/// `0..=k`. Gradients flow back to `e0`; a non-finite layer aborts with an
/// error naming it.
pub fn propagate(
    tape: &Tape,
    a_hat: &SpmmOperand,
    e0: Var,
    k_layers: usize,
) -> Result<Propagation> {
    let mut layers = vec![e0];
    for layer in 1..=k_layers {
        let next = tape.spmm(a_hat, layers[layer - 1])?;
        if !tape.value_is_finite(next) {
            return Err(Error::Numerical {
                context: format!("propagation layer {layer}"),
                detail: "non-finite embedding values".into(),
            });
        }
        layers.push(next);
    }
    let total = tape.add_n(&layers)?;
    let e_final = tape.scalar_mul(total, 1.0 / (k_layers + 1) as f64)?;
    Ok(Propagation { layers, e_final })
}

/// Forward-only propagation for evaluation snapshots.
pub fn propagate_values(a_hat: &SpmmOperand, emb: &EmbeddingTable) -> Result<PropagatedEmbeddings> {
    let tape = Tape::new();
    let e0 = tape.leaf(emb.e0.clone());
    let prop = propagate(&tape, a_hat, e0, emb.k_layers())?;
    Ok(PropagatedEmbeddings {
        e_final: tape.value(prop.e_final),
        m: emb.num_users(),
        n: emb.num_items(),
    })
}

/// A frozen snapshot of final embeddings, safe to score from many threads.
#[derive(Debug, Clone)]
pub struct PropagatedEmbeddings {
    pub e_final: Array2<f64>,
    m: usize,
    n: usize,
}

impl PropagatedEmbeddings {
    pub fn new(e_final: Array2<f64>, m: usize, n: usize) -> Result<Self> {
        if e_final.nrows() != m + n {
            return Err(Error::Structure(format!(
                "embedding matrix has {} rows, expected {}",
                e_final.nrows(),
                m + n
            )));
        }
        Ok(Self { e_final, m, n })
    }

    pub fn num_users(&self) -> usize {
        self.m
    }

    pub fn num_items(&self) -> usize {
        self.n
    }

    /// Predicted preference of user `u` for item `v`.
    pub fn score_user_item(&self, u: usize, v: usize) -> Result<f64> {
        if u >= self.m || v >= self.n {
            return Err(Error::InvalidArgument(format!(
                "user {u} / item {v} out of range ({} users, {} items)",
                self.m, self.n
            )));
        }
        Ok(self.e_final.row(u).dot(&self.e_final.row(self.m + v)))
    }

    /// Predicted auxiliary-relation score between two users; symmetric in
    /// its arguments.
    pub fn score_user_user(&self, u: usize, u2: usize) -> Result<f64> {
        if u >= self.m || u2 >= self.m {
            return Err(Error::InvalidArgument(format!(
                "user pair ({u}, {u2}) out of range for {} users",
                self.m
            )));
        }
        Ok(self.e_final.row(u).dot(&self.e_final.row(u2)))
    }
}

/// Serialized checkpoint: the five fields below, with `e0` stored as
/// base64-encoded row-major little-endian `f64` bytes.
#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointFile {
    m: usize,
    n: usize,
    d: usize,
    k: usize,
    e0: String,
}

pub fn save_checkpoint(path: &std::path::Path, emb: &EmbeddingTable) -> Result<()> {
    let mut bytes = Vec::with_capacity(emb.e0.len() * 8);
    for v in emb.e0.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let file = CheckpointFile {
        m: emb.num_users(),
        n: emb.num_items(),
        d: emb.dim(),
        k: emb.k_layers(),
        e0: base64::engine::general_purpose::STANDARD.encode(bytes),
    };
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<EmbeddingTable> {
    let file: CheckpointFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(&file.e0)
        .map_err(|e| Error::Structure(format!("checkpoint payload: {e}")))?;
    let expect = (file.m + file.n) * file.d * 8;
    if bytes.len() != expect {
        return Err(Error::Structure(format!(
            "checkpoint payload has {} bytes, expected {expect}",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let e0 = Array2::from_shape_vec((file.m + file.n, file.d), values)
        .map_err(|e| Error::Structure(format!("checkpoint shape: {e}")))?;
    EmbeddingTable::from_parts(file.m, file.n, file.k, e0)
}
