//! Compressed sparse row matrices and the graph algebra used by adjacency
//! construction, propagation and motif mining.
//!
//! All matrices are immutable after construction and every operation is a
//! pure function, so values can be shared freely across threads. Operations
//! that parallelize internally do so per output row and are deterministic
//! regardless of thread count.

use ndarray::Array2;
use rayon::prelude::*;

use crate::{Error, Result};

/// A CSR matrix. Relation matrices store 1.0 for every entry; the normalized
/// adjacency stores real weights.
///
/// Invariants: `row_ptr` has `rows + 1` nondecreasing entries ending at the
/// entry count, column indices are strictly increasing within each row, and
/// every stored value is finite and nonzero.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// The all-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_ptr: vec![0; rows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Builds from `(row, col, value)` entries. Rejects out-of-bounds
    /// indices, duplicates and zero or non-finite values.
    pub fn from_entries(rows: usize, cols: usize, entries: &[(usize, usize, f64)]) -> Result<Self> {
        let mut sorted = entries.to_vec();
        sorted.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::with_capacity(sorted.len());
        let mut values = Vec::with_capacity(sorted.len());
        let mut prev: Option<(usize, usize)> = None;
        for &(r, c, v) in &sorted {
            if r >= rows || c >= cols {
                return Err(Error::Structure(format!(
                    "entry ({r}, {c}) out of bounds for {rows}x{cols} matrix"
                )));
            }
            if !v.is_finite() || v == 0.0 {
                return Err(Error::Structure(format!(
                    "entry ({r}, {c}) has invalid value {v}"
                )));
            }
            if prev == Some((r, c)) {
                return Err(Error::Structure(format!("duplicate entry ({r}, {c})")));
            }
            prev = Some((r, c));
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
        }
        for i in 0..rows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Builds a binary matrix from `(row, col)` pairs, deduplicating.
    pub fn from_pairs(rows: usize, cols: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut sorted = pairs.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let entries: Vec<(usize, usize, f64)> =
            sorted.into_iter().map(|(r, c)| (r, c, 1.0)).collect();
        Self::from_entries(rows, cols, &entries)
    }

    /// Builds directly from per-row column lists; each list must be sorted
    /// strictly ascending. Used by row-parallel producers.
    fn from_rows(rows: usize, cols: usize, row_cols: Vec<Vec<usize>>) -> Self {
        debug_assert_eq!(row_cols.len(), rows);
        let nnz: usize = row_cols.iter().map(Vec::len).sum();
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::with_capacity(nnz);
        row_ptr.push(0);
        for r in row_cols {
            debug_assert!(r.windows(2).all(|w| w[0] < w[1]));
            col_idx.extend_from_slice(&r);
            row_ptr.push(col_idx.len());
        }
        Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values: vec![1.0; nnz],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Number of stored entries.
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    /// Column indices and values of one row.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
        (&self.col_idx[lo..hi], &self.values[lo..hi])
    }

    pub fn row_cols(&self, r: usize) -> &[usize] {
        let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
        &self.col_idx[lo..hi]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&c) {
            Ok(i) => vals[i],
            Err(_) => 0.0,
        }
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.row_cols(r).binary_search(&c).is_ok()
    }

    /// Iterates stored entries in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).map(move |(&c, &v)| (r, c, v))
        })
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows, self.cols));
        for (r, c, v) in self.iter() {
            out[[r, c]] = v;
        }
        out
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.col_idx {
            counts[c + 1] += 1;
        }
        for i in 0..self.cols {
            counts[i + 1] += counts[i];
        }
        let mut row_ptr = counts.clone();
        let mut col_idx = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        let mut cursor = counts;
        for (r, c, v) in self.iter() {
            let at = cursor[c];
            col_idx[at] = r;
            values[at] = v;
            cursor[c] += 1;
        }
        row_ptr.truncate(self.cols + 1);
        SparseMatrix {
            rows: self.cols,
            cols: self.rows,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols && *self == self.transpose()
    }

    pub fn has_zero_diagonal(&self) -> bool {
        (0..self.rows.min(self.cols)).all(|i| !self.contains(i, i))
    }

    /// Drops diagonal entries.
    pub fn remove_diagonal(&self) -> SparseMatrix {
        let entries: Vec<(usize, usize, f64)> = self.iter().filter(|&(r, c, _)| r != c).collect();
        SparseMatrix::from_entries(self.rows, self.cols, &entries)
            .expect("filtered entries stay valid")
    }

    /// Symmetric degree normalization `D^(-1/2) A D^(-1/2)` with the row-sum
    /// degree matrix. Zero-degree rows and columns stay all zero.
    pub fn sym_normalize(&self) -> Result<SparseMatrix> {
        if self.rows != self.cols {
            return Err(Error::Shape {
                op: "sym_normalize",
                detail: format!("matrix is {}x{}, expected square", self.rows, self.cols),
            });
        }
        let inv_sqrt: Vec<f64> = (0..self.rows)
            .map(|r| {
                let deg: f64 = self.row(r).1.iter().sum();
                if deg > 0.0 {
                    1.0 / deg.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let mut out = self.clone();
        for r in 0..self.rows {
            let (lo, hi) = (out.row_ptr[r], out.row_ptr[r + 1]);
            for i in lo..hi {
                out.values[i] *= inv_sqrt[r] * inv_sqrt[out.col_idx[i]];
            }
        }
        // Entries scaled to exactly zero can only come from zero-degree
        // rows/cols, which by construction store nothing; keep form canonical
        // by dropping any that slip through via underflow.
        if out.values.contains(&0.0) {
            let entries: Vec<_> = out.iter().filter(|&(_, _, v)| v != 0.0).collect();
            out = SparseMatrix::from_entries(self.rows, self.cols, &entries)?;
        }
        Ok(out)
    }

    /// Exact sparse-dense product `self · x`.
    pub fn spmm(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if self.cols != x.nrows() {
            return Err(Error::Shape {
                op: "spmm",
                detail: format!(
                    "{}x{} sparse times {}x{} dense",
                    self.rows,
                    self.cols,
                    x.nrows(),
                    x.ncols()
                ),
            });
        }
        let d = x.ncols();
        let mut out = Array2::zeros((self.rows, d));
        if d > 0 {
            out.as_slice_mut()
                .expect("freshly allocated arrays are contiguous")
                .par_chunks_mut(d)
                .enumerate()
                .for_each(|(r, out_row)| {
                    let (cols, vals) = self.row(r);
                    for (&c, &v) in cols.iter().zip(vals) {
                        let x_row = x.row(c);
                        for (o, &xv) in out_row.iter_mut().zip(x_row.iter()) {
                            *o += v * xv;
                        }
                    }
                });
        }
        Ok(out)
    }

    /// Boolean product: entry `(i, j)` is 1 iff some `k` has
    /// `self(i, k) != 0` and `other(k, j) != 0`.
    pub fn bool_product(&self, other: &SparseMatrix) -> Result<SparseMatrix> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "bool_product",
                detail: format!(
                    "{}x{} times {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            });
        }
        let out_cols = other.cols;
        let row_lists: Vec<Vec<usize>> = (0..self.rows)
            .into_par_iter()
            .map(|r| {
                let mut hit = Vec::new();
                let mut seen = vec![false; out_cols];
                for &k in self.row_cols(r) {
                    for &j in other.row_cols(k) {
                        if !seen[j] {
                            seen[j] = true;
                            hit.push(j);
                        }
                    }
                }
                hit.sort_unstable();
                hit
            })
            .collect();
        Ok(SparseMatrix::from_rows(self.rows, out_cols, row_lists))
    }

    /// Pattern intersection: entries present in both matrices, value 1.
    pub fn hadamard_mask(&self, other: &SparseMatrix) -> Result<SparseMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape {
                op: "hadamard_mask",
                detail: format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            });
        }
        let row_lists: Vec<Vec<usize>> = (0..self.rows)
            .map(|r| {
                let (a, b) = (self.row_cols(r), other.row_cols(r));
                let mut out = Vec::new();
                let (mut i, mut j) = (0, 0);
                while i < a.len() && j < b.len() {
                    match a[i].cmp(&b[j]) {
                        std::cmp::Ordering::Less => i += 1,
                        std::cmp::Ordering::Greater => j += 1,
                        std::cmp::Ordering::Equal => {
                            out.push(a[i]);
                            i += 1;
                            j += 1;
                        }
                    }
                }
                out
            })
            .collect();
        Ok(SparseMatrix::from_rows(self.rows, self.cols, row_lists))
    }

    /// Pairs at shortest-path distance exactly `k` in an undirected graph.
    /// `self` must be symmetric with a zero diagonal; the result is too.
    pub fn exact_k_hop(&self, k: usize) -> Result<SparseMatrix> {
        if k == 0 {
            return Err(Error::InvalidArgument(
                "hop distance must be at least 1".into(),
            ));
        }
        if self.rows != self.cols {
            return Err(Error::Shape {
                op: "exact_k_hop",
                detail: format!("matrix is {}x{}, expected square", self.rows, self.cols),
            });
        }
        let n = self.rows;
        let row_lists: Vec<Vec<usize>> = (0..n)
            .into_par_iter()
            .map(|src| {
                // Breadth-first search truncated at depth k.
                let mut dist = vec![usize::MAX; n];
                dist[src] = 0;
                let mut frontier = vec![src];
                let mut at_k = Vec::new();
                for depth in 1..=k {
                    let mut next = Vec::new();
                    for &u in &frontier {
                        for &v in self.row_cols(u) {
                            if dist[v] == usize::MAX {
                                dist[v] = depth;
                                next.push(v);
                            }
                        }
                    }
                    if depth == k {
                        at_k = next;
                        break;
                    }
                    frontier = next;
                    if frontier.is_empty() {
                        break;
                    }
                }
                at_k.sort_unstable();
                at_k
            })
            .collect();
        Ok(SparseMatrix::from_rows(n, n, row_lists))
    }
}

/// A loaded interaction/social dataset: `m` users, `n` items, the binary
/// user-item matrix `R` and the symmetric zero-diagonal user-user matrix `S`.
#[derive(Debug, Clone)]
pub struct Dataset {
    m: usize,
    n: usize,
    r: SparseMatrix,
    s: SparseMatrix,
}

impl Dataset {
    pub fn new(m: usize, n: usize, r: SparseMatrix, s: SparseMatrix) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::Structure(
                "dataset needs at least one user and one item".into(),
            ));
        }
        if r.rows() != m || r.cols() != n {
            return Err(Error::Structure(format!(
                "interaction matrix is {}x{}, expected {}x{}",
                r.rows(),
                r.cols(),
                m,
                n
            )));
        }
        if s.rows() != m || s.cols() != m {
            return Err(Error::Structure(format!(
                "social matrix is {}x{}, expected {}x{}",
                s.rows(),
                s.cols(),
                m,
                m
            )));
        }
        if !s.is_symmetric() {
            return Err(Error::Structure("social matrix must be symmetric".into()));
        }
        if !s.has_zero_diagonal() {
            return Err(Error::Structure(
                "social matrix must have a zero diagonal".into(),
            ));
        }
        if r.values.iter().chain(s.values.iter()).any(|&v| v != 1.0) {
            return Err(Error::Structure(
                "relation matrices must be binary (all stored entries 1)".into(),
            ));
        }
        Ok(Self { m, n, r, s })
    }

    pub fn num_users(&self) -> usize {
        self.m
    }

    pub fn num_items(&self) -> usize {
        self.n
    }

    pub fn interactions(&self) -> &SparseMatrix {
        &self.r
    }

    pub fn social(&self) -> &SparseMatrix {
        &self.s
    }

    /// The joint adjacency over user and item nodes: users occupy indices
    /// `0..m`, items `m..m+n`, with block layout `[[S, R], [R^T, 0]]`.
    pub fn joint_adjacency(&self) -> SparseMatrix {
        let (m, n) = (self.m, self.n);
        let rt = self.r.transpose();
        let mut row_ptr = Vec::with_capacity(m + n + 1);
        let mut col_idx = Vec::with_capacity(2 * self.r.nnz() + self.s.nnz());
        row_ptr.push(0);
        for u in 0..m {
            col_idx.extend_from_slice(self.s.row_cols(u));
            col_idx.extend(self.r.row_cols(u).iter().map(|&v| v + m));
            row_ptr.push(col_idx.len());
        }
        for v in 0..n {
            col_idx.extend_from_slice(rt.row_cols(v));
            row_ptr.push(col_idx.len());
        }
        let nnz = col_idx.len();
        SparseMatrix {
            rows: m + n,
            cols: m + n,
            row_ptr,
            col_idx,
            values: vec![1.0; nnz],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_sparse(rng: &mut ChaCha8Rng, rows: usize, cols: usize, density: f64) -> SparseMatrix {
        let mut pairs = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                if rng.random::<f64>() < density {
                    pairs.push((r, c));
                }
            }
        }
        SparseMatrix::from_pairs(rows, cols, &pairs).unwrap()
    }

    fn random_symmetric(rng: &mut ChaCha8Rng, n: usize, density: f64) -> SparseMatrix {
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < density {
                    pairs.push((i, j));
                    pairs.push((j, i));
                }
            }
        }
        SparseMatrix::from_pairs(n, n, &pairs).unwrap()
    }

    fn path_graph(n: usize) -> SparseMatrix {
        let mut pairs = Vec::new();
        for i in 0..n - 1 {
            pairs.push((i, i + 1));
            pairs.push((i + 1, i));
        }
        SparseMatrix::from_pairs(n, n, &pairs).unwrap()
    }

    /// Dense boolean matrix product, the oracle for `bool_product`.
    fn dense_bool_product(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        let (r, inner, c) = (a.nrows(), a.ncols(), b.ncols());
        let mut out = Array2::zeros((r, c));
        for i in 0..r {
            for j in 0..c {
                for k in 0..inner {
                    if a[[i, k]] != 0.0 && b[[k, j]] != 0.0 {
                        out[[i, j]] = 1.0;
                        break;
                    }
                }
            }
        }
        out
    }

    /// Breadth-first-search distances, the oracle for `exact_k_hop`.
    fn bfs_distances(s: &SparseMatrix, src: usize) -> Vec<usize> {
        let n = s.rows();
        let mut dist = vec![usize::MAX; n];
        dist[src] = 0;
        let mut queue = std::collections::VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            for &v in s.row_cols(u) {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    #[test]
    fn from_entries_rejects_duplicates_and_bad_values() {
        assert!(SparseMatrix::from_entries(2, 2, &[(0, 0, 1.0), (0, 0, 1.0)]).is_err());
        assert!(SparseMatrix::from_entries(2, 2, &[(0, 0, 0.0)]).is_err());
        assert!(SparseMatrix::from_entries(2, 2, &[(0, 0, f64::NAN)]).is_err());
        assert!(SparseMatrix::from_entries(2, 2, &[(2, 0, 1.0)]).is_err());
    }

    #[test]
    fn joint_adjacency_block_layout() {
        // m=2, n=1, R={(0,0)}, S={(0,1),(1,0)}.
        let r = SparseMatrix::from_pairs(2, 1, &[(0, 0)]).unwrap();
        let s = SparseMatrix::from_pairs(2, 2, &[(0, 1), (1, 0)]).unwrap();
        let d = Dataset::new(2, 1, r, s).unwrap();
        let a = d.joint_adjacency();
        assert_eq!(a.rows(), 3);
        let entries: Vec<_> = a.iter().map(|(r, c, _)| (r, c)).collect();
        assert_eq!(entries, vec![(0, 1), (0, 2), (1, 0), (2, 0)]);
        assert!(a.is_symmetric());
    }

    #[test]
    fn joint_adjacency_empty_graphs() {
        let d = Dataset::new(2, 2, SparseMatrix::zeros(2, 2), SparseMatrix::zeros(2, 2)).unwrap();
        let a = d.joint_adjacency();
        assert_eq!((a.rows(), a.cols(), a.nnz()), (4, 4, 0));
    }

    #[test]
    fn joint_adjacency_blocks_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (m, n) = (9, 6);
        let r = random_sparse(&mut rng, m, n, 0.3);
        let s = random_symmetric(&mut rng, m, 0.3);
        let d = Dataset::new(m, n, r.clone(), s.clone()).unwrap();
        let a = d.joint_adjacency();
        assert!(a.is_symmetric());
        let dense = a.to_dense();
        for i in 0..m {
            for j in 0..m {
                assert_eq!(dense[[i, j]], s.get(i, j));
            }
            for j in 0..n {
                assert_eq!(dense[[i, m + j]], r.get(i, j));
            }
        }
        for i in 0..n {
            for j in 0..n {
                assert_eq!(dense[[m + i, m + j]], 0.0);
            }
            for j in 0..m {
                assert_eq!(dense[[m + i, j]], r.get(j, i));
            }
        }
    }

    #[test]
    fn sym_normalize_unit_degrees_is_identity_map() {
        let a = SparseMatrix::from_pairs(2, 2, &[(0, 1), (1, 0)]).unwrap();
        let norm = a.sym_normalize().unwrap();
        assert_eq!(norm, a);
    }

    #[test]
    fn sym_normalize_path_graph_values() {
        // Path 0-1-2 has degrees (1, 2, 1); every edge gets 1/sqrt(2).
        let a = path_graph(3);
        let norm = a.sym_normalize().unwrap();
        let expect = 1.0 / 2.0f64.sqrt();
        for (_, _, v) in norm.iter() {
            assert!((v - expect).abs() < 1e-15);
        }
        assert_eq!(norm.nnz(), 4);
    }

    #[test]
    fn sym_normalize_isolated_node_stays_zero() {
        // Node 2 is isolated.
        let a = SparseMatrix::from_pairs(3, 3, &[(0, 1), (1, 0)]).unwrap();
        let norm = a.sym_normalize().unwrap();
        assert_eq!(norm.row_cols(2), &[] as &[usize]);
        for (_, c, _) in norm.iter() {
            assert_ne!(c, 2);
        }
    }

    #[test]
    fn spmm_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((4, 3), |_| rng.random::<f64>());
        let id = SparseMatrix::identity(4);
        assert_eq!(id.spmm(&x).unwrap(), x);
        let z = SparseMatrix::zeros(5, 4);
        assert_eq!(z.spmm(&x).unwrap(), Array2::<f64>::zeros((5, 3)));
    }

    #[test]
    fn spmm_matches_dense_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_sparse(&mut rng, 6, 6, 0.4);
        let x = Array2::from_shape_fn((6, 3), |_| rng.random::<f64>() - 0.5);
        let got = a.spmm(&x).unwrap();
        let want = a.to_dense().dot(&x);
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn spmm_shape_mismatch_errors() {
        let a = SparseMatrix::zeros(3, 4);
        assert!(a.spmm(&Array2::zeros((3, 2))).is_err());
    }

    #[test]
    fn bool_product_identity_preserves_pattern() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random_sparse(&mut rng, 5, 7, 0.3);
        let got = SparseMatrix::identity(5).bool_product(&b).unwrap();
        assert_eq!(got.to_dense(), b.to_dense());
    }

    #[test]
    fn bool_product_path_squared() {
        let a = path_graph(3);
        let sq = a.bool_product(&a).unwrap();
        let entries: Vec<_> = sq.iter().map(|(r, c, _)| (r, c)).collect();
        assert_eq!(entries, vec![(0, 0), (0, 2), (1, 1), (2, 0), (2, 2)]);
    }

    #[test]
    fn bool_product_empty_row_stays_empty() {
        let a = SparseMatrix::from_pairs(3, 3, &[(0, 1), (2, 1)]).unwrap();
        let b = SparseMatrix::from_pairs(3, 3, &[(1, 0), (1, 2)]).unwrap();
        let p = a.bool_product(&b).unwrap();
        assert!(p.row_cols(1).is_empty());
    }

    #[test]
    fn hadamard_mask_self_and_disjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_sparse(&mut rng, 6, 6, 0.3);
        assert_eq!(a.hadamard_mask(&a).unwrap().to_dense(), {
            let mut d = a.to_dense();
            d.mapv_inplace(|v| if v != 0.0 { 1.0 } else { 0.0 });
            d
        });
        let b = SparseMatrix::from_pairs(2, 2, &[(0, 0)]).unwrap();
        let c = SparseMatrix::from_pairs(2, 2, &[(1, 1)]).unwrap();
        assert_eq!(b.hadamard_mask(&c).unwrap().nnz(), 0);
    }

    #[test]
    fn exact_k_hop_distance_one_is_the_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_symmetric(&mut rng, 12, 0.25);
        assert_eq!(s.exact_k_hop(1).unwrap(), s);
    }

    #[test]
    fn exact_k_hop_path_and_triangle() {
        let p = path_graph(3);
        let two = p.exact_k_hop(2).unwrap();
        let entries: Vec<_> = two.iter().map(|(r, c, _)| (r, c)).collect();
        assert_eq!(entries, vec![(0, 2), (2, 0)]);

        let tri = SparseMatrix::from_pairs(3, 3, &[(0, 1), (1, 0), (0, 2), (2, 0), (1, 2), (2, 1)])
            .unwrap();
        assert_eq!(tri.exact_k_hop(2).unwrap().nnz(), 0);
    }

    #[test]
    fn exact_k_hop_rejects_zero() {
        assert!(path_graph(3).exact_k_hop(0).is_err());
    }

    #[test]
    fn exact_k_hop_matches_bfs_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let n = rng.random_range(2..25);
            let s = random_symmetric(&mut rng, n, 0.15);
            for k in 1..=4 {
                let got = s.exact_k_hop(k).unwrap();
                for src in 0..n {
                    let dist = bfs_distances(&s, src);
                    let want: Vec<usize> = (0..n).filter(|&v| dist[v] == k).collect();
                    assert_eq!(got.row_cols(src), &want[..], "n={n} k={k} src={src}");
                }
            }
        }
    }

    #[test]
    fn exact_k_hop_layers_partition_connected_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 15;
        let s = random_symmetric(&mut rng, n, 0.12);
        let mut covered = Array2::<f64>::zeros((n, n));
        for k in 1..n {
            let hop = s.exact_k_hop(k).unwrap();
            for (r, c, _) in hop.iter() {
                assert_eq!(covered[[r, c]], 0.0, "pair ({r},{c}) in two hop layers");
                covered[[r, c]] = 1.0;
            }
        }
        for src in 0..n {
            let dist = bfs_distances(&s, src);
            for v in 0..n {
                let expect = if v != src && dist[v] != usize::MAX {
                    1.0
                } else {
                    0.0
                };
                assert_eq!(covered[[src, v]], expect);
            }
        }
    }

    #[test]
    fn dataset_rejects_invalid_social_matrix() {
        let r = SparseMatrix::from_pairs(2, 2, &[(0, 0)]).unwrap();
        // Asymmetric S.
        let s = SparseMatrix::from_pairs(2, 2, &[(0, 1)]).unwrap();
        assert!(Dataset::new(2, 2, r.clone(), s).is_err());
        // Diagonal S.
        let s = SparseMatrix::from_pairs(2, 2, &[(0, 0)]).unwrap();
        assert!(Dataset::new(2, 2, r.clone(), s).is_err());
        // Non-binary R.
        let r2 = SparseMatrix::from_entries(2, 2, &[(0, 0, 2.0)]).unwrap();
        assert!(Dataset::new(2, 2, r2, SparseMatrix::zeros(2, 2)).is_err());
        // Shape mismatch.
        assert!(Dataset::new(3, 2, r, SparseMatrix::zeros(3, 3)).is_err());
    }

    proptest! {
        #[test]
        fn sym_normalize_symmetric_with_values_in_unit_interval(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..30);
            let a = random_symmetric(&mut rng, n, 0.3);
            let norm = a.sym_normalize().unwrap();
            prop_assert!(norm.is_symmetric());
            for (_, _, v) in norm.iter() {
                prop_assert!(v > 0.0 && v <= 1.0);
            }
        }

        #[test]
        fn bool_product_matches_dense_oracle(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (r, k, c) = (
                rng.random_range(1..50),
                rng.random_range(1..50),
                rng.random_range(1..50),
            );
            let a = random_sparse(&mut rng, r, k, 0.1);
            let b = random_sparse(&mut rng, k, c, 0.1);
            let got = a.bool_product(&b).unwrap().to_dense();
            let want = dense_bool_product(&a.to_dense(), &b.to_dense());
            prop_assert_eq!(got, want);
        }

        #[test]
        fn hadamard_mask_matches_dense_and(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (r, c) = (rng.random_range(1..50), rng.random_range(1..50));
            let a = random_sparse(&mut rng, r, c, 0.2);
            let b = random_sparse(&mut rng, r, c, 0.2);
            let got = a.hadamard_mask(&b).unwrap().to_dense();
            let mut want = Array2::zeros((r, c));
            let (da, db) = (a.to_dense(), b.to_dense());
            for i in 0..r {
                for j in 0..c {
                    if da[[i, j]] != 0.0 && db[[i, j]] != 0.0 {
                        want[[i, j]] = 1.0;
                    }
                }
            }
            prop_assert_eq!(got, want);
        }
    }
}
