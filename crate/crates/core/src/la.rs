//! Dense and sparse linear-algebra kernels shared by the memory, controller
//! and linkage modules.
//!
//! Everything is `f64`. Sparse vectors keep their entries sorted by index so
//! that iteration order, and therefore floating-point summation order, is
//! reproducible run to run.

use crate::error::{check_dim, Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    row_writes: u64,
}

impl PartialEq for DenseMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols && self.data == other.data
    }
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            row_writes: 0,
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dim("DenseMatrix::from_vec", rows * cols, data.len())?;
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {pos}")));
        }
        Ok(DenseMatrix {
            rows,
            cols,
            data,
            row_writes: 0,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dim("DenseMatrix::from_rows", cols, r.len())?;
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// Overwrites row `i` and counts it as one row write.
    pub fn set_row(&mut self, i: usize, values: &[f64]) -> Result<()> {
        self.check_row(i)?;
        check_dim("DenseMatrix::set_row", self.cols, values.len())?;
        self.row_mut(i).copy_from_slice(values);
        self.row_writes += 1;
        Ok(())
    }

    /// Number of row mutations performed through the sparse kernels.
    pub fn row_writes(&self) -> u64 {
        self.row_writes
    }

    /// Dense matrix-vector product `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("DenseMatrix::matvec", self.cols, x.len())?;
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// Transposed product `selfᵀ · y`.
    pub fn matvec_t(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_dim("DenseMatrix::matvec_t", self.rows, y.len())?;
        let mut out = vec![0.0; self.cols];
        for (i, &yi) in y.iter().enumerate() {
            if yi != 0.0 {
                axpy(yi, self.row(i), &mut out);
            }
        }
        Ok(out)
    }

    fn check_row(&self, i: usize) -> Result<()> {
        if i >= self.rows {
            return Err(Error::IndexOutOfRange {
                context: "DenseMatrix row",
                index: i,
                len: self.rows,
            });
        }
        Ok(())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out += W x` for a row-major `rows × cols` slice `w`.
pub fn gemv_acc(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    for (r, o) in out.iter_mut().enumerate() {
        *o += dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// `out += Wᵀ y` for a row-major `rows × cols` slice `w`.
pub fn gemv_t_acc(w: &[f64], rows: usize, cols: usize, y: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(y.len(), rows);
    debug_assert_eq!(out.len(), cols);
    for (r, &yr) in y.iter().enumerate() {
        if yr != 0.0 {
            axpy(yr, &w[r * cols..(r + 1) * cols], out);
        }
    }
}

/// `g += y xᵀ` for a row-major `len(y) × len(x)` slice `g`.
pub fn ger_acc(g: &mut [f64], y: &[f64], x: &[f64]) {
    let cols = x.len();
    debug_assert_eq!(g.len(), y.len() * cols);
    for (r, &yr) in y.iter().enumerate() {
        if yr != 0.0 {
            axpy(yr, x, &mut g[r * cols..(r + 1) * cols]);
        }
    }
}

/// K-sparse vector: sorted `(index, value)` pairs with no stored zeros.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseVector {
    dim: usize,
    entries: Vec<(usize, f64)>,
}

impl SparseVector {
    pub fn new(dim: usize) -> Self {
        SparseVector {
            dim,
            entries: Vec::new(),
        }
    }

    pub fn one_hot(dim: usize, index: usize, value: f64) -> Result<Self> {
        Self::from_pairs(dim, vec![(index, value)])
    }

    /// Builds a sparse vector from unordered pairs. Duplicate indices are
    /// summed; entries that are exactly zero afterwards are dropped.
    pub fn from_pairs(dim: usize, mut pairs: Vec<(usize, f64)>) -> Result<Self> {
        for &(i, v) in &pairs {
            if i >= dim {
                return Err(Error::IndexOutOfRange {
                    context: "SparseVector",
                    index: i,
                    len: dim,
                });
            }
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("sparse entry {i}")));
            }
        }
        pairs.sort_by_key(|&(i, _)| i);
        let mut entries: Vec<(usize, f64)> = Vec::with_capacity(pairs.len());
        for (i, v) in pairs {
            match entries.last_mut() {
                Some(last) if last.0 == i => last.1 += v,
                _ => entries.push((i, v)),
            }
        }
        entries.retain(|&(_, v)| v != 0.0);
        Ok(SparseVector { dim, entries })
    }

    /// Keeps every entry of a dense slice that is not exactly zero.
    pub fn from_dense(values: &[f64]) -> Self {
        SparseVector {
            dim: values.len(),
            entries: values
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i, *v))
                .collect(),
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    #[inline]
    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|&(i, _)| i)
    }

    pub fn get(&self, index: usize) -> f64 {
        match self.entries.binary_search_by_key(&index, |&(i, _)| i) {
            Ok(pos) => self.entries[pos].1,
            Err(_) => 0.0,
        }
    }

    pub fn sum(&self) -> f64 {
        self.entries.iter().map(|&(_, v)| v).sum()
    }

    pub fn densify(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &(i, v) in &self.entries {
            out[i] = v;
        }
        out
    }

    pub fn scaled(&self, s: f64) -> SparseVector {
        let mut entries: Vec<(usize, f64)> =
            self.entries.iter().map(|&(i, v)| (i, v * s)).collect();
        entries.retain(|&(_, v)| v != 0.0);
        SparseVector {
            dim: self.dim,
            entries,
        }
    }

    /// `self + s * other`, merged in index order.
    pub fn add_scaled(&self, other: &SparseVector, s: f64) -> Result<SparseVector> {
        check_dim("SparseVector::add_scaled", self.dim, other.dim)?;
        let (a, b) = (&self.entries, &other.entries);
        let mut out = Vec::with_capacity(a.len() + b.len());
        let (mut x, mut y) = (0, 0);
        while x < a.len() || y < b.len() {
            let take_a = y >= b.len() || (x < a.len() && a[x].0 < b[y].0);
            let take_b = x >= a.len() || (y < b.len() && b[y].0 < a[x].0);
            if take_a {
                out.push(a[x]);
                x += 1;
            } else if take_b {
                out.push((b[y].0, s * b[y].1));
                y += 1;
            } else {
                out.push((a[x].0, a[x].1 + s * b[y].1));
                x += 1;
                y += 1;
            }
        }
        out.retain(|&(_, v)| v != 0.0);
        Ok(SparseVector {
            dim: self.dim,
            entries: out,
        })
    }

    /// Keeps the `k` largest values; ties go to the lower index.
    pub fn top_k(&self, k: usize) -> SparseVector {
        if self.entries.len() <= k {
            return self.clone();
        }
        let mut order: Vec<(usize, f64)> = self.entries.clone();
        order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        order.truncate(k);
        order.sort_by_key(|&(i, _)| i);
        SparseVector {
            dim: self.dim,
            entries: order,
        }
    }

    /// Divides by the entry sum when it is positive.
    pub fn normalized(&self) -> SparseVector {
        let s = self.sum();
        if s > 0.0 {
            self.scaled(1.0 / s)
        } else {
            self.clone()
        }
    }

    pub fn check_capacity(&self, capacity: usize) -> Result<()> {
        if self.nnz() > capacity {
            return Err(Error::Contract(format!(
                "sparse vector holds {} entries, capacity {capacity}",
                self.nnz()
            )));
        }
        Ok(())
    }

    /// Heap bytes used by the entries.
    pub fn payload_bytes(&self) -> usize {
        self.entries.len() * std::mem::size_of::<(usize, f64)>()
    }
}

/// Returns `Σ_i w(i) · M(i)` touching only the nonzero rows of `w`.
pub fn sparse_weighted_sum(w: &SparseVector, m: &DenseMatrix) -> Result<Vec<f64>> {
    check_dim("sparse_weighted_sum", m.rows(), w.dim())?;
    let mut out = vec![0.0; m.cols()];
    for &(i, v) in w.entries() {
        axpy(v, m.row(i), &mut out);
    }
    Ok(out)
}

/// `M(i) += sign · w(i) · a` for every nonzero `i`. Returns the touched rows.
pub fn sparse_outer_add(
    m: &mut DenseMatrix,
    w: &SparseVector,
    a: &[f64],
    sign: f64,
) -> Result<Vec<usize>> {
    check_dim("sparse_outer_add rows", m.rows(), w.dim())?;
    check_dim("sparse_outer_add cols", m.cols(), a.len())?;
    if sign != 1.0 && sign != -1.0 {
        return Err(Error::Contract(format!("sign must be ±1, got {sign}")));
    }
    let mut touched = Vec::with_capacity(w.nnz());
    for &(i, v) in w.entries() {
        axpy(sign * v, a, m.row_mut(i));
        m.row_writes += 1;
        touched.push(i);
    }
    Ok(touched)
}

/// Zeroes row `i`, returning its previous contents.
pub fn row_zero(m: &mut DenseMatrix, i: usize) -> Result<Vec<f64>> {
    m.check_row(i)?;
    let old = m.row(i).to_vec();
    m.row_mut(i).fill(0.0);
    m.row_writes += 1;
    Ok(old)
}

/// Compressed-sparse-row matrix with a fixed per-row capacity.
///
/// Row `i` owns the slice `offsets[i]..offsets[i] + capacity` of the
/// column/value arrays, of which the first `lens[i]` entries are live. This
/// keeps row replacement O(capacity) regardless of the number of rows.
#[derive(Debug, Clone)]
pub struct SparseRowMatrix {
    rows: usize,
    cols: usize,
    capacity: usize,
    offsets: Vec<usize>,
    lens: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

/// Equality over live entries only; stale storage past a row's length is
/// ignored.
impl PartialEq for SparseRowMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.capacity == other.capacity
            && (0..self.rows).all(|i| self.row(i) == other.row(i))
    }
}

impl SparseRowMatrix {
    pub fn new(rows: usize, cols: usize, row_capacity: usize) -> Self {
        SparseRowMatrix {
            rows,
            cols,
            capacity: row_capacity,
            offsets: (0..=rows).map(|i| i * row_capacity).collect(),
            lens: vec![0; rows],
            col_indices: vec![0; rows * row_capacity],
            values: vec![0.0; rows * row_capacity],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row_capacity(&self) -> usize {
        self.capacity
    }

    pub fn row_nnz(&self, i: usize) -> usize {
        self.lens[i]
    }

    pub fn nnz(&self) -> usize {
        self.lens.iter().sum()
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let start = self.offsets[i];
        let end = start + self.lens[i];
        (&self.col_indices[start..end], &self.values[start..end])
    }

    pub fn row_entries(&self, i: usize) -> Vec<(usize, f64)> {
        let (c, v) = self.row(i);
        c.iter().copied().zip(v.iter().copied()).collect()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (c, v) = self.row(i);
        match c.binary_search(&j) {
            Ok(p) => v[p],
            Err(_) => 0.0,
        }
    }

    /// Replaces row `i`. Entries must be sorted by strictly increasing column
    /// and contain no zeros.
    pub fn set_row(&mut self, i: usize, entries: &[(usize, f64)]) -> Result<()> {
        if i >= self.rows {
            return Err(Error::IndexOutOfRange {
                context: "SparseRowMatrix row",
                index: i,
                len: self.rows,
            });
        }
        if entries.len() > self.capacity {
            return Err(Error::Contract(format!(
                "row {i} given {} entries, capacity {}",
                entries.len(),
                self.capacity
            )));
        }
        for (n, &(j, v)) in entries.iter().enumerate() {
            if j >= self.cols {
                return Err(Error::IndexOutOfRange {
                    context: "SparseRowMatrix column",
                    index: j,
                    len: self.cols,
                });
            }
            if n > 0 && entries[n - 1].0 >= j {
                return Err(Error::Contract(format!(
                    "row {i} columns not strictly increasing"
                )));
            }
            if v == 0.0 {
                return Err(Error::Contract(format!("row {i} stores an explicit zero")));
            }
        }
        let start = self.offsets[i];
        for (n, &(j, v)) in entries.iter().enumerate() {
            self.col_indices[start + n] = j;
            self.values[start + n] = v;
        }
        self.lens[i] = entries.len();
        Ok(())
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            let (c, v) = self.row(i);
            for (&j, &x) in c.iter().zip(v) {
                d.set(i, j, x);
            }
        }
        d
    }

    /// Verifies ordering, capacity and no-explicit-zero invariants.
    pub fn check_invariants(&self) -> Result<()> {
        for i in 0..self.rows {
            if self.lens[i] > self.capacity {
                return Err(Error::Contract(format!("row {i} exceeds capacity")));
            }
            let (c, v) = self.row(i);
            if c.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Contract(format!("row {i} unsorted")));
            }
            if c.iter().any(|&j| j >= self.cols) || v.contains(&0.0) {
                return Err(Error::Contract(format!("row {i} malformed")));
            }
        }
        Ok(())
    }

    /// Heap bytes of the storage arrays.
    pub fn payload_bytes(&self) -> usize {
        self.offsets.len() * 8 + self.lens.len() * 8 + self.col_indices.len() * 8 + self.values.len() * 8
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        DenseMatrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn weighted_sum_one_hot_copies_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_matrix(&mut rng, 8, 5);
        let w = SparseVector::one_hot(8, 3, 1.0).unwrap();
        assert_eq!(sparse_weighted_sum(&w, &m).unwrap(), m.row(3));
    }

    #[test]
    fn weighted_sum_symmetric_pair() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let w = SparseVector::from_pairs(2, vec![(0, 0.5), (1, 0.5)]).unwrap();
        assert_eq!(sparse_weighted_sum(&w, &m).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn weighted_sum_matches_dense_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let m = random_matrix(&mut rng, 32, 8);
            let pairs: Vec<(usize, f64)> = (0..4)
                .map(|_| (rng.random_range(0..32), rng.random_range(0.0..1.0)))
                .collect();
            let w = SparseVector::from_pairs(32, pairs).unwrap();
            // r = Mᵀ w with w densified
            let dense_w = w.densify();
            let mut oracle = vec![0.0; 8];
            for i in 0..32 {
                for j in 0..8 {
                    oracle[j] += dense_w[i] * m.get(i, j);
                }
            }
            let got = sparse_weighted_sum(&w, &m).unwrap();
            for j in 0..8 {
                assert!((got[j] - oracle[j]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn weighted_sum_dimension_mismatch() {
        let m = DenseMatrix::zeros(4, 2);
        let w = SparseVector::new(5);
        assert!(matches!(
            sparse_weighted_sum(&w, &m),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn outer_add_empty_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = random_matrix(&mut rng, 6, 3);
        let before = m.clone();
        let touched = sparse_outer_add(&mut m, &SparseVector::new(6), &[1.0, 2.0, 3.0], 1.0).unwrap();
        assert!(touched.is_empty());
        assert_eq!(m, before);
        assert_eq!(m.row_writes(), 0);
    }

    #[test]
    fn outer_add_inverse_pair_exact_values() {
        // Dyadic values so that subtract-then-add is exact in binary floating point.
        let mut m = DenseMatrix::from_rows(&[vec![0.5, 1.25], vec![2.0, -3.5]]).unwrap();
        let before = m.clone();
        let w = SparseVector::one_hot(2, 1, 1.0).unwrap();
        let a = [0.75, 4.0];
        sparse_outer_add(&mut m, &w, &a, -1.0).unwrap();
        sparse_outer_add(&mut m, &w, &a, 1.0).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn outer_add_matches_dense_rank_one_and_counts_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut m = random_matrix(&mut rng, 16, 4);
        let mut oracle = m.clone();
        let w = SparseVector::from_pairs(16, vec![(2, 0.3), (9, -0.7), (15, 1.1)]).unwrap();
        let a: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dw = w.densify();
        for i in 0..16 {
            for j in 0..4 {
                let v = oracle.get(i, j) + dw[i] * a[j];
                oracle.set(i, j, v);
            }
        }
        let untouched_before: Vec<Vec<f64>> = (0..16).map(|i| m.row(i).to_vec()).collect();
        let touched = sparse_outer_add(&mut m, &w, &a, 1.0).unwrap();
        assert_eq!(touched, vec![2, 9, 15]);
        assert_eq!(m.row_writes(), 3);
        for i in 0..16 {
            if !touched.contains(&i) {
                assert_eq!(m.row(i), untouched_before[i].as_slice());
            }
            for j in 0..4 {
                assert!((m.get(i, j) - oracle.get(i, j)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn row_zero_returns_previous() {
        let mut m = DenseMatrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(row_zero(&mut m, 0).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(m.row(0), &[0.0, 0.0, 0.0]);
        assert_eq!(row_zero(&mut m, 1).unwrap(), vec![0.0, 0.0, 0.0]);
        assert!(matches!(row_zero(&mut m, 2), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn row_zero_then_add_restores_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = random_matrix(&mut rng, 5, 7);
        let before = m.clone();
        let old = row_zero(&mut m, 2).unwrap();
        sparse_outer_add(&mut m, &SparseVector::one_hot(5, 2, 1.0).unwrap(), &old, 1.0).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn from_pairs_merges_and_drops_zeros() {
        let v = SparseVector::from_pairs(10, vec![(4, 1.0), (1, 2.0), (4, -1.0), (7, 0.0)]).unwrap();
        assert_eq!(v.entries(), &[(1, 2.0)]);
        assert!(SparseVector::from_pairs(3, vec![(3, 1.0)]).is_err());
    }

    #[test]
    fn top_k_breaks_ties_by_lower_index() {
        let v = SparseVector::from_pairs(6, vec![(5, 0.2), (1, 0.2), (3, 0.5), (0, 0.1)]).unwrap();
        assert_eq!(v.top_k(2).entries(), &[(1, 0.2), (3, 0.5)]);
    }

    #[test]
    fn csr_rejects_bad_rows() {
        let mut s = SparseRowMatrix::new(3, 3, 2);
        assert!(s.set_row(0, &[(1, 1.0), (0, 1.0)]).is_err());
        assert!(s.set_row(0, &[(0, 1.0), (1, 1.0), (2, 1.0)]).is_err());
        assert!(s.set_row(0, &[(0, 0.0)]).is_err());
        s.set_row(2, &[(0, 0.5), (2, 0.25)]).unwrap();
        assert_eq!(s.get(2, 2), 0.25);
        assert_eq!(s.nnz(), 2);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn op_strategy() -> impl Strategy<Value = (usize, Vec<(usize, f64)>, usize)> {
            (
                0usize..12,
                prop::collection::vec((0usize..20, -2.0f64..2.0), 0..10),
                0usize..6,
            )
        }

        proptest! {
            #[test]
            fn csr_invariants_hold_under_insert_truncate(ops in prop::collection::vec(op_strategy(), 1..40)) {
                let mut s = SparseRowMatrix::new(12, 20, 5);
                for (row, pairs, keep) in ops {
                    let merged = SparseVector::from_pairs(20, pairs).unwrap();
                    let mut current = SparseVector::from_pairs(20, s.row_entries(row)).unwrap();
                    current = current.add_scaled(&merged, 1.0).unwrap();
                    let kept = current.top_k(keep.min(5));
                    s.set_row(row, kept.entries()).unwrap();
                    prop_assert!(s.check_invariants().is_ok());
                    prop_assert!(s.row_nnz(row) <= keep.min(5));
                }
            }

            #[test]
            fn sparse_vector_sorted_no_zeros(pairs in prop::collection::vec((0usize..50, -1.0f64..1.0), 0..30)) {
                let v = SparseVector::from_pairs(50, pairs).unwrap();
                prop_assert!(v.entries().windows(2).all(|w| w[0].0 < w[1].0));
                prop_assert!(v.entries().iter().all(|&(_, x)| x != 0.0));
            }
        }
    }
}
