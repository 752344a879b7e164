use rayon::prelude::*;

use super::DenseMatrix;

/// Compressed sparse row matrix of `f64` values.
///
/// Canonical form: within each row, column indices are strictly increasing;
/// there are no duplicate coordinates and no stored zeros. Every constructor
/// and every arithmetic operation returns a canonical matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Empty matrix of the given shape.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_ptr: vec![0; rows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Identity matrix of size `n`.
    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Build from (row, col, value) triplets. Duplicates are summed, exact
    /// zeros dropped, entries sorted row-major then by column.
    pub fn from_triplets<I>(rows: usize, cols: usize, triplets: I) -> Self
    where
        I: IntoIterator<Item = (usize, usize, f64)>,
    {
        let mut entries: Vec<(usize, usize, f64)> = triplets.into_iter().collect();
        for &(r, c, _) in &entries {
            assert!(r < rows && c < cols, "triplet ({r}, {c}) out of bounds for {rows}x{cols}");
        }
        entries.sort_unstable_by_key(|&(r, c, _)| (r, c));

        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        let mut iter = entries.into_iter().peekable();
        while let Some((r, c, mut v)) = iter.next() {
            while let Some(&(r2, c2, v2)) = iter.peek() {
                if r2 == r && c2 == c {
                    v += v2;
                    iter.next();
                } else {
                    break;
                }
            }
            if v != 0.0 {
                row_ptr[r + 1] += 1;
                col_idx.push(c);
                values.push(v);
            }
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self { rows, cols, row_ptr, col_idx, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
        (&self.col_idx[lo..hi], &self.values[lo..hi])
    }

    /// Value at (r, c), zero if not stored.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&c) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    /// Deterministic row-major entry iteration.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).map(move |(&c, &v)| (r, c, v))
        })
    }

    /// Sum of all stored values.
    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Per-row sums.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).1.iter().sum()).collect()
    }

    /// Sparse-sparse product.
    pub fn matmul(&self, other: &SparseMatrix) -> SparseMatrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul dimension mismatch: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        // Row-at-a-time SpGEMM with a dense accumulator over output columns.
        let per_row: Vec<(Vec<usize>, Vec<f64>)> = (0..self.rows)
            .into_par_iter()
            .map(|r| {
                let mut acc = vec![0.0f64; other.cols];
                let mut touched: Vec<usize> = Vec::new();
                let (acols, avals) = self.row(r);
                for (&k, &av) in acols.iter().zip(avals) {
                    let (bcols, bvals) = other.row(k);
                    for (&c, &bv) in bcols.iter().zip(bvals) {
                        if acc[c] == 0.0 {
                            touched.push(c);
                        }
                        acc[c] += av * bv;
                    }
                }
                touched.sort_unstable();
                let mut cols = Vec::with_capacity(touched.len());
                let mut vals = Vec::with_capacity(touched.len());
                for c in touched {
                    if acc[c] != 0.0 {
                        cols.push(c);
                        vals.push(acc[c]);
                    }
                }
                (cols, vals)
            })
            .collect();
        Self::from_row_chunks(self.rows, other.cols, per_row)
    }

    /// Elementwise product over intersecting nonzeros.
    pub fn hadamard(&self, other: &SparseMatrix) -> SparseMatrix {
        assert_eq!(
            (self.rows, self.cols),
            (other.rows, other.cols),
            "hadamard shape mismatch"
        );
        let per_row: Vec<(Vec<usize>, Vec<f64>)> = (0..self.rows)
            .map(|r| {
                let (ac, av) = self.row(r);
                let (bc, bv) = other.row(r);
                let mut cols = Vec::new();
                let mut vals = Vec::new();
                let (mut i, mut j) = (0, 0);
                while i < ac.len() && j < bc.len() {
                    match ac[i].cmp(&bc[j]) {
                        std::cmp::Ordering::Less => i += 1,
                        std::cmp::Ordering::Greater => j += 1,
                        std::cmp::Ordering::Equal => {
                            let v = av[i] * bv[j];
                            if v != 0.0 {
                                cols.push(ac[i]);
                                vals.push(v);
                            }
                            i += 1;
                            j += 1;
                        }
                    }
                }
                (cols, vals)
            })
            .collect();
        Self::from_row_chunks(self.rows, self.cols, per_row)
    }

    /// Elementwise sum.
    pub fn add(&self, other: &SparseMatrix) -> SparseMatrix {
        self.merge(other, 1.0)
    }

    /// True elementwise subtraction; negative results are kept.
    pub fn sub(&self, other: &SparseMatrix) -> SparseMatrix {
        self.merge(other, -1.0)
    }

    fn merge(&self, other: &SparseMatrix, sign: f64) -> SparseMatrix {
        assert_eq!(
            (self.rows, self.cols),
            (other.rows, other.cols),
            "add/sub shape mismatch"
        );
        let per_row: Vec<(Vec<usize>, Vec<f64>)> = (0..self.rows)
            .map(|r| {
                let (ac, av) = self.row(r);
                let (bc, bv) = other.row(r);
                let mut cols = Vec::new();
                let mut vals = Vec::new();
                let (mut i, mut j) = (0, 0);
                let mut push = |c: usize, v: f64| {
                    if v != 0.0 {
                        cols.push(c);
                        vals.push(v);
                    }
                };
                while i < ac.len() || j < bc.len() {
                    if j >= bc.len() || (i < ac.len() && ac[i] < bc[j]) {
                        push(ac[i], av[i]);
                        i += 1;
                    } else if i >= ac.len() || bc[j] < ac[i] {
                        push(bc[j], sign * bv[j]);
                        j += 1;
                    } else {
                        push(ac[i], av[i] + sign * bv[j]);
                        i += 1;
                        j += 1;
                    }
                }
                (cols, vals)
            })
            .collect();
        Self::from_row_chunks(self.rows, self.cols, per_row)
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.col_idx {
            counts[c + 1] += 1;
        }
        for c in 0..self.cols {
            counts[c + 1] += counts[c];
        }
        let row_ptr = counts.clone();
        let mut col_idx = vec![0usize; self.nnz()];
        let mut values = vec![0.0f64; self.nnz()];
        let mut next = counts;
        for (r, c, v) in self.iter() {
            let slot = next[c];
            col_idx[slot] = r;
            values[slot] = v;
            next[c] += 1;
        }
        SparseMatrix {
            rows: self.cols,
            cols: self.rows,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Sparse-dense product.
    pub fn dense_matmul(&self, x: &DenseMatrix) -> DenseMatrix {
        assert_eq!(
            self.cols,
            x.rows(),
            "dense_matmul dimension mismatch: {}x{} * {}x{}",
            self.rows,
            self.cols,
            x.rows(),
            x.cols()
        );
        let d = x.cols();
        let mut out = DenseMatrix::zeros(self.rows, d);
        out.par_rows_mut().enumerate().for_each(|(r, out_row)| {
            let (cols, vals) = self.row(r);
            for (&k, &v) in cols.iter().zip(vals) {
                let xrow = x.row(k);
                for j in 0..d {
                    out_row[j] += v * xrow[j];
                }
            }
        });
        out
    }

    /// Scale every nonzero row to sum to 1. Zero rows stay zero.
    ///
    /// Panics on negative entries: row-stochastic normalization over signed
    /// values has no meaning here.
    pub fn row_normalize(&self) -> SparseMatrix {
        assert!(
            self.values.iter().all(|&v| v >= 0.0),
            "row_normalize requires nonnegative entries"
        );
        let mut out = self.clone();
        for r in 0..self.rows {
            let (lo, hi) = (out.row_ptr[r], out.row_ptr[r + 1]);
            let total: f64 = out.values[lo..hi].iter().sum();
            if total > 0.0 {
                for v in &mut out.values[lo..hi] {
                    *v /= total;
                }
            }
        }
        out
    }

    /// Copy with the diagonal removed.
    pub fn zero_diagonal(&self) -> SparseMatrix {
        Self::from_triplets(
            self.rows,
            self.cols,
            self.iter().filter(|&(r, c, _)| r != c),
        )
    }

    /// Keep only entries with value >= `min`.
    pub fn threshold_min(&self, min: f64) -> SparseMatrix {
        Self::from_triplets(
            self.rows,
            self.cols,
            self.iter().filter(|&(_, _, v)| v >= min),
        )
    }

    /// Elementwise max(0, v): drops all entries <= 0.
    pub fn clamp_nonnegative(&self) -> SparseMatrix {
        Self::from_triplets(
            self.rows,
            self.cols,
            self.iter().filter(|&(_, _, v)| v > 0.0),
        )
    }

    /// Exact structural and value symmetry.
    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols && *self == self.transpose()
    }

    /// Dense copy, for small oracles and tests.
    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for (r, c, v) in self.iter() {
            out.set(r, c, v);
        }
        out
    }

    fn from_row_chunks(rows: usize, cols: usize, per_row: Vec<(Vec<usize>, Vec<f64>)>) -> Self {
        let nnz: usize = per_row.iter().map(|(c, _)| c.len()).sum();
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        row_ptr.push(0);
        for (cols_r, vals_r) in per_row {
            col_idx.extend_from_slice(&cols_r);
            values.extend_from_slice(&vals_r);
            row_ptr.push(col_idx.len());
        }
        Self { rows, cols, row_ptr, col_idx, values }
    }

    /// Internal canonical-form check, used by tests.
    pub fn is_canonical(&self) -> bool {
        if self.row_ptr.len() != self.rows + 1 || self.row_ptr[self.rows] != self.nnz() {
            return false;
        }
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return false;
            }
            if cols.iter().any(|&c| c >= self.cols) || vals.contains(&0.0) {
                return false;
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_sparse(rng: &mut StdRng, rows: usize, cols: usize, density: f64) -> SparseMatrix {
        let mut triplets = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                if rng.gen::<f64>() < density {
                    triplets.push((r, c, rng.gen_range(-2.0..2.0)));
                }
            }
        }
        SparseMatrix::from_triplets(rows, cols, triplets)
    }

    fn dense_matmul_oracle(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_gives_same_matrix() {
        let mut rng = StdRng::seed_from_u64(1);
        let a = random_sparse(&mut rng, 3, 3, 0.5);
        assert_eq!(SparseMatrix::identity(3).matmul(&a), a);
        assert_eq!(a.matmul(&SparseMatrix::identity(3)), a);
    }

    #[test]
    fn matmul_zero_gives_zero() {
        let z = SparseMatrix::zeros(2, 2);
        assert_eq!(z.matmul(&z).nnz(), 0);
    }

    #[test]
    fn matmul_matches_dense_oracle() {
        let mut rng = StdRng::seed_from_u64(2);
        for _ in 0..20 {
            let a = random_sparse(&mut rng, 20, 20, 0.2);
            let b = random_sparse(&mut rng, 20, 20, 0.2);
            let got = a.matmul(&b).to_dense();
            let want = dense_matmul_oracle(&a.to_dense(), &b.to_dense());
            assert!(got.max_abs_diff(&want) < 1e-12);
            assert!(a.matmul(&b).is_canonical());
        }
    }

    #[test]
    fn hadamard_ones_and_zeros() {
        let mut rng = StdRng::seed_from_u64(3);
        let a = random_sparse(&mut rng, 4, 5, 0.4);
        let ones = SparseMatrix::from_triplets(
            4,
            5,
            (0..4).flat_map(|r| (0..5).map(move |c| (r, c, 1.0))),
        );
        assert_eq!(a.hadamard(&ones), a);
        assert_eq!(a.hadamard(&SparseMatrix::zeros(4, 5)).nnz(), 0);
    }

    #[test]
    fn hadamard_matches_dense_oracle() {
        let mut rng = StdRng::seed_from_u64(4);
        for _ in 0..20 {
            let a = random_sparse(&mut rng, 15, 12, 0.3);
            let b = random_sparse(&mut rng, 15, 12, 0.3);
            let got = a.hadamard(&b).to_dense();
            let mut want = DenseMatrix::zeros(15, 12);
            for i in 0..15 {
                for j in 0..12 {
                    want.set(i, j, a.get(i, j) * b.get(i, j));
                }
            }
            assert!(got.max_abs_diff(&want) < 1e-15);
        }
    }

    #[test]
    fn add_sub_transpose_basics() {
        let c = SparseMatrix::from_triplets(3, 3, vec![(0, 1, 1.0), (0, 2, 2.0), (1, 2, 3.0)]);
        let sym = c.add(&c.transpose());
        assert!(sym.is_symmetric());
        let mut rng = StdRng::seed_from_u64(5);
        let a = random_sparse(&mut rng, 6, 6, 0.4);
        assert_eq!(a.sub(&a).nnz(), 0);
        assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn add_matches_dense_oracle() {
        let mut rng = StdRng::seed_from_u64(6);
        for _ in 0..20 {
            let a = random_sparse(&mut rng, 10, 10, 0.3);
            let b = random_sparse(&mut rng, 10, 10, 0.3);
            let got = a.add(&b).to_dense();
            let mut want = DenseMatrix::zeros(10, 10);
            for i in 0..10 {
                for j in 0..10 {
                    want.set(i, j, a.get(i, j) + b.get(i, j));
                }
            }
            assert!(got.max_abs_diff(&want) < 1e-15);
            assert!(a.add(&b).is_canonical());
        }
    }

    #[test]
    fn dense_matmul_identity_and_zero_rows() {
        let x = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let id = SparseMatrix::identity(3);
        assert_eq!(id.dense_matmul(&x), x);
        let one_row = SparseMatrix::from_triplets(2, 3, vec![(0, 1, 1.0)]);
        let y = one_row.dense_matmul(&x);
        assert_eq!(y.row(0), &[3.0, 4.0]);
        assert_eq!(y.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn dense_matmul_matches_oracle() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..10 {
            let a = random_sparse(&mut rng, 12, 9, 0.3);
            let x = DenseMatrix::from_fn(9, 4, |_, _| rng.gen_range(-1.0..1.0));
            let got = a.dense_matmul(&x);
            let want = dense_matmul_oracle(&a.to_dense(), &x);
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn row_normalize_basics() {
        let a = SparseMatrix::from_triplets(2, 3, vec![(0, 0, 2.0), (0, 1, 2.0)]);
        let n = a.row_normalize();
        assert_eq!(n.get(0, 0), 0.5);
        assert_eq!(n.get(0, 1), 0.5);
        // zero row stays a zero row
        assert_eq!(n.row(1).0.len(), 0);
    }

    #[test]
    fn row_normalize_sums_and_idempotence() {
        let mut rng = StdRng::seed_from_u64(8);
        let mut triplets = Vec::new();
        for r in 0..20 {
            for c in 0..20 {
                if rng.gen::<f64>() < 0.25 {
                    triplets.push((r, c, rng.gen_range(0.1..5.0)));
                }
            }
        }
        let a = SparseMatrix::from_triplets(20, 20, triplets);
        let n = a.row_normalize();
        for s in n.row_sums() {
            assert!(s == 0.0 || (s - 1.0).abs() < 1e-12);
        }
        let n2 = n.row_normalize();
        assert!(n.to_dense().max_abs_diff(&n2.to_dense()) < 1e-12);
    }

    #[test]
    #[should_panic(expected = "nonnegative")]
    fn row_normalize_rejects_negative_entries() {
        SparseMatrix::from_triplets(1, 2, vec![(0, 0, -1.0)]).row_normalize();
    }

    #[test]
    #[should_panic(expected = "dimension mismatch")]
    fn matmul_rejects_dimension_mismatch() {
        let a = SparseMatrix::zeros(2, 3);
        let b = SparseMatrix::zeros(2, 3);
        a.matmul(&b);
    }

    #[test]
    fn product_associativity() {
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..10 {
            let a = random_sparse(&mut rng, 8, 10, 0.3);
            let b = random_sparse(&mut rng, 10, 7, 0.3);
            let x = DenseMatrix::from_fn(7, 3, |_, _| rng.gen_range(-1.0..1.0));
            let left = a.matmul(&b).dense_matmul(&x);
            let right = a.dense_matmul(&b.dense_matmul(&x));
            assert!(left.max_abs_diff(&right) < 1e-10);
        }
    }

    #[test]
    fn triplet_construction_canonicalizes() {
        let a = SparseMatrix::from_triplets(
            2,
            2,
            vec![(1, 1, 2.0), (0, 0, 1.0), (1, 1, -2.0), (0, 1, 3.0)],
        );
        // (1,1) summed to zero and dropped
        assert_eq!(a.nnz(), 2);
        assert!(a.is_canonical());
        assert_eq!(a.get(1, 1), 0.0);
    }
}
