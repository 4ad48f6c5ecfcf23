//! Sparse Cholesky factorization `P Q Pᵀ = L Lᵀ` with a fill-reducing
//! ordering, triangular solves, and selected inversion on the pattern of `L`.
//!
//! The symbolic analysis depends only on the sparsity pattern of `Q` and is
//! shared between factorizations of matrices with identical patterns.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;

/// Ordering, elimination tree and pattern of `L` for one sparsity pattern.
#[derive(Debug)]
pub struct SymbolicCholesky {
    n: usize,
    /// `perm[new] = old`
    perm: Vec<usize>,
    /// `iperm[old] = new`
    iperm: Vec<usize>,
    parent: Vec<Option<usize>>,
    // upper triangle of P A Pᵀ
    c_col_ptr: Vec<usize>,
    c_row_idx: Vec<usize>,
    // for every stored entry of A, its slot in C (None for the dropped lower half)
    a_to_c: Vec<Option<usize>>,
    a_col_ptr: Vec<usize>,
    a_row_idx: Vec<usize>,
    l_col_ptr: Vec<usize>,
}

impl SymbolicCholesky {
    /// Analyzes a symmetric matrix stored with both triangles.
    pub fn analyze(a: &SparseMatrix) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Shape(format!("Cholesky needs a square matrix, got {}x{}", n, a.ncols())));
        }
        let perm = fill_reducing_order(a);
        let mut iperm = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }

        // pattern of the permuted upper triangle
        let mut counts = vec![0usize; n + 1];
        for c in 0..n {
            for (r, _) in a.col(c) {
                let (i, j) = (iperm[r], iperm[c]);
                if i <= j {
                    counts[j + 1] += 1;
                }
            }
        }
        for j in 0..n {
            counts[j + 1] += counts[j];
        }
        let c_col_ptr = counts.clone();
        let mut next = counts;
        let mut c_row_idx = vec![0usize; c_col_ptr[n]];
        let mut a_to_c = vec![None; a.nnz()];
        let mut slot_of = Vec::with_capacity(a.nnz());
        for c in 0..n {
            for k in a.col_ptr()[c]..a.col_ptr()[c + 1] {
                let r = a.row_idx()[k];
                let (i, j) = (iperm[r], iperm[c]);
                if i <= j {
                    let s = next[j];
                    c_row_idx[s] = i;
                    next[j] += 1;
                    slot_of.push((k, s));
                }
            }
        }
        // sort rows within each column of C and remap slots
        let mut remap = vec![0usize; c_row_idx.len()];
        for j in 0..n {
            let range = c_col_ptr[j]..c_col_ptr[j + 1];
            let mut idx: Vec<usize> = range.clone().collect();
            idx.sort_unstable_by_key(|&s| c_row_idx[s]);
            let sorted: Vec<usize> = idx.iter().map(|&s| c_row_idx[s]).collect();
            for (offset, &s) in idx.iter().enumerate() {
                remap[s] = range.start + offset;
            }
            c_row_idx[range].copy_from_slice(&sorted);
        }
        for (k, s) in slot_of {
            a_to_c[k] = Some(remap[s]);
        }

        let parent = etree(n, &c_col_ptr, &c_row_idx);
        let col_counts = column_counts(n, &c_col_ptr, &c_row_idx, &parent);
        let mut l_col_ptr = vec![0usize; n + 1];
        for j in 0..n {
            l_col_ptr[j + 1] = l_col_ptr[j] + col_counts[j];
        }
        Ok(Self {
            n,
            perm,
            iperm,
            parent,
            c_col_ptr,
            c_row_idx,
            a_to_c,
            a_col_ptr: a.col_ptr().to_vec(),
            a_row_idx: a.row_idx().to_vec(),
            l_col_ptr,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz_l(&self) -> usize {
        self.l_col_ptr[self.n]
    }

    /// `perm[new] = old`
    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn matches_pattern(&self, a: &SparseMatrix) -> bool {
        a.nrows() == self.n && a.col_ptr() == self.a_col_ptr.as_slice() && a.row_idx() == self.a_row_idx.as_slice()
    }
}

fn fill_reducing_order(a: &SparseMatrix) -> Vec<usize> {
    let n = a.nrows();
    if n == 0 {
        return Vec::new();
    }
    match amd::order::<usize>(n, a.col_ptr(), a.row_idx(), &amd::Control::default()) {
        Ok((p, _, _)) if p.len() == n => p,
        _ => (0..n).collect(),
    }
}

fn etree(n: usize, col_ptr: &[usize], row_idx: &[usize]) -> Vec<Option<usize>> {
    let mut parent = vec![None; n];
    let mut ancestor: Vec<Option<usize>> = vec![None; n];
    for k in 0..n {
        for &r in &row_idx[col_ptr[k]..col_ptr[k + 1]] {
            let mut i = r;
            while i < k {
                let next = ancestor[i];
                ancestor[i] = Some(k);
                match next {
                    None => {
                        parent[i] = Some(k);
                        break;
                    }
                    Some(nx) => i = nx,
                }
            }
        }
    }
    parent
}

/// Pattern of row `k` of `L` (excluding the diagonal) via the elimination
/// tree; written into `stack[top..n]` in topological order.
fn ereach(
    k: usize,
    col_ptr: &[usize],
    row_idx: &[usize],
    parent: &[Option<usize>],
    stack: &mut [usize],
    mark: &mut [usize],
) -> usize {
    let n = stack.len();
    let mut top = n;
    mark[k] = k;
    for &r in &row_idx[col_ptr[k]..col_ptr[k + 1]] {
        let mut i = r;
        if i > k {
            continue;
        }
        let mut len = 0;
        while mark[i] != k {
            stack[len] = i;
            len += 1;
            mark[i] = k;
            i = match parent[i] {
                Some(p) => p,
                None => break,
            };
        }
        while len > 0 {
            len -= 1;
            top -= 1;
            stack[top] = stack[len];
        }
    }
    top
}

fn column_counts(n: usize, col_ptr: &[usize], row_idx: &[usize], parent: &[Option<usize>]) -> Vec<usize> {
    let mut counts = vec![1usize; n];
    let mut stack = vec![0usize; n];
    let mut mark = vec![usize::MAX; n];
    for k in 0..n {
        let top = ereach(k, col_ptr, row_idx, parent, &mut stack, &mut mark);
        for &i in &stack[top..] {
            counts[i] += 1;
        }
    }
    counts
}

/// Numeric factor `P Q Pᵀ = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    symbolic: Arc<SymbolicCholesky>,
    l_row_idx: Vec<usize>,
    l_values: Vec<f64>,
    logdet: f64,
}

impl CholeskyFactor {
    /// Analyzes and factorizes `a`.
    pub fn new(a: &SparseMatrix) -> Result<Self> {
        let sym = Arc::new(SymbolicCholesky::analyze(a)?);
        Self::with_symbolic(sym, a)
    }

    /// Factorizes `a` reusing an analysis of the same sparsity pattern.
    pub fn with_symbolic(symbolic: Arc<SymbolicCholesky>, a: &SparseMatrix) -> Result<Self> {
        if !symbolic.matches_pattern(a) {
            return Err(Error::Shape("matrix pattern differs from the symbolic analysis".into()));
        }
        let s = &*symbolic;
        let n = s.n;
        let mut c_values = vec![0.0; s.c_row_idx.len()];
        for (k, slot) in s.a_to_c.iter().enumerate() {
            if let Some(slot) = slot {
                c_values[*slot] = a.values()[k];
            }
        }

        let nnz = s.nnz_l();
        let mut l_row_idx = vec![0usize; nnz];
        let mut l_values = vec![0.0; nnz];
        let mut fill: Vec<usize> = s.l_col_ptr[..n].to_vec();
        let mut x = vec![0.0; n];
        let mut stack = vec![0usize; n];
        let mut mark = vec![usize::MAX; n];
        let mut logdet = 0.0;
        for k in 0..n {
            let top = ereach(k, &s.c_col_ptr, &s.c_row_idx, &s.parent, &mut stack, &mut mark);
            x[k] = 0.0;
            for p in s.c_col_ptr[k]..s.c_col_ptr[k + 1] {
                let i = s.c_row_idx[p];
                if i <= k {
                    x[i] = c_values[p];
                }
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &stack[top..] {
                let lki = x[i] / l_values[s.l_col_ptr[i]];
                x[i] = 0.0;
                for p in (s.l_col_ptr[i] + 1)..fill[i] {
                    x[l_row_idx[p]] -= l_values[p] * lki;
                }
                d -= lki * lki;
                let p = fill[i];
                fill[i] += 1;
                l_row_idx[p] = k;
                l_values[p] = lki;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Indefinite {
                    pivot: s.perm[k],
                    value: d,
                });
            }
            let p = fill[k];
            fill[k] += 1;
            l_row_idx[p] = k;
            let lkk = d.sqrt();
            l_values[p] = lkk;
            logdet += 2.0 * lkk.ln();
        }
        Ok(Self {
            symbolic,
            l_row_idx,
            l_values,
            logdet,
        })
    }

    pub fn symbolic(&self) -> &Arc<SymbolicCholesky> {
        &self.symbolic
    }

    pub fn dim(&self) -> usize {
        self.symbolic.n
    }

    /// `log |Q|`
    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    pub fn permutation(&self) -> &[usize] {
        &self.symbolic.perm
    }

    /// `L` as a sparse lower-triangular matrix (permuted ordering).
    pub fn l_matrix(&self) -> SparseMatrix {
        let s = &self.symbolic;
        let mut trip = Vec::with_capacity(self.l_values.len());
        for j in 0..s.n {
            for p in s.l_col_ptr[j]..s.l_col_ptr[j + 1] {
                trip.push((self.l_row_idx[p], j, self.l_values[p]));
            }
        }
        SparseMatrix::from_triplets(s.n, s.n, &trip)
    }

    fn lsolve_in_place(&self, x: &mut [f64]) {
        let s = &self.symbolic;
        for j in 0..s.n {
            let start = s.l_col_ptr[j];
            x[j] /= self.l_values[start];
            let xj = x[j];
            for p in (start + 1)..s.l_col_ptr[j + 1] {
                x[self.l_row_idx[p]] -= self.l_values[p] * xj;
            }
        }
    }

    fn ltsolve_in_place(&self, x: &mut [f64]) {
        let s = &self.symbolic;
        for j in (0..s.n).rev() {
            let start = s.l_col_ptr[j];
            let mut acc = x[j];
            for p in (start + 1)..s.l_col_ptr[j + 1] {
                acc -= self.l_values[p] * x[self.l_row_idx[p]];
            }
            x[j] = acc / self.l_values[start];
        }
    }

    /// Solves `Q x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let s = &self.symbolic;
        assert_eq!(b.len(), s.n);
        let mut y: Vec<f64> = s.perm.iter().map(|&old| b[old]).collect();
        self.lsolve_in_place(&mut y);
        self.ltsolve_in_place(&mut y);
        let mut x = vec![0.0; s.n];
        for (new, &old) in s.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }

    /// Returns `v = Pᵀ L⁻ᵀ z`, which has covariance `Q⁻¹` when `z` is standard normal.
    pub fn solve_lt_permuted(&self, z: &[f64]) -> Vec<f64> {
        let s = &self.symbolic;
        assert_eq!(z.len(), s.n);
        let mut y = z.to_vec();
        self.ltsolve_in_place(&mut y);
        let mut v = vec![0.0; s.n];
        for (new, &old) in s.perm.iter().enumerate() {
            v[old] = y[new];
        }
        v
    }

    /// Entries of `Q⁻¹` on the pattern of `L` (Takahashi recursion).
    pub fn selected_inverse(&self) -> SelectedInverse {
        let s = &self.symbolic;
        let n = s.n;
        let mut sigma = vec![0.0; self.l_values.len()];
        let lookup = |sigma: &[f64], i: usize, j: usize| -> f64 {
            // i >= j, entry (i, j) lives in column j
            let (i, j) = if i >= j { (i, j) } else { (j, i) };
            let range = s.l_col_ptr[j]..s.l_col_ptr[j + 1];
            match self.l_row_idx[range.clone()].binary_search(&i) {
                Ok(k) => sigma[range.start + k],
                Err(_) => unreachable!("selected inverse entry outside the filled pattern"),
            }
        };
        for j in (0..n).rev() {
            let start = s.l_col_ptr[j];
            let end = s.l_col_ptr[j + 1];
            let ljj = self.l_values[start];
            // off-diagonal entries, descending row order
            for q in ((start + 1)..end).rev() {
                let i = self.l_row_idx[q];
                let mut acc = 0.0;
                for p in (start + 1)..end {
                    let k = self.l_row_idx[p];
                    acc += self.l_values[p] * lookup(&sigma, k, i);
                }
                sigma[q] = -acc / ljj;
            }
            let mut acc = 0.0;
            for p in (start + 1)..end {
                acc += self.l_values[p] * sigma[p];
            }
            sigma[start] = 1.0 / (ljj * ljj) - acc / ljj;
        }
        SelectedInverse {
            factor: self.clone(),
            sigma,
        }
    }
}

/// `Q⁻¹` restricted to the pattern of the Cholesky factor.
#[derive(Debug, Clone)]
pub struct SelectedInverse {
    factor: CholeskyFactor,
    sigma: Vec<f64>,
}

impl SelectedInverse {
    /// Entry `(Q⁻¹)_{ij}` in the original ordering, if it lies on the pattern.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let s = &self.factor.symbolic;
        let (a, b) = (s.iperm[i], s.iperm[j]);
        let (r, c) = if a >= b { (a, b) } else { (b, a) };
        let range = s.l_col_ptr[c]..s.l_col_ptr[c + 1];
        self.factor.l_row_idx[range.clone()]
            .binary_search(&r)
            .ok()
            .map(|k| self.sigma[range.start + k])
    }

    /// Diagonal of `Q⁻¹` in the original ordering.
    pub fn diagonal(&self) -> Vec<f64> {
        let s = &self.factor.symbolic;
        (0..s.n).map(|i| self.sigma[s.l_col_ptr[s.iperm[i]]]).collect()
    }
}
