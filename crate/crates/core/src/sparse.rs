//! Compressed sparse column matrices.
//!
//! Row indices are sorted within every column and duplicates are summed when
//! a matrix is built from triplets. Explicit zeros produced by arithmetic are
//! kept so that the sparsity pattern depends only on the structure of the
//! inputs, which lets factorizations reuse a symbolic analysis across
//! parameter values.

use std::io::{BufRead, Write};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            col_ptr: vec![0; ncols + 1],
            row_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diagonal(&vec![1.0; n])
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Self {
            nrows: n,
            ncols: n,
            col_ptr: (0..=n).collect(),
            row_idx: (0..n).collect(),
            values: diag.to_vec(),
        }
    }

    /// Builds a matrix from `(row, col, value)` triplets, summing duplicates.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; ncols + 1];
        for &(r, c, _) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            counts[c + 1] += 1;
        }
        for c in 0..ncols {
            counts[c + 1] += counts[c];
        }
        let mut next = counts.clone();
        let mut rows = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            let slot = next[c];
            rows[slot] = r;
            vals[slot] = v;
            next[c] += 1;
        }

        let mut col_ptr = Vec::with_capacity(ncols + 1);
        let mut row_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        col_ptr.push(0);
        let mut order: Vec<usize> = Vec::new();
        for c in 0..ncols {
            order.clear();
            order.extend(counts[c]..counts[c + 1]);
            order.sort_unstable_by_key(|&k| rows[k]);
            let mut last: Option<usize> = None;
            for &k in &order {
                if last == Some(rows[k]) {
                    *values.last_mut().unwrap() += vals[k];
                } else {
                    row_idx.push(rows[k]);
                    values.push(vals[k]);
                    last = Some(rows[k]);
                }
            }
            col_ptr.push(row_idx.len());
        }
        Self {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
        }
    }

    /// Converts a dense matrix, keeping entries with `|a| > drop_tol`.
    pub fn from_dense(m: &DMatrix<f64>, drop_tol: f64) -> Self {
        let mut trip = Vec::new();
        for c in 0..m.ncols() {
            for r in 0..m.nrows() {
                let v = m[(r, c)];
                if v.abs() > drop_tol {
                    trip.push((r, c, v));
                }
            }
        }
        Self::from_triplets(m.nrows(), m.ncols(), &trip)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Iterates `(row, value)` over the stored entries of column `c`.
    pub fn col(&self, c: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.col_ptr[c]..self.col_ptr[c + 1];
        self.row_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    /// Iterates all stored entries as `(row, col, value)`.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.ncols).flat_map(move |c| self.col(c).map(move |(r, v)| (r, c, v)))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let range = self.col_ptr[c]..self.col_ptr[c + 1];
        match self.row_idx[range.clone()].binary_search(&r) {
            Ok(k) => self.values[range.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.nrows + 1];
        for &r in &self.row_idx {
            counts[r + 1] += 1;
        }
        for r in 0..self.nrows {
            counts[r + 1] += counts[r];
        }
        let mut next = counts.clone();
        let mut row_idx = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for c in 0..self.ncols {
            for (r, v) in self.col(c) {
                let slot = next[r];
                row_idx[slot] = c;
                values[slot] = v;
                next[r] += 1;
            }
        }
        Self {
            nrows: self.ncols,
            ncols: self.nrows,
            col_ptr: counts,
            row_idx,
            values,
        }
    }

    /// Sparse product `self * rhs`.
    pub fn matmul(&self, rhs: &SparseMatrix) -> Result<SparseMatrix> {
        if self.ncols != rhs.nrows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.nrows, self.ncols, rhs.nrows, rhs.ncols
            )));
        }
        let mut mark = vec![usize::MAX; self.nrows];
        let mut acc = vec![0.0; self.nrows];
        let mut pattern: Vec<usize> = Vec::new();
        let mut col_ptr = Vec::with_capacity(rhs.ncols + 1);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        col_ptr.push(0);
        for j in 0..rhs.ncols {
            pattern.clear();
            for (k, b) in rhs.col(j) {
                for (i, a) in self.col(k) {
                    if mark[i] != j {
                        mark[i] = j;
                        acc[i] = 0.0;
                        pattern.push(i);
                    }
                    acc[i] += a * b;
                }
            }
            pattern.sort_unstable();
            for &i in &pattern {
                row_idx.push(i);
                values.push(acc[i]);
            }
            col_ptr.push(row_idx.len());
        }
        Ok(SparseMatrix {
            nrows: self.nrows,
            ncols: rhs.ncols,
            col_ptr,
            row_idx,
            values,
        })
    }

    /// `alpha * self + beta * other`, with the union sparsity pattern.
    pub fn add_scaled(&self, alpha: f64, other: &SparseMatrix, beta: f64) -> Result<SparseMatrix> {
        if self.nrows != other.nrows || self.ncols != other.ncols {
            return Err(Error::Shape(format!(
                "cannot add {}x{} and {}x{}",
                self.nrows, self.ncols, other.nrows, other.ncols
            )));
        }
        let mut col_ptr = Vec::with_capacity(self.ncols + 1);
        let mut row_idx = Vec::with_capacity(self.nnz() + other.nnz());
        let mut values = Vec::with_capacity(self.nnz() + other.nnz());
        col_ptr.push(0);
        for c in 0..self.ncols {
            let mut a = self.col(c).peekable();
            let mut b = other.col(c).peekable();
            loop {
                match (a.peek().copied(), b.peek().copied()) {
                    (Some((ra, va)), Some((rb, vb))) => {
                        if ra == rb {
                            row_idx.push(ra);
                            values.push(alpha * va + beta * vb);
                            a.next();
                            b.next();
                        } else if ra < rb {
                            row_idx.push(ra);
                            values.push(alpha * va);
                            a.next();
                        } else {
                            row_idx.push(rb);
                            values.push(beta * vb);
                            b.next();
                        }
                    }
                    (Some((ra, va)), None) => {
                        row_idx.push(ra);
                        values.push(alpha * va);
                        a.next();
                    }
                    (None, Some((rb, vb))) => {
                        row_idx.push(rb);
                        values.push(beta * vb);
                        b.next();
                    }
                    (None, None) => break,
                }
            }
            col_ptr.push(row_idx.len());
        }
        Ok(SparseMatrix {
            nrows: self.nrows,
            ncols: self.ncols,
            col_ptr,
            row_idx,
            values,
        })
    }

    pub fn add(&self, other: &SparseMatrix) -> Result<SparseMatrix> {
        self.add_scaled(1.0, other, 1.0)
    }

    pub fn scale(&self, s: f64) -> SparseMatrix {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// `diag(d) * self`
    pub fn scale_rows(&self, d: &[f64]) -> SparseMatrix {
        assert_eq!(d.len(), self.nrows);
        let mut out = self.clone();
        for (v, &r) in out.values.iter_mut().zip(&out.row_idx) {
            *v *= d[r];
        }
        out
    }

    /// `self * diag(d)`
    pub fn scale_cols(&self, d: &[f64]) -> SparseMatrix {
        assert_eq!(d.len(), self.ncols);
        let mut out = self.clone();
        for c in 0..self.ncols {
            for k in out.col_ptr[c]..out.col_ptr[c + 1] {
                out.values[k] *= d[c];
            }
        }
        out
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        let mut y = vec![0.0; self.nrows];
        for (c, &xc) in x.iter().enumerate() {
            if xc == 0.0 {
                continue;
            }
            for (r, v) in self.col(c) {
                y[r] += v * xc;
            }
        }
        y
    }

    /// `selfᵀ x`
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        (0..self.ncols)
            .map(|c| self.col(c).map(|(r, v)| v * x[r]).sum())
            .collect()
    }

    /// Assembles a block matrix. Every block in a block row must share a row
    /// count and every block in a block column a column count; `None` blocks
    /// are zero and take their size from the other blocks.
    pub fn from_blocks(blocks: &[Vec<Option<SparseMatrix>>]) -> Result<SparseMatrix> {
        let nbr = blocks.len();
        let nbc = blocks.first().map_or(0, |r| r.len());
        let mut row_sizes = vec![None; nbr];
        let mut col_sizes = vec![None; nbc];
        for (bi, row) in blocks.iter().enumerate() {
            if row.len() != nbc {
                return Err(Error::Shape("ragged block layout".into()));
            }
            for (bj, blk) in row.iter().enumerate() {
                if let Some(m) = blk {
                    for (slot, size) in [(&mut row_sizes[bi], m.nrows), (&mut col_sizes[bj], m.ncols)] {
                        match slot {
                            Some(s) if *s != size => {
                                return Err(Error::Shape(format!(
                                    "block ({bi}, {bj}) has inconsistent size"
                                )))
                            }
                            _ => *slot = Some(size),
                        }
                    }
                }
            }
        }
        let row_sizes: Vec<usize> = row_sizes
            .into_iter()
            .map(|s| s.ok_or_else(|| Error::Shape("empty block row".into())))
            .collect::<Result<_>>()?;
        let col_sizes: Vec<usize> = col_sizes
            .into_iter()
            .map(|s| s.ok_or_else(|| Error::Shape("empty block column".into())))
            .collect::<Result<_>>()?;
        let row_off: Vec<usize> = offsets(&row_sizes);
        let col_off: Vec<usize> = offsets(&col_sizes);
        let mut trip = Vec::new();
        for (bi, row) in blocks.iter().enumerate() {
            for (bj, blk) in row.iter().enumerate() {
                if let Some(m) = blk {
                    trip.extend(m.triplets().map(|(r, c, v)| (r + row_off[bi], c + col_off[bj], v)));
                }
            }
        }
        Ok(Self::from_triplets(
            row_off[nbr],
            col_off[nbc],
            &trip,
        ))
    }

    /// Extracts rows `rows` and columns `cols` as a new matrix (ranges).
    pub fn submatrix(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> SparseMatrix {
        let mut trip = Vec::new();
        for c in cols.clone() {
            for (r, v) in self.col(c) {
                if rows.contains(&r) {
                    trip.push((r - rows.start, c - cols.start, v));
                }
            }
        }
        Self::from_triplets(rows.len(), cols.len(), &trip)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.triplets() {
            m[(r, c)] += v;
        }
        m
    }

    /// Largest `|A_ij - A_ji|` relative to the largest `|A_ij|`.
    pub fn asymmetry(&self) -> f64 {
        if self.nrows != self.ncols {
            return f64::INFINITY;
        }
        let t = self.transpose();
        let diff = match self.add_scaled(1.0, &t, -1.0) {
            Ok(d) => d,
            Err(_) => return f64::INFINITY,
        };
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let dmax = diff.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            dmax
        } else {
            dmax / scale
        }
    }

    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        self.asymmetry() <= rel_tol
    }

    /// Writes Matrix Market coordinate format (real, general, 1-based).
    pub fn write_matrix_market<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(w, "{} {} {}", self.nrows, self.ncols, self.nnz())?;
        for (r, c, v) in self.triplets() {
            writeln!(w, "{} {} {:.16e}", r + 1, c + 1, v)?;
        }
        Ok(())
    }

    /// Reads Matrix Market coordinate format; `symmetric` storage is expanded.
    pub fn read_matrix_market<R: BufRead>(r: R) -> Result<SparseMatrix> {
        let mut lines = r.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or(Error::Parse { line: 1, message: "empty file".into() })?;
        let header = header?.to_lowercase();
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() < 5 || fields[0] != "%%matrixmarket" || fields[1] != "matrix" || fields[2] != "coordinate" {
            return Err(Error::Parse { line: 1, message: "expected a coordinate Matrix Market header".into() });
        }
        let pattern = fields[3] == "pattern";
        let symmetric = match fields[4] {
            "general" => false,
            "symmetric" => true,
            other => {
                return Err(Error::Parse { line: 1, message: format!("unsupported symmetry '{other}'") })
            }
        };
        let mut dims: Option<(usize, usize, usize)> = None;
        let mut trip = Vec::new();
        for (i, line) in lines {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('%') {
                continue;
            }
            let parse_err = |m: &str| Error::Parse { line: i + 1, message: m.to_string() };
            let toks: Vec<&str> = t.split_whitespace().collect();
            if dims.is_none() {
                if toks.len() != 3 {
                    return Err(parse_err("expected 'rows cols nnz'"));
                }
                let p = |s: &str| s.parse::<usize>().map_err(|_| parse_err("bad size"));
                dims = Some((p(toks[0])?, p(toks[1])?, p(toks[2])?));
                continue;
            }
            let (nr, nc, _) = dims.unwrap();
            if toks.len() < if pattern { 2 } else { 3 } {
                return Err(parse_err("too few columns"));
            }
            let r: usize = toks[0].parse().map_err(|_| parse_err("bad row index"))?;
            let c: usize = toks[1].parse().map_err(|_| parse_err("bad column index"))?;
            if r == 0 || c == 0 || r > nr || c > nc {
                return Err(parse_err("index out of range"));
            }
            let v: f64 = if pattern {
                1.0
            } else {
                toks[2].parse().map_err(|_| parse_err("bad value"))?
            };
            trip.push((r - 1, c - 1, v));
            if symmetric && r != c {
                trip.push((c - 1, r - 1, v));
            }
        }
        let (nr, nc, _) = dims.ok_or(Error::Parse { line: 1, message: "missing size line".into() })?;
        Ok(Self::from_triplets(nr, nc, &trip))
    }
}

fn offsets(sizes: &[usize]) -> Vec<usize> {
    let mut off = Vec::with_capacity(sizes.len() + 1);
    off.push(0);
    for s in sizes {
        off.push(off.last().unwrap() + s);
    }
    off
}
