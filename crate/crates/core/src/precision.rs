//! Noise precisions and the block precision of a multivariate SPDE system.

use serde::{Deserialize, Serialize};

use crate::cholesky::CholeskyFactor;
use crate::error::{Error, Result};
use crate::fem::{k_matrix, FemMatrices};
use crate::sparse::SparseMatrix;

/// Parameters of a `p`-variate system `Σ_j L_ij x_j = f_i` with
/// `L_ij = b_ij (κ_ij² − Δ)^{α_ij / 2}` and Matérn-type noise `f_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpdeSystemSpec {
    pub p: usize,
    pub alpha: Vec<Vec<u32>>,
    pub kappa: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub noise_alpha: Vec<u32>,
    pub noise_kappa: Vec<f64>,
}

pub const PRESET_NAMES: &[&str] = &[
    "bivariate-positive",
    "bivariate-negative",
    "bivariate-smooth-noise",
    "bivariate-weak-coupling",
    "bivariate-mixed-noise",
    "trivariate",
];

impl SpdeSystemSpec {
    /// Bivariate triangular system with `b12 = 0`.
    #[allow(clippy::too_many_arguments)]
    pub fn bivariate(
        alpha: [u32; 3],
        kappa: [f64; 3],
        b: [f64; 3],
        noise_alpha: [u32; 2],
        noise_kappa: [f64; 2],
    ) -> Self {
        Self {
            p: 2,
            alpha: vec![vec![alpha[0], 0], vec![alpha[1], alpha[2]]],
            kappa: vec![vec![kappa[0], 0.0], vec![kappa[1], kappa[2]]],
            b: vec![vec![b[0], 0.0], vec![b[1], b[2]]],
            noise_alpha: noise_alpha.to_vec(),
            noise_kappa: noise_kappa.to_vec(),
        }
    }

    /// Named parameter sets used by the examples and tests.
    pub fn preset(name: &str) -> Option<Self> {
        let s = match name {
            "bivariate-positive" => Self::bivariate([2, 2, 2], [0.15, 0.5, 0.3], [1.0, -1.0, 1.0], [0, 0], [0.15, 0.3]),
            "bivariate-negative" => Self::bivariate([2, 2, 2], [0.15, 0.5, 0.3], [1.0, 1.0, 1.0], [0, 0], [0.15, 0.3]),
            "bivariate-smooth-noise" => {
                Self::bivariate([2, 2, 2], [0.15, 0.5, 0.3], [1.0, -1.0, 1.0], [1, 1], [0.15, 0.3])
            }
            "bivariate-weak-coupling" => {
                Self::bivariate([2, 2, 2], [0.15, 0.15, 0.3], [1.0, -0.5, 1.0], [0, 0], [0.15, 0.3])
            }
            "bivariate-mixed-noise" => Self::bivariate([2, 2, 2], [0.3, 0.5, 0.4], [1.0, 1.0, 1.0], [1, 0], [0.3, 0.4]),
            "trivariate" => Self {
                p: 3,
                alpha: vec![vec![2, 0, 0], vec![2, 2, 0], vec![2, 2, 2]],
                kappa: vec![vec![0.5, 0.0, 0.0], vec![0.6, 0.4, 0.0], vec![0.5, 1.0, 0.3]],
                b: vec![vec![1.0, 0.0, 0.0], vec![0.8, 1.0, 0.0], vec![1.0, 0.9, 1.0]],
                noise_alpha: vec![1, 1, 1],
                noise_kappa: vec![0.5, 0.4, 0.3],
            },
            _ => return None,
        };
        Some(s)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.p;
        if p == 0 {
            return Err(Error::InvalidParameter("field count p must be at least 1".into()));
        }
        let square = |m: usize, name: &str| -> Result<()> {
            if m != p {
                return Err(Error::Shape(format!("{name} has {m} rows, expected {p}")));
            }
            Ok(())
        };
        square(self.alpha.len(), "alpha")?;
        square(self.kappa.len(), "kappa")?;
        square(self.b.len(), "b")?;
        for i in 0..p {
            if self.alpha[i].len() != p || self.kappa[i].len() != p || self.b[i].len() != p {
                return Err(Error::Shape(format!("row {i} of alpha/kappa/b must have {p} entries")));
            }
        }
        if self.noise_alpha.len() != p || self.noise_kappa.len() != p {
            return Err(Error::Shape(format!("noise_alpha and noise_kappa must have {p} entries")));
        }
        for i in 0..p {
            for j in 0..p {
                let (a, k, b) = (self.alpha[i][j], self.kappa[i][j], self.b[i][j]);
                if a != 0 && a != 2 {
                    return Err(Error::InvalidParameter(format!("alpha[{i}][{j}] = {a}, must be 0 or 2")));
                }
                if !b.is_finite() {
                    return Err(Error::InvalidParameter(format!("b[{i}][{j}] is not finite")));
                }
                if a == 2 && b != 0.0 && !(k > 0.0 && k.is_finite()) {
                    return Err(Error::InvalidParameter(format!("kappa[{i}][{j}] = {k}, must be positive")));
                }
            }
            if self.b[i][i] == 0.0 {
                return Err(Error::InvalidParameter(format!("b[{i}][{i}] must be nonzero")));
            }
            let kn = self.noise_kappa[i];
            if self.noise_alpha[i] >= 1 && !(kn > 0.0 && kn.is_finite()) {
                return Err(Error::InvalidParameter(format!("noise_kappa[{i}] = {kn}, must be positive")));
            }
        }
        Ok(())
    }

    /// True when every coupling above the diagonal vanishes.
    pub fn is_triangular(&self) -> bool {
        (0..self.p).all(|i| ((i + 1)..self.p).all(|j| self.b[i][j] == 0.0))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s).map_err(|e| Error::Schema(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Precision of the FEM weights of a noise field with exponent `noise_alpha`.
///
/// `α = 0` gives `C̃`, `α = 1` gives `K`, and higher exponents follow
/// `Q_α = K C̃⁻¹ Q_{α−2} C̃⁻¹ K`.
pub fn noise_precision(fem: &FemMatrices, noise_alpha: i64, noise_kappa: f64) -> Result<SparseMatrix> {
    if noise_alpha < 0 {
        return Err(Error::InvalidParameter(format!("noise alpha must be nonnegative, got {noise_alpha}")));
    }
    if noise_alpha == 0 {
        return Ok(SparseMatrix::from_diagonal(&fem.c_lumped));
    }
    let k = k_matrix(fem, noise_kappa * noise_kappa)?;
    if noise_alpha == 1 {
        return Ok(k);
    }
    let inv_c: Vec<f64> = fem.c_lumped.iter().map(|c| 1.0 / c).collect();
    let m = k.scale_rows(&inv_c);
    let mut q = if noise_alpha % 2 == 0 {
        SparseMatrix::from_diagonal(&fem.c_lumped)
    } else {
        k.clone()
    };
    let mut a = noise_alpha % 2;
    while a < noise_alpha {
        q = congruence(&m, &q)?;
        a += 2;
    }
    Ok(q)
}

/// `Mᵀ Q M`, symmetrized against rounding.
fn congruence(m: &SparseMatrix, q: &SparseMatrix) -> Result<SparseMatrix> {
    let r = m.transpose().matmul(&q.matmul(m)?)?;
    r.add_scaled(0.5, &r.transpose(), 0.5)
}

/// Block operators of the discretized system.
#[derive(Debug, Clone)]
pub struct BlockMatrices {
    /// Diagonal of `D = diag(C̃, …, C̃)`.
    pub d: Vec<f64>,
    pub k: SparseMatrix,
    pub q_f: SparseMatrix,
}

/// Operator block `(i, j)`: `b(κ² C̃ + G)` for `α = 2`, `b C̃` for `α = 0`.
/// A zero coefficient gives no block unless `keep_zero` asks for an
/// explicit (structurally present) zero block.
fn operator_block(
    spec: &SpdeSystemSpec,
    fem: &FemMatrices,
    i: usize,
    j: usize,
    keep_zero: bool,
) -> Result<Option<SparseMatrix>> {
    let b = spec.b[i][j];
    if b == 0.0 && !keep_zero {
        return Ok(None);
    }
    let block = match spec.alpha[i][j] {
        2 => k_matrix(fem, spec.kappa[i][j] * spec.kappa[i][j])?.scale(b),
        0 => SparseMatrix::from_diagonal(&fem.c_lumped).scale(b),
        a => return Err(Error::InvalidParameter(format!("alpha[{i}][{j}] = {a}, must be 0 or 2"))),
    };
    Ok(Some(block))
}

pub fn block_matrices(spec: &SpdeSystemSpec, fem: &FemMatrices) -> Result<BlockMatrices> {
    block_matrices_with_structure(spec, fem, None)
}

/// Like [`block_matrices`], but blocks flagged in `structure` are stored
/// even when their coefficient is zero, so the sparsity pattern does not
/// depend on parameter values.
pub fn block_matrices_with_structure(
    spec: &SpdeSystemSpec,
    fem: &FemMatrices,
    structure: Option<&[Vec<bool>]>,
) -> Result<BlockMatrices> {
    spec.validate()?;
    if fem.c_lumped.len() != fem.n || fem.g.nrows() != fem.n {
        return Err(Error::Shape("FEM matrices disagree on the vertex count".into()));
    }
    let p = spec.p;
    let mut rows = Vec::with_capacity(p);
    for i in 0..p {
        let mut row = Vec::with_capacity(p);
        for j in 0..p {
            let keep = structure.is_some_and(|s| s[i][j]);
            row.push(operator_block(spec, fem, i, j, keep)?);
        }
        rows.push(row);
    }
    let k = SparseMatrix::from_blocks(&rows)?;
    let mut diag_blocks: Vec<Vec<Option<SparseMatrix>>> = vec![vec![None; p]; p];
    for (i, row) in diag_blocks.iter_mut().enumerate() {
        row[i] = Some(noise_precision(fem, spec.noise_alpha[i] as i64, spec.noise_kappa[i])?);
    }
    let q_f = SparseMatrix::from_blocks(&diag_blocks)?;
    let d: Vec<f64> = (0..p).flat_map(|_| fem.c_lumped.iter().copied()).collect();
    Ok(BlockMatrices { d, k, q_f })
}

/// Precision of the stacked FEM weights, field-major.
#[derive(Debug, Clone)]
pub struct MultivariateGmrf {
    pub q: SparseMatrix,
    pub p: usize,
    pub n: usize,
}

impl MultivariateGmrf {
    pub fn dim(&self) -> usize {
        self.p * self.n
    }

    /// Row of vertex `v` in field `field`.
    pub fn index(&self, field: usize, vertex: usize) -> usize {
        field * self.n + vertex
    }
}

/// `Q = Kᵀ D⁻¹ Q_f D⁻¹ K` without a definiteness check.
pub fn assemble_precision(spec: &SpdeSystemSpec, fem: &FemMatrices) -> Result<MultivariateGmrf> {
    assemble_precision_with_structure(spec, fem, None)
}

pub fn assemble_precision_with_structure(
    spec: &SpdeSystemSpec,
    fem: &FemMatrices,
    structure: Option<&[Vec<bool>]>,
) -> Result<MultivariateGmrf> {
    let blocks = block_matrices_with_structure(spec, fem, structure)?;
    let inv_d: Vec<f64> = blocks.d.iter().map(|c| 1.0 / c).collect();
    let m = blocks.k.scale_rows(&inv_d);
    let q = congruence(&m, &blocks.q_f)?;
    Ok(MultivariateGmrf { q, p: spec.p, n: fem.n })
}

/// Builds the block precision and verifies it is positive definite.
pub fn build_precision(spec: &SpdeSystemSpec, fem: &FemMatrices) -> Result<MultivariateGmrf> {
    let gmrf = assemble_precision(spec, fem)?;
    CholeskyFactor::new(&gmrf.q)?;
    Ok(gmrf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::assemble;
    use crate::mesh::{build_mesh, Rect, TriangulatedDomain};
    use nalgebra::DMatrix;

    fn small_fem() -> FemMatrices {
        assemble(&build_mesh(Rect::new(0.0, 0.0, 20.0, 20.0), 5.0, 0.0).unwrap()).unwrap()
    }

    fn dense_inv_diag(c: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(c.len(), c.iter().map(|v| 1.0 / v)))
    }

    #[test]
    fn noise_alpha_one_is_k() {
        let fem = small_fem();
        let q = noise_precision(&fem, 1, 0.7).unwrap();
        let k = k_matrix(&fem, 0.7 * 0.7).unwrap();
        assert_eq!(q.to_dense(), k.to_dense());
        assert!(noise_precision(&fem, -1, 0.7).is_err());
    }

    #[test]
    fn noise_recursion_matches_dense_products() {
        let tri = TriangulatedDomain::from_parts(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![[0, 1, 2]]).unwrap();
        for fem in [assemble(&tri).unwrap(), small_fem()] {
            let k = k_matrix(&fem, 0.25).unwrap().to_dense();
            let ci = dense_inv_diag(&fem.c_lumped);
            let q2 = &k * &ci * &k;
            let q3 = &k * &ci * &k * &ci * &k;
            let q4 = &k * &ci * &q2 * &ci * &k;
            for (alpha, expect) in [(2, q2), (3, q3), (4, q4)] {
                let got = noise_precision(&fem, alpha, 0.5).unwrap().to_dense();
                let scale = expect.abs().max();
                assert!((got - expect).abs().max() < 1e-12 * scale, "alpha {alpha}");
            }
        }
    }

    #[test]
    fn block_structure_of_presets() {
        let fem = small_fem();
        let n = fem.n;
        let spec = SpdeSystemSpec::preset("bivariate-positive").unwrap();
        let bm = block_matrices(&spec, &fem).unwrap();
        assert_eq!(bm.k.submatrix(0..n, n..2 * n).nnz(), 0);
        let spec3 = SpdeSystemSpec::preset("trivariate").unwrap();
        let bm3 = block_matrices(&spec3, &fem).unwrap();
        let mut nonzero = 0;
        for i in 0..3 {
            for j in 0..3 {
                if bm3.k.submatrix(i * n..(i + 1) * n, j * n..(j + 1) * n).nnz() > 0 {
                    assert!(j <= i);
                    nonzero += 1;
                }
            }
        }
        assert_eq!(nonzero, 6);
    }

    #[test]
    fn univariate_white_noise_reduces_to_alpha_two() {
        let fem = small_fem();
        let spec = SpdeSystemSpec {
            p: 1,
            alpha: vec![vec![2]],
            kappa: vec![vec![0.8]],
            b: vec![vec![1.0]],
            noise_alpha: vec![0],
            noise_kappa: vec![1.0],
        };
        let q = build_precision(&spec, &fem).unwrap().q.to_dense();
        let expect = noise_precision(&fem, 2, 0.8).unwrap().to_dense();
        assert!((q - &expect).abs().max() < 1e-12 * expect.abs().max());
    }

    #[test]
    fn precision_inverse_matches_dense_solution_covariance() {
        let fem = small_fem();
        let spec = SpdeSystemSpec::preset("bivariate-smooth-noise").unwrap();
        let gm = build_precision(&spec, &fem).unwrap();
        let bm = block_matrices(&spec, &fem).unwrap();
        let k = bm.k.to_dense();
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(bm.d.clone()));
        let qf_inv = bm.q_f.to_dense().try_inverse().unwrap();
        let k_inv = k.try_inverse().unwrap();
        let cov = &k_inv * &d * qf_inv * &d * k_inv.transpose();
        let q_inv = gm.q.to_dense().cholesky().unwrap().inverse();
        let rel = (&q_inv - &cov).abs().max() / cov.abs().max();
        assert!(rel < 1e-8, "relative error {rel}");
        assert!(gm.q.is_symmetric(1e-12));
    }

    #[test]
    fn validation_errors() {
        let mut s = SpdeSystemSpec::preset("bivariate-positive").unwrap();
        s.alpha[0][0] = 1;
        assert!(matches!(s.validate(), Err(Error::InvalidParameter(_))));
        let mut s = SpdeSystemSpec::preset("bivariate-positive").unwrap();
        s.b[1][1] = 0.0;
        assert!(s.validate().is_err());
        let mut s = SpdeSystemSpec::preset("bivariate-positive").unwrap();
        s.kappa.pop();
        assert!(matches!(s.validate(), Err(Error::Shape(_))));
    }

    #[test]
    fn json_round_trip() {
        for name in PRESET_NAMES {
            let s = SpdeSystemSpec::preset(name).unwrap();
            let back = SpdeSystemSpec::from_json(&s.to_json().unwrap()).unwrap();
            assert_eq!(s, back);
        }
    }
}
