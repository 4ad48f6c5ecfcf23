//! Sampling, correlation surfaces and conditioning for multivariate GMRFs.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cholesky::CholeskyFactor;
use crate::error::{Error, Result};
use crate::mesh::{Point, TriangulatedDomain};
use crate::observations::{Observation, ObservationSet};
use crate::precision::MultivariateGmrf;
use crate::sparse::SparseMatrix;

pub fn factorize(gmrf: &MultivariateGmrf) -> Result<CholeskyFactor> {
    CholeskyFactor::new(&gmrf.q)
}

/// Seeded generator used by every sampling routine.
pub fn rng_from_seed(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn standard_normal(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Draws `x = μ + Pᵀ L⁻ᵀ z` with `z ~ N(0, I)` from an existing stream.
pub fn sample_with_rng(factor: &CholeskyFactor, mean: &[f64], rng: &mut ChaCha20Rng) -> Result<Vec<f64>> {
    if mean.len() != factor.dim() {
        return Err(Error::Shape(format!("mean has length {}, expected {}", mean.len(), factor.dim())));
    }
    let z = standard_normal(rng, factor.dim());
    let v = factor.solve_lt_permuted(&z);
    Ok(v.iter().zip(mean).map(|(a, b)| a + b).collect())
}

/// One draw from `N(μ, Q⁻¹)`, deterministic in `seed`.
pub fn sample(factor: &CholeskyFactor, mean: &[f64], seed: u64) -> Result<Vec<f64>> {
    sample_with_rng(factor, mean, &mut rng_from_seed(seed))
}

/// Correlations between every field at a reference vertex and every field
/// at all vertices.
#[derive(Debug, Clone)]
pub struct CorrelationSurfaces {
    pub p: usize,
    pub n: usize,
    pub reference_vertex: usize,
    /// `corr[i][j][v] = Corr(x_i(ref), x_j(v))`
    pub corr: Vec<Vec<Vec<f64>>>,
    /// Marginal standard deviation of every field at every vertex.
    pub std_dev: Vec<Vec<f64>>,
}

impl CorrelationSurfaces {
    pub fn get(&self, i: usize, j: usize) -> &[f64] {
        &self.corr[i][j]
    }
}

pub fn correlation_surfaces(gmrf: &MultivariateGmrf, reference_vertex: usize) -> Result<CorrelationSurfaces> {
    let factor = factorize(gmrf)?;
    correlation_surfaces_with_factor(gmrf, &factor, reference_vertex)
}

pub fn correlation_surfaces_with_factor(
    gmrf: &MultivariateGmrf,
    factor: &CholeskyFactor,
    reference_vertex: usize,
) -> Result<CorrelationSurfaces> {
    let (p, n) = (gmrf.p, gmrf.n);
    if reference_vertex >= n {
        return Err(Error::IndexOutOfRange {
            index: reference_vertex,
            len: n,
        });
    }
    let var = factor.selected_inverse().diagonal();
    let std_dev: Vec<Vec<f64>> = (0..p).map(|f| var[f * n..(f + 1) * n].iter().map(|v| v.sqrt()).collect()).collect();
    let mut corr = Vec::with_capacity(p);
    for i in 0..p {
        let mut e = vec![0.0; p * n];
        let r = gmrf.index(i, reference_vertex);
        e[r] = 1.0;
        let col = factor.solve(&e);
        let sd_ref = std_dev[i][reference_vertex];
        corr.push(
            (0..p)
                .map(|j| {
                    (0..n)
                        .map(|v| (col[j * n + v] / (sd_ref * std_dev[j][v])).clamp(-1.0, 1.0))
                        .collect()
                })
                .collect(),
        );
    }
    Ok(CorrelationSurfaces {
        p,
        n,
        reference_vertex,
        corr,
        std_dev,
    })
}

/// Posterior of the latent weights given observations.
#[derive(Debug, Clone)]
pub struct Conditioned {
    pub mu_c: Vec<f64>,
    pub q_c: MultivariateGmrf,
    pub factor: CholeskyFactor,
}

/// `Q_c = Q + Aᵀ Q_n A`, `μ_c = Q_c⁻¹ Aᵀ Q_n y`.
pub fn condition(gmrf: &MultivariateGmrf, obs: &ObservationSet) -> Result<Conditioned> {
    if obs.a.ncols() != gmrf.dim() {
        return Err(Error::Shape(format!(
            "observation matrix has {} columns, precision has dimension {}",
            obs.a.ncols(),
            gmrf.dim()
        )));
    }
    if obs.is_empty() {
        let factor = factorize(gmrf)?;
        return Ok(Conditioned {
            mu_c: vec![0.0; gmrf.dim()],
            q_c: gmrf.clone(),
            factor,
        });
    }
    let qn = obs.noise_precision()?;
    let at_qn = obs.a.transpose().scale_cols(&qn);
    let q_c = gmrf.q.add(&at_qn.matmul(&obs.a)?)?;
    let factor = CholeskyFactor::new(&q_c).map_err(|e| Error::Conditioning(e.to_string()))?;
    let b_c = at_qn.mul_vec(&obs.values());
    let mu_c = factor.solve(&b_c);
    Ok(Conditioned {
        mu_c,
        q_c: MultivariateGmrf {
            q: q_c,
            p: gmrf.p,
            n: gmrf.n,
        },
        factor,
    })
}

/// Posterior variances of the linear predictors `A x`, one per row of `a`.
/// Uses the selected inverse where the row pattern allows and falls back to
/// a solve otherwise.
pub fn predictive_variances(cond: &Conditioned, a: &SparseMatrix) -> Result<Vec<f64>> {
    if a.ncols() != cond.mu_c.len() {
        return Err(Error::Shape(format!(
            "prediction matrix has {} columns, latent dimension is {}",
            a.ncols(),
            cond.mu_c.len()
        )));
    }
    let sel = cond.factor.selected_inverse();
    let at = a.transpose();
    Ok((0..a.nrows())
        .map(|r| {
            let row: Vec<(usize, f64)> = at.col(r).collect();
            let mut v = 0.0;
            for &(i, wi) in &row {
                for &(j, wj) in &row {
                    match sel.get(i, j) {
                        Some(s) => v += wi * wj * s,
                        None => {
                            let mut e = vec![0.0; a.ncols()];
                            for &(k, w) in &row {
                                e[k] = w;
                            }
                            let z = cond.factor.solve(&e);
                            return row.iter().map(|&(k, w)| w * z[k]).sum();
                        }
                    }
                }
            }
            v
        })
        .collect())
}

/// Values of the field(s) `x` interpolated at observation rows: `A x`.
pub fn interpolate(a: &SparseMatrix, x: &[f64]) -> Vec<f64> {
    a.mul_vec(x)
}

/// Samples a latent field and noisy observations of it at `sites`
/// (location, field). Returns the latent weights and the observation set.
pub fn simulate_observations(
    gmrf: &MultivariateGmrf,
    mesh: &TriangulatedDomain,
    sites: &[(Point, usize)],
    nugget_variance: &[f64],
    seed: u64,
) -> Result<(Vec<f64>, ObservationSet)> {
    let factor = factorize(gmrf)?;
    let mut rng = rng_from_seed(seed);
    let x = sample_with_rng(&factor, &vec![0.0; gmrf.dim()], &mut rng)?;
    let records: Vec<Observation> = sites
        .iter()
        .map(|&(location, field)| Observation {
            location,
            field,
            value: 0.0,
        })
        .collect();
    let mut obs = ObservationSet::new(records, nugget_variance.to_vec(), mesh)?;
    let clean = interpolate(&obs.a, &x);
    let noise = standard_normal(&mut rng, sites.len());
    for (i, rec) in obs.records.iter_mut().enumerate() {
        rec.value = clean[i] + nugget_variance[rec.field].sqrt() * noise[i];
    }
    Ok((x, obs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::assemble;
    use crate::mesh::{build_mesh, Rect};
    use crate::precision::{build_precision, SpdeSystemSpec};
    use nalgebra::{DMatrix, DVector};

    fn small_gmrf(name: &str) -> (TriangulatedDomain, MultivariateGmrf) {
        let mesh = build_mesh(Rect::new(0.0, 0.0, 12.0, 12.0), 2.0, 0.0).unwrap();
        let fem = assemble(&mesh).unwrap();
        let spec = SpdeSystemSpec::preset(name).unwrap();
        let g = build_precision(&spec, &fem).unwrap();
        (mesh, g)
    }

    #[test]
    fn identity_precision_returns_raw_draw() {
        let g = MultivariateGmrf {
            q: SparseMatrix::identity(6),
            p: 1,
            n: 6,
        };
        let f = factorize(&g).unwrap();
        let x = sample(&f, &[0.0; 6], 9).unwrap();
        let z = standard_normal(&mut rng_from_seed(9), 6);
        assert_eq!(x, z);
        assert_eq!(sample(&f, &[0.0; 6], 9).unwrap(), x);
        assert_ne!(sample(&f, &[0.0; 6], 10).unwrap(), x);
    }

    #[test]
    fn decoupled_fields_have_zero_cross_correlation() {
        let mesh = build_mesh(Rect::new(0.0, 0.0, 10.0, 10.0), 2.0, 0.0).unwrap();
        let fem = assemble(&mesh).unwrap();
        let mut spec = SpdeSystemSpec::preset("bivariate-positive").unwrap();
        spec.b[1][0] = 0.0;
        let g = build_precision(&spec, &fem).unwrap();
        let c = correlation_surfaces(&g, 17).unwrap();
        assert!((c.get(0, 0)[17] - 1.0).abs() < 1e-12);
        assert!((c.get(1, 1)[17] - 1.0).abs() < 1e-12);
        assert!(c.get(0, 1).iter().all(|v| v.abs() < 1e-10));
        assert!(correlation_surfaces(&g, 10_000).is_err());
    }

    #[test]
    fn correlation_sign_follows_coupling() {
        for (name, sign) in [("bivariate-positive", 1.0), ("bivariate-negative", -1.0)] {
            let (mesh, g) = small_gmrf(name);
            let mid = mesh.nearest_vertex([6.0, 6.0]);
            let c = correlation_surfaces(&g, mid).unwrap();
            assert!(c.get(0, 1)[mid] * sign > 0.0, "{name}");
        }
    }

    #[test]
    fn conditioning_matches_dense_formula() {
        let (mesh, g) = small_gmrf("bivariate-positive");
        let recs = vec![
            Observation { location: [3.3, 4.1], field: 0, value: 1.2 },
            Observation { location: [7.0, 8.5], field: 0, value: -0.7 },
            Observation { location: [5.5, 5.5], field: 1, value: 0.4 },
        ];
        let obs = ObservationSet::new(recs, vec![0.2, 0.3], &mesh).unwrap();
        let cond = condition(&g, &obs).unwrap();
        let a = obs.a.to_dense();
        let qn = DMatrix::from_diagonal(&DVector::from_vec(obs.noise_precision().unwrap()));
        let qc = g.q.to_dense() + a.transpose() * &qn * &a;
        let mu = qc.clone().cholesky().unwrap().solve(&(a.transpose() * &qn * DVector::from_vec(obs.values())));
        let err = (DVector::from_vec(cond.mu_c.clone()) - &mu).amax();
        assert!(err < 1e-10 * mu.amax(), "{err}");
        assert!((cond.q_c.q.to_dense() - qc).abs().max() < 1e-12 * g.q.to_dense().abs().max());
    }

    #[test]
    fn exact_observation_is_reproduced_and_borrowed() {
        let (mesh, g) = small_gmrf("bivariate-positive");
        let v = mesh.nearest_vertex([6.0, 6.0]);
        let loc = mesh.vertices[v];
        let obs = ObservationSet::new(
            vec![Observation { location: loc, field: 0, value: 2.0 }],
            vec![1e-12, 1.0],
            &mesh,
        )
        .unwrap();
        let cond = condition(&g, &obs).unwrap();
        assert!((cond.mu_c[v] - 2.0).abs() < 1e-4);
        assert!(cond.mu_c[g.index(1, v)] > 0.0);
        let none = ObservationSet::new(vec![], vec![1.0, 1.0], &mesh).unwrap();
        let c0 = condition(&g, &none).unwrap();
        assert!(c0.mu_c.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn empirical_covariance_of_samples() {
        let mesh = build_mesh(Rect::new(0.0, 0.0, 6.0, 6.0), 2.0, 0.0).unwrap();
        let fem = assemble(&mesh).unwrap();
        let spec = SpdeSystemSpec::bivariate([2, 2, 2], [0.6, 0.8, 0.7], [1.0, -0.8, 1.0], [0, 0], [1.0, 1.0]);
        let g = build_precision(&spec, &fem).unwrap();
        let dim = g.dim();
        let cov = g.q.to_dense().cholesky().unwrap().inverse();
        let f = factorize(&g).unwrap();
        let mut rng = rng_from_seed(42);
        let m = 10_000;
        let mut acc = DMatrix::<f64>::zeros(dim, dim);
        let mut sq = DMatrix::<f64>::zeros(dim, dim);
        for _ in 0..m {
            let x = DVector::from_vec(sample_with_rng(&f, &vec![0.0; dim], &mut rng).unwrap());
            let xx = &x * x.transpose();
            sq += xx.component_mul(&xx);
            acc += xx;
        }
        let mf = m as f64;
        for r in 0..dim {
            for c in 0..dim {
                let mean = acc[(r, c)] / mf;
                let se = ((sq[(r, c)] / mf - mean * mean) / mf).sqrt();
                assert!((mean - cov[(r, c)]).abs() <= 5.0 * se, "({r},{c}) {mean} vs {}", cov[(r, c)]);
            }
        }
    }
}
