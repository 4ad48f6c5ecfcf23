//! Dense covariance-based multivariate Matérn model: correlation function,
//! covariance assembly, kriging and likelihood fitting.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::mesh::Point;
use crate::observations::ObservationSet;
use crate::optim::{minimize, BfgsOptions, OptimStatus};
use crate::special::bessel_k;

/// Matérn correlation `2^{1−ν}/Γ(ν) (ah)^ν K_ν(ah)`.
pub fn matern_correlation(h: f64, nu: f64, a: f64) -> Result<f64> {
    if !(h >= 0.0) || !(nu > 0.0) || !(a > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "matern correlation needs h >= 0, nu > 0, a > 0 (got {h}, {nu}, {a})"
        )));
    }
    let x = a * h;
    if x == 0.0 {
        return Ok(1.0);
    }
    if x > 700.0 {
        return Ok(0.0);
    }
    let k = bessel_k(nu, x)?;
    if !k.is_finite() {
        return Ok(1.0);
    }
    let log = (1.0 - nu) * std::f64::consts::LN_2 - ln_gamma(nu) + nu * x.ln() + k.ln();
    Ok(log.exp().min(1.0))
}

/// Distance `√(8ν)/a` at which the correlation is near 0.13.
pub fn effective_range(nu: f64, a: f64) -> Result<f64> {
    if !(nu > 0.0) || !(a > 0.0) {
        return Err(Error::InvalidParameter(format!("range needs nu > 0 and a > 0 (got {nu}, {a})")));
    }
    Ok((8.0 * nu).sqrt() / a)
}

/// Cross-covariance `C_ij(h) = ρ_ij σ_i σ_j M(h | ν_ij, a_ij)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaternCrossCovariance {
    pub p: usize,
    pub sigma: Vec<f64>,
    pub nu: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
    pub rho: Vec<Vec<f64>>,
}

impl MaternCrossCovariance {
    /// Parsimonious model: common scale and `ν_ij = (ν_ii + ν_jj)/2`.
    pub fn parsimonious(sigma: Vec<f64>, nu_diag: Vec<f64>, a: f64, rho: Vec<Vec<f64>>) -> Result<Self> {
        let p = sigma.len();
        let nu = (0..p)
            .map(|i| (0..p).map(|j| 0.5 * (nu_diag[i] + nu_diag[j])).collect())
            .collect();
        let model = Self {
            p,
            sigma,
            nu,
            a: vec![vec![a; p]; p],
            rho,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.p;
        let square = |m: &Vec<Vec<f64>>| m.len() == p && m.iter().all(|r| r.len() == p);
        if self.sigma.len() != p || !square(&self.nu) || !square(&self.a) || !square(&self.rho) {
            return Err(Error::Shape(format!("matern model arrays must be {p}-dimensional")));
        }
        for i in 0..p {
            if !(self.sigma[i] > 0.0) {
                return Err(Error::InvalidParameter(format!("sigma[{i}] must be positive")));
            }
            for j in 0..p {
                if !(self.nu[i][j] > 0.0) || !(self.a[i][j] > 0.0) {
                    return Err(Error::InvalidParameter(format!("nu[{i}][{j}] and a[{i}][{j}] must be positive")));
                }
                if self.rho[i][j] != self.rho[j][i] || self.nu[i][j] != self.nu[j][i] || self.a[i][j] != self.a[j][i] {
                    return Err(Error::InvalidParameter("matern model must be symmetric".into()));
                }
                if self.rho[i][j].abs() > 1.0 {
                    return Err(Error::InvalidParameter(format!("|rho[{i}][{j}]| exceeds 1")));
                }
            }
            if self.rho[i][i] != 1.0 {
                return Err(Error::InvalidParameter(format!("rho[{i}][{i}] must be 1")));
            }
        }
        Ok(())
    }

    pub fn covariance(&self, i: usize, j: usize, h: f64) -> Result<f64> {
        let rho = self.rho[i][j];
        if rho == 0.0 {
            return Ok(0.0);
        }
        Ok(rho * self.sigma[i] * self.sigma[j] * matern_correlation(h, self.nu[i][j], self.a[i][j])?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s).map_err(|e| Error::Schema(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn covariance_matrix(model: &MaternCrossCovariance, locations: &[Point], field_of: &[usize]) -> Result<DMatrix<f64>> {
    if locations.len() != field_of.len() {
        return Err(Error::Shape("locations and field indices differ in length".into()));
    }
    if let Some(&f) = field_of.iter().find(|&&f| f >= model.p) {
        return Err(Error::IndexOutOfRange { index: f, len: model.p });
    }
    let n = locations.len();
    let mut c = DMatrix::zeros(n, n);
    for s in 0..n {
        for r in s..n {
            let v = model.covariance(field_of[r], field_of[s], dist(locations[r], locations[s]))?;
            c[(r, s)] = v;
            c[(s, r)] = v;
        }
    }
    Ok(c)
}

/// Dense covariance of the stacked observations, checked for validity by a
/// Cholesky factorization.
pub fn assemble_covariance(model: &MaternCrossCovariance, locations: &[Point], field_of: &[usize]) -> Result<DMatrix<f64>> {
    model.validate()?;
    let c = covariance_matrix(model, locations, field_of)?;
    let jitter = 1e-10 * c.diagonal().amax();
    let mut probe = c.clone();
    for i in 0..probe.nrows() {
        probe[(i, i)] += jitter;
    }
    if probe.cholesky().is_none() {
        return Err(Error::InvalidModel("assembled covariance is not positive semidefinite".into()));
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KrigingResult {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

fn observation_layout(obs: &ObservationSet) -> (Vec<Point>, Vec<usize>) {
    (
        obs.records.iter().map(|r| r.location).collect(),
        obs.records.iter().map(|r| r.field).collect(),
    )
}

/// Conditional means and variances at `targets` (location, field).
pub fn dense_krige(model: &MaternCrossCovariance, obs: &ObservationSet, targets: &[(Point, usize)]) -> Result<KrigingResult> {
    model.validate()?;
    if let Some(&(_, f)) = targets.iter().find(|t| t.1 >= model.p) {
        return Err(Error::IndexOutOfRange { index: f, len: model.p });
    }
    let prior_var: Vec<f64> = targets.iter().map(|t| model.sigma[t.1] * model.sigma[t.1]).collect();
    if obs.is_empty() {
        return Ok(KrigingResult {
            mean: vec![0.0; targets.len()],
            variance: prior_var,
        });
    }
    let (locs, fields) = observation_layout(obs);
    let mut c_oo = covariance_matrix(model, &locs, &fields)?;
    for (i, t) in obs.row_nuggets().iter().enumerate() {
        c_oo[(i, i)] += t;
    }
    let chol = c_oo
        .cholesky()
        .ok_or_else(|| Error::Conditioning("observation covariance is singular".into()))?;
    let y = DVector::from_vec(obs.values());
    let w = chol.solve(&y);
    let mut c_to = DMatrix::zeros(targets.len(), obs.len());
    for (r, &(tp, tf)) in targets.iter().enumerate() {
        for s in 0..obs.len() {
            c_to[(r, s)] = model.covariance(tf, fields[s], dist(tp, locs[s]))?;
        }
    }
    let mean = (&c_to * w).as_slice().to_vec();
    let z = chol.l().solve_lower_triangular(&c_to.transpose()).expect("Cholesky factor is nonsingular");
    let variance = (0..targets.len())
        .map(|r| (prior_var[r] - z.column(r).norm_squared()).max(0.0))
        .collect();
    Ok(KrigingResult { mean, variance })
}

/// Gaussian log-likelihood of the observations (nuggets on the diagonal).
pub fn dense_log_likelihood(model: &MaternCrossCovariance, obs: &ObservationSet) -> Result<f64> {
    let (locs, fields) = observation_layout(obs);
    let mut c = covariance_matrix(model, &locs, &fields)?;
    for (i, t) in obs.row_nuggets().iter().enumerate() {
        c[(i, i)] += t;
    }
    let chol = c
        .cholesky()
        .ok_or_else(|| Error::InvalidModel("observation covariance is not positive definite".into()))?;
    let y = DVector::from_vec(obs.values());
    let w = chol.solve(&y);
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let n = obs.len() as f64;
    Ok(-0.5 * (y.dot(&w) + logdet + n * (2.0 * std::f64::consts::PI).ln()))
}

/// Fixed smoothness and optimizer settings for fitting a parsimonious model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaternFitConfig {
    pub nu: Vec<f64>,
    #[serde(default)]
    pub optimizer: BfgsOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaternFit {
    pub model: MaternCrossCovariance,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub status: OptimStatus,
}

fn unpack_matern(x: &[f64], nu: &[f64]) -> Result<MaternCrossCovariance> {
    let p = nu.len();
    let sigma: Vec<f64> = x[..p].iter().map(|v| v.exp()).collect();
    let mut rho = vec![vec![1.0; p]; p];
    let mut k = p;
    for i in 0..p {
        for j in 0..i {
            rho[i][j] = x[k].tanh();
            rho[j][i] = rho[i][j];
            k += 1;
        }
    }
    MaternCrossCovariance::parsimonious(sigma, nu.to_vec(), x[k].exp(), rho)
}

/// Maximum-likelihood fit of σ, ρ and the common scale with ν fixed.
pub fn fit_parsimonious(obs: &ObservationSet, config: &MaternFitConfig) -> Result<MaternFit> {
    let p = config.nu.len();
    if p != obs.p {
        return Err(Error::Shape(format!("config has {p} smoothness values for {} fields", obs.p)));
    }
    if obs.len() < 2 {
        return Err(Error::InsufficientData("at least two observations are needed".into()));
    }
    let mut x0 = Vec::new();
    for f in 0..p {
        let vals: Vec<f64> = obs.records.iter().filter(|r| r.field == f).map(|r| r.value).collect();
        let var = if vals.len() > 1 {
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64
        } else {
            1.0
        };
        x0.push(0.5 * var.max(1e-12).ln());
    }
    x0.extend(std::iter::repeat_n(0.0, p * (p - 1) / 2));
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for r in &obs.records {
        for d in 0..2 {
            lo[d] = lo[d].min(r.location[d]);
            hi[d] = hi[d].max(r.location[d]);
        }
    }
    let extent = (hi[0] - lo[0]).hypot(hi[1] - lo[1]).max(1e-6);
    let nu_mean = config.nu.iter().sum::<f64>() / p as f64;
    // start with a range of a fifth of the data extent
    x0.push(((8.0 * nu_mean).sqrt() / (0.2 * extent)).ln());

    let objective = |x: &[f64]| match unpack_matern(x, &config.nu).and_then(|m| dense_log_likelihood(&m, obs)) {
        Ok(v) => -v,
        Err(_) => f64::INFINITY,
    };
    let res = minimize(objective, &x0, &config.optimizer)?;
    Ok(MaternFit {
        model: unpack_matern(&res.x, &config.nu)?,
        log_likelihood: -res.f,
        iterations: res.iterations,
        status: res.status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_mesh, Rect};
    use crate::observations::Observation;

    #[test]
    fn correlation_special_cases() {
        assert_eq!(matern_correlation(0.0, 1.3, 2.0).unwrap(), 1.0);
        for &h in &[0.01, 0.5, 3.0, 10.0] {
            let v = matern_correlation(h, 0.5, 0.7).unwrap();
            assert!((v - (-0.7 * h).exp()).abs() < 1e-13);
        }
        let v = matern_correlation(2.0, 1.0, 1.0).unwrap();
        assert!((v - 0.279_731_763_633_044_9).abs() < 1e-10);
        assert_eq!(matern_correlation(1e6, 1.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn correlation_at_effective_range() {
        for i in 0..=15 {
            let nu = 0.5 + 0.1 * i as f64;
            let r = effective_range(nu, 1.7).unwrap();
            let c = matern_correlation(r, nu, 1.7).unwrap();
            assert!((0.12..=0.145).contains(&c), "nu={nu}: {c}");
        }
        assert_eq!(effective_range(0.5, 1.0).unwrap(), 2.0);
        assert!((effective_range(1.0, 2.0).unwrap() - 8f64.sqrt() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn colocated_covariance() {
        let rho = vec![vec![1.0, -0.5], vec![-0.5, 1.0]];
        let m = MaternCrossCovariance::parsimonious(vec![2.0, 3.0], vec![1.0, 1.0], 1.0, rho).unwrap();
        let c = assemble_covariance(&m, &[[0.0, 0.0], [0.0, 0.0]], &[0, 1]).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[4.0, -3.0, -3.0, 9.0]);
        assert!((c - expect).abs().max() < 1e-14);
    }

    #[test]
    fn far_apart_blocks_vanish() {
        let rho = vec![vec![1.0, 0.6], vec![0.6, 1.0]];
        let m = MaternCrossCovariance::parsimonious(vec![1.0, 1.0], vec![1.0, 1.5], 2.0, rho).unwrap();
        let range = effective_range(1.5, 2.0).unwrap();
        let c = assemble_covariance(&m, &[[0.0, 0.0], [10.0 * range, 0.0]], &[0, 1]).unwrap();
        assert!(c[(0, 1)].abs() < 1e-6);
    }

    #[test]
    fn strong_correlation_with_unequal_smoothness_is_invalid() {
        // with ν11 ≠ ν22 the parsimonious model caps |ρ| below 1
        let locs: Vec<Point> = (0..25).map(|i| [(i % 5) as f64 * 0.05, (i / 5) as f64 * 0.05]).collect();
        let mut all_locs = locs.clone();
        all_locs.extend(&locs);
        let fields: Vec<usize> = (0..50).map(|i| i / 25).collect();
        let mut failed_at = None;
        for step in 0..100 {
            let r = step as f64 / 100.0;
            let rho = vec![vec![1.0, r], vec![r, 1.0]];
            let m = MaternCrossCovariance::parsimonious(vec![1.0, 1.0], vec![0.5, 2.5], 1.0, rho).unwrap();
            if assemble_covariance(&m, &all_locs, &fields).is_err() {
                failed_at = Some(r);
                break;
            }
        }
        assert!(matches!(failed_at, Some(r) if r < 1.0));
    }

    fn obs_at(points: &[(Point, usize, f64)], nugget: f64) -> ObservationSet {
        let mesh = build_mesh(Rect::new(-1.0, -1.0, 2.0, 2.0), 0.5, 0.0).unwrap();
        let recs = points
            .iter()
            .map(|&(location, field, value)| Observation { location, field, value })
            .collect();
        ObservationSet::new(recs, vec![nugget, nugget], &mesh).unwrap()
    }

    #[test]
    fn kriging_interpolates_and_borrows_across_fields() {
        let rho = vec![vec![1.0, -0.9], vec![-0.9, 1.0]];
        let m = MaternCrossCovariance::parsimonious(vec![1.0, 2.0], vec![1.0, 1.0], 1.5, rho).unwrap();
        let obs = obs_at(&[([0.2, 0.3], 0, 1.7), ([0.9, 0.1], 0, -0.4)], 0.0);
        let k = dense_krige(&m, &obs, &[([0.2, 0.3], 0), ([0.2, 0.3], 1)]).unwrap();
        assert!((k.mean[0] - 1.7).abs() < 1e-10);
        assert!(k.variance[0] < 1e-10);
        assert!(k.mean[1] < 0.0);
        // direct 2×2 formula for a single co-located observation
        let single = obs_at(&[([0.5, 0.5], 0, 1.0)], 0.0);
        let k1 = dense_krige(&m, &single, &[([0.5, 0.5], 1)]).unwrap();
        assert!((k1.mean[0] - (-0.9 * 2.0 * 1.0)).abs() < 1e-12);
        assert!((k1.variance[0] - 4.0 * (1.0 - 0.81)).abs() < 1e-12);
        let empty = obs_at(&[], 0.1);
        let k0 = dense_krige(&m, &empty, &[([0.0, 0.0], 1)]).unwrap();
        assert_eq!((k0.mean[0], k0.variance[0]), (0.0, 4.0));
    }

    #[test]
    fn likelihood_matches_univariate_formula() {
        let m = MaternCrossCovariance::parsimonious(vec![1.5], vec![0.5], 1.0, vec![vec![1.0]]).unwrap();
        let mesh = build_mesh(Rect::unit(), 0.5, 0.0).unwrap();
        let recs = vec![
            Observation { location: [0.0, 0.0], field: 0, value: 0.3 },
            Observation { location: [1.0, 0.0], field: 0, value: -0.2 },
        ];
        let obs = ObservationSet::new(recs, vec![0.25], &mesh).unwrap();
        let c12 = 2.25 * (-1.0f64).exp();
        let v = 2.25 + 0.25;
        let det = v * v - c12 * c12;
        let quad = (v * 0.09 + v * 0.04 - 2.0 * c12 * 0.3 * -0.2) / det;
        let expect = -0.5 * (quad + det.ln() + 2.0 * (2.0 * std::f64::consts::PI).ln());
        assert!((dense_log_likelihood(&m, &obs).unwrap() - expect).abs() < 1e-12);
    }
}
