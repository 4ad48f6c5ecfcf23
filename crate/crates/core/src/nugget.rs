//! Iterative estimation of per-field nugget variances from kriging
//! residuals and kriging variances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::assemble;
use crate::gmrf::{predictive_variances, Conditioned};
use crate::inference::{fit_with_context, FitConfig, FitResult, PosteriorContext};
use crate::mesh::TriangulatedDomain;
use crate::observations::ObservationSet;

/// Result of one weighted update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NuggetUpdate {
    pub tau2: f64,
    /// The raw weighted estimate was negative and has been set to zero.
    pub clamped: bool,
}

/// `Σ wⱼ (rⱼ² − Vⱼ)` with `wⱼ ∝ 1 / (τ² + Vⱼ)` normalized to sum to one.
pub fn weighted_nugget_update(residuals: &[f64], kriging_variances: &[f64], tau2_current: f64) -> Result<NuggetUpdate> {
    if residuals.len() != kriging_variances.len() {
        return Err(Error::Shape("residuals and kriging variances differ in length".into()));
    }
    if residuals.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "nugget update needs at least 2 points, got {}",
            residuals.len()
        )));
    }
    if !(tau2_current >= 0.0) {
        return Err(Error::InvalidParameter(format!("current nugget variance {tau2_current} is negative")));
    }
    if let Some(v) = kriging_variances.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::InvalidParameter(format!("kriging variance {v} is negative")));
    }
    let mut wsum = 0.0;
    let mut acc = 0.0;
    for (r, v) in residuals.iter().zip(kriging_variances) {
        let denom = tau2_current + v;
        let w = if denom > 0.0 { 1.0 / denom } else { 1.0 };
        wsum += w;
        acc += w * (r * r - v);
    }
    let est = acc / wsum;
    Ok(if est < 0.0 {
        NuggetUpdate { tau2: 0.0, clamped: true }
    } else {
        NuggetUpdate { tau2: est, clamped: false }
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// Each point predicted from all other points.
    #[default]
    LeaveOneOut,
    /// In-sample predictions with posterior variances. Cheaper to reason
    /// about but biased low, since each point helps predict itself.
    PlugIn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiasCorrectionOptions {
    pub max_iters: usize,
    /// Stop when `max |Δτ²| / τ² < tol`.
    pub tol: f64,
    pub residuals: ResidualMode,
    /// Refit θ at every iteration; otherwise θ is fitted once at `tau2_init`.
    pub refit: bool,
}

impl Default for BiasCorrectionOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-3,
            residuals: ResidualMode::LeaveOneOut,
            refit: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuggetState {
    pub tau2: Vec<f64>,
    pub iteration: usize,
    /// `τ²` after every iteration, starting with the initial values.
    pub history: Vec<Vec<f64>>,
    /// Per field, whether the latest update was clamped at zero.
    pub clamped: Vec<bool>,
    pub converged: bool,
    /// Set when an inner fit failed and the loop stopped early.
    pub failure: Option<String>,
    pub last_fit: Option<FitResult>,
}

impl NuggetState {
    /// Trajectory as CSV rows `iteration,tau2_field1,...`.
    pub fn trajectory_csv(&self) -> String {
        let mut out = String::from("iteration");
        for i in 0..self.tau2.len() {
            out.push_str(&format!(",tau2_field{}", i + 1));
        }
        out.push('\n');
        for (k, row) in self.history.iter().enumerate() {
            out.push_str(&k.to_string());
            for v in row {
                out.push_str(&format!(",{v:.16e}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Kriging residuals `ŷ − y` and kriging variances `V` at the data points.
pub fn kriging_residuals(cond: &Conditioned, obs: &ObservationSet, mode: ResidualMode) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = obs.a.mul_vec(&cond.mu_c);
    let v = predictive_variances(cond, &obs.a)?;
    let tau2 = obs.row_nuggets();
    let y = obs.values();
    let mut res = Vec::with_capacity(y.len());
    let mut var = Vec::with_capacity(y.len());
    for j in 0..y.len() {
        match mode {
            ResidualMode::PlugIn => {
                res.push(m[j] - y[j]);
                var.push(v[j]);
            }
            ResidualMode::LeaveOneOut => {
                // remove point j from the Gaussian posterior of A_j x
                if !(v[j] < tau2[j]) {
                    return Err(Error::Conditioning(format!(
                        "posterior variance {} at row {j} is not below its nugget variance",
                        v[j]
                    )));
                }
                let v_cav = v[j] * tau2[j] / (tau2[j] - v[j]);
                let m_cav = v_cav * (m[j] / v[j] - y[j] / tau2[j]);
                res.push(m_cav - y[j]);
                var.push(v_cav);
            }
        }
    }
    Ok((res, var))
}

/// Alternates fitting θ at the current nugget variances with weighted
/// nugget updates from kriging residuals.
pub fn run_bias_correction(
    obs: &ObservationSet,
    mesh: &TriangulatedDomain,
    fit_config: &FitConfig,
    tau2_init: &[f64],
    options: &BiasCorrectionOptions,
) -> Result<NuggetState> {
    let p = obs.p;
    if tau2_init.len() != p {
        return Err(Error::Shape(format!("expected {p} initial nugget variances")));
    }
    if let Some(t) = tau2_init.iter().find(|t| !(**t > 0.0)) {
        return Err(Error::InvalidParameter(format!("initial nugget variance {t} must be positive")));
    }
    for f in 0..p {
        if obs.rows_of_field(f).len() < 2 {
            return Err(Error::InsufficientData(format!("field {f} has fewer than 2 observations")));
        }
    }
    let fem = assemble(mesh)?;
    let mut state = NuggetState {
        tau2: tau2_init.to_vec(),
        iteration: 0,
        history: vec![tau2_init.to_vec()],
        clamped: vec![false; p],
        converged: false,
        failure: None,
        last_fit: None,
    };
    let mut config = fit_config.clone();
    let mut theta: Option<Vec<f64>> = None;
    while state.iteration < options.max_iters {
        // a clamped zero nugget has no finite precision; keep a small floor
        let floor: Vec<f64> = state.tau2.iter().map(|t| t.max(1e-10)).collect();
        let current = obs.with_nuggets(floor.clone())?;
        let step = (|| -> Result<(Vec<f64>, Vec<f64>, Option<FitResult>)> {
            let ctx = PosteriorContext::with_fem(fem.clone(), &current, config.clone())?;
            let mut new_fit = None;
            if theta.is_none() || options.refit {
                let r = fit_with_context(&ctx)?;
                theta = Some(r.parameters.values.clone());
                new_fit = Some(r);
            }
            let (_, _, cond) = ctx.posterior(theta.as_ref().unwrap())?;
            let (res, var) = kriging_residuals(&cond, &current, options.residuals)?;
            Ok((res, var, new_fit))
        })();
        let (res, var, new_fit) = match step {
            Ok(s) => s,
            Err(e) => {
                state.failure = Some(e.to_string());
                return Ok(state);
            }
        };
        if let Some(r) = new_fit {
            // warm start later refits from the latest estimate
            config.initial = Some(r.spec.clone());
            config.starts = 1;
            state.last_fit = Some(r);
        }
        let mut next = Vec::with_capacity(p);
        for f in 0..p {
            let rows = current.rows_of_field(f);
            let r: Vec<f64> = rows.iter().map(|&i| res[i]).collect();
            let v: Vec<f64> = rows.iter().map(|&i| var[i]).collect();
            let u = weighted_nugget_update(&r, &v, state.tau2[f])?;
            state.clamped[f] = u.clamped;
            next.push(u.tau2);
        }
        let change = next
            .iter()
            .zip(&state.tau2)
            .map(|(n, o)| (n - o).abs() / o.max(1e-300))
            .fold(0.0f64, f64::max);
        state.tau2 = next;
        state.iteration += 1;
        state.history.push(state.tau2.clone());
        if change < options.tol {
            state.converged = true;
            break;
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmrf::{condition, simulate_observations};
    use crate::mesh::{build_mesh, Rect};
    use crate::observations::Observation;
    use crate::precision::{assemble_precision, SpdeSystemSpec};
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn zero_variances_give_mean_square() {
        let r = [1.0, -2.0, 0.5, 3.0];
        let u = weighted_nugget_update(&r, &[0.0; 4], 0.7).unwrap();
        let ms = r.iter().map(|x| x * x).sum::<f64>() / 4.0;
        assert!((u.tau2 - ms).abs() < 1e-15);
        assert!(!u.clamped);
    }

    #[test]
    fn clamps_negative_estimate() {
        let u = weighted_nugget_update(&[0.1, 0.1], &[1.0, 2.0], 1.0).unwrap();
        assert_eq!(u.tau2, 0.0);
        assert!(u.clamped);
        assert!(matches!(
            weighted_nugget_update(&[], &[], 1.0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn loo_residuals_match_dense_refit() {
        let mesh = build_mesh(Rect::new(0.0, 0.0, 8.0, 8.0), 2.0, 0.0).unwrap();
        let fem = assemble(&mesh).unwrap();
        let spec = SpdeSystemSpec::bivariate([2, 2, 2], [0.5, 0.6, 0.4], [1.0, -0.8, 1.0], [0, 0], [0.5, 0.4]);
        let gmrf = assemble_precision(&spec, &fem).unwrap();
        let recs: Vec<Observation> = (0..10)
            .map(|i| Observation {
                location: [0.3 + (i as f64 * 2.71) % 7.4, 0.2 + (i as f64 * 1.93) % 7.5],
                field: i % 2,
                value: (i as f64 * 0.77).sin(),
            })
            .collect();
        let obs = ObservationSet::new(recs, vec![0.3, 0.2], &mesh).unwrap();
        let cond = condition(&gmrf, &obs).unwrap();
        let (res, var) = kriging_residuals(&cond, &obs, ResidualMode::LeaveOneOut).unwrap();

        // dense: predict A_j x from all other rows
        let cov = gmrf.q.to_dense().cholesky().unwrap().inverse();
        let a = obs.a.to_dense();
        let s: DMatrix<f64> = &a * &cov * a.transpose();
        let y = obs.values();
        let tau = obs.row_nuggets();
        for j in 0..obs.len() {
            let others: Vec<usize> = (0..obs.len()).filter(|&k| k != j).collect();
            let m = others.len();
            let mut so = DMatrix::zeros(m, m);
            let mut c = DVector::zeros(m);
            let mut yo = DVector::zeros(m);
            for (u, &k) in others.iter().enumerate() {
                for (w, &l) in others.iter().enumerate() {
                    so[(u, w)] = s[(k, l)] + if k == l { tau[k] } else { 0.0 };
                }
                c[u] = s[(j, k)];
                yo[u] = y[k];
            }
            let ch = so.cholesky().unwrap();
            let pred = c.dot(&ch.solve(&yo));
            let pv = s[(j, j)] - c.dot(&ch.solve(&c));
            assert!((res[j] - (pred - y[j])).abs() < 1e-9, "row {j}");
            assert!((var[j] - pv).abs() < 1e-9 * pv.max(1.0), "row {j}");
        }
    }

    #[test]
    fn infinite_tolerance_stops_after_one_iteration() {
        let mesh = build_mesh(Rect::new(0.0, 0.0, 10.0, 10.0), 1.0, 0.0).unwrap();
        let fem = assemble(&mesh).unwrap();
        let spec = SpdeSystemSpec::bivariate([2, 2, 2], [0.5, 0.6, 0.4], [1.0, -0.8, 1.0], [0, 0], [0.5, 0.4]);
        let gmrf = assemble_precision(&spec, &fem).unwrap();
        let sites: Vec<_> = (0..60)
            .flat_map(|i| {
                let loc = [(i as f64 * 6.18034) % 10.0, (i as f64 * 7.54878) % 10.0];
                [(loc, 0), (loc, 1)]
            })
            .collect();
        let (_, obs) = simulate_observations(&gmrf, &mesh, &sites, &[0.1, 0.1], 3).unwrap();
        let opts = BiasCorrectionOptions {
            tol: f64::INFINITY,
            refit: false,
            ..Default::default()
        };
        let state = run_bias_correction(&obs, &mesh, &FitConfig::new(spec), &[0.1, 0.1], &opts).unwrap();
        assert_eq!(state.iteration, 1);
        assert_eq!(state.history.len(), 2);
        assert!(state.converged);
        let csv = state.trajectory_csv();
        assert!(csv.starts_with("iteration,tau2_field1,tau2_field2\n0,"));
        assert_eq!(csv.lines().count(), 3);
    }
}
