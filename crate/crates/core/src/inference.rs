//! Log posterior of SPDE system parameters given point observations, and
//! its numerical maximization.

use std::cell::RefCell;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cholesky::{CholeskyFactor, SymbolicCholesky};
use crate::error::{Error, Result};
use crate::fem::{assemble, FemMatrices};
use crate::gmrf::Conditioned;
use crate::mesh::{Point, TriangulatedDomain};
use crate::observations::ObservationSet;
use crate::optim::{fd_hessian, minimize, BfgsOptions, OptimStatus};
use crate::precision::{assemble_precision_with_structure, MultivariateGmrf, SpdeSystemSpec};
use crate::sparse::SparseMatrix;

/// One free coordinate of the packed parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamSlot {
    /// `log κ_ij`
    LogKappa { i: usize, j: usize },
    B { i: usize, j: usize },
}

impl ParamSlot {
    pub fn name(&self) -> String {
        match self {
            ParamSlot::LogKappa { i, j } => format!("kappa[{i}][{j}]"),
            ParamSlot::B { i, j } => format!("b[{i}][{j}]"),
        }
    }
}

/// Free parameters packed as `log κ` and raw `b` values; everything else is
/// taken from a template spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub slots: Vec<ParamSlot>,
    pub values: Vec<f64>,
}

impl ParameterVector {
    pub fn pack(spec: &SpdeSystemSpec, slots: &[ParamSlot]) -> Self {
        let values = slots
            .iter()
            .map(|s| match *s {
                ParamSlot::LogKappa { i, j } => spec.kappa[i][j].ln(),
                ParamSlot::B { i, j } => spec.b[i][j],
            })
            .collect();
        Self {
            slots: slots.to_vec(),
            values,
        }
    }

    /// Writes the free values into a copy of `template`; with `tie_noise`
    /// the noise scales follow the diagonal scales.
    pub fn unpack(&self, template: &SpdeSystemSpec, tie_noise: bool) -> SpdeSystemSpec {
        let mut spec = template.clone();
        for (slot, &v) in self.slots.iter().zip(&self.values) {
            match *slot {
                ParamSlot::LogKappa { i, j } => spec.kappa[i][j] = v.exp(),
                ParamSlot::B { i, j } => spec.b[i][j] = v,
            }
        }
        if tie_noise {
            for i in 0..spec.p {
                spec.noise_kappa[i] = spec.kappa[i][i];
            }
        }
        spec
    }
}

/// Which entries of `κ` and `b` are estimated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeMask {
    pub kappa: Vec<Vec<bool>>,
    pub b: Vec<Vec<bool>>,
}

impl FreeMask {
    /// Every coupling on and below the diagonal; `κ` only where `α = 2`.
    pub fn lower_triangular(template: &SpdeSystemSpec) -> Self {
        let p = template.p;
        Self {
            kappa: (0..p).map(|i| (0..p).map(|j| j <= i && template.alpha[i][j] == 2).collect()).collect(),
            b: (0..p).map(|i| (0..p).map(|j| j <= i).collect()).collect(),
        }
    }

    pub fn slots(&self) -> Vec<ParamSlot> {
        let p = self.b.len();
        let mut slots = Vec::new();
        for i in 0..p {
            for j in 0..p {
                if self.kappa[i][j] {
                    slots.push(ParamSlot::LogKappa { i, j });
                }
            }
        }
        for i in 0..p {
            for j in 0..p {
                if self.b[i][j] {
                    slots.push(ParamSlot::B { i, j });
                }
            }
        }
        slots
    }
}

/// Independent normal priors on `log κ` and `b`, both with mean zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub log_kappa_sd: f64,
    pub b_sd: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            log_kappa_sd: 10.0,
            b_sd: 10.0,
        }
    }
}

fn normal_logpdf(x: f64, sd: f64) -> f64 {
    -0.5 * (x / sd).powi(2) - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Fixed exponents, fixed parameter values and the default start.
    pub template: SpdeSystemSpec,
    #[serde(default)]
    pub free: Option<FreeMask>,
    #[serde(default = "default_true")]
    pub tie_noise_kappa: bool,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default)]
    pub optimizer: BfgsOptions,
    #[serde(default = "default_starts")]
    pub starts: usize,
    /// Starting point; the prior mode is used when absent.
    #[serde(default)]
    pub initial: Option<SpdeSystemSpec>,
    /// Per-field nugget variances for data files without them.
    #[serde(default)]
    pub nugget_variance: Option<Vec<f64>>,
}

fn default_true() -> bool {
    true
}

fn default_starts() -> usize {
    3
}

impl FitConfig {
    pub fn new(template: SpdeSystemSpec) -> Self {
        Self {
            template,
            free: None,
            tie_noise_kappa: true,
            prior: PriorConfig::default(),
            optimizer: BfgsOptions::default(),
            starts: 3,
            initial: None,
            nugget_variance: None,
        }
    }

    pub fn free_mask(&self) -> FreeMask {
        self.free.clone().unwrap_or_else(|| FreeMask::lower_triangular(&self.template))
    }

    pub fn validate(&self) -> Result<()> {
        self.template.validate()?;
        let p = self.template.p;
        let mask = self.free_mask();
        let ok = |m: &Vec<Vec<bool>>| m.len() == p && m.iter().all(|r| r.len() == p);
        if !ok(&mask.kappa) || !ok(&mask.b) {
            return Err(Error::Config(format!("free mask must be {p}x{p}")));
        }
        if mask.slots().is_empty() {
            return Err(Error::Config("no free parameters".into()));
        }
        if !(self.prior.log_kappa_sd > 0.0 && self.prior.b_sd > 0.0) {
            return Err(Error::Config("prior standard deviations must be positive".into()));
        }
        if let Some(init) = &self.initial {
            if init.p != p {
                return Err(Error::Config("initial spec has the wrong field count".into()));
            }
            init.validate()?;
        }
        if let Some(t) = &self.nugget_variance {
            if t.len() != p {
                return Err(Error::Config(format!("expected {p} nugget variances")));
            }
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

fn factor_cached(cache: &RefCell<Option<Arc<SymbolicCholesky>>>, q: &SparseMatrix) -> Result<CholeskyFactor> {
    let cached = cache.borrow().clone();
    if let Some(sym) = cached {
        if sym.matches_pattern(q) {
            return CholeskyFactor::with_symbolic(sym, q);
        }
    }
    let sym = Arc::new(SymbolicCholesky::analyze(q)?);
    *cache.borrow_mut() = Some(sym.clone());
    CholeskyFactor::with_symbolic(sym, q)
}

/// Everything that stays fixed while `θ` varies.
pub struct PosteriorContext<'a> {
    pub fem: FemMatrices,
    pub obs: &'a ObservationSet,
    pub config: FitConfig,
    slots: Vec<ParamSlot>,
    structure: Vec<Vec<bool>>,
    at_qn_a: SparseMatrix,
    b_c: Vec<f64>,
    qn: Vec<f64>,
    y: Vec<f64>,
    /// `−t/2 log 2π + ½ log|Q_n|`
    data_constant: f64,
    q_symbolic: RefCell<Option<Arc<SymbolicCholesky>>>,
    qc_symbolic: RefCell<Option<Arc<SymbolicCholesky>>>,
}

impl<'a> PosteriorContext<'a> {
    pub fn new(mesh: &TriangulatedDomain, obs: &'a ObservationSet, config: FitConfig) -> Result<Self> {
        config.validate()?;
        let fem = assemble(mesh)?;
        Self::with_fem(fem, obs, config)
    }

    pub fn with_fem(fem: FemMatrices, obs: &'a ObservationSet, config: FitConfig) -> Result<Self> {
        config.validate()?;
        let p = config.template.p;
        if obs.p != p || obs.n_vertices != fem.n {
            return Err(Error::Shape(format!(
                "observations are for {} fields on {} vertices; model has {p} fields on {}",
                obs.p, obs.n_vertices, fem.n
            )));
        }
        let mask = config.free_mask();
        let structure = (0..p)
            .map(|i| (0..p).map(|j| mask.b[i][j] || config.template.b[i][j] != 0.0).collect())
            .collect();
        let y = obs.values();
        let (at_qn_a, b_c, qn, data_constant) = if obs.is_empty() {
            (SparseMatrix::zeros(p * fem.n, p * fem.n), vec![0.0; p * fem.n], Vec::new(), 0.0)
        } else {
            let qn = obs.noise_precision()?;
            let at_qn = obs.a.transpose().scale_cols(&qn);
            let logdet: f64 = qn.iter().map(|w| w.ln()).sum();
            let t = obs.len() as f64;
            (
                at_qn.matmul(&obs.a)?,
                at_qn.mul_vec(&y),
                qn,
                -0.5 * t * (2.0 * std::f64::consts::PI).ln() + 0.5 * logdet,
            )
        };
        Ok(Self {
            slots: mask.slots(),
            fem,
            obs,
            config,
            structure,
            at_qn_a,
            b_c,
            qn,
            y,
            data_constant,
            q_symbolic: RefCell::new(None),
            qc_symbolic: RefCell::new(None),
        })
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn unpack(&self, values: &[f64]) -> SpdeSystemSpec {
        ParameterVector {
            slots: self.slots.clone(),
            values: values.to_vec(),
        }
        .unpack(&self.config.template, self.config.tie_noise_kappa)
    }

    pub fn pack(&self, spec: &SpdeSystemSpec) -> Vec<f64> {
        ParameterVector::pack(spec, &self.slots).values
    }

    pub fn log_prior(&self, values: &[f64]) -> f64 {
        self.slots
            .iter()
            .zip(values)
            .map(|(s, &v)| match s {
                ParamSlot::LogKappa { .. } => normal_logpdf(v, self.config.prior.log_kappa_sd),
                ParamSlot::B { .. } => normal_logpdf(v, self.config.prior.b_sd),
            })
            .sum()
    }

    pub fn precision(&self, spec: &SpdeSystemSpec) -> Result<MultivariateGmrf> {
        assemble_precision_with_structure(spec, &self.fem, Some(&self.structure))
    }

    /// Prior precision and posterior of the latent field at `values`.
    pub fn posterior(&self, values: &[f64]) -> Result<(MultivariateGmrf, CholeskyFactor, Conditioned)> {
        let spec = self.unpack(values);
        let gmrf = self.precision(&spec)?;
        let q_factor = factor_cached(&self.q_symbolic, &gmrf.q)?;
        let q_c = gmrf.q.add(&self.at_qn_a)?;
        let qc_factor = factor_cached(&self.qc_symbolic, &q_c).map_err(|e| Error::Conditioning(e.to_string()))?;
        let mu_c = qc_factor.solve(&self.b_c);
        let conditioned = Conditioned {
            mu_c,
            q_c: MultivariateGmrf {
                q: q_c,
                p: gmrf.p,
                n: gmrf.n,
            },
            factor: qc_factor,
        };
        Ok((gmrf, q_factor, conditioned))
    }

    /// `log π(θ | y)` including every normalizing term:
    /// `log π(θ) + ½ log|Q| − ½ log|Q_c| + ½ log|Q_n| − t/2 log 2π − ½ S`, where
    /// `S = yᵀQ_n y − μ_cᵀQ_cμ_c` is evaluated as `rᵀQ_n r + μ_cᵀQμ_c` with
    /// `r = y − Aμ_c`. The two forms are equal; the second avoids cancellation
    /// when the nugget is small.
    pub fn log_posterior(&self, values: &[f64]) -> Result<f64> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite parameter value".into()));
        }
        let prior = self.log_prior(values);
        if self.obs.is_empty() {
            return Ok(prior);
        }
        let (gmrf, q_factor, cond) = self.posterior(values)?;
        let fitted = self.obs.a.mul_vec(&cond.mu_c);
        let resid: f64 = self
            .y
            .iter()
            .zip(&fitted)
            .zip(&self.qn)
            .map(|((y, f), w)| w * (y - f) * (y - f))
            .sum();
        let q_mu = gmrf.q.mul_vec(&cond.mu_c);
        let prior_quad: f64 = cond.mu_c.iter().zip(&q_mu).map(|(m, q)| m * q).sum();
        Ok(prior + 0.5 * q_factor.logdet() - 0.5 * cond.factor.logdet() - 0.5 * (resid + prior_quad) + self.data_constant)
    }

    /// Negating row `i` of the operator matrix leaves the field unchanged,
    /// so every row whose free couplings cover all its nonzeros is flipped
    /// to make `b_ii` positive.
    pub fn canonicalize(&self, values: &[f64]) -> Vec<f64> {
        let spec = self.unpack(values);
        let mut out = values.to_vec();
        for i in 0..spec.p {
            if spec.b[i][i] >= 0.0 {
                continue;
            }
            let free: Vec<usize> = self
                .slots
                .iter()
                .enumerate()
                .filter_map(|(k, s)| matches!(*s, ParamSlot::B { i: r, .. } if r == i).then_some(k))
                .collect();
            let covered = (0..spec.p).all(|j| {
                spec.b[i][j] == 0.0 || self.slots.contains(&ParamSlot::B { i, j })
            });
            if covered {
                for k in free {
                    out[k] = -out[k];
                }
            }
        }
        out
    }

    /// Default start: the prior mode with diagonal couplings moved to 1 so
    /// that every equation keeps its own field.
    pub fn default_start(&self) -> Vec<f64> {
        self.slots
            .iter()
            .map(|s| match *s {
                ParamSlot::B { i, j } if i == j => 1.0,
                _ => 0.0,
            })
            .collect()
    }
}

/// `log π(θ | y)` for a single parameter vector.
pub fn log_posterior(
    theta: &ParameterVector,
    obs: &ObservationSet,
    mesh: &TriangulatedDomain,
    config: &FitConfig,
) -> Result<f64> {
    let mut cfg = config.clone();
    cfg.free = Some(mask_from_slots(&theta.slots, config.template.p));
    let ctx = PosteriorContext::new(mesh, obs, cfg)?;
    let values = ctx.pack(&theta.unpack(&config.template, config.tie_noise_kappa));
    ctx.log_posterior(&values)
}

fn mask_from_slots(slots: &[ParamSlot], p: usize) -> FreeMask {
    let mut mask = FreeMask {
        kappa: vec![vec![false; p]; p],
        b: vec![vec![false; p]; p],
    };
    for s in slots {
        match *s {
            ParamSlot::LogKappa { i, j } => mask.kappa[i][j] = true,
            ParamSlot::B { i, j } => mask.b[i][j] = true,
        }
    }
    mask
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub name: String,
    pub value: f64,
    pub std_dev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartSummary {
    pub log_posterior: f64,
    pub iterations: usize,
    pub status: OptimStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub spec: SpdeSystemSpec,
    pub parameters: ParameterVector,
    /// Natural-scale estimates (`κ`, `b`) with delta-method standard deviations.
    pub estimates: Vec<Estimate>,
    pub log_posterior: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub status: OptimStatus,
    /// False when the Hessian at the mode is not positive definite.
    pub std_devs_reliable: bool,
    pub starts: Vec<StartSummary>,
}

impl FitResult {
    pub fn converged(&self) -> bool {
        self.status == OptimStatus::Converged
    }

    pub fn estimate(&self, name: &str) -> Option<&Estimate> {
        self.estimates.iter().find(|e| e.name == name)
    }
}

fn start_points(ctx: &PosteriorContext) -> Vec<Vec<f64>> {
    let base = match &ctx.config.initial {
        Some(init) => {
            let mut spec = ctx.config.template.clone();
            spec.kappa = init.kappa.clone();
            spec.b = init.b.clone();
            ctx.pack(&spec)
        }
        None => ctx.default_start(),
    };
    let mut starts = vec![base.clone()];
    for shift in [1.0, -1.0] {
        let moved: Vec<f64> = base
            .iter()
            .zip(ctx.slots())
            .map(|(v, s)| match s {
                ParamSlot::LogKappa { .. } => v + shift,
                ParamSlot::B { .. } => *v,
            })
            .collect();
        starts.push(moved);
    }
    starts.truncate(ctx.config.starts.max(1));
    starts
}

/// Maximizes the log posterior over the free parameters.
pub fn fit(obs: &ObservationSet, mesh: &TriangulatedDomain, config: &FitConfig) -> Result<FitResult> {
    let ctx = PosteriorContext::new(mesh, obs, config.clone())?;
    fit_with_context(&ctx)
}

pub fn fit_with_context(ctx: &PosteriorContext) -> Result<FitResult> {
    let objective = |x: &[f64]| match ctx.log_posterior(x) {
        Ok(v) if v.is_finite() => -v,
        _ => f64::INFINITY,
    };
    let mut best: Option<crate::optim::OptimResult> = None;
    let mut starts = Vec::new();
    for x0 in start_points(ctx) {
        let run = match minimize(objective, &x0, &ctx.config.optimizer) {
            Ok(r) => r,
            Err(_) => continue,
        };
        starts.push(StartSummary {
            log_posterior: -run.f,
            iterations: run.iterations,
            status: run.status,
        });
        if best.as_ref().is_none_or(|b| run.f < b.f) {
            best = Some(run);
        }
    }
    let mut best = best.ok_or_else(|| Error::Optimizer("no start point has a finite log posterior".into()))?;
    best.x = ctx.canonicalize(&best.x);

    let mut obj = objective;
    let hess = fd_hessian(&mut obj, &best.x, 1e-4);
    let (packed_sd, reliable) = match hess.clone().cholesky() {
        Some(ch) if hess.iter().all(|v| v.is_finite()) => {
            let cov: DMatrix<f64> = ch.inverse();
            (cov.diagonal().iter().map(|v| v.sqrt()).collect::<Vec<_>>(), true)
        }
        _ => (vec![f64::NAN; best.x.len()], false),
    };
    let spec = ctx.unpack(&best.x);
    let estimates = ctx
        .slots()
        .iter()
        .zip(&best.x)
        .zip(&packed_sd)
        .map(|((slot, &v), &sd)| match slot {
            ParamSlot::LogKappa { .. } => Estimate {
                name: slot.name(),
                value: v.exp(),
                std_dev: v.exp() * sd,
            },
            ParamSlot::B { .. } => Estimate {
                name: slot.name(),
                value: v,
                std_dev: sd,
            },
        })
        .collect();
    Ok(FitResult {
        spec,
        parameters: ParameterVector {
            slots: ctx.slots().to_vec(),
            values: best.x.clone(),
        },
        estimates,
        log_posterior: -best.f,
        iterations: best.iterations,
        grad_norm: best.grad_norm(),
        status: best.status,
        std_devs_reliable: reliable,
        starts,
    })
}

/// Kriging predictions `A_target μ_c` under `spec`.
pub fn predict(
    spec: &SpdeSystemSpec,
    mesh: &TriangulatedDomain,
    obs: &ObservationSet,
    targets: &[(Point, usize)],
) -> Result<Vec<f64>> {
    let fem = assemble(mesh)?;
    let gmrf = crate::precision::assemble_precision(spec, &fem)?;
    let cond = crate::gmrf::condition(&gmrf, obs)?;
    let target_obs = ObservationSet::new(
        targets
            .iter()
            .map(|&(location, field)| crate::observations::Observation {
                location,
                field,
                value: 0.0,
            })
            .collect(),
        obs.nugget_variance.clone(),
        mesh,
    )?;
    Ok(target_obs.a.mul_vec(&cond.mu_c))
}

/// `‖ŷ − y‖₂ / ‖ŷ‖₂` for each field.
pub fn relative_errors(predicted: &[f64], actual: &[f64], fields: &[usize], p: usize) -> Result<Vec<f64>> {
    if predicted.len() != actual.len() || predicted.len() != fields.len() {
        return Err(Error::Shape("prediction, truth and field vectors differ in length".into()));
    }
    let mut num = vec![0.0; p];
    let mut den = vec![0.0; p];
    for ((&yh, &y), &f) in predicted.iter().zip(actual).zip(fields) {
        if f >= p {
            return Err(Error::IndexOutOfRange { index: f, len: p });
        }
        num[f] += (yh - y) * (yh - y);
        den[f] += yh * yh;
    }
    Ok(num
        .iter()
        .zip(&den)
        .map(|(n, d)| if *n == 0.0 { 0.0 } else { (n / d).sqrt() })
        .collect())
}
