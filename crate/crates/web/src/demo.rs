use multispde::fem::assemble;
use multispde::gmrf::correlation_surfaces;
use multispde::matern::matern_correlation;
use multispde::mesh::{structured_grid, Rect};
use multispde::precision::{build_precision, SpdeSystemSpec};
use multispde::spectral::spectra_curve;
use multispde::{Error, Result};

pub const SIDE: f64 = 10.0;
const MAX_CELLS: usize = 80;
const MAX_POINTS: usize = 2000;

/// Triangular bivariate system with `α = 2` everywhere, unit diagonal `b`
/// and white noise whose scale follows the diagonal `κ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemoParams {
    pub kappa11: f64,
    pub kappa21: f64,
    pub kappa22: f64,
    pub b21: f64,
}

impl DemoParams {
    pub fn new(kappa11: f64, kappa21: f64, kappa22: f64, b21: f64) -> Self {
        Self {
            kappa11,
            kappa21,
            kappa22,
            b21,
        }
    }

    pub fn spec(&self) -> Result<SpdeSystemSpec> {
        let spec = SpdeSystemSpec::bivariate(
            [2, 2, 2],
            [self.kappa11, self.kappa21, self.kappa22],
            [1.0, self.b21, 1.0],
            [0, 0],
            [self.kappa11, self.kappa22],
        );
        spec.validate()?;
        Ok(spec)
    }
}

fn check_count(what: &str, n: usize, lo: usize, hi: usize) -> Result<()> {
    if n < lo || n > hi {
        return Err(Error::InvalidParameter(format!("{what} must lie in [{lo}, {hi}], got {n}")));
    }
    Ok(())
}

pub fn spectra(params: &DemoParams, k_min: f64, k_max: f64, points: usize) -> Result<Vec<[f64; 4]>> {
    check_count("points", points, 2, MAX_POINTS)?;
    if !(k_min > 0.0 && k_max > k_min) {
        return Err(Error::InvalidParameter("need 0 < k_min < k_max".into()));
    }
    let (lo, hi) = (k_min.log10(), k_max.log10());
    let ks: Vec<f64> = (0..points)
        .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (points - 1) as f64))
        .collect();
    spectra_curve(&params.spec()?, &ks)
}

pub fn grid_vertices(cells: usize) -> usize {
    (cells + 1) * (cells + 1)
}

pub fn correlation_surface(params: &DemoParams, cells: usize) -> Result<Vec<f64>> {
    check_count("cells", cells, 2, MAX_CELLS)?;
    let mesh = structured_grid(Rect::new(0.0, 0.0, SIDE, SIDE), cells, cells);
    let gmrf = build_precision(&params.spec()?, &assemble(&mesh)?)?;
    let centre = mesh.nearest_vertex([SIDE / 2.0, SIDE / 2.0]);
    let surf = correlation_surfaces(&gmrf, centre)?;
    let mut out = Vec::with_capacity(3 * mesh.num_vertices());
    for (i, j) in [(0, 0), (0, 1), (1, 1)] {
        out.extend_from_slice(surf.get(i, j));
    }
    Ok(out)
}

pub fn matern_curve(nu: f64, a: f64, h_max: f64, points: usize) -> Result<Vec<f64>> {
    check_count("points", points, 2, MAX_POINTS)?;
    if !(h_max > 0.0) {
        return Err(Error::InvalidParameter(format!("h_max must be positive, got {h_max}")));
    }
    (0..points)
        .map(|i| matern_correlation(h_max * i as f64 / (points - 1) as f64, nu, a))
        .collect()
}
