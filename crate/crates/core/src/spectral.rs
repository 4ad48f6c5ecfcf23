//! Power spectra of bivariate SPDE systems, Matérn spectra, and the map
//! from SPDE parameters to covariance-based Matérn parameters.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma, ln_gamma};

use crate::error::{Error, Result};
use crate::precision::SpdeSystemSpec;

/// Spatial dimension of every domain handled by this crate.
pub const DIM: f64 = 2.0;

/// Real 2×2 spectral density matrix `[[S11, S12], [S21, S22]]`.
pub type SpectralMatrix = [[f64; 2]; 2];

/// Symbol `b (κ² + |k|²)^{α/2}` of `b (κ² − Δ)^{α/2}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatorSymbol {
    pub b: f64,
    pub kappa: f64,
    pub alpha: u32,
}

impl OperatorSymbol {
    pub fn eval(&self, k_norm2: f64) -> f64 {
        match self.alpha {
            0 => self.b,
            2 => self.b * (self.kappa * self.kappa + k_norm2),
            a => self.b * (self.kappa * self.kappa + k_norm2).powf(a as f64 / 2.0),
        }
    }
}

fn symbol(spec: &SpdeSystemSpec, i: usize, j: usize) -> OperatorSymbol {
    OperatorSymbol {
        b: spec.b[i][j],
        kappa: spec.kappa[i][j],
        alpha: spec.alpha[i][j],
    }
}

/// Spectrum of a unit-variance-scale noise field, `(2π)^{-d} (κ² + |k|²)^{−α}`.
pub fn noise_spectrum(noise_alpha: u32, noise_kappa: f64, k_norm2: f64) -> f64 {
    let base = (2.0 * PI).powf(-DIM);
    if noise_alpha == 0 {
        base
    } else {
        base * (noise_kappa * noise_kappa + k_norm2).powi(-(noise_alpha as i32))
    }
}

fn require_bivariate(spec: &SpdeSystemSpec) -> Result<()> {
    if spec.p != 2 {
        return Err(Error::Shape(format!("closed-form spectra need p = 2, got p = {}", spec.p)));
    }
    spec.validate()
}

/// `S_x(k) = H⁻¹ S_f H⁻ᵀ` for a general bivariate system with real symbols.
pub fn power_spectrum_full(spec: &SpdeSystemSpec, k: [f64; 2]) -> Result<SpectralMatrix> {
    require_bivariate(spec)?;
    let k2 = k[0] * k[0] + k[1] * k[1];
    let h11 = symbol(spec, 0, 0).eval(k2);
    let h12 = symbol(spec, 0, 1).eval(k2);
    let h21 = symbol(spec, 1, 0).eval(k2);
    let h22 = symbol(spec, 1, 1).eval(k2);
    let sf1 = noise_spectrum(spec.noise_alpha[0], spec.noise_kappa[0], k2);
    let sf2 = noise_spectrum(spec.noise_alpha[1], spec.noise_kappa[1], k2);
    let det = h11 * h22 - h12 * h21;
    let scale = (h11 * h22).abs().max((h12 * h21).abs());
    if !(det.abs() > 1e-14 * scale) {
        return Err(Error::SingularSymbol { k_norm: k2.sqrt(), det });
    }
    let det2 = det * det;
    let s11 = (h22 * h22 * sf1 + h12 * h12 * sf2) / det2;
    let s12 = -(h22 * h21 * sf1 + h12 * h11 * sf2) / det2;
    let s22 = (h21 * h21 * sf1 + h11 * h11 * sf2) / det2;
    Ok([[s11, s12], [s12, s22]])
}

/// Spectra of the triangular system (`b12 = 0`).
pub fn power_spectrum_triangular(spec: &SpdeSystemSpec, k: [f64; 2]) -> Result<SpectralMatrix> {
    require_bivariate(spec)?;
    if spec.b[0][1] != 0.0 {
        return Err(Error::NotTriangular(spec.b[0][1]));
    }
    let k2 = k[0] * k[0] + k[1] * k[1];
    let h11 = symbol(spec, 0, 0).eval(k2);
    let h21 = symbol(spec, 1, 0).eval(k2);
    let h22 = symbol(spec, 1, 1).eval(k2);
    let sf1 = noise_spectrum(spec.noise_alpha[0], spec.noise_kappa[0], k2);
    let sf2 = noise_spectrum(spec.noise_alpha[1], spec.noise_kappa[1], k2);
    let h11_2 = h11 * h11;
    let s11 = sf1 / h11_2;
    let s12 = -sf1 * h21 / (h22 * h11_2);
    let s22 = (h21 * h21 * sf1 + h11_2 * sf2) / (h11_2 * h22 * h22);
    Ok([[s11, s12], [s12, s22]])
}

/// Rows `(|k|, S11, S12, S22)` along the first frequency axis.
pub fn spectra_curve(spec: &SpdeSystemSpec, k_values: &[f64]) -> Result<Vec<[f64; 4]>> {
    k_values
        .iter()
        .map(|&k| {
            let s = power_spectrum_full(spec, [k, 0.0])?;
            Ok([k, s[0][0], s[0][1], s[1][1]])
        })
        .collect()
}

/// Spectral density of a Matérn covariance `σ² M(h | ν, a)` in dimension `d`.
pub fn matern_spectrum(sigma2: f64, nu: f64, a: f64, d: f64, k_norm: f64) -> Result<f64> {
    if !(sigma2 > 0.0 && nu > 0.0 && a > 0.0 && d > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "matern spectrum needs positive sigma2, nu, a, d (got {sigma2}, {nu}, {a}, {d})"
        )));
    }
    let log = -d * (2.0 * PI).ln() + 2.0 * nu * a.ln() + 0.5 * d * (4.0 * PI).ln() + ln_gamma(nu + 0.5 * d)
        - ln_gamma(nu)
        - (nu + 0.5 * d) * (a * a + k_norm * k_norm).ln();
    Ok(sigma2 * log.exp())
}

/// Covariance-based bivariate Matérn parameters equivalent to a triangular
/// SPDE system with a common scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedMaternParams {
    pub sigma1: f64,
    pub sigma2: f64,
    pub rho12: f64,
    pub nu11: f64,
    pub nu12: f64,
    pub nu22: f64,
    pub a: f64,
}

/// `(4π)^{d/2} a^{2ν} Γ(ν + d/2) / Γ(ν)`: the factor turning a variance
/// into the coefficient of `(a² + |k|²)^{−ν−d/2}` (up to `(2π)^{-d}`).
fn spectral_factor(nu: f64, a: f64) -> f64 {
    (4.0 * PI).powf(DIM / 2.0) * a.powf(2.0 * nu) * gamma(nu + DIM / 2.0) / gamma(nu)
}

pub fn match_parameters(spec: &SpdeSystemSpec) -> Result<MatchedMaternParams> {
    require_bivariate(spec)?;
    if spec.b[0][1] != 0.0 {
        return Err(Error::NotTriangular(spec.b[0][1]));
    }
    let a = spec.kappa[0][0];
    let same = |k: f64| (k - a).abs() <= 1e-12 * a;
    let mut scales = vec![("kappa11", spec.kappa[0][0]), ("kappa22", spec.kappa[1][1])];
    if spec.alpha[1][0] == 2 && spec.b[1][0] != 0.0 {
        scales.push(("kappa21", spec.kappa[1][0]));
    }
    for i in 0..2 {
        if spec.noise_alpha[i] > 0 {
            scales.push((if i == 0 { "noise_kappa1" } else { "noise_kappa2" }, spec.noise_kappa[i]));
        }
    }
    if spec.alpha[0][0] != 2 || spec.alpha[1][1] != 2 {
        return Err(Error::MatchingRegime("diagonal operators must have alpha = 2".into()));
    }
    if let Some((name, k)) = scales.iter().find(|(_, k)| !same(*k)) {
        return Err(Error::MatchingRegime(format!("{name} = {k} differs from kappa11 = {a}")));
    }

    let half_d = DIM / 2.0;
    let (a11, a21, a22) = (spec.alpha[0][0] as f64, spec.alpha[1][0] as f64, spec.alpha[1][1] as f64);
    let (an1, an2) = (spec.noise_alpha[0] as f64, spec.noise_alpha[1] as f64);
    let (b11, b21, b22) = (spec.b[0][0], spec.b[1][0], spec.b[1][1]);

    let nu11 = a11 + an1 - half_d;
    let nu12 = a11 + a22 / 2.0 + an1 - a21 / 2.0 - half_d;
    let nu22 = if a21 + an2 <= a11 + an1 {
        an2 + a22 - half_d
    } else {
        a11 + a22 + an1 - a21 - half_d
    };
    if !(nu11 > 0.0) || !(nu22 > 0.0) {
        return Err(Error::InconsistentParameters(format!(
            "smoothness must be positive (nu11 = {nu11}, nu22 = {nu22})"
        )));
    }
    let var1 = 1.0 / (b11 * b11 * spectral_factor(nu11, a));
    let var2 = (b21 * b21 + b11 * b11) / (b11 * b11 * b22 * b22 * spectral_factor(nu22, a));
    let cross = if b21 == 0.0 {
        0.0
    } else {
        if !(nu12 > 0.0) {
            return Err(Error::InconsistentParameters(format!("cross smoothness nu12 = {nu12} is not positive")));
        }
        -b21 / (b22 * b11 * b11 * spectral_factor(nu12, a))
    };
    let (sigma1, sigma2) = (var1.sqrt(), var2.sqrt());
    let rho12 = cross / (sigma1 * sigma2);
    if rho12.abs() > 1.0 + 1e-12 {
        return Err(Error::InconsistentParameters(format!("|rho12| = {} exceeds 1", rho12.abs())));
    }
    Ok(MatchedMaternParams {
        sigma1,
        sigma2,
        rho12: rho12.clamp(-1.0, 1.0),
        nu11,
        nu12,
        nu22,
        a,
    })
}
