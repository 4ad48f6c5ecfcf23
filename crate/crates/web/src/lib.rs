//! WebAssembly bindings behind `www/index.html`.
//!
//! The plain functions in [`demo`] do the work and are tested natively; the
//! `#[wasm_bindgen]` wrappers only translate errors for JavaScript.

pub mod demo;

use wasm_bindgen::prelude::*;

fn js_err(e: multispde::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Log-spaced spectra, flattened as `[|k|, S11, S12, S22]` per frequency.
#[wasm_bindgen]
pub fn spectra(kappa11: f64, kappa21: f64, kappa22: f64, b21: f64, points: usize) -> Result<Vec<f64>, JsError> {
    let params = demo::DemoParams::new(kappa11, kappa21, kappa22, b21);
    demo::spectra(&params, 1e-2, 1e2, points)
        .map(|rows| rows.concat())
        .map_err(js_err)
}

/// Correlation surfaces on a `cells × cells` grid over `[0, 10]²`, with the
/// centre as reference. Returns `corr11 | corr12 | corr22`, each in
/// row-major vertex order.
#[wasm_bindgen]
pub fn correlation_surface(
    kappa11: f64,
    kappa21: f64,
    kappa22: f64,
    b21: f64,
    cells: usize,
) -> Result<Vec<f64>, JsError> {
    let params = demo::DemoParams::new(kappa11, kappa21, kappa22, b21);
    demo::correlation_surface(&params, cells).map_err(js_err)
}

/// Matérn correlation at `points` distances in `[0, h_max]`.
#[wasm_bindgen]
pub fn matern_curve(nu: f64, a: f64, h_max: f64, points: usize) -> Result<Vec<f64>, JsError> {
    demo::matern_curve(nu, a, h_max, points).map_err(js_err)
}

#[wasm_bindgen]
pub fn effective_range(nu: f64, a: f64) -> Result<f64, JsError> {
    multispde::matern::effective_range(nu, a).map_err(js_err)
}
