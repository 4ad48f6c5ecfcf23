//! Observation ingestion, plot-ready CSV output and the hold-out
//! comparison between the SPDE model and a dense Matérn model.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gmrf::rng_from_seed;
use crate::inference::{fit, predict, relative_errors, FitConfig};
use crate::matern::{dense_krige, fit_parsimonious, MaternCrossCovariance, MaternFitConfig};
use crate::mesh::{Point, TriangulatedDomain};
use crate::observations::{Observation, ObservationSet};
use crate::optim::OptimStatus;
use crate::precision::SpdeSystemSpec;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn config_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Identifies the inputs an artifact was produced from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub seed: Option<u64>,
    pub config_hash: String,
}

impl Provenance {
    pub fn new(config_bytes: &[u8], seed: Option<u64>) -> Self {
        Self {
            version: VERSION.to_string(),
            seed,
            config_hash: config_hash(config_bytes),
        }
    }

    /// Writes the `# multispde ...` header line used by CSV artifacts.
    pub fn write_comment<W: Write>(&self, w: &mut W) -> Result<()> {
        let seed = self.seed.map_or_else(|| "none".to_string(), |s| s.to_string());
        writeln!(w, "# multispde {} seed={} config={}", self.version, seed, self.config_hash)?;
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
struct ObsRow {
    x: f64,
    y: f64,
    field: usize,
    value: f64,
}

/// Parses `x,y,field,value` records. Lines starting with `#` are ignored.
/// Errors carry the 1-based line number in the file.
pub fn read_observations_csv<R: Read>(reader: R) -> Result<Vec<Observation>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols != ["x", "y", "field", "value"] {
        return Err(Error::Parse {
            line: headers.position().map_or(1, |p| p.line() as usize),
            message: format!("expected header x,y,field,value, found {}", cols.join(",")),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let row: ObsRow = rec.deserialize(Some(&headers)).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if !(row.x.is_finite() && row.y.is_finite() && row.value.is_finite()) {
            return Err(Error::Parse {
                line,
                message: "non-finite number".into(),
            });
        }
        out.push(Observation {
            location: [row.x, row.y],
            field: row.field,
            value: row.value,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub observations: ObservationSet,
    /// 0-based data-row indices dropped for lying outside the mesh.
    pub rejected_rows: Vec<usize>,
}

/// Builds an observation set against `mesh`, dropping rows outside it.
pub fn ingest_records(records: Vec<Observation>, mesh: &TriangulatedDomain, nugget_variance: &[f64]) -> Result<Ingested> {
    let p = nugget_variance.len();
    if let Some((i, r)) = records.iter().enumerate().find(|(_, r)| r.field >= p) {
        return Err(Error::Schema(format!("row {i}: field {} is not below p = {p}", r.field)));
    }
    let total = records.len();
    let mut kept = Vec::with_capacity(total);
    let mut rejected_rows = Vec::new();
    for (i, r) in records.into_iter().enumerate() {
        if mesh.locate_point(r.location).is_ok() {
            kept.push(r);
        } else {
            rejected_rows.push(i);
        }
    }
    if kept.is_empty() {
        return Err(Error::InsufficientData(if total == 0 {
            "no observations".to_string()
        } else {
            format!("all {total} observations lie outside the mesh")
        }));
    }
    Ok(Ingested {
        observations: ObservationSet::new(kept, nugget_variance.to_vec(), mesh)?,
        rejected_rows,
    })
}

pub fn ingest_observations(path: &Path, mesh: &TriangulatedDomain, nugget_variance: &[f64]) -> Result<Ingested> {
    let file = std::fs::File::open(path)?;
    ingest_records(read_observations_csv(file)?, mesh, nugget_variance)
}

pub fn write_observations_csv<W: Write>(w: W, records: &[Observation]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["x", "y", "field", "value"])?;
    for r in records {
        wtr.write_record([
            fmt_f64(r.location[0]),
            fmt_f64(r.location[1]),
            r.field.to_string(),
            fmt_f64(r.value),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// `vertex,x,y,field,value` for a field-major latent vector.
pub fn write_field_csv<W: Write>(
    mut w: W,
    provenance: &Provenance,
    mesh: &TriangulatedDomain,
    p: usize,
    values: &[f64],
) -> Result<()> {
    let n = mesh.num_vertices();
    if values.len() != p * n {
        return Err(Error::Shape(format!("expected {} values, got {}", p * n, values.len())));
    }
    provenance.write_comment(&mut w)?;
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["vertex", "x", "y", "field", "value"])?;
    for f in 0..p {
        for (v, pt) in mesh.vertices.iter().enumerate() {
            wtr.write_record([
                v.to_string(),
                fmt_f64(pt[0]),
                fmt_f64(pt[1]),
                f.to_string(),
                fmt_f64(values[f * n + v]),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// `|k|,S11,S12,S22` rows.
pub fn write_spectra_csv<W: Write>(mut w: W, provenance: &Provenance, rows: &[[f64; 4]]) -> Result<()> {
    provenance.write_comment(&mut w)?;
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["|k|", "S11", "S12", "S22"])?;
    for r in rows {
        wtr.write_record(r.iter().map(|v| fmt_f64(*v)))?;
    }
    wtr.flush()?;
    Ok(())
}

/// `x,y,field,mean[,variance]` rows for prediction targets.
pub fn write_predictions_csv<W: Write>(
    mut w: W,
    provenance: &Provenance,
    targets: &[(Point, usize)],
    mean: &[f64],
    variance: Option<&[f64]>,
) -> Result<()> {
    if mean.len() != targets.len() || variance.is_some_and(|v| v.len() != targets.len()) {
        return Err(Error::Shape("one prediction per target is required".into()));
    }
    provenance.write_comment(&mut w)?;
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["x", "y", "field", "mean"];
    if variance.is_some() {
        header.push("variance");
    }
    wtr.write_record(&header)?;
    for (k, ((pt, f), m)) in targets.iter().zip(mean).enumerate() {
        let mut row = vec![fmt_f64(pt[0]), fmt_f64(pt[1]), f.to_string(), fmt_f64(*m)];
        if let Some(v) = variance {
            row.push(fmt_f64(v[k]));
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Prediction targets from a CSV with columns `x,y,field` (a `value`
/// column, if present, is ignored).
pub fn read_targets_csv<R: Read>(reader: R) -> Result<Vec<(Point, usize)>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("missing column {name}"),
        })
    };
    let (cx, cy, cf) = (col("x")?, col("y")?, col("field")?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let parse = |c: usize| -> Result<f64> {
            rec.get(c).unwrap_or("").parse::<f64>().map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })
        };
        let field = rec.get(cf).unwrap_or("").parse::<usize>().map_err(|e| Error::Parse {
            line,
            message: format!("field: {e}"),
        })?;
        out.push(([parse(cx)?, parse(cy)?], field));
    }
    Ok(out)
}

/// Inputs of the hold-out comparison besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub spde: FitConfig,
    /// Fixed smoothness of the dense model; matched from the SPDE template
    /// when absent.
    #[serde(default)]
    pub matern_nu: Option<Vec<f64>>,
    #[serde(default)]
    pub matern_optimizer: crate::optim::BfgsOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldErrors {
    pub field: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub spde_relative_error: f64,
    pub matern_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub provenance: Provenance,
    pub holdout_fraction: f64,
    /// Errors are computed on the training data when nothing is held out.
    pub in_sample: bool,
    pub fields: Vec<FieldErrors>,
    pub spde_spec: SpdeSystemSpec,
    pub spde_log_posterior: f64,
    pub spde_status: OptimStatus,
    pub matern_model: MaternCrossCovariance,
    pub matern_log_likelihood: f64,
    pub matern_status: OptimStatus,
}

impl ComparisonReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Seeded per-field split: returns (train, test) row indices.
pub fn holdout_split(obs: &ObservationSet, holdout_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(Error::Config(format!("hold-out fraction {holdout_fraction} must lie in [0, 1)")));
    }
    let mut rng = rng_from_seed(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for f in 0..obs.p {
        let mut rows = obs.rows_of_field(f);
        let k = (holdout_fraction * rows.len() as f64).round() as usize;
        if rows.len() < k + 2 {
            return Err(Error::Config(format!(
                "field {f}: holding out {k} of {} observations leaves too few to fit",
                rows.len()
            )));
        }
        rows.shuffle(&mut rng);
        test.extend_from_slice(&rows[..k]);
        train.extend_from_slice(&rows[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Fits both models on a seeded training split and reports per-field
/// relative prediction errors on the held-out rows.
pub fn compare_models(
    obs: &ObservationSet,
    mesh: &TriangulatedDomain,
    holdout_fraction: f64,
    seed: u64,
    config: &CompareConfig,
) -> Result<ComparisonReport> {
    let (train_idx, test_idx) = holdout_split(obs, holdout_fraction, seed)?;
    let in_sample = test_idx.is_empty();
    let train = obs.subset(&train_idx)?;
    let test = if in_sample { train.clone() } else { obs.subset(&test_idx)? };
    let targets: Vec<(Point, usize)> = test.records.iter().map(|r| (r.location, r.field)).collect();
    let truth = test.values();
    let fields: Vec<usize> = test.records.iter().map(|r| r.field).collect();

    let spde = fit(&train, mesh, &config.spde)?;
    let spde_pred = predict(&spde.spec, mesh, &train, &targets)?;

    let nu = match &config.matern_nu {
        Some(nu) => nu.clone(),
        None => matched_smoothness(&config.spde.template),
    };
    let matern = fit_parsimonious(
        &train,
        &MaternFitConfig {
            nu,
            optimizer: config.matern_optimizer,
        },
    )?;
    let matern_pred = dense_krige(&matern.model, &train, &targets)?.mean;

    let e_spde = relative_errors(&spde_pred, &truth, &fields, obs.p)?;
    let e_matern = relative_errors(&matern_pred, &truth, &fields, obs.p)?;
    let config_bytes = serde_json::to_vec(config)?;
    let mut hasher_input = config_bytes;
    hasher_input.extend_from_slice(format!("|{holdout_fraction:?}").as_bytes());
    Ok(ComparisonReport {
        provenance: Provenance::new(&hasher_input, Some(seed)),
        holdout_fraction,
        in_sample,
        fields: (0..obs.p)
            .map(|f| FieldErrors {
                field: f,
                n_train: train.rows_of_field(f).len(),
                n_test: if in_sample { 0 } else { test.rows_of_field(f).len() },
                spde_relative_error: e_spde[f],
                matern_relative_error: e_matern[f],
            })
            .collect(),
        spde_spec: spde.spec,
        spde_log_posterior: spde.log_posterior,
        spde_status: spde.status,
        matern_model: matern.model,
        matern_log_likelihood: matern.log_likelihood,
        matern_status: matern.status,
    })
}

/// Marginal smoothness `α_ii + α_ni − 1` of each field of a triangular
/// system, floored at 0.5.
pub fn matched_smoothness(spec: &SpdeSystemSpec) -> Vec<f64> {
    (0..spec.p)
        .map(|i| (spec.alpha[i][i] as f64 + spec.noise_alpha[i] as f64 - 1.0).max(0.5))
        .collect()
}
