//! Point observations of a multivariate field and their link to the mesh.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Point, TriangulatedDomain};
use crate::sparse::SparseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub location: Point,
    /// 0-based field index.
    pub field: usize,
    pub value: f64,
}

/// Observations with per-field nugget variances and the barycentric
/// observation matrix `A` (`t × pN`, field-major columns).
#[derive(Debug, Clone)]
pub struct ObservationSet {
    pub records: Vec<Observation>,
    pub nugget_variance: Vec<f64>,
    pub a: SparseMatrix,
    pub p: usize,
    pub n_vertices: usize,
}

impl ObservationSet {
    pub fn new(records: Vec<Observation>, nugget_variance: Vec<f64>, mesh: &TriangulatedDomain) -> Result<Self> {
        let p = nugget_variance.len();
        if p == 0 {
            return Err(Error::Shape("at least one field is required".into()));
        }
        if let Some(t) = nugget_variance.iter().find(|t| !(**t >= 0.0) || !t.is_finite()) {
            return Err(Error::InvalidParameter(format!("nugget variance {t} must be finite and nonnegative")));
        }
        let n = mesh.num_vertices();
        let mut trip = Vec::with_capacity(3 * records.len());
        for (row, r) in records.iter().enumerate() {
            if r.field >= p {
                return Err(Error::Schema(format!("row {row}: field {} is not below p = {p}", r.field)));
            }
            if !r.value.is_finite() {
                return Err(Error::Schema(format!("row {row}: value is not finite")));
            }
            let loc = mesh.locate_point(r.location)?;
            let tri = mesh.triangles[loc.triangle_index];
            for (k, w) in loc.weights.iter().enumerate() {
                if *w != 0.0 {
                    trip.push((row, r.field * n + tri[k], *w));
                }
            }
        }
        let a = SparseMatrix::from_triplets(records.len(), p * n, &trip);
        Ok(Self {
            records,
            nugget_variance,
            a,
            p,
            n_vertices: n,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.value).collect()
    }

    /// Nugget variance of each row.
    pub fn row_nuggets(&self) -> Vec<f64> {
        self.records.iter().map(|r| self.nugget_variance[r.field]).collect()
    }

    /// Diagonal of `Q_n`.
    pub fn noise_precision(&self) -> Result<Vec<f64>> {
        self.row_nuggets()
            .into_iter()
            .map(|t| {
                if t > 0.0 {
                    Ok(1.0 / t)
                } else {
                    Err(Error::Conditioning("a zero nugget variance has no finite precision".into()))
                }
            })
            .collect()
    }

    /// Same records with different nugget variances.
    pub fn with_nuggets(&self, nugget_variance: Vec<f64>) -> Result<Self> {
        if nugget_variance.len() != self.p {
            return Err(Error::Shape(format!("expected {} nugget variances", self.p)));
        }
        if let Some(t) = nugget_variance.iter().find(|t| !(**t >= 0.0) || !t.is_finite()) {
            return Err(Error::InvalidParameter(format!("nugget variance {t} must be finite and nonnegative")));
        }
        Ok(Self {
            nugget_variance,
            ..self.clone()
        })
    }

    /// Rows `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let t = self.len();
        if let Some(&i) = indices.iter().find(|&&i| i >= t) {
            return Err(Error::IndexOutOfRange { index: i, len: t });
        }
        let records = indices.iter().map(|&i| self.records[i]).collect();
        let mut trip = Vec::new();
        let at = self.a.transpose();
        for (row, &i) in indices.iter().enumerate() {
            trip.extend(at.col(i).map(|(c, v)| (row, c, v)));
        }
        Ok(Self {
            records,
            nugget_variance: self.nugget_variance.clone(),
            a: SparseMatrix::from_triplets(indices.len(), self.a.ncols(), &trip),
            p: self.p,
            n_vertices: self.n_vertices,
        })
    }

    /// Row indices belonging to field `field`.
    pub fn rows_of_field(&self, field: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.records[i].field == field).collect()
    }
}
