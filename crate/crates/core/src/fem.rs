//! Piecewise-linear finite element matrices with natural (Neumann)
//! boundary conditions.

use crate::error::{Error, Result};
use crate::mesh::TriangulatedDomain;
use crate::sparse::SparseMatrix;

#[derive(Debug, Clone)]
pub struct FemMatrices {
    /// Consistent mass matrix `C_mn = <ψ_m, ψ_n>`.
    pub c: SparseMatrix,
    /// Lumped mass `C̃_ii = <ψ_i, 1>`.
    pub c_lumped: Vec<f64>,
    /// Stiffness matrix `G_mn = <∇ψ_m, ∇ψ_n>`.
    pub g: SparseMatrix,
    pub n: usize,
}

/// Assembles the mass, lumped mass and stiffness matrices over `mesh`.
pub fn assemble(mesh: &TriangulatedDomain) -> Result<FemMatrices> {
    let n = mesh.num_vertices();
    let mut c_trip = Vec::with_capacity(9 * mesh.num_triangles());
    let mut g_trip = Vec::with_capacity(9 * mesh.num_triangles());
    let mut c_lumped = vec![0.0; n];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let pts = mesh.triangle_points(t);
        let area = mesh.triangle_area(t);
        let scale = pts
            .iter()
            .flat_map(|p| p.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1.0);
        if !(area > 1e-14 * scale * scale) {
            return Err(Error::DegenerateElement { index: t, area });
        }
        // edge opposite vertex k
        let e: [[f64; 2]; 3] = std::array::from_fn(|k| {
            let a = pts[(k + 1) % 3];
            let b = pts[(k + 2) % 3];
            [b[0] - a[0], b[1] - a[1]]
        });
        for i in 0..3 {
            c_lumped[tri[i]] += area / 3.0;
            for j in 0..3 {
                let mass = if i == j { area / 6.0 } else { area / 12.0 };
                c_trip.push((tri[i], tri[j], mass));
                let stiff = (e[i][0] * e[j][0] + e[i][1] * e[j][1]) / (4.0 * area);
                g_trip.push((tri[i], tri[j], stiff));
            }
        }
    }
    Ok(FemMatrices {
        c: SparseMatrix::from_triplets(n, n, &c_trip),
        c_lumped,
        g: SparseMatrix::from_triplets(n, n, &g_trip),
        n,
    })
}

/// `κ² C̃ + G` with the lumped mass.
pub fn k_matrix(fem: &FemMatrices, kappa_squared: f64) -> Result<SparseMatrix> {
    if !(kappa_squared > 0.0) || !kappa_squared.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "kappa^2 must be positive, got {kappa_squared}"
        )));
    }
    Ok(lumped_operator(fem, kappa_squared))
}

/// `κ² C̃ + G` for any `κ² ≥ 0` (the Laplacian part alone when `κ² = 0`).
pub(crate) fn lumped_operator(fem: &FemMatrices, kappa_squared: f64) -> SparseMatrix {
    let mass: Vec<f64> = fem.c_lumped.iter().map(|c| kappa_squared * c).collect();
    SparseMatrix::from_diagonal(&mass)
        .add(&fem.g)
        .expect("mass and stiffness share a shape")
}
