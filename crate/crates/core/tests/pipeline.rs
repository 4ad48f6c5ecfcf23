use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use multispde::fem::assemble;
use multispde::gmrf::{condition, predictive_variances, simulate_observations};
use multispde::inference::{predict, relative_errors};
use multispde::io::{ingest_observations, write_observations_csv};
use multispde::matern::{dense_krige, MaternCrossCovariance};
use multispde::mesh::{build_mesh, Rect};
use multispde::observations::{Observation, ObservationSet};
use multispde::precision::{build_precision, SpdeSystemSpec};
use multispde::spectral::match_parameters;

#[test]
fn gmrf_means_agree_with_dense_kriging_in_matching_regime() {
    let region = Rect::new(0.0, 0.0, 10.0, 10.0);
    let mesh = build_mesh(region, 0.25, 3.0).unwrap();
    let fem = assemble(&mesh).unwrap();
    let k = 1.0;
    let spec = SpdeSystemSpec::bivariate([2, 2, 2], [k, k, k], [1.0, -0.6, 1.0], [0, 0], [k, k]);
    let gmrf = build_precision(&spec, &fem).unwrap();
    let mp = match_parameters(&spec).unwrap();
    let model = MaternCrossCovariance::parsimonious(
        vec![mp.sigma1, mp.sigma2],
        vec![mp.nu11, mp.nu22],
        mp.a,
        vec![vec![1.0, mp.rho12], vec![mp.rho12, 1.0]],
    )
    .unwrap();

    let mut rng = ChaCha20Rng::seed_from_u64(21);
    let sites: Vec<_> = (0..80)
        .map(|i| ([rng.random_range(1.0..9.0), rng.random_range(1.0..9.0)], i % 2))
        .collect();
    let nugget = [0.01 * mp.sigma1.powi(2), 0.01 * mp.sigma2.powi(2)];
    let (_, obs) = simulate_observations(&gmrf, &mesh, &sites, &nugget, 3).unwrap();
    let targets: Vec<_> = (0..60)
        .map(|i| ([rng.random_range(2.0..8.0), rng.random_range(2.0..8.0)], i % 2))
        .collect();
    let spde = predict(&spec, &mesh, &obs, &targets).unwrap();
    let dense = dense_krige(&model, &obs, &targets).unwrap().mean;
    let num: f64 = spde.iter().zip(&dense).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = dense.iter().map(|b| b * b).sum();
    let rel = (num / den).sqrt();
    assert!(rel < 0.05, "relative difference {rel}");
}

#[test]
fn exact_observation_at_vertex_is_interpolated() {
    let mesh = build_mesh(Rect::new(0.0, 0.0, 9.0, 9.0), 1.0, 0.0).unwrap();
    let fem = assemble(&mesh).unwrap();
    let gmrf = build_precision(&SpdeSystemSpec::preset("bivariate-positive").unwrap(), &fem).unwrap();
    let v = mesh.nearest_vertex([4.0, 5.0]);
    let obs = ObservationSet::new(
        vec![Observation {
            location: mesh.vertices[v],
            field: 0,
            value: 2.5,
        }],
        vec![1e-12, 1e-12],
        &mesh,
    )
    .unwrap();
    let c = condition(&gmrf, &obs).unwrap();
    assert!((c.mu_c[v] - 2.5).abs() < 1e-4);
    // the other field borrows strength through the coupling
    let n = mesh.num_vertices();
    assert!(c.mu_c[n + v].abs() > 1e-3);
    let var = predictive_variances(&c, &obs.a).unwrap();
    assert!(var[0] < 1e-10);
}

#[test]
fn conditioning_matches_dense_gaussian_formulas() {
    let mesh = build_mesh(Rect::new(0.0, 0.0, 8.0, 8.0), 1.0, 0.0).unwrap();
    let fem = assemble(&mesh).unwrap();
    let gmrf = build_precision(&SpdeSystemSpec::preset("bivariate-smooth-noise").unwrap(), &fem).unwrap();
    let recs: Vec<Observation> = (0..25)
        .map(|i| Observation {
            location: [(i as f64 * 2.93) % 8.0, (i as f64 * 1.37) % 8.0],
            field: (i / 3) % 2,
            value: (i as f64).cos(),
        })
        .collect();
    let obs = ObservationSet::new(recs, vec![0.05, 0.3], &mesh).unwrap();
    let c = condition(&gmrf, &obs).unwrap();
    let sigma = gmrf.q.to_dense().cholesky().unwrap().inverse();
    let a = obs.a.to_dense();
    let mut s = &a * &sigma * a.transpose();
    for (i, t) in obs.row_nuggets().iter().enumerate() {
        s[(i, i)] += t;
    }
    let y = DVector::from_vec(obs.values());
    let mean = &sigma * a.transpose() * s.clone().cholesky().unwrap().solve(&y);
    let err = (DVector::from_vec(c.mu_c.clone()) - &mean).amax();
    assert!(err < 1e-8 * mean.amax());
    let post: DMatrix<f64> = &a * (&sigma - &sigma * a.transpose() * s.cholesky().unwrap().solve(&(&a * &sigma))) * a.transpose();
    let var = predictive_variances(&c, &obs.a).unwrap();
    for (i, v) in var.iter().enumerate() {
        assert!((v - post[(i, i)]).abs() < 1e-8 * post[(i, i)].abs().max(1e-3), "row {i}");
    }
}

#[test]
fn posterior_precision_adds_only_local_fill() {
    let mesh = build_mesh(Rect::new(0.0, 0.0, 10.0, 10.0), 1.0, 0.0).unwrap();
    let fem = assemble(&mesh).unwrap();
    let gmrf = build_precision(&SpdeSystemSpec::preset("bivariate-negative").unwrap(), &fem).unwrap();
    let recs = vec![
        Observation {
            location: [2.3, 7.6],
            field: 0,
            value: 1.0,
        },
        Observation {
            location: [6.1, 3.2],
            field: 1,
            value: -1.0,
        },
    ];
    let obs = ObservationSet::new(recs, vec![0.1, 0.1], &mesh).unwrap();
    let c = condition(&gmrf, &obs).unwrap();
    let n = mesh.num_vertices();
    let mut touched = std::collections::HashSet::new();
    for r in &obs.records {
        let loc = mesh.locate_point(r.location).unwrap();
        for v in mesh.triangles[loc.triangle_index] {
            touched.insert(r.field * n + v);
        }
    }
    for (i, j, _) in c.q_c.q.triplets() {
        if gmrf.q.get(i, j) == 0.0 && c.q_c.q.get(i, j) != 0.0 && i != j {
            assert!(touched.contains(&i) && touched.contains(&j), "new entry ({i}, {j})");
        }
    }
}

#[test]
fn training_points_are_interpolated_as_nugget_vanishes() {
    let mesh = build_mesh(Rect::new(0.0, 0.0, 10.0, 10.0), 1.0, 0.0).unwrap();
    let fem = assemble(&mesh).unwrap();
    let spec = SpdeSystemSpec::preset("bivariate-positive").unwrap();
    let gmrf = build_precision(&spec, &fem).unwrap();
    let sites: Vec<_> = (0..30).map(|i| ([(i as f64 * 3.3) % 10.0, (i as f64 * 7.1) % 10.0], i % 2)).collect();
    let (_, obs) = simulate_observations(&gmrf, &mesh, &sites, &[1e-10, 1e-10], 8).unwrap();
    let pred = predict(&spec, &mesh, &obs, &sites).unwrap();
    let fields: Vec<usize> = sites.iter().map(|s| s.1).collect();
    let e = relative_errors(&pred, &obs.values(), &fields, 2).unwrap();
    assert!(e.iter().all(|v| *v < 1e-4), "{e:?}");
    assert_eq!(relative_errors(&pred, &pred, &fields, 2).unwrap(), vec![0.0, 0.0]);
}

#[test]
fn ingests_a_two_field_file() {
    let mesh = build_mesh(Rect::new(0.0, 0.0, 100.0, 100.0), 10.0, 0.0).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(157);
    let mut recs = Vec::new();
    for _ in 0..157 {
        let loc = [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)];
        for f in 0..2 {
            recs.push(Observation {
                location: loc,
                field: f,
                value: rng.random_range(-3.0..3.0),
            });
        }
    }
    let mut file = tempfile::NamedTempFile::new().unwrap();
    write_observations_csv(&mut file, &recs).unwrap();
    file.flush().unwrap();
    let ing = ingest_observations(file.path(), &mesh, &[1.0, 1.0]).unwrap();
    assert_eq!(ing.observations.len(), 314);
    assert!(ing.rejected_rows.is_empty());
    assert_eq!(ing.observations.records, recs);
    let at = ing.observations.a.transpose();
    for r in 0..314 {
        assert!(at.col(r).count() <= 3);
    }
}
