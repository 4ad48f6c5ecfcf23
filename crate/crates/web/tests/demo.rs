use multispde::matern::matern_correlation;
use multispde_web::demo::{correlation_surface, grid_vertices, matern_curve, spectra, DemoParams};

#[test]
fn spectra_rows_are_log_spaced_and_decay() {
    let p = DemoParams::new(0.5, 0.5, 0.5, 1.0);
    let rows = spectra(&p, 0.01, 100.0, 9).unwrap();
    assert_eq!(rows.len(), 9);
    assert!((rows[0][0] - 0.01).abs() < 1e-15);
    assert!((rows[8][0] - 100.0).abs() < 1e-12);
    for w in rows.windows(2) {
        assert!((w[1][0] / w[0][0] - 10f64.powf(0.5)).abs() < 1e-12);
        assert!(w[1][1] < w[0][1] && w[1][3] < w[0][3]);
    }
    // S12 carries the sign of -b21 relative to S11
    assert!(rows.iter().all(|r| r[2] < 0.0));
    let flipped = spectra(&DemoParams::new(0.5, 0.5, 0.5, -1.0), 0.01, 100.0, 9).unwrap();
    assert!(flipped.iter().all(|r| r[2] > 0.0));
}

#[test]
fn correlation_surface_layout() {
    let cells = 20;
    let out = correlation_surface(&DemoParams::new(0.8, 0.8, 0.8, -1.0), cells).unwrap();
    let n = grid_vertices(cells);
    assert_eq!(out.len(), 3 * n);
    let centre = (cells / 2) * (cells + 1) + cells / 2;
    assert!((out[centre] - 1.0).abs() < 1e-12);
    assert!((out[2 * n + centre] - 1.0).abs() < 1e-12);
    assert!(out[n + centre] > 0.0);
    assert!(out.iter().all(|c| c.abs() <= 1.0 + 1e-12));
    // the corner is far from the centre relative to the range
    assert!(out[0].abs() < out[centre - 1].abs());
}

#[test]
fn matern_curve_matches_core() {
    let c = matern_curve(1.5, 2.0, 3.0, 31).unwrap();
    assert_eq!(c.len(), 31);
    assert_eq!(c[0], 1.0);
    for (i, v) in c.iter().enumerate() {
        assert_eq!(*v, matern_correlation(3.0 * i as f64 / 30.0, 1.5, 2.0).unwrap());
    }
}

#[test]
fn rejects_bad_inputs() {
    let p = DemoParams::new(0.5, 0.5, 0.5, 1.0);
    assert!(spectra(&p, 0.0, 1.0, 10).is_err());
    assert!(spectra(&p, 1.0, 10.0, 1).is_err());
    assert!(correlation_surface(&p, 500).is_err());
    assert!(correlation_surface(&DemoParams::new(-1.0, 0.5, 0.5, 1.0), 10).is_err());
    assert!(matern_curve(0.0, 1.0, 1.0, 10).is_err());
    assert!(matern_curve(1.0, 1.0, -1.0, 10).is_err());
}
