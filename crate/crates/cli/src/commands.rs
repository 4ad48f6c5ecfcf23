use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use multispde::fem::assemble;
use multispde::gmrf::{
    condition, correlation_surfaces, factorize, interpolate, predictive_variances, rng_from_seed, sample as draw,
    simulate_observations,
};
use multispde::inference::{fit as fit_spde, FitConfig};
use multispde::io::{
    compare_models, fmt_f64, ingest_records, read_observations_csv, read_targets_csv, write_field_csv,
    write_observations_csv, write_predictions_csv, write_spectra_csv, CompareConfig, Ingested,
};
use multispde::mesh::{build_mesh, Point, Rect, TriangulatedDomain};
use multispde::nugget::{run_bias_correction, BiasCorrectionOptions, ResidualMode};
use multispde::observations::{Observation, ObservationSet};
use multispde::precision::build_precision;
use multispde::spectral::{match_parameters, spectra_curve};
use multispde::{Error, Result};
use rand::Rng;
use serde_json::json;

use crate::output::{load_mesh, load_spec, open, write_json, Inputs};
use crate::{CompareArgs, CorrArgs, Failure, FitArgs, MatchArgs, MeshArgs, NuggetArgs, PredictArgs, SampleArgs, SpectraArgs};

type Outcome = std::result::Result<(), Failure>;

fn ingest(inputs: &mut Inputs, data: &Path, mesh: &TriangulatedDomain, nugget: &[f64]) -> Result<Ingested> {
    let content = inputs.file(data)?;
    let ing = ingest_records(read_observations_csv(content.as_bytes())?, mesh, nugget)?;
    if !ing.rejected_rows.is_empty() {
        eprintln!(
            "warning: {} rows outside the mesh were skipped: {:?}",
            ing.rejected_rows.len(),
            ing.rejected_rows
        );
    }
    Ok(ing)
}

fn load_fit_config(inputs: &mut Inputs, path: &Path, nugget: Option<Vec<f64>>) -> Result<FitConfig> {
    let mut config = FitConfig::from_json(&inputs.file(path)?)?;
    if let Some(n) = nugget {
        inputs.text("nugget", &n);
        config.nugget_variance = Some(n);
    }
    Ok(config)
}

fn required_nugget(config: &FitConfig) -> Result<Vec<f64>> {
    config
        .nugget_variance
        .clone()
        .ok_or_else(|| Error::Config("nugget variances are required (config or --nugget)".into()))
}

pub fn mesh(args: MeshArgs) -> Outcome {
    let r = &args.region;
    if r.len() != 4 {
        return Err(Error::Config("--region takes four values x0,y0,x1,y1".into()).into());
    }
    let mut inputs = Inputs::new("mesh");
    inputs.text("region", r);
    inputs.text("edge", args.edge);
    inputs.text("margin", args.margin);
    let mesh = build_mesh(Rect::new(r[0], r[1], r[2], r[3]), args.edge, args.margin)?;
    if let Some(dir) = &args.fem_out {
        let fem = assemble(&mesh)?;
        std::fs::create_dir_all(dir)?;
        fem.c.write_matrix_market(BufWriter::new(File::create(dir.join("C.mtx"))?))?;
        fem.g.write_matrix_market(BufWriter::new(File::create(dir.join("G.mtx"))?))?;
    }
    let body: serde_json::Value = serde_json::from_str(&mesh.to_json()?)?;
    write_json(args.out.as_ref(), &inputs.provenance(None), &body)?;
    Ok(())
}

pub fn sample(args: SampleArgs) -> Outcome {
    let mut inputs = Inputs::new("sample");
    let spec = load_spec(&mut inputs, &args.spec)?;
    let mesh = load_mesh(&mut inputs, &args.mesh)?;
    inputs.text("observations", args.observations);
    inputs.text("nugget", &args.nugget);
    let prov = inputs.provenance(Some(args.seed));
    let fem = assemble(&mesh)?;
    let gmrf = build_precision(&spec, &fem)?;
    if let Some(path) = &args.precision_out {
        gmrf.q.write_matrix_market(BufWriter::new(File::create(path)?))?;
    }
    let x = match (args.observations, &args.nugget) {
        (Some(count), Some(nugget)) => {
            let bbox = mesh.bounding_box();
            let mut rng = rng_from_seed(args.seed.wrapping_add(1));
            let mut sites: Vec<(Point, usize)> = Vec::with_capacity(count * spec.p);
            for _ in 0..count {
                let loc = [rng.random_range(bbox.x0..=bbox.x1), rng.random_range(bbox.y0..=bbox.y1)];
                sites.extend((0..spec.p).map(|f| (loc, f)));
            }
            let (x, obs) = simulate_observations(&gmrf, &mesh, &sites, nugget, args.seed)?;
            if let Some(path) = &args.obs_out {
                let mut w = open(Some(path))?;
                prov.write_comment(&mut w)?;
                write_observations_csv(&mut w, &obs.records)?;
                w.flush()?;
            }
            x
        }
        _ => draw(&factorize(&gmrf)?, &vec![0.0; gmrf.dim()], args.seed)?,
    };
    let mut w = open(args.out.as_ref())?;
    write_field_csv(&mut w, &prov, &mesh, spec.p, &x)?;
    w.flush()?;
    Ok(())
}

pub fn corr(args: CorrArgs) -> Outcome {
    let mut inputs = Inputs::new("corr");
    let spec = load_spec(&mut inputs, &args.spec)?;
    let mesh = load_mesh(&mut inputs, &args.mesh)?;
    let reference = match (args.vertex, &args.at) {
        (Some(v), _) => {
            if v >= mesh.num_vertices() {
                return Err(Error::IndexOutOfRange {
                    index: v,
                    len: mesh.num_vertices(),
                }
                .into());
            }
            v
        }
        (None, Some(p)) if p.len() == 2 => mesh.nearest_vertex([p[0], p[1]]),
        (None, Some(_)) => return Err(Error::Config("--at takes two values x,y".into()).into()),
        (None, None) => {
            let b = mesh.bounding_box();
            mesh.nearest_vertex([(b.x0 + b.x1) / 2.0, (b.y0 + b.y1) / 2.0])
        }
    };
    inputs.text("reference", reference);
    let gmrf = build_precision(&spec, &assemble(&mesh)?)?;
    let surf = correlation_surfaces(&gmrf, reference)?;
    let mut w = open(args.out.as_ref())?;
    inputs.provenance(None).write_comment(&mut w)?;
    writeln!(w, "vertex,x,y,i,j,corr")?;
    for i in 0..spec.p {
        for j in 0..spec.p {
            for (v, c) in surf.get(i, j).iter().enumerate() {
                let pt = mesh.vertices[v];
                writeln!(w, "{v},{},{},{i},{j},{}", fmt_f64(pt[0]), fmt_f64(pt[1]), fmt_f64(*c))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn spectra(args: SpectraArgs) -> Outcome {
    if !(args.k_min > 0.0 && args.k_max > args.k_min && args.points >= 2) {
        return Err(Error::Config("need 0 < k-min < k-max and at least 2 points".into()).into());
    }
    let mut inputs = Inputs::new("spectra");
    let spec = load_spec(&mut inputs, &args.spec)?;
    inputs.text("k", (args.k_min, args.k_max, args.points));
    let (lo, hi) = (args.k_min.log10(), args.k_max.log10());
    let last = (args.points - 1) as f64;
    let ks: Vec<f64> = (0..args.points)
        .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / last))
        .collect();
    let rows = spectra_curve(&spec, &ks)?;
    let mut w = open(args.out.as_ref())?;
    write_spectra_csv(&mut w, &inputs.provenance(None), &rows)?;
    w.flush()?;
    Ok(())
}

pub fn fit(args: FitArgs) -> Outcome {
    let mut inputs = Inputs::new("fit");
    let mesh = load_mesh(&mut inputs, &args.mesh)?;
    let config = load_fit_config(&mut inputs, &args.config, args.nugget)?;
    let ing = ingest(&mut inputs, &args.data, &mesh, &required_nugget(&config)?)?;
    let result = fit_spde(&ing.observations, &mesh, &config)?;
    let body = json!({
        "rejected_rows": ing.rejected_rows,
        "result": result,
    });
    write_json(args.out.as_ref(), &inputs.provenance(None), &body)?;
    if !result.converged() {
        return Err(Failure::Numeric(format!(
            "optimizer did not converge ({:?}, gradient norm {:e})",
            result.status, result.grad_norm
        )));
    }
    Ok(())
}

pub fn predict(args: PredictArgs) -> Outcome {
    let mut inputs = Inputs::new("predict");
    let spec = load_spec(&mut inputs, &args.spec)?;
    let mesh = load_mesh(&mut inputs, &args.mesh)?;
    inputs.text("nugget", &args.nugget);
    let obs = ingest(&mut inputs, &args.data, &mesh, &args.nugget)?.observations;
    let targets = read_targets_csv(inputs.file(&args.targets)?.as_bytes())?;
    let gmrf = build_precision(&spec, &assemble(&mesh)?)?;
    let cond = condition(&gmrf, &obs)?;
    let records = targets
        .iter()
        .map(|&(location, field)| Observation {
            location,
            field,
            value: 0.0,
        })
        .collect();
    let at = ObservationSet::new(records, args.nugget.clone(), &mesh)?;
    let mean = interpolate(&at.a, &cond.mu_c);
    let variance = if args.variance {
        Some(predictive_variances(&cond, &at.a)?)
    } else {
        None
    };
    inputs.text("variance", args.variance);
    let mut w = open(args.out.as_ref())?;
    write_predictions_csv(&mut w, &inputs.provenance(None), &targets, &mean, variance.as_deref())?;
    w.flush()?;
    Ok(())
}

pub fn nugget(args: NuggetArgs) -> Outcome {
    let mut inputs = Inputs::new("nugget");
    let mesh = load_mesh(&mut inputs, &args.mesh)?;
    let config = load_fit_config(&mut inputs, &args.config, None)?;
    inputs.text("tau2", &args.tau2);
    let obs = ingest(&mut inputs, &args.data, &mesh, &args.tau2)?.observations;
    let options = BiasCorrectionOptions {
        max_iters: args.max_iters,
        tol: args.tol,
        residuals: if args.plug_in {
            ResidualMode::PlugIn
        } else {
            ResidualMode::LeaveOneOut
        },
        refit: !args.no_refit,
    };
    inputs.text("options", (args.max_iters, args.tol, args.plug_in, args.no_refit));
    let state = run_bias_correction(&obs, &mesh, &config, &args.tau2, &options)?;
    let prov = inputs.provenance(None);
    let mut w = open(args.out.as_ref())?;
    prov.write_comment(&mut w)?;
    w.write_all(state.trajectory_csv().as_bytes())?;
    w.flush()?;
    if let Some(path) = &args.state_out {
        write_json(Some(path), &prov, &state)?;
    }
    if let Some(msg) = &state.failure {
        return Err(Failure::Numeric(format!("bias correction stopped early: {msg}")));
    }
    if !state.converged {
        return Err(Failure::Numeric(format!(
            "nugget variances did not settle within {} iterations",
            args.max_iters
        )));
    }
    Ok(())
}

pub fn matched(args: MatchArgs) -> Outcome {
    let mut inputs = Inputs::new("match");
    let spec = load_spec(&mut inputs, &args.spec)?;
    let params = match_parameters(&spec)?;
    write_json(args.out.as_ref(), &inputs.provenance(None), &json!({ "matched": params }))?;
    Ok(())
}

pub fn compare(args: CompareArgs) -> Outcome {
    let mut inputs = Inputs::new("compare");
    let mesh = load_mesh(&mut inputs, &args.mesh)?;
    let mut config: CompareConfig =
        serde_json::from_str(&inputs.file(&args.config)?).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(n) = args.nugget {
        config.spde.nugget_variance = Some(n);
    }
    config.spde.validate()?;
    let ing = ingest(&mut inputs, &args.data, &mesh, &required_nugget(&config.spde)?)?;
    let report = compare_models(&ing.observations, &mesh, args.holdout, args.seed, &config)?;
    let mut w = open(args.out.as_ref())?;
    w.write_all(report.to_json()?.as_bytes())?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}
