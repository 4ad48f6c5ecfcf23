use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use multispde::io::Provenance;
use multispde::mesh::TriangulatedDomain;
use multispde::precision::SpdeSystemSpec;
use multispde::{Error, Result};
use serde::Serialize;
use serde_json::Value;

use crate::SpecArgs;

/// Accumulates everything an artifact depends on, so the config hash
/// changes whenever an input does.
pub struct Inputs {
    bytes: Vec<u8>,
}

impl Inputs {
    pub fn new(command: &str) -> Self {
        Self {
            bytes: command.as_bytes().to_vec(),
        }
    }

    pub fn text(&mut self, label: &str, value: impl std::fmt::Debug) {
        self.bytes.extend_from_slice(format!("|{label}={value:?}").as_bytes());
    }

    pub fn file(&mut self, path: &Path) -> Result<String> {
        let content = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        self.bytes.extend_from_slice(b"|file=");
        self.bytes.extend_from_slice(content.as_bytes());
        Ok(content)
    }

    pub fn provenance(&self, seed: Option<u64>) -> Provenance {
        Provenance::new(&self.bytes, seed)
    }
}

pub fn open(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

/// Serializes `body` with a `provenance` key added at the top level.
pub fn write_json<T: Serialize>(path: Option<&PathBuf>, provenance: &Provenance, body: &T) -> Result<()> {
    let mut value = serde_json::to_value(body)?;
    let obj = match &mut value {
        Value::Object(map) => map,
        _ => return Err(Error::Config("artifact body must be a JSON object".into())),
    };
    obj.insert("provenance".into(), serde_json::to_value(provenance)?);
    let mut w = open(path)?;
    serde_json::to_writer_pretty(&mut w, &value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn load_mesh(inputs: &mut Inputs, path: &Path) -> Result<TriangulatedDomain> {
    TriangulatedDomain::from_json(&inputs.file(path)?)
}

/// Reads a spec from a preset name, a bare spec file, or any artifact that
/// carries one under `spec`, `result.spec` or `spde_spec`.
pub fn load_spec(inputs: &mut Inputs, args: &SpecArgs) -> Result<SpdeSystemSpec> {
    let spec = match (&args.spec, &args.preset) {
        (Some(path), _) => {
            let v: Value = serde_json::from_str(&inputs.file(path)?).map_err(|e| Error::Config(e.to_string()))?;
            let inner = v
                .pointer("/result/spec")
                .or_else(|| v.get("spec"))
                .or_else(|| v.get("spde_spec"))
                .unwrap_or(&v)
                .clone();
            serde_json::from_value::<SpdeSystemSpec>(inner).map_err(|e| Error::Config(e.to_string()))?
        }
        (None, Some(name)) => {
            inputs.text("preset", name);
            SpdeSystemSpec::preset(name).ok_or_else(|| {
                Error::Config(format!(
                    "unknown preset {name}; choose one of {}",
                    multispde::precision::PRESET_NAMES.join(", ")
                ))
            })?
        }
        (None, None) => return Err(Error::Config("either --spec or --preset is required".into())),
    };
    spec.validate()?;
    Ok(spec)
}
