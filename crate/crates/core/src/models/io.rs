use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, BundleParams, ModelBundle, ModelError};
use crate::nn::{DenseNetSpec, ParamSet};
use crate::tasks::NormStats;

pub const BUNDLE_FORMAT: &str = "dnpf-bundle";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    arch: ArchConfig,
    dims: [usize; 3],
    stats: NormStats,
    specs: Specs,
    provenance: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Specs {
    encoder: DenseNetSpec,
    film: DenseNetSpec,
    denoiser: DenseNetSpec,
    dynamics: DenseNetSpec,
}

const PARTS: [&str; 5] = ["encoder", "film", "denoiser", "dynamics", "null_token"];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parts(p: &BundleParams) -> [ParamSet; 5] {
    [
        p.encoder.clone(),
        p.film.clone(),
        p.denoiser.clone(),
        p.dynamics.clone(),
        ParamSet::free(p.null_token.clone()),
    ]
}

/// Writes `bundle.json` plus one binary parameter file per network and
/// parameter set (`raw_*.params`, `ema_*.params`).
pub fn save_bundle(bundle: &ModelBundle, dir: &Path) -> Result<(), ModelError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = Manifest {
        format: BUNDLE_FORMAT.into(),
        version: VERSION,
        arch: bundle.arch.clone(),
        dims: [bundle.dx, bundle.dy, bundle.du],
        stats: bundle.stats.clone(),
        specs: Specs {
            encoder: bundle.encoder_spec.clone(),
            film: bundle.film_spec.clone(),
            denoiser: bundle.denoiser_spec.clone(),
            dynamics: bundle.dynamics_spec.clone(),
        },
        provenance: bundle.provenance.clone(),
    };
    let path = dir.join("bundle.json");
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(io_err(&path))?;
    for (prefix, set) in [("raw", &bundle.params), ("ema", &bundle.ema)] {
        for (name, p) in PARTS.iter().zip(parts(set)) {
            let path = dir.join(format!("{prefix}_{name}.params"));
            let f = File::create(&path).map_err(io_err(&path))?;
            let mut w = BufWriter::new(f);
            p.write_to(&mut w).map_err(io_err(&path))?;
            w.flush().map_err(io_err(&path))?;
        }
    }
    Ok(())
}

fn read_set(dir: &Path, prefix: &str) -> Result<BundleParams, ModelError> {
    let mut sets = Vec::with_capacity(5);
    for name in PARTS {
        let path = dir.join(format!("{prefix}_{name}.params"));
        let f = File::open(&path).map_err(io_err(&path))?;
        let p = ParamSet::read_from(BufReader::new(f)).map_err(|e| ModelError::Format {
            path: path.clone(),
            message: e.to_string(),
        })?;
        sets.push(p);
    }
    let null = sets.pop().expect("five parts");
    let dynamics = sets.pop().expect("five parts");
    let denoiser = sets.pop().expect("five parts");
    let film = sets.pop().expect("five parts");
    let encoder = sets.pop().expect("five parts");
    Ok(BundleParams {
        encoder,
        film,
        denoiser,
        dynamics,
        null_token: null.values,
    })
}

pub fn load_bundle(dir: &Path) -> Result<ModelBundle, ModelError> {
    let path = dir.join("bundle.json");
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let fmt = |message: String| ModelError::Format {
        path: path.clone(),
        message,
    };
    let m: Manifest = serde_json::from_str(&text).map_err(|e| fmt(e.to_string()))?;
    if m.format != BUNDLE_FORMAT || m.version != VERSION {
        return Err(fmt(format!("unsupported format {} v{}", m.format, m.version)));
    }
    let mut bundle = ModelBundle::new(m.arch, m.stats, 0)?;
    if [bundle.dx, bundle.dy, bundle.du] != m.dims
        || bundle.encoder_spec != m.specs.encoder
        || bundle.film_spec != m.specs.film
        || bundle.denoiser_spec != m.specs.denoiser
        || bundle.dynamics_spec != m.specs.dynamics
    {
        return Err(fmt("network specs do not match the architecture".into()));
    }
    bundle.params = read_set(dir, "raw")?;
    bundle.ema = read_set(dir, "ema")?;
    for set in [&bundle.params, &bundle.ema] {
        set.check()?;
        let ok = set.encoder.layout == ParamSet::layout_for(&bundle.encoder_spec)
            && set.film.layout == ParamSet::layout_for(&bundle.film_spec)
            && set.denoiser.layout == ParamSet::layout_for(&bundle.denoiser_spec)
            && set.dynamics.layout == ParamSet::layout_for(&bundle.dynamics_spec)
            && set.null_token.len() == bundle.arch.encoder_dim;
        if !ok {
            return Err(fmt("parameter layout does not match the network specs".into()));
        }
    }
    bundle.provenance = m.provenance;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let arch = ArchConfig {
            encoder_hidden: vec![4],
            encoder_dim: 3,
            film_hidden: vec![4],
            denoiser_hidden: vec![5],
            dynamics_hidden: vec![4],
            ..Default::default()
        };
        let mut b = ModelBundle::new(arch, NormStats::identity(2, 2, 1), 7).unwrap();
        b.ema.denoiser.values[0] = 0.25;
        b.params.null_token[1] = -3.0;
        b.provenance = serde_json::json!({"seed": 7});
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&b, dir.path()).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        assert_eq!(back, b);
    }
}
