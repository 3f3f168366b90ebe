//! Dataset directories.
//!
//! ```text
//! <dir>/manifest.toml        splits, seeds and generation settings
//! <dir>/protocol.bvec        full acquisition protocol
//! <dir>/<split>/pNNNN_b<b>.phantom
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use qsamp_core::phantom::{read_phantom, write_phantom, Dataset, DatasetSpec, PhantomConfig, Split};
use qsamp_core::sphere::read_protocol;
use qsamp_core::{atomic_write, BasisSpec, Protocol};

use crate::Failure;

pub const MANIFEST: &str = "manifest.toml";
pub const PROTOCOL: &str = "protocol.bvec";
const FORMAT: &str = "qsamp-dataset 1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub protocol: String,
    pub directions: usize,
    pub count: usize,
    pub ratios: [f64; 3],
    pub width: usize,
    pub height: usize,
    pub bvalues: Vec<f64>,
    pub sigma: f64,
    pub seed: u64,
    pub lambda_par: f64,
    pub lambda_perp: f64,
    pub iso_diffusivity: f64,
    pub s0: f64,
    pub crossing_angle: f64,
    /// SH order the noiseless signals were projected onto, if any.
    pub band_limit: Option<usize>,
    pub splits: SplitCounts,
    pub phantoms: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub split: String,
    pub seed: u64,
    pub b: f64,
    pub file: String,
}

impl Manifest {
    pub fn spec(&self) -> Result<DatasetSpec, Failure> {
        Ok(DatasetSpec {
            count: self.count,
            ratios: self.ratios,
            width: self.width,
            height: self.height,
            bvalues: self.bvalues.clone(),
            sigma: self.sigma,
            seed: self.seed,
            phantom: PhantomConfig {
                lambda_par: self.lambda_par,
                lambda_perp: self.lambda_perp,
                iso_diffusivity: self.iso_diffusivity,
                s0: self.s0,
                crossing_angle: self.crossing_angle,
                band_limit: self.band_limit.map(BasisSpec::new).transpose()?,
            },
        })
    }
}

fn split_name(s: Split) -> &'static str {
    s.name()
}

/// Writes every phantom of `data` plus its protocol and manifest under `dir`.
pub fn write_dataset(data: &Dataset, dir: &Path) -> Result<Manifest, Failure> {
    let spec = &data.spec;
    let mut phantoms = Vec::new();
    std::fs::create_dir_all(dir).map_err(|e| Failure::io(format!("{}: {e}", dir.display())))?;
    qsamp_core::sphere::write_protocol(&data.protocol, dir.join(PROTOCOL))?;
    for split in Split::ALL {
        let sub = dir.join(split_name(split));
        std::fs::create_dir_all(&sub).map_err(|e| Failure::io(format!("{}: {e}", sub.display())))?;
        let seeds = data.seeds(split);
        for img in data.split(split) {
            let index = seeds.iter().position(|&s| s == img.seed).expect("seed listed");
            let file = format!("{}/p{index:04}_b{}.phantom", split_name(split), img.bvalue);
            write_phantom(img, dir.join(&file), &format!("../{PROTOCOL}"))?;
            phantoms.push(Entry {
                split: split_name(split).to_string(),
                seed: img.seed,
                b: img.bvalue,
                file,
            });
        }
    }
    let sizes = spec.split_sizes()?;
    let manifest = Manifest {
        format: FORMAT.to_string(),
        protocol: PROTOCOL.to_string(),
        directions: data.protocol.len(),
        count: spec.count,
        ratios: spec.ratios,
        width: spec.width,
        height: spec.height,
        bvalues: spec.bvalues.clone(),
        sigma: spec.sigma,
        seed: spec.seed,
        lambda_par: spec.phantom.lambda_par,
        lambda_perp: spec.phantom.lambda_perp,
        iso_diffusivity: spec.phantom.iso_diffusivity,
        s0: spec.phantom.s0,
        crossing_angle: spec.phantom.crossing_angle,
        band_limit: spec.phantom.band_limit.map(|b| b.order()),
        splits: SplitCounts {
            train: sizes[0],
            val: sizes[1],
            test: sizes[2],
        },
        phantoms,
    };
    let text = toml::to_string(&manifest).map_err(|e| Failure::runtime(format!("manifest: {e}")))?;
    atomic_write(&dir.join(MANIFEST), text.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, Failure> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(Failure::io(format!("dataset not found: {}", dir.display())));
    }
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    let m: Manifest =
        toml::from_str(&text).map_err(|e| Failure::usage(format!("bad dataset manifest: {e}")))?;
    if m.format != FORMAT {
        return Err(Failure::usage(format!("unsupported dataset format {:?}", m.format)));
    }
    Ok(m)
}

/// Loads a dataset directory. `bvalues` restricts which phantoms are read.
pub fn load_dataset(dir: &Path, bvalues: Option<&[f64]>) -> Result<Dataset, Failure> {
    let manifest = read_manifest(dir)?;
    let protocol: Arc<Protocol> = Arc::new(read_protocol(dir.join(&manifest.protocol))?);
    let mut splits: [Vec<_>; 3] = Default::default();
    for e in &manifest.phantoms {
        if bvalues.is_some_and(|bs| !bs.contains(&e.b)) {
            continue;
        }
        let slot = Split::ALL
            .iter()
            .position(|s| s.name() == e.split)
            .ok_or_else(|| Failure::usage(format!("unknown split {:?} in manifest", e.split)))?;
        let path: PathBuf = dir.join(&e.file);
        splits[slot].push(read_phantom(&path, Some(&protocol))?);
    }
    let [train, val, test] = splits;
    Ok(Dataset {
        spec: manifest.spec()?,
        protocol,
        train,
        val,
        test,
    })
}
