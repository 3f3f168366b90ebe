//! Experiment configuration files.
//!
//! Configs are TOML: `key = value` pairs grouped in sections. Every key is
//! optional and falls back to the library default. Relative paths are resolved
//! against the directory containing the config file.
//!
//! ```toml
//! [dataset]
//! path = "data"          # directory written by `qsamp dataset`
//! train_b = 1000
//!
//! [train]
//! n = 3
//! mode = "learned"       # learned | random-frozen | uniform-frozen
//! epochs = 50
//! lr_sampling = 1e-3
//! lr_recon = 1e-4
//! lambda_tv = 2e-7
//! batch_size = 4
//! seed = 0
//! hidden = 256
//! hidden_layers = 2
//! order = 4
//! electrostatic_iterations = 10000
//! schedule = "simultaneous"
//! init_protocol = "start.bvec"   # optional starting directions
//!
//! [output]
//! dir = "runs/n3"
//!
//! [matrix]               # bench only
//! methods = ["learned", "random-frozen", "uniform-frozen"]
//! ns = [3, 6, 9]
//! seeds = [1, 2, 3]
//! eval_bs = [1000, 2000, 3000]
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;

use qsamp_core::experiment::BenchMatrix;
use qsamp_core::train::{SamplingMode, TrainConfig, UpdateSchedule};

use crate::Failure;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub matrix: MatrixSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default = "default_dataset_path")]
    pub path: PathBuf,
    #[serde(default = "default_train_b")]
    pub train_b: f64,
}

fn default_dataset_path() -> PathBuf {
    PathBuf::from("data")
}

fn default_train_b() -> f64 {
    1000.0
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            path: default_dataset_path(),
            train_b: default_train_b(),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub n: Option<usize>,
    pub mode: Option<String>,
    pub epochs: Option<usize>,
    pub lr_sampling: Option<f64>,
    pub lr_recon: Option<f64>,
    pub lambda_tv: Option<f64>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub hidden: Option<usize>,
    pub hidden_layers: Option<usize>,
    pub order: Option<usize>,
    pub electrostatic_iterations: Option<usize>,
    pub schedule: Option<String>,
    pub init_protocol: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("run")
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: default_out() }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSection {
    pub methods: Option<Vec<String>>,
    pub ns: Option<Vec<usize>>,
    pub seeds: Option<Vec<u64>>,
    pub eval_bs: Option<Vec<f64>>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, Failure> {
        toml::from_str(text).map_err(|e| Failure::usage(format!("invalid config: {e}")))
    }

    /// Reads a config and makes its relative paths relative to the file.
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::io(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.dataset.path);
        resolve(&mut cfg.output.dir);
        if let Some(p) = cfg.train.init_protocol.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig, Failure> {
        let t = &self.train;
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            n: t.n.unwrap_or(d.n),
            epochs: t.epochs.unwrap_or(d.epochs),
            lr_sampling: t.lr_sampling.unwrap_or(d.lr_sampling),
            lr_recon: t.lr_recon.unwrap_or(d.lr_recon),
            lambda_tv: t.lambda_tv.unwrap_or(d.lambda_tv),
            batch_size: t.batch_size.unwrap_or(d.batch_size),
            seed: t.seed.unwrap_or(d.seed),
            mode: match &t.mode {
                Some(m) => m.parse::<SamplingMode>()?,
                None => d.mode,
            },
            hidden: t.hidden.unwrap_or(d.hidden),
            hidden_layers: t.hidden_layers.unwrap_or(d.hidden_layers),
            order: t.order.unwrap_or(d.order),
            electrostatic_iterations: t.electrostatic_iterations.unwrap_or(d.electrostatic_iterations),
            schedule: match &t.schedule {
                Some(s) => s.parse::<UpdateSchedule>()?,
                None => d.schedule,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn bench_matrix(&self) -> Result<BenchMatrix, Failure> {
        let d = BenchMatrix::default();
        let m = &self.matrix;
        let methods = match &m.methods {
            Some(list) => list
                .iter()
                .map(|s| s.parse::<SamplingMode>())
                .collect::<Result<Vec<_>, _>>()?,
            None => d.methods,
        };
        let matrix = BenchMatrix {
            methods,
            ns: m.ns.clone().unwrap_or(d.ns),
            seeds: m.seeds.clone().unwrap_or(d.seeds),
            train_b: self.dataset.train_b,
            eval_bs: m.eval_bs.clone().unwrap_or_else(|| vec![self.dataset.train_b]),
            template: self.train_config()?,
        };
        matrix.validate()?;
        Ok(matrix)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg.train_config().unwrap(), TrainConfig::default());
        assert_eq!(cfg.dataset.train_b, 1000.0);
        assert_eq!(cfg.bench_matrix().unwrap().cells().len(), 27);
    }

    #[test]
    fn sections_override_defaults() {
        let cfg = ExperimentConfig::parse(
            "[train]\nn = 6\nmode = \"uniform-frozen\"\nlr_recon = 1e-3\n[matrix]\nseeds = [4]\n",
        )
        .unwrap();
        let t = cfg.train_config().unwrap();
        assert_eq!((t.n, t.mode, t.lr_recon), (6, SamplingMode::UniformFrozen, 1e-3));
        assert_eq!(cfg.bench_matrix().unwrap().seeds, vec![4]);
    }

    #[test]
    fn bad_configs_are_usage_errors() {
        for text in [
            "[train]\nbogus = 1\n",
            "[train]\nn = \"three\"\n",
            "[train]\nmode = \"sideways\"\n",
            "[train]\nschedule = \"alternating\"\n",
            "[matrix]\nseeds = []\n",
            "not toml at all",
        ] {
            let err = ExperimentConfig::parse(text)
                .and_then(|c| c.bench_matrix().map(|_| ()))
                .unwrap_err();
            assert_eq!(err.code, crate::EXIT_USAGE, "{text}: {}", err.message);
        }
    }
}
