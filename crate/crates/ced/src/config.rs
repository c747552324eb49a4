//! Pipeline configuration file and artifact lineage.

use std::fs;
use std::path::{Path, PathBuf};

use ced_core::cluster::DemoMode;
use ced_core::gradcheck::GradcheckConfig;
use ced_core::{AdaptConfig, LmSettings, PromptSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// JSONL examples; any split.
    pub pool: PathBuf,
    #[serde(default)]
    pub dev: Option<PathBuf>,
    #[serde(default)]
    pub tests: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// JSONL of `{test_id, candidate_id}` nearest-neighbor picks.
    #[serde(default)]
    pub neighbors: Option<PathBuf>,
    /// JSONL of externally generated predictions.
    #[serde(default)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub order: usize,
    pub smoothing: f64,
    pub lambda_grid: Vec<f64>,
    pub dev_fraction: f64,
    pub max_passes: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        let s = LmSettings::default();
        let a = AdaptConfig::default();
        LmConfig {
            order: s.order,
            smoothing: s.smoothing,
            lambda_grid: a.lambda_grid,
            dev_fraction: a.dev_fraction,
            max_passes: a.max_passes,
        }
    }
}

impl LmConfig {
    pub fn settings(&self) -> LmSettings {
        LmSettings {
            order: self.order,
            smoothing: self.smoothing,
        }
    }

    pub fn adapt(&self) -> AdaptConfig {
        AdaptConfig {
            lambda_grid: self.lambda_grid.clone(),
            dev_fraction: self.dev_fraction,
            max_passes: self.max_passes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub sample: u64,
    pub cluster: u64,
    pub policy: u64,
    pub bootstrap: u64,
    pub gradcheck: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScorerConfig {
    #[default]
    Builtin,
    /// External process speaking the line-delimited JSON scorer protocol.
    Bridge { command: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    /// Candidates kept per dataset at ingest; all when absent.
    #[serde(default)]
    pub sample_per_dataset: Option<usize>,
    #[serde(default)]
    pub lm: LmConfig,
    /// Number of clusters; 0 trains one target per candidate.
    #[serde(default)]
    pub clusters: usize,
    #[serde(default = "default_demo_mode")]
    pub cluster_demo: DemoMode,
    #[serde(default)]
    pub prompt: PromptSpec,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
    /// Worker threads; 0 uses every core.
    #[serde(default)]
    pub parallelism: usize,
    #[serde(default)]
    pub scorer: ScorerConfig,
    #[serde(default)]
    pub gradcheck: Option<GradcheckConfig>,
}

fn default_demo_mode() -> DemoMode {
    DemoMode::Centroid
}

fn default_resamples() -> usize {
    50_000
}

impl PipelineConfig {
    /// Minimal config with defaults for everything but the paths.
    pub fn new(pool: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            paths: Paths {
                pool: pool.into(),
                dev: None,
                tests: None,
                output_dir: output_dir.into(),
                neighbors: None,
                predictions: None,
            },
            sample_per_dataset: None,
            lm: LmConfig::default(),
            clusters: 0,
            cluster_demo: DemoMode::Centroid,
            prompt: PromptSpec::default(),
            seeds: Seeds::default(),
            bootstrap_resamples: default_resamples(),
            parallelism: 0,
            scorer: ScorerConfig::Builtin,
            gradcheck: None,
        }
    }

    /// Reads a JSON config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(dir);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        let paths = &mut self.paths;
        fix(&mut paths.pool);
        fix(&mut paths.output_dir);
        for p in [&mut paths.dev, &mut paths.tests, &mut paths.neighbors, &mut paths.predictions]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lm.settings().validate()?;
        self.lm.adapt().validate()?;
        self.prompt.validate()?;
        if self.bootstrap_resamples < 2 {
            return Err(Error::Config("bootstrap_resamples must be at least 2".into()));
        }
        for p in self.input_paths() {
            if !p.is_file() {
                return Err(Error::Config(format!("input file {} does not exist", p.display())));
            }
        }
        if let ScorerConfig::Bridge { command } = &self.scorer {
            if command.is_empty() {
                return Err(Error::Config("bridge scorer needs a command".into()));
            }
        }
        Ok(())
    }

    pub fn input_paths(&self) -> Vec<&Path> {
        let p = &self.paths;
        std::iter::once(&p.pool)
            .chain(p.dev.iter())
            .chain(p.tests.iter())
            .chain(p.neighbors.iter())
            .chain(p.predictions.iter())
            .map(PathBuf::as_path)
            .collect()
    }

    pub fn gradcheck_config(&self) -> GradcheckConfig {
        let mut g = self.gradcheck.clone().unwrap_or_default();
        g.seed = self.seeds.gradcheck;
        g
    }

    /// Digest of every setting that can change an artifact, plus the bytes of
    /// every input file. Paths, the output directory and the thread count are
    /// left out so relocated or differently scheduled runs share a lineage.
    pub fn lineage(&self) -> Result<Lineage> {
        let mut hashed = serde_json::to_value(self).expect("config serializes");
        let obj = hashed.as_object_mut().expect("config is an object");
        obj.remove("paths");
        obj.remove("parallelism");
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&hashed).expect("config serializes"));
        for (name, path) in self.named_inputs() {
            h.update(name.as_bytes());
            match path {
                Some(p) => {
                    let bytes = fs::read(p).map_err(|e| {
                        Error::Config(format!("cannot read input {}: {e}", p.display()))
                    })?;
                    h.update((bytes.len() as u64).to_le_bytes());
                    h.update(&bytes);
                }
                None => h.update([0u8]),
            }
        }
        let digest = h.finalize();
        let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
        Ok(Lineage {
            config_hash: hex,
            seeds: self.seeds,
        })
    }

    fn named_inputs(&self) -> [(&'static str, Option<&Path>); 5] {
        let p = &self.paths;
        [
            ("pool", Some(p.pool.as_path())),
            ("dev", p.dev.as_deref()),
            ("tests", p.tests.as_deref()),
            ("neighbors", p.neighbors.as_deref()),
            ("predictions", p.predictions.as_deref()),
        ]
    }
}

/// Identity of the configuration and seeds an artifact was produced under.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub config_hash: String,
    pub seeds: Seeds,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lineage_ignores_location_and_threads() {
        let dir = tempfile::tempdir().unwrap();
        let pool = dir.path().join("pool.jsonl");
        fs::write(&pool, "{}\n").unwrap();
        let a = PipelineConfig::new(&pool, dir.path().join("a"));
        let mut b = PipelineConfig::new(&pool, dir.path().join("b"));
        b.parallelism = 3;
        let before = a.lineage().unwrap();
        assert_eq!(before, b.lineage().unwrap());
        b.seeds.policy = 1;
        assert_ne!(before, b.lineage().unwrap());
        fs::write(&pool, "{}\n{}\n").unwrap();
        assert_ne!(before, a.lineage().unwrap());
    }

    #[test]
    fn parses_minimal_config_with_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(
            &path,
            r#"{"paths": {"pool": "pool.jsonl", "output_dir": "run"}, "clusters": 4,
                "scorer": {"kind": "bridge", "command": ["python3", "scorer.py"]}}"#,
        )
        .unwrap();
        let cfg = PipelineConfig::load(&path).unwrap();
        assert_eq!(cfg.paths.pool, dir.path().join("pool.jsonl"));
        assert_eq!(cfg.clusters, 4);
        assert_eq!(cfg.lm.order, 3);
        assert_eq!(cfg.bootstrap_resamples, 50_000);
        assert!(matches!(cfg.scorer, ScorerConfig::Bridge { .. }));
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"paths": {"pool": "p", "output_dir": "o"}, "klusters": 2}"#).unwrap();
        assert!(matches!(PipelineConfig::load(&path), Err(Error::Config(_))));
    }
}
