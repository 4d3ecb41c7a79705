//! Reproducible experiment runs: configuration, dispatch and persistence.
//!
//! A run validates its configuration, computes in memory, and then writes
//! every artifact plus `run.json` into a fresh directory
//! `<output>/<command>-<hash12>[-k]`. Artifacts depend only on the
//! configuration and seed; `run.json` additionally records the wall time.

pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{Command, ExperimentConfig, Setup};

use crate::error::{Error, Result};
use crate::rng::{StreamRecord, STREAM_CONSTRUCTION};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngManifest {
    pub construction: String,
    pub streams: Vec<StreamRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: Command,
    pub config_hash: String,
    pub version: String,
    pub seed: u64,
    pub wall_time_seconds: f64,
    pub passed: bool,
    pub payload: serde_json::Value,
    pub payload_sha256: String,
    pub artifacts: Vec<ArtifactRecord>,
    pub rng: RngManifest,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub directory: PathBuf,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// First free `<root>/<stem>`, `<root>/<stem>-2`, … so earlier runs are
/// never overwritten.
fn fresh_directory(root: &Path, stem: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(root)?;
    let mut k = 1;
    loop {
        let name = if k == 1 { stem.to_string() } else { format!("{stem}-{k}") };
        let dir = root.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => k += 1,
            Err(e) => return Err(e.into()),
        }
    }
}

/// Validate, compute and persist one run.
pub fn run(config: &ExperimentConfig) -> Result<RunOutcome> {
    let setup = config.validate()?;
    let config_hash = config.hash()?;
    let start = Instant::now();
    let output = commands::execute(config, &setup).map_err(|e| e.context(format!("command `{}`", config.command.name())))?;
    let wall_time_seconds = start.elapsed().as_secs_f64();

    let payload_sha256 = sha256_hex(serde_json::to_string(&output.payload)?.as_bytes());
    let dir = fresh_directory(&config.output, &format!("{}-{}", config.command.name(), &config_hash[..12]))?;
    let mut artifacts = Vec::new();
    for (name, bytes) in &output.artifacts {
        std::fs::write(dir.join(name), bytes)?;
        artifacts.push(ArtifactRecord {
            name: name.clone(),
            sha256: sha256_hex(bytes),
        });
    }
    let record = RunRecord {
        command: config.command,
        config_hash,
        version: ARTIFACT_VERSION.to_string(),
        seed: config.seed,
        wall_time_seconds,
        passed: output.passed,
        payload: output.payload,
        payload_sha256,
        artifacts,
        rng: RngManifest {
            construction: STREAM_CONSTRUCTION.to_string(),
            streams: output.streams,
        },
    };
    let mut text = serde_json::to_vec_pretty(&record)?;
    text.push(b'\n');
    std::fs::write(dir.join("run.json"), text)?;
    Ok(RunOutcome { record, directory: dir })
}

/// Parse a config file and apply command-line overrides.
pub fn load_config(path: &Path, command: Option<&str>, seed: Option<u64>, output: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::from_file(path)?;
    if let Some(name) = command {
        let requested = Command::parse(name)?;
        if requested != config.command {
            return Err(Error::Config(format!(
                "command line asks for `{}` but the config file is for `{}`",
                requested.name(),
                config.command.name()
            )));
        }
    }
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(out) = output {
        config.output = out;
    }
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(command: &str, extra: &str, out: &Path) -> ExperimentConfig {
        let text = format!(
            r#"
command = "{command}"
seed = 3
output = "{}"

[lattice]
extents = [8]

[chart]
lower = -1.0
upper = 1.0
directions = [{{ kind = "constant", scale = 2.0 }}]
{extra}
"#,
            out.display()
        );
        ExperimentConfig::from_toml_str(&text).unwrap()
    }

    #[test]
    fn repeated_runs_are_identical_and_separate() {
        let tmp = tempfile::tempdir().unwrap();
        let c = config("sample", "[sample]\ncount = 5", tmp.path());
        let a = run(&c).unwrap();
        let b = run(&c).unwrap();
        assert_ne!(a.directory, b.directory);
        assert!(b.directory.to_string_lossy().ends_with("-2"));
        assert_eq!(a.record.payload_sha256, b.record.payload_sha256);
        for art in &a.record.artifacts {
            let x = std::fs::read(a.directory.join(&art.name)).unwrap();
            let y = std::fs::read(b.directory.join(&art.name)).unwrap();
            assert_eq!(x, y, "{}", art.name);
        }
        let csv = std::fs::read_to_string(a.directory.join("samples.csv")).unwrap();
        assert!(csv.starts_with("0,1,2,3,4,5,6,7\n"));
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn seed_changes_the_samples() {
        let tmp = tempfile::tempdir().unwrap();
        let mut c = config("sample", "[sample]\ncount = 5", tmp.path());
        let a = run(&c).unwrap();
        c.seed = 4;
        let b = run(&c).unwrap();
        assert_ne!(a.record.payload_sha256, b.record.payload_sha256);
        assert_ne!(a.record.config_hash, b.record.config_hash);
    }

    #[test]
    fn validation_happens_before_output() {
        let tmp = tempfile::tempdir().unwrap();
        let c = config("fit", "", tmp.path());
        assert!(matches!(run(&c), Err(Error::Config(_))));
        assert!(!tmp.path().join("fit").exists());
        assert_eq!(std::fs::read_dir(tmp.path()).unwrap().count(), 0);
    }

    #[test]
    fn fisher_run_passes() {
        let tmp = tempfile::tempdir().unwrap();
        let c = config("fisher", "[fisher]\nmc_samples = 2000\nrel_tolerance = 0.1", tmp.path());
        let out = run(&c).unwrap();
        assert!(out.record.passed);
        assert!((out.record.payload["fisher"][0][0].as_f64().unwrap() - 14.0).abs() < 1e-9);
        assert_eq!(out.record.rng.streams.len(), 1);
    }
}
