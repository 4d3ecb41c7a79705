use std::path::Path;
use std::process::Command;

fn mlab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mlab"))
}

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

const SAMPLE: &str = r#"
command = "sample"
seed = 11

[lattice]
extents = [4, 4]

[metric]
kind = "conformal"
cosine = { amplitude = 0.1, axis = 1, mode = 1 }

[sample]
count = 3
"#;

fn only_subdir(root: &Path) -> Vec<std::path::PathBuf> {
    let mut dirs: Vec<_> = std::fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    dirs.sort();
    dirs
}

#[test]
fn sample_run_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "sample.toml", SAMPLE);
    let out = tmp.path().join("out");
    let status = mlab()
        .args(["sample", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let dirs = only_subdir(&out);
    assert_eq!(dirs.len(), 1);
    let name = dirs[0].file_name().unwrap().to_string_lossy().to_string();
    assert!(name.starts_with("sample-") && name.len() == "sample-".len() + 12, "{name}");
    for file in ["samples.csv", "samples.json", "metric.json", "run.json"] {
        assert!(dirs[0].join(file).exists(), "{file}");
    }
    let record: serde_json::Value = serde_json::from_slice(&std::fs::read(dirs[0].join("run.json")).unwrap()).unwrap();
    assert_eq!(record["seed"], 11);
    assert_eq!(record["rng"]["streams"][0]["purpose"], "sample");
}

#[test]
fn seed_override_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "sample.toml", SAMPLE);
    let out = tmp.path().join("out");
    for _ in 0..2 {
        let status = mlab()
            .args(["sample", "--seed", "99", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
    }
    let dirs = only_subdir(&out);
    assert_eq!(dirs.len(), 2);
    for file in ["samples.csv", "samples.json", "metric.json"] {
        assert_eq!(std::fs::read(dirs[0].join(file)).unwrap(), std::fs::read(dirs[1].join(file)).unwrap());
    }
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(dirs[0].join("samples.json")).unwrap()).unwrap();
    assert_eq!(doc["seed"], 99);
}

#[test]
fn unknown_key_exits_with_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.toml", &SAMPLE.replace("count = 3", "count = 3\ncuont = 4"));
    let output = mlab().args(["sample", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("cuont"));
}

#[test]
fn mismatched_command_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "sample.toml", SAMPLE);
    let output = mlab().args(["fisher", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn failed_check_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    // A Monte Carlo Fisher estimate from 100 draws cannot meet a 1e-6
    // relative tolerance.
    let body = r#"
command = "fisher"
seed = 5

[lattice]
extents = [8]

[chart]
lower = -1.0
upper = 1.0
directions = [{ kind = "constant", scale = 2.0 }]

[fisher]
mc_samples = 100
rel_tolerance = 1e-6
"#;
    let cfg = write_config(tmp.path(), "fisher.toml", body);
    let out = tmp.path().join("out");
    let status = mlab().args(["fisher", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(2));
}
