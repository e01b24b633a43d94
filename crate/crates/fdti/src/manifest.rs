//! Reproducibility manifests: every CLI run writes a JSON record of the
//! command, its effective configuration, seeds, SHA-256 digests of every
//! input file, the produced outputs, tool version, and wall-clock timing.
//!
//! Manifests exist to make artifacts auditable; they are the one output that
//! is *not* byte-identical across reruns (timestamps), so determinism checks
//! compare the data files, never the manifests.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

/// The record written to `*.manifest.json` / `manifest.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub tool_version: String,
    /// Effective configuration after merging config files and CLI flags.
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// Input path -> SHA-256 of its bytes (lowercase hex).
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub parameter_count: Option<usize>,
    pub started_utc: String,
    pub started_unix_s: u64,
    pub elapsed_s: f64,
}

/// Accumulates manifest fields over the course of one CLI run.
#[derive(Debug)]
pub struct ManifestBuilder {
    command: String,
    argv: Vec<String>,
    config: serde_json::Value,
    seeds: BTreeMap<String, u64>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    parameter_count: Option<usize>,
    started: Instant,
    started_unix_s: u64,
}

impl ManifestBuilder {
    pub fn new(command: &str, argv: Vec<String>) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            argv,
            config: serde_json::Value::Null,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            parameter_count: None,
            started: Instant::now(),
            started_unix_s: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn config<T: Serialize>(&mut self, config: &T) -> &mut Self {
        self.config = serde_json::to_value(config).expect("config serializes");
        self
    }

    pub fn seed(&mut self, name: &str, value: u64) -> &mut Self {
        self.seeds.insert(name.to_string(), value);
        self
    }

    /// Hashes the file's bytes and records it as an input.
    pub fn input(&mut self, path: &Path) -> std::io::Result<&mut Self> {
        let bytes = std::fs::read(path)?;
        self.inputs
            .insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(self)
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.display().to_string());
        self
    }

    pub fn parameter_count(&mut self, count: usize) -> &mut Self {
        self.parameter_count = Some(count);
        self
    }

    pub fn finish(&self) -> RunManifest {
        RunManifest {
            command: self.command.clone(),
            argv: self.argv.clone(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.config.clone(),
            seeds: self.seeds.clone(),
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            parameter_count: self.parameter_count,
            started_utc: utc_string(self.started_unix_s),
            started_unix_s: self.started_unix_s,
            elapsed_s: self.started.elapsed().as_secs_f64(),
        }
    }

    /// Finalizes and writes the manifest as pretty JSON.
    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let manifest = self.finish();
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text)
    }
}

/// Lowercase-hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            s.push_str(&format!("{b:02x}"));
            s
        })
}

/// Formats a unix timestamp as `YYYY-MM-DDTHH:MM:SSZ`.
fn utc_string(unix_s: u64) -> String {
    let days = (unix_s / 86_400) as i64;
    let rem = unix_s % 86_400;
    let (y, m, d) = civil_from_days(days);
    format!(
        "{y:04}-{m:02}-{d:02}T{:02}:{:02}:{:02}Z",
        rem / 3600,
        (rem / 60) % 60,
        rem % 60
    )
}

/// Proleptic-Gregorian date from days since 1970-01-01 (era decomposition
/// over the 146097-day, 400-year Gregorian cycle).
fn civil_from_days(z: i64) -> (i64, u32, u32) {
    let z = z + 719_468;
    let era = if z >= 0 { z } else { z - 146_096 } / 146_097;
    let doe = (z - era * 146_097) as u64;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe as i64 + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    (if m <= 2 { y + 1 } else { y }, m, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_matches_known_vectors() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn utc_formatting_matches_known_instants() {
        assert_eq!(utc_string(0), "1970-01-01T00:00:00Z");
        assert_eq!(utc_string(86_400), "1970-01-02T00:00:00Z");
        // The billennium: 2001-09-09 01:46:40 UTC.
        assert_eq!(utc_string(1_000_000_000), "2001-09-09T01:46:40Z");
        // A leap day: 2000-02-29 00:00:00 UTC.
        assert_eq!(utc_string(951_782_400), "2000-02-29T00:00:00Z");
    }

    #[test]
    fn manifest_records_inputs_and_round_trips_as_json() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        std::fs::write(&input, b"abc").unwrap();

        let mut b = ManifestBuilder::new("simulate", vec!["fdti".into(), "simulate".into()]);
        b.seed("simulator", 7)
            .parameter_count(42)
            .output(Path::new("out/volumes.csv"));
        b.input(&input).unwrap();
        b.config(&serde_json::json!({"rows": 2}));
        let path = dir.path().join("manifest.json");
        b.write(&path).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["command"], "simulate");
        assert_eq!(v["seeds"]["simulator"], 7);
        assert_eq!(v["parameter_count"], 42);
        assert_eq!(v["config"]["rows"], 2);
        assert_eq!(
            v["inputs"][input.display().to_string()],
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(v["outputs"][0], "out/volumes.csv");
        assert!(v["started_utc"].as_str().unwrap().ends_with('Z'));
        assert_eq!(v["tool_version"], env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn missing_input_file_is_an_io_error() {
        let mut b = ManifestBuilder::new("train", vec![]);
        assert!(b.input(Path::new("/definitely/not/here.bin")).is_err());
    }
}
