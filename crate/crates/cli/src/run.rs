//! Output directories, run manifests and argument parsing helpers shared by
//! the subcommands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use assocnet::io::{write_atomic, write_json, BUNDLE_SCHEMA_VERSION};
use assocnet::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub command: String,
    /// Digest of the bytes of `config.json` in the same directory.
    pub config_digest: String,
    pub seed: u64,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
    pub wall_time_seconds: f64,
    pub artifact_version: String,
}

pub fn artifact_version() -> String {
    format!(
        "assocnet {} (bundle schema {BUNDLE_SCHEMA_VERSION}, manifest schema {MANIFEST_SCHEMA_VERSION})",
        env!("CARGO_PKG_VERSION")
    )
}

/// Collects what a command reads and writes, then seals the directory with
/// its manifest.
pub struct Run {
    command: String,
    seed: u64,
    out: PathBuf,
    inputs: Vec<InputDigest>,
    outputs: Vec<String>,
    config_digest: Option<String>,
    started: Instant,
}

impl Run {
    pub fn new(command: &str, seed: u64, out: &Path) -> Result<Self> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        Ok(Run {
            command: command.into(),
            seed,
            out: out.to_path_buf(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            config_digest: None,
            started: Instant::now(),
        })
    }

    /// Reads an input file and records its digest.
    pub fn read_input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.note_input(path, &bytes);
        Ok(bytes)
    }

    pub fn note_input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.push(InputDigest { path: path.display().to_string(), sha256: sha256_hex(bytes) });
    }

    /// Writes `bytes` to `relative` inside the output directory.
    pub fn write(&mut self, relative: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out.join(relative);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_atomic(&path, bytes)?;
        self.outputs.push(relative.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, relative: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(relative, &bytes)
    }

    /// Records files written by a library routine (paths relative to the
    /// output directory).
    pub fn note_outputs(&mut self, relative: impl IntoIterator<Item = String>) {
        self.outputs.extend(relative);
    }

    /// Writes the effective configuration; the manifest digests these bytes.
    pub fn write_config<T: Serialize>(&mut self, config: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(config)?;
        bytes.push(b'\n');
        self.config_digest = Some(sha256_hex(&bytes));
        self.write(CONFIG_FILE, &bytes)
    }

    pub fn finish(mut self) -> Result<RunManifest> {
        self.outputs.sort();
        self.outputs.dedup();
        let manifest = RunManifest {
            manifest_version: MANIFEST_SCHEMA_VERSION,
            command: self.command,
            config_digest: self
                .config_digest
                .ok_or_else(|| Error::Invalid("run finished without a configuration".into()))?,
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            wall_time_seconds: self.started.elapsed().as_secs_f64(),
            artifact_version: artifact_version(),
        };
        write_json(&self.out.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }
}

/// A JSON argument given inline (starting with `{`) or as a file path.
/// Returns the value and the bytes it was parsed from; schema errors name
/// the offending field path.
pub fn json_arg<T: DeserializeOwned>(arg: &str, what: &str, run: &mut Run) -> Result<T> {
    let bytes = if arg.trim_start().starts_with('{') || arg.trim_start().starts_with('[') {
        arg.as_bytes().to_vec()
    } else {
        run.read_input(Path::new(arg))?
    };
    parse_json(&bytes, what)
}

pub fn parse_json<T: DeserializeOwned>(bytes: &[u8], what: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Invalid(format!("{what}: at `{path}`: {}", e.inner()))
    })
}
