use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "NUMLESA_OUT";
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    /// SHA-256 over the resolved config, command parameters and input
    /// file digests.
    pub config_hash: String,
    /// Input file path to its SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub out_dir: PathBuf,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub exit_status: i32,
    pub error: Option<String>,
    pub version: String,
}

/// An output directory owned by one command invocation.
pub struct RunDir {
    dir: PathBuf,
    manifest: RunManifest,
    params: serde_json::Value,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

/// `out` if given, else `$NUMLESA_OUT/<command>`, else `runs/<command>`.
pub fn resolve_out(out: Option<&Path>, command: &str) -> PathBuf {
    match out {
        Some(p) => p.to_path_buf(),
        None => {
            let root = std::env::var_os(OUT_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs"));
            root.join(command)
        }
    }
}

impl RunDir {
    /// Claims `dir`. A non-empty directory is only replaced with `force`, and
    /// only when it holds a previous run's manifest.
    pub fn create(dir: PathBuf, command: &str, force: bool) -> Result<RunDir, CliError> {
        if dir.exists() {
            let occupied = fs::read_dir(&dir)
                .map_err(numlesa::Error::from)?
                .next()
                .is_some();
            if occupied {
                if !force {
                    return Err(CliError::Usage(format!(
                        "output directory {} is not empty; pass --force to replace it",
                        dir.display()
                    )));
                }
                if !dir.join(MANIFEST).exists() {
                    return Err(CliError::Usage(format!(
                        "refusing to replace {}: it does not look like a run directory",
                        dir.display()
                    )));
                }
                fs::remove_dir_all(&dir).map_err(numlesa::Error::from)?;
            }
        }
        fs::create_dir_all(&dir).map_err(numlesa::Error::from)?;
        Ok(RunDir {
            manifest: RunManifest {
                command: command.to_string(),
                args: std::env::args().skip(1).collect(),
                config_path: None,
                config_hash: String::new(),
                inputs: BTreeMap::new(),
                out_dir: dir.clone(),
                started_unix: now(),
                finished_unix: 0.0,
                exit_status: -1,
                error: None,
                version: env!("CARGO_PKG_VERSION").to_string(),
            },
            dir,
            params: serde_json::Value::Null,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn set_config_path(&mut self, path: Option<&Path>) {
        self.manifest.config_path = path.map(Path::to_path_buf);
    }

    pub fn add_input(&mut self, path: &Path) -> Result<(), CliError> {
        let digest = file_digest(path)?;
        self.manifest
            .inputs
            .insert(path.display().to_string(), digest);
        Ok(())
    }

    /// Records everything besides input files that determines the outcome.
    pub fn set_params<T: Serialize>(&mut self, params: &T) {
        self.params = serde_json::to_value(params).expect("parameters serialize");
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        fs::write(self.path(name), contents).map_err(numlesa::Error::from)?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        numlesa::eval::write_json(&self.path(name), value)?;
        Ok(())
    }

    /// Writes the manifest; called once whatever the outcome.
    pub fn finish(mut self, outcome: &Result<(), CliError>) -> Result<(), CliError> {
        let hashed = serde_json::json!({ "params": self.params, "inputs": self.manifest.inputs });
        self.manifest.config_hash = numlesa::train::config_hash(&hashed);
        self.manifest.finished_unix = now();
        self.manifest.exit_status = outcome
            .as_ref()
            .map(|_| 0)
            .unwrap_or_else(CliError::exit_code);
        self.manifest.error = outcome.as_ref().err().map(|e| e.to_string());
        let path = self.path(MANIFEST);
        numlesa::eval::write_json(&path, &self.manifest)?;
        Ok(())
    }
}
