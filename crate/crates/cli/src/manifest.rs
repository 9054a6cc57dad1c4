use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};
use tomo_core::store::{self, ArtifactKind};

use crate::CliError;

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to repeat a run: arguments, effective configuration,
/// seeds, thread count, versions and digests of the inputs.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub cli_version: &'static str,
    pub core_version: &'static str,
    pub command: String,
    pub args: Vec<String>,
    pub threads: usize,
    pub seeds: Vec<u64>,
    pub config: Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Self {
            tool: "tomo",
            cli_version: env!("CARGO_PKG_VERSION"),
            core_version: tomo_core::VERSION,
            command: command.into(),
            args: std::env::args().skip(1).collect(),
            threads: rayon::current_num_threads(),
            seeds: Vec::new(),
            config: Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn config(mut self, config: &impl Serialize) -> Result<Self, CliError> {
        self.config = serde_json::to_value(config)
            .map_err(|e| CliError::from(tomo_core::Error::MalformedPayload(e.to_string())))?;
        Ok(self)
    }

    pub fn seeds(mut self, seeds: impl IntoIterator<Item = u64>) -> Self {
        self.seeds = seeds.into_iter().collect();
        self
    }

    pub fn input(mut self, path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::from(tomo_core::Error::Io(format!("{}: {e}", path.display()))))?;
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(self)
    }

    pub fn output(mut self, path: &Path) -> Self {
        self.outputs.push(path.display().to_string());
        self
    }

    /// Writes `<out>.manifest.json` next to the primary output.
    pub fn write_beside(self, out: &Path) -> Result<PathBuf, CliError> {
        let mut name = out.as_os_str().to_owned();
        name.push(".manifest.json");
        let path = PathBuf::from(name);
        self.write_to(&path)?;
        Ok(path)
    }

    pub fn write_to(self, path: &Path) -> Result<(), CliError> {
        store::save_artifact(path, ArtifactKind::Manifest, &self)?;
        Ok(())
    }
}
