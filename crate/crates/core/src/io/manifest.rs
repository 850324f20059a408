use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDigest {
    /// Relative to the output directory for outputs.
    pub path: String,
    pub sha256: String,
}

/// Record of one CLI run: enough to re-run it and check the outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Fully resolved arguments and configuration.
    pub config: Value,
    pub seed: u64,
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default)]
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Wall-clock measurements; not part of the reproducible output.
    #[serde(default)]
    pub timings_ms: BTreeMap<String, f64>,
}

impl Manifest {
    pub fn new(tool: &str, version: &str, command: &str, config: Value, seed: u64, tol: Option<f64>) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            tool: tool.into(),
            version: version.into(),
            command: command.into(),
            config,
            seed,
            tol,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings_ms: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let sha256 = sha256_file(path)?;
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256,
        });
        Ok(())
    }

    /// Records `root/rel`.
    pub fn add_output(&mut self, root: &Path, rel: &Path) -> Result<()> {
        let sha256 = sha256_file(&root.join(rel))?;
        self.outputs.push(FileDigest {
            path: rel.display().to_string(),
            sha256,
        });
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        super::write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let m: Manifest = super::read_json(path)?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "{}: manifest schema_version {} is not supported",
                path.display(),
                m.schema_version
            )));
        }
        Ok(m)
    }

    /// Outputs whose digests differ between two runs, by path.
    pub fn output_mismatches(&self, other: &Manifest) -> Vec<String> {
        let theirs: BTreeMap<&str, &str> = other.outputs.iter().map(|d| (d.path.as_str(), d.sha256.as_str())).collect();
        let mut bad: Vec<String> = self
            .outputs
            .iter()
            .filter(|d| theirs.get(d.path.as_str()) != Some(&d.sha256.as_str()))
            .map(|d| d.path.clone())
            .collect();
        if self.outputs.len() != other.outputs.len() {
            bad.push(format!("{} vs {} outputs", self.outputs.len(), other.outputs.len()));
        }
        bad
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = super::read_bytes(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
