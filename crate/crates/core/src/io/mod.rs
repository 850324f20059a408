//! On-disk formats: little-endian float64 containers with JSON sidecars,
//! adapter containers, fusion plans, run manifests, and config parsing.

mod config;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{load_config, parse_config, CONFIG_SCHEMA_VERSION};
pub use manifest::{sha256_file, FileDigest, Manifest, MANIFEST_SCHEMA_VERSION};

use crate::adapters::{Adapter, AdapterBase, AdapterExtras, AdapterKind, AdapterState, NamedTensor};
use crate::error::{Error, Result};
use crate::fusion::{FusionPlan, SchedulePolicy};
use crate::linalg::{ColumnSelect, Matrix, SpectralDecomposition};

pub const DTYPE: &str = "f64le";
pub const LAYOUT: &str = "row-major";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixHeader {
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    pub layout: String,
}

/// `foo`, `foo.json` and `foo.bin` all name the container `foo.json` + `foo.bin`.
pub fn container_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("json"), path.with_extension("bin"))
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn encode(values: &[f64], out: &mut Vec<u8>) {
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn decode(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect()
}

fn check_header(h: &MatrixHeader, what: &Path) -> Result<()> {
    if h.dtype != DTYPE || h.layout != LAYOUT {
        return Err(Error::Format(format!(
            "{}: expected dtype {DTYPE} and layout {LAYOUT}, found {} / {}",
            what.display(),
            h.dtype,
            h.layout
        )));
    }
    Ok(())
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let (json, bin) = container_paths(path);
    let header = MatrixHeader {
        rows: m.rows(),
        cols: m.cols(),
        dtype: DTYPE.into(),
        layout: LAYOUT.into(),
    };
    let mut bytes = Vec::new();
    encode(m.as_slice(), &mut bytes);
    write_bytes(&bin, &bytes)?;
    write_json(&json, &header)
}

/// Reads a matrix container, rejecting non-finite entries.
pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let (json, bin) = container_paths(path);
    let h: MatrixHeader = read_json(&json)?;
    check_header(&h, &json)?;
    let bytes = read_bytes(&bin)?;
    let expected = h.rows.checked_mul(h.cols).and_then(|n| n.checked_mul(8));
    if expected != Some(bytes.len()) {
        return Err(Error::Format(format!(
            "{}: {} bytes for a {}x{} f64 matrix",
            bin.display(),
            bytes.len(),
            h.rows,
            h.cols
        )));
    }
    Matrix::from_external(h.rows, h.cols, decode(&bytes)).map_err(|e| match e {
        Error::NonFinite { context } => Error::Format(format!("{}: non-finite value at {context}", bin.display())),
        other => other,
    })
}

/// Writes `u`, `s` (as 1×k) and `v` containers into `dir`.
pub fn write_decomposition(dir: &Path, d: &SpectralDecomposition) -> Result<Vec<PathBuf>> {
    let s = Matrix::from_vec(1, d.k(), d.s().to_vec())?;
    let parts = [("u", d.u()), ("s", &s), ("v", d.v())];
    let mut written = Vec::new();
    for (name, m) in parts {
        let p = dir.join(name);
        write_matrix(&p, m)?;
        let (json, bin) = container_paths(&p);
        written.push(json);
        written.push(bin);
    }
    Ok(written)
}

pub fn read_decomposition(dir: &Path) -> Result<SpectralDecomposition> {
    let u = read_matrix(&dir.join("u"))?;
    let s = read_matrix(&dir.join("s"))?;
    let v = read_matrix(&dir.join("v"))?;
    if s.rows() != 1 {
        return Err(Error::Format(format!("{}: singular values must be stored as 1xk", dir.display())));
    }
    SpectralDecomposition::from_parts(u, s.into_vec(), v).map_err(|e| Error::Format(format!("{}: {e}", dir.display())))
}

/// A base given either as a matrix container or as a decomposition directory.
pub fn read_base(path: &Path) -> Result<AdapterBase> {
    if path.is_dir() {
        Ok(AdapterBase::from_decomposition(read_decomposition(path)?))
    } else {
        AdapterBase::new(read_matrix(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterHeader {
    pub kind: AdapterKind,
    pub base_shape: [usize; 2],
    pub base_fingerprint: String,
    pub rank: usize,
    #[serde(default)]
    pub columns: Option<ColumnSelect>,
    pub seed: u64,
    pub extras: AdapterExtras,
    pub dtype: String,
    /// Tensors in the order they are concatenated in the `.bin` file.
    pub tensors: Vec<TensorEntry>,
}

impl AdapterHeader {
    pub fn describe(state: &AdapterState, base: &AdapterBase, seed: u64) -> Self {
        let (n, m) = base.shape();
        Self {
            kind: state.kind(),
            base_shape: [n, m],
            base_fingerprint: base.fingerprint().to_string(),
            rank: state.rank(),
            columns: state.columns().cloned(),
            seed,
            extras: state.extras(),
            dtype: DTYPE.into(),
            tensors: state
                .tensors()
                .iter()
                .map(|t| TensorEntry {
                    name: t.name.clone(),
                    rows: t.value.rows(),
                    cols: t.value.cols(),
                    frozen: t.frozen,
                })
                .collect(),
        }
    }

    /// Fails unless the adapter was trained over `base`.
    pub fn check_base(&self, base: &AdapterBase) -> Result<()> {
        let (n, m) = base.shape();
        if self.base_shape != [n, m] || self.base_fingerprint != base.fingerprint() {
            return Err(Error::Precondition(format!(
                "adapter was trained over base {} ({}x{}) but got {} ({n}x{m})",
                self.base_fingerprint,
                self.base_shape[0],
                self.base_shape[1],
                base.fingerprint()
            )));
        }
        Ok(())
    }
}

pub fn write_adapter(path: &Path, state: &AdapterState, base: &AdapterBase, seed: u64) -> Result<()> {
    let (json, bin) = container_paths(path);
    let header = AdapterHeader::describe(state, base, seed);
    let mut bytes = Vec::new();
    for t in state.tensors() {
        encode(t.value.as_slice(), &mut bytes);
    }
    write_bytes(&bin, &bytes)?;
    write_json(&json, &header)
}

pub fn read_adapter(path: &Path) -> Result<(AdapterHeader, AdapterState)> {
    let (json, bin) = container_paths(path);
    let header: AdapterHeader = read_json(&json)?;
    if header.dtype != DTYPE {
        return Err(Error::Format(format!("{}: unsupported dtype {}", json.display(), header.dtype)));
    }
    let values = {
        let bytes = read_bytes(&bin)?;
        let total: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
        if bytes.len() != total * 8 {
            return Err(Error::Format(format!(
                "{}: {} bytes but the header lists {total} values",
                bin.display(),
                bytes.len()
            )));
        }
        decode(&bytes)
    };
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut offset = 0;
    for t in &header.tensors {
        let len = t.rows * t.cols;
        let value = Matrix::from_external(t.rows, t.cols, values[offset..offset + len].to_vec())
            .map_err(|e| Error::Format(format!("{}: tensor '{}': {e}", bin.display(), t.name)))?;
        offset += len;
        tensors.push(NamedTensor {
            name: t.name.clone(),
            value,
            frozen: t.frozen,
        });
    }
    let state = AdapterState::from_tensors(header.kind, header.rank, header.columns.clone(), &header.extras, tensors)
        .map_err(|e| Error::Format(format!("{}: {e}", json.display())))?;
    if state.tensors().iter().zip(&header.tensors).any(|(t, h)| t.frozen != h.frozen) {
        return Err(Error::Format(format!("{}: frozen flags do not match {}", json.display(), header.kind)));
    }
    Ok((header, state))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanEntryFile {
    pub adapter: PathBuf,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub columns: Option<ColumnSelect>,
}

/// Fusion plan as written by users. Relative paths resolve against the
/// plan file's directory; missing weights default to `1/n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    #[serde(default = "config::schema_version")]
    pub schema_version: u32,
    pub base: PathBuf,
    pub entries: Vec<PlanEntryFile>,
    #[serde(default = "default_policy")]
    pub policy: SchedulePolicy,
}

fn default_policy() -> SchedulePolicy {
    SchedulePolicy::Explicit
}

pub fn read_plan_file(path: &Path) -> Result<PlanFile> {
    let plan: PlanFile = read_json(path)?;
    if plan.schema_version != CONFIG_SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "{}: schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
            path.display(),
            plan.schema_version
        )));
    }
    Ok(plan)
}

pub fn write_plan_file(path: &Path, plan: &PlanFile) -> Result<()> {
    write_json(path, plan)
}

/// Loads the base and every adapter named by a plan file.
pub fn load_plan(path: &Path) -> Result<FusionPlan> {
    let file = read_plan_file(path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let base = read_base(&root.join(&file.base))?;
    let default_lambda = 1.0 / file.entries.len().max(1) as f64;
    let mut plan = FusionPlan::new(base, file.policy);
    for (i, e) in file.entries.iter().enumerate() {
        let (header, state) = read_adapter(&root.join(&e.adapter))?;
        if let Some(cols) = &e.columns {
            if state.columns() != Some(cols) {
                return Err(Error::Format(format!(
                    "plan entry {i}: columns {cols:?} differ from the adapter's {:?}",
                    state.columns()
                )));
            }
        }
        plan.entries.push(crate::fusion::FusionEntry {
            state,
            lambda: e.lambda.unwrap_or(default_lambda),
            base_fingerprint: header.base_fingerprint,
        });
    }
    Ok(plan)
}

/// CSV text is produced with `Display`, so the decimal separator is always
/// a period; this only writes it out.
pub fn write_csv(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}
