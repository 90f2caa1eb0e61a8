//! Instance files: a flat little-endian `f64` payload (`.bin`) described by
//! a JSON manifest (`.json`) holding the generation parameters, the array
//! layout and a SHA-256 of the payload.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::problems::{
    AnyInstance, MatrixSensingInstance, PlGameInstance, PlGameParams, QuadOracleInstance, QuadParams, SensingParams,
};
use crate::{Error, Result};

pub const INSTANCE_FORMAT: &str = "pl-bilevel-instance";
pub const INSTANCE_VERSION: u32 = 1;

/// One column-major matrix inside the payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset in `f64` elements from the start of the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase", deny_unknown_fields)]
pub enum InstanceParams {
    Plgame { params: PlGameParams },
    Sensing {
        params: SensingParams,
        train_idx: Vec<usize>,
        val_idx: Vec<usize>,
    },
    Quad { params: QuadParams },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceManifest {
    pub format: String,
    pub version: u32,
    pub problem: InstanceParams,
    /// Payload file name, relative to the manifest.
    pub payload: String,
    pub payload_sha256: String,
    pub arrays: Vec<ArrayEntry>,
}

struct Payload {
    data: Vec<f64>,
    arrays: Vec<ArrayEntry>,
}

impl Payload {
    fn new() -> Self {
        Payload {
            data: Vec::new(),
            arrays: Vec::new(),
        }
    }

    fn push(&mut self, name: &str, m: &DMatrix<f64>) {
        self.arrays.push(ArrayEntry {
            name: name.to_string(),
            rows: m.nrows(),
            cols: m.ncols(),
            offset: self.data.len(),
        });
        self.data.extend_from_slice(m.as_slice());
    }

    fn bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `dir/stem.json` → `dir/stem.bin`.
pub fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `manifest` (`.json`) and its payload next to it.
pub fn save_instance(manifest_path: &Path, inst: &AnyInstance<f64>) -> Result<InstanceManifest> {
    let mut payload = Payload::new();
    let problem = match inst {
        AnyInstance::PlGame(i) => {
            payload.push("p_samples", &i.p_samples);
            payload.push("q_samples", &i.q_samples);
            payload.push("r1_samples", &i.r1_samples);
            payload.push("r2_samples", &i.r2_samples);
            if let Some(b) = &i.range_map {
                payload.push("range_map", b);
            }
            InstanceParams::Plgame { params: i.params.clone() }
        }
        AnyInstance::Sensing(i) => {
            payload.push("u_star", &i.u_star);
            for (k, c) in i.sensing.iter().enumerate() {
                payload.push(&format!("sensing_{k}"), c);
            }
            InstanceParams::Sensing {
                params: i.params.clone(),
                train_idx: i.train_idx.clone(),
                val_idx: i.val_idx.clone(),
            }
        }
        AnyInstance::Quad(i) => {
            payload.push("p", &i.p_mat);
            payload.push("q", &i.q_mat);
            payload.push("r1", &i.r1_mat);
            payload.push("r2", &i.r2_mat);
            InstanceParams::Quad { params: i.params.clone() }
        }
    };
    let bytes = payload.bytes();
    let bin_path = payload_path(manifest_path);
    let manifest = InstanceManifest {
        format: INSTANCE_FORMAT.to_string(),
        version: INSTANCE_VERSION,
        problem,
        payload: bin_path
            .file_name()
            .ok_or_else(|| Error::invalid("instance path has no file name"))?
            .to_string_lossy()
            .into_owned(),
        payload_sha256: hex(&Sha256::digest(&bytes)),
        arrays: payload.arrays,
    };
    fs::write(&bin_path, &bytes)?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(manifest_path, text)?;
    Ok(manifest)
}

struct Loaded<'a> {
    manifest: &'a InstanceManifest,
    data: Vec<f64>,
}

impl Loaded<'_> {
    fn get(&self, name: &str) -> Result<DMatrix<f64>> {
        self.try_get(name)?
            .ok_or_else(|| Error::Parse(format!("instance payload has no array `{name}`")))
    }

    fn try_get(&self, name: &str) -> Result<Option<DMatrix<f64>>> {
        let Some(e) = self.manifest.arrays.iter().find(|a| a.name == name) else {
            return Ok(None);
        };
        let len = e.rows * e.cols;
        let slice = self
            .data
            .get(e.offset..e.offset + len)
            .ok_or_else(|| Error::Parse(format!("array `{name}` extends past the payload")))?;
        Ok(Some(DMatrix::from_column_slice(e.rows, e.cols, slice)))
    }
}

/// Reads and checks an instance written by [`save_instance`].
pub fn load_instance(manifest_path: &Path) -> Result<AnyInstance<f64>> {
    let text = fs::read_to_string(manifest_path)?;
    let manifest: InstanceManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format != INSTANCE_FORMAT || manifest.version != INSTANCE_VERSION {
        return Err(Error::Parse(format!(
            "{}: not a version-{INSTANCE_VERSION} instance manifest",
            manifest_path.display()
        )));
    }
    let bin = manifest_path.with_file_name(&manifest.payload);
    let bytes = fs::read(&bin)?;
    if hex(&Sha256::digest(&bytes)) != manifest.payload_sha256 {
        return Err(Error::Parse(format!("{}: payload checksum mismatch", bin.display())));
    }
    if bytes.len() % 8 != 0 {
        return Err(Error::Parse(format!("{}: payload is not a whole number of f64", bin.display())));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let loaded = Loaded {
        manifest: &manifest,
        data,
    };
    Ok(match &manifest.problem {
        InstanceParams::Plgame { params } => AnyInstance::PlGame(PlGameInstance::from_samples(
            params.clone(),
            loaded.get("p_samples")?,
            loaded.get("q_samples")?,
            loaded.get("r1_samples")?,
            loaded.get("r2_samples")?,
            loaded.try_get("range_map")?,
        )?),
        InstanceParams::Sensing {
            params,
            train_idx,
            val_idx,
        } => {
            let sensing = (0..params.n())
                .map(|k| loaded.get(&format!("sensing_{k}")))
                .collect::<Result<Vec<_>>>()?;
            AnyInstance::Sensing(MatrixSensingInstance::from_parts(
                params.clone(),
                sensing,
                loaded.get("u_star")?,
                train_idx.clone(),
                val_idx.clone(),
            )?)
        }
        InstanceParams::Quad { params } => AnyInstance::Quad(QuadOracleInstance::from_matrices(
            params.clone(),
            loaded.get("p")?,
            loaded.get("q")?,
            loaded.get("r1")?,
            loaded.get("r2")?,
        )?),
    })
}
