//! Single container format for every persisted artifact.
//!
//! Layout: 8-byte magic `TDAENS01`, little-endian `u32` header length, UTF-8
//! JSON header, then the payload as little-endian `f64` values. The header
//! records the payload length and its SHA-256 so truncation and bit rot are
//! caught before anything is returned.

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TDAENS01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Params,
    Adapters,
    FeaturePack,
    Attribution,
    GroundTruth,
    Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactHeader {
    pub version: u32,
    pub kind: ArtifactKind,
    /// Number of `f64` values in the payload.
    pub payload_len: usize,
    /// SHA-256 of the payload bytes, hex encoded.
    pub checksum: String,
    /// Digest of the configuration that produced the artifact.
    pub config_digest: String,
    /// Kind-specific metadata (shapes, seeds, layouts).
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub header: ArtifactHeader,
    pub payload: Vec<f64>,
}

fn payload_bytes(payload: &[f64]) -> Vec<u8> {
    payload.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Hex SHA-256 of raw bytes.
pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of a value's JSON encoding. Map keys serialize in sorted
/// order, so equal values always give equal digests.
pub fn digest_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(digest_bytes(&serde_json::to_vec(&v)?))
}

impl Artifact {
    pub fn new(
        kind: ArtifactKind,
        config_digest: impl Into<String>,
        meta: impl Serialize,
        payload: Vec<f64>,
    ) -> Result<Self> {
        let header = ArtifactHeader {
            version: FORMAT_VERSION,
            kind,
            payload_len: payload.len(),
            checksum: digest_bytes(&payload_bytes(&payload)),
            config_digest: config_digest.into(),
            meta: serde_json::to_value(meta)?,
        };
        Ok(Self { header, payload })
    }

    pub fn meta<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.header.meta.clone())?)
    }

    pub fn expect_kind(&self, kind: ArtifactKind) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Config(format!(
                "expected a {kind:?} artifact, found {:?}",
                self.header.kind
            )));
        }
        Ok(())
    }

    /// Fails unless the artifact was produced from the expected config.
    pub fn expect_digest(&self, expected: &str) -> Result<()> {
        if self.header.config_digest != expected {
            return Err(Error::DigestMismatch {
                expected: expected.to_owned(),
                found: self.header.config_digest.clone(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let header_len = u32::try_from(header.len()).map_err(|_| Error::Config("artifact header too large".into()))?;
        let mut out = Vec::with_capacity(12 + header.len() + 8 * self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload_bytes(&self.payload));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |message: String| Error::Corruption {
            path: path.to_path_buf(),
            message,
        };
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                message: "missing TDAENS01 magic".into(),
            });
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let header_end = 12usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt(format!("header length {header_len} exceeds file size")))?;
        let raw: serde_json::Value = serde_json::from_slice(&bytes[12..header_end])
            .map_err(|e| corrupt(format!("unreadable header: {e}")))?;
        let version = raw.get("version").and_then(serde_json::Value::as_u64).unwrap_or(0);
        if version != u64::from(FORMAT_VERSION) {
            return Err(Error::Migration {
                found: u32::try_from(version).unwrap_or(u32::MAX),
                supported: FORMAT_VERSION,
            });
        }
        let header: ArtifactHeader =
            serde_json::from_value(raw).map_err(|e| corrupt(format!("invalid header: {e}")))?;
        let body = &bytes[header_end..];
        if body.len() != header.payload_len * 8 {
            return Err(corrupt(format!(
                "payload has {} bytes, header declares {} values",
                body.len(),
                header.payload_len
            )));
        }
        let checksum = digest_bytes(body);
        if checksum != header.checksum {
            return Err(corrupt("payload checksum mismatch".into()));
        }
        let payload = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self { header, payload })
    }
}

/// Write atomically: a temporary file in the target directory is renamed
/// over `path` once fully written.
pub fn save_artifact(path: &Path, artifact: &Artifact) -> Result<()> {
    let bytes = artifact.to_bytes()?;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn load_artifact(path: &Path) -> Result<Artifact> {
    let bytes = std::fs::read(path).map_err(|e| Error::from(e).context(format!("reading {path:?}")))?;
    Artifact::from_bytes(&bytes, path)
}
