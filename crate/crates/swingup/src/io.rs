//! Output artifacts: CSV tables with a JSON metadata header line, JSON
//! documents, and the run manifest that ties outputs to the exact
//! configuration bytes that produced them.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o error on {path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, IoError>;

/// Numbers are written with 12 significant digits so byte-identical output
/// is a meaningful determinism check without printing float noise.
pub fn format_sig(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    format!("{v:.11e}")
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File { path: path.to_path_buf(), source }
}

/// CSV with an optional `# {json}` metadata header line, then a column
/// header, then rows of 12-significant-digit numbers.
pub fn write_csv<M: Serialize>(
    path: &Path,
    metadata: Option<&M>,
    columns: &[&str],
    rows: impl Iterator<Item = Vec<f64>>,
) -> Result<()> {
    let mut buf = String::new();
    if let Some(m) = metadata {
        buf.push_str("# ");
        buf.push_str(&serde_json::to_string(m)?);
        buf.push('\n');
    }
    buf.push_str(&columns.join(","));
    buf.push('\n');
    for row in rows {
        let mut first = true;
        for v in row {
            if !first {
                buf.push(',');
            }
            buf.push_str(&format_sig(v));
            first = false;
        }
        buf.push('\n');
    }
    write_atomic(path, buf.as_bytes())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Write via a temporary file in the same directory so a failed run never
/// leaves a truncated artifact behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(file_err(path))?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(file_err(&tmp))?;
        f.write_all(bytes).map_err(file_err(&tmp))?;
        f.sync_all().map_err(file_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(file_err(path))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    /// SHA-256 of the serialized configuration, byte-for-byte.
    pub config_sha256: String,
    pub seed: u64,
    pub started_utc: String,
    pub finished_utc: String,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn start(command: &str, config_text: &str, seed: u64) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_sha256: sha256_hex(config_text.as_bytes()),
            seed,
            started_utc: chrono::Utc::now().to_rfc3339(),
            finished_utc: String::new(),
            outputs: Vec::new(),
        }
    }

    pub fn record(&mut self, path: &Path) {
        self.outputs.push(path.to_string_lossy().into_owned());
    }

    pub fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        self.finished_utc = chrono::Utc::now().to_rfc3339();
        let path = dir.join("manifest.json");
        write_json(&path, &self)?;
        Ok(path)
    }
}
