//! On-disk formats: HST1 trace archives, JSONL manifests and bundle
//! archives, plus a seeded synthetic corpus generator.

mod archive;
mod manifest;
mod synth;
mod trace;

use std::path::{Path, PathBuf};

use crate::signals::SignalError;

pub use archive::{
    decode_bundle, encode_bundle, load_bundle, save_bundle, BUNDLE_FORMAT_VERSION, BUNDLE_MAGIC,
};
pub use manifest::{load_manifest, load_record, write_manifest, Manifest, ManifestRecord};
pub use synth::{synth_pool, synth_trace, write_corpus, ConvergenceProfile, CorpusSpec, SynthSpec};
pub use trace::{
    decode_embedding, decode_trace, encode_embedding, encode_trace, read_embedding, read_trace,
    write_embedding, write_trace, HEADER_LEN, TRACE_FORMAT_VERSION, TRACE_MAGIC,
};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("bundle error: {0}")]
    Bundle(String),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

impl IngestError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        IngestError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        IngestError::Format {
            offset,
            msg: msg.into(),
        }
    }
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IngestError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| IngestError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| IngestError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        IngestError::io(path, e)
    })
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>, IngestError> {
    std::fs::read(path).map_err(|e| IngestError::io(path, e))
}

/// File stem as a query id fallback.
pub(crate) fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}
