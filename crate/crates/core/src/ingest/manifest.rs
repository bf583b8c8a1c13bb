use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::trace::{decode_embedding, decode_trace};
use super::{read_bytes, write_atomic, IngestError};
use crate::router::Action;
use crate::signals::{HiddenStateTrace, ReferenceEmbedding};
use crate::training::Tier;

/// One line of a manifest. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub query_id: String,
    #[serde(default)]
    pub query_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tier: Option<Tier>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hallucinated: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimal_action: Option<Action>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
    /// Set by the extractor when a query could not be processed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

impl ManifestRecord {
    pub fn new(
        query_id: impl Into<String>,
        trace: impl Into<PathBuf>,
        reference: impl Into<PathBuf>,
    ) -> Self {
        Self {
            query_id: query_id.into(),
            query_text: String::new(),
            tier: None,
            hallucinated: None,
            optimal_action: None,
            trace: Some(trace.into()),
            reference: Some(reference.into()),
            skipped: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub dir: PathBuf,
    entries: BTreeMap<String, ManifestRecord>,
}

impl Manifest {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            entries: BTreeMap::new(),
        }
    }

    /// Adds a record; duplicate ids are rejected.
    pub fn insert(&mut self, rec: ManifestRecord) -> Result<(), IngestError> {
        if self.entries.contains_key(&rec.query_id) {
            return Err(IngestError::Manifest {
                line: self.entries.len() + 1,
                msg: format!("duplicate query_id `{}`", rec.query_id),
            });
        }
        self.entries.insert(rec.query_id.clone(), rec);
        Ok(())
    }

    /// Usable records in query-id order (skipped ones excluded).
    pub fn records(&self) -> impl Iterator<Item = &ManifestRecord> {
        self.entries.values().filter(|r| r.skipped.is_none())
    }

    pub fn skipped(&self) -> impl Iterator<Item = &ManifestRecord> {
        self.entries.values().filter(|r| r.skipped.is_some())
    }

    pub fn get(&self, query_id: &str) -> Option<&ManifestRecord> {
        self.entries.get(query_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.dir.join(rel)
    }

    /// Parses manifest text. Blank lines are ignored, as are unknown fields.
    pub fn parse(text: &str, dir: impl Into<PathBuf>) -> Result<Self, IngestError> {
        let mut m = Manifest::new(dir);
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord =
                serde_json::from_str(line).map_err(|e| IngestError::Manifest {
                    line: line_no,
                    msg: e.to_string(),
                })?;
            if rec.query_id.is_empty() {
                return Err(IngestError::Manifest {
                    line: line_no,
                    msg: "empty query_id".into(),
                });
            }
            if rec.skipped.is_none() && (rec.trace.is_none() || rec.reference.is_none()) {
                return Err(IngestError::Manifest {
                    line: line_no,
                    msg: format!(
                        "record `{}` needs both `trace` and `reference`",
                        rec.query_id
                    ),
                });
            }
            if m.entries.contains_key(&rec.query_id) {
                return Err(IngestError::Manifest {
                    line: line_no,
                    msg: format!("duplicate query_id `{}`", rec.query_id),
                });
            }
            m.entries.insert(rec.query_id.clone(), rec);
        }
        Ok(m)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in self.entries.values() {
            out.push_str(&serde_json::to_string(rec).expect("manifest records serialize"));
            out.push('\n');
        }
        out
    }

    /// Every referenced file of a usable record must exist.
    pub fn check_files(&self) -> Result<(), IngestError> {
        for (i, rec) in self.entries.values().enumerate() {
            if rec.skipped.is_some() {
                continue;
            }
            for p in [&rec.trace, &rec.reference].into_iter().flatten() {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(IngestError::Manifest {
                        line: i + 1,
                        msg: format!(
                            "`{}` references missing file {}",
                            rec.query_id,
                            full.display()
                        ),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Loads a manifest and verifies that every referenced file exists.
pub fn load_manifest(path: &Path) -> Result<Manifest, IngestError> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|e| IngestError::Manifest {
        line: 0,
        msg: format!("not UTF-8: {e}"),
    })?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let m = Manifest::parse(&text, dir)?;
    m.check_files()?;
    Ok(m)
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<(), IngestError> {
    write_atomic(path, manifest.to_jsonl().as_bytes())
}

/// Reads a record's trace and reference embedding, both tagged with the record's id.
pub fn load_record(
    manifest: &Manifest,
    rec: &ManifestRecord,
) -> Result<(HiddenStateTrace, ReferenceEmbedding), IngestError> {
    let (Some(t), Some(r)) = (&rec.trace, &rec.reference) else {
        return Err(IngestError::Manifest {
            line: 0,
            msg: format!(
                "`{}` has no trace/reference (skipped: {:?})",
                rec.query_id, rec.skipped
            ),
        });
    };
    let trace = decode_trace(&read_bytes(&manifest.resolve(t))?, rec.query_id.clone())?;
    let reference = decode_embedding(&read_bytes(&manifest.resolve(r))?, rec.query_id.clone())?;
    Ok((trace, reference))
}
