use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::api::RouteRequest;
use crate::router::{now_millis, RoutingDecision};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReviewStatus {
    Pending,
    Resolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub item_id: String,
    pub request: RouteRequest,
    pub decision: RoutingDecision,
    pub status: ReviewStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<String>,
    pub created_at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved_at: Option<u64>,
}

/// One line of the queue log.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
enum Event {
    Enqueued {
        item: Box<ReviewItem>,
    },
    Resolved {
        item_id: String,
        resolution: String,
        resolved_at: u64,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum QueueError {
    #[error("review item `{0}` not found")]
    NotFound(String),
    #[error("review item `{0}` is already resolved")]
    AlreadyResolved(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {msg}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        msg: String,
    },
}

/// Human-review queue backed by an append-only JSONL log. Every change is
/// written and synced before it becomes visible in memory; opening the
/// queue replays the log.
#[derive(Debug)]
pub struct ReviewQueue {
    path: PathBuf,
    file: File,
    items: BTreeMap<String, ReviewItem>,
    next_seq: u64,
}

impl ReviewQueue {
    pub fn open(path: &Path) -> Result<Self, QueueError> {
        let io = |source| QueueError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(io(e)),
        };
        let mut items = BTreeMap::new();
        let mut next_seq = 0;
        let mut torn = false;
        let lines: Vec<&str> = text.split('\n').collect();
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let corrupt = |msg: String| QueueError::Corrupt {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let event: Event = match serde_json::from_str(line) {
                Ok(e) => e,
                // an unterminated last line is a write torn by a crash; it was never acknowledged
                Err(e) if i + 1 == lines.len() => {
                    tracing::warn!(path = %path.display(), line = i + 1, "dropping torn queue record: {e}");
                    torn = true;
                    continue;
                }
                Err(e) => return Err(corrupt(e.to_string())),
            };
            match event {
                Event::Enqueued { item } => {
                    if items.contains_key(&item.item_id) {
                        return Err(corrupt(format!("duplicate item `{}`", item.item_id)));
                    }
                    next_seq += 1;
                    items.insert(item.item_id.clone(), *item);
                }
                Event::Resolved {
                    item_id,
                    resolution,
                    resolved_at,
                } => {
                    let item = items.get_mut(&item_id).ok_or_else(|| {
                        corrupt(format!("resolution for unknown item `{item_id}`"))
                    })?;
                    if item.status == ReviewStatus::Resolved {
                        return Err(corrupt(format!("item `{item_id}` resolved twice")));
                    }
                    item.status = ReviewStatus::Resolved;
                    item.resolution = Some(resolution);
                    item.resolved_at = Some(resolved_at);
                }
            }
        }
        // the next append must start on a fresh line
        if torn {
            let keep = text.rfind('\n').map_or(0, |p| p + 1);
            std::fs::write(path, &text[..keep]).map_err(io)?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io)?;
        if !torn && !text.is_empty() && !text.ends_with('\n') {
            file.write_all(b"\n").map_err(io)?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            file,
            items,
            next_seq,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn append(&mut self, event: &Event) -> Result<(), QueueError> {
        let mut line = serde_json::to_string(event).expect("queue events serialize");
        line.push('\n');
        let io = |source| QueueError::Io {
            path: self.path.clone(),
            source,
        };
        self.file.write_all(line.as_bytes()).map_err(io)?;
        self.file.sync_data().map_err(io)
    }

    pub fn enqueue(
        &mut self,
        request: RouteRequest,
        decision: RoutingDecision,
    ) -> Result<ReviewItem, QueueError> {
        let item = ReviewItem {
            item_id: format!("r-{:06}", self.next_seq + 1),
            request,
            decision,
            status: ReviewStatus::Pending,
            resolution: None,
            created_at: now_millis(),
            resolved_at: None,
        };
        self.append(&Event::Enqueued {
            item: Box::new(item.clone()),
        })?;
        self.next_seq += 1;
        self.items.insert(item.item_id.clone(), item.clone());
        Ok(item)
    }

    /// Moves a pending item to resolved. A second resolve is rejected.
    pub fn resolve(
        &mut self,
        item_id: &str,
        resolution: impl Into<String>,
    ) -> Result<ReviewItem, QueueError> {
        match self.items.get(item_id) {
            None => return Err(QueueError::NotFound(item_id.into())),
            Some(i) if i.status == ReviewStatus::Resolved => {
                return Err(QueueError::AlreadyResolved(item_id.into()))
            }
            Some(_) => {}
        }
        let resolution = resolution.into();
        let resolved_at = now_millis();
        self.append(&Event::Resolved {
            item_id: item_id.into(),
            resolution: resolution.clone(),
            resolved_at,
        })?;
        let item = self.items.get_mut(item_id).expect("checked above");
        item.status = ReviewStatus::Resolved;
        item.resolution = Some(resolution);
        item.resolved_at = Some(resolved_at);
        Ok(item.clone())
    }

    pub fn get(&self, item_id: &str) -> Option<&ReviewItem> {
        self.items.get(item_id)
    }

    /// Unresolved items in enqueue order.
    pub fn pending(&self) -> Vec<ReviewItem> {
        self.items
            .values()
            .filter(|i| i.status == ReviewStatus::Pending)
            .cloned()
            .collect()
    }

    pub fn pending_len(&self) -> usize {
        self.items
            .values()
            .filter(|i| i.status == ReviewStatus::Pending)
            .count()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}
