//! HTTP service that scores precomputed traces, routes them, dispatches to
//! the chosen pathway and keeps a persistent human-review queue.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/v1/score` | confidence breakdown |
//! | POST | `/v1/route` | decision plus target response |
//! | GET | `/v1/review/pending` | unresolved review items |
//! | POST | `/v1/review/{id}/resolve` | `{"resolution": "..."}` |
//! | GET | `/v1/health` | bundle and thresholds versions |
//! | GET | `/v1/metrics` | per-action counts and cost multiplier |
//! | POST | `/v1/admin/reload` | re-read the bundle file and swap it in |

mod api;
mod queue;
mod targets;

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use axum::extract::DefaultBodyLimit;
use axum::routing::{get, post};
use serde::{Deserialize, Serialize};

use crate::bundle::ModelBundle;
use crate::ingest::{load_bundle, IngestError};
use crate::router::{Action, CostModel, RoutingDecision};

pub use api::{ApiError, RouteRequest, RouteResponse, Source};
pub use queue::{QueueError, ReviewItem, ReviewQueue, ReviewStatus};
pub use targets::{
    RoutingTarget, StubTarget, TargetError, TargetResponse, TargetSettings, Targets,
};

pub const ENV_LISTEN: &str = "CONFROUTE_LISTEN";
pub const ENV_BUNDLE: &str = "CONFROUTE_BUNDLE";
pub const ENV_QUEUE: &str = "CONFROUTE_QUEUE";

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid gateway config: {0}")]
    Config(String),
    #[error("cannot load bundle: {0}")]
    Bundle(#[from] IngestError),
    #[error("review queue: {0}")]
    Queue(#[from] QueueError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetsConfig {
    pub local: TargetSettings,
    pub rag: TargetSettings,
    pub large: TargetSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub listen: String,
    pub bundle: PathBuf,
    pub queue: PathBuf,
    /// Root for `{"path": ...}` sources. Path sources are refused when unset.
    pub data_root: Option<PathBuf>,
    pub max_body_bytes: usize,
    pub cost_model: CostModel,
    pub targets: TargetsConfig,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            bundle: PathBuf::new(),
            queue: PathBuf::from("review-queue.jsonl"),
            data_root: None,
            max_body_bytes: 16 << 20,
            cost_model: CostModel::default(),
            targets: TargetsConfig::default(),
        }
    }
}

impl GatewayConfig {
    /// Parses TOML; relative paths are taken relative to `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, GatewayError> {
        let mut cfg: Self =
            toml::from_str(text).map_err(|e| GatewayError::Config(e.to_string()))?;
        for p in [&mut cfg.bundle, &mut cfg.queue] {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(p) = cfg.data_root.as_mut().filter(|p| p.is_relative()) {
            *p = base.join(&*p);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Applies `CONFROUTE_LISTEN`, `CONFROUTE_BUNDLE` and `CONFROUTE_QUEUE`.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) {
        if let Some(v) = var(ENV_LISTEN) {
            self.listen = v;
        }
        if let Some(v) = var(ENV_BUNDLE) {
            self.bundle = v.into();
        }
        if let Some(v) = var(ENV_QUEUE) {
            self.queue = v.into();
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.bundle.as_os_str().is_empty() {
            return Err(GatewayError::Config("`bundle` path is required".into()));
        }
        if self.queue.as_os_str().is_empty() {
            return Err(GatewayError::Config("`queue` path is required".into()));
        }
        if self.max_body_bytes == 0 {
            return Err(GatewayError::Config(
                "`max_body_bytes` must be positive".into(),
            ));
        }
        self.cost_model
            .validate()
            .map_err(|e| GatewayError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionCounts {
    pub local: u64,
    pub rag: u64,
    pub large: u64,
    pub human: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub decisions: u64,
    pub counts: ActionCounts,
    /// Mean cost relative to all-local; absent before the first decision.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_multiplier: Option<f64>,
    pub pending_reviews: usize,
    pub target_failures: u64,
}

/// Decision counts and the review queue, mutated only under one lock.
#[derive(Debug)]
pub struct Ledger {
    counts: [u64; 4],
    target_failures: u64,
    queue: ReviewQueue,
}

impl Ledger {
    pub fn new(queue: ReviewQueue) -> Self {
        Self {
            counts: [0; 4],
            target_failures: 0,
            queue,
        }
    }

    /// Counts one decision and returns its sequence number.
    pub fn record(&mut self, action: Action) -> u64 {
        self.counts[action.index()] += 1;
        self.decisions()
    }

    pub fn decisions(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn snapshot(&self, cost: &CostModel) -> MetricsSnapshot {
        let c = self.counts;
        MetricsSnapshot {
            decisions: self.decisions(),
            counts: ActionCounts {
                local: c[Action::Local.index()],
                rag: c[Action::Rag.index()],
                large: c[Action::Large.index()],
                human: c[Action::Human.index()],
            },
            cost_multiplier: cost.mean_cost(&c),
            pending_reviews: self.queue.pending_len(),
            target_failures: self.target_failures,
        }
    }
}

struct Inner {
    bundle: RwLock<Arc<ModelBundle>>,
    bundle_path: PathBuf,
    data_root: Option<PathBuf>,
    cost_model: CostModel,
    targets: Targets,
    ledger: Mutex<Ledger>,
    reload: tokio::sync::Mutex<()>,
}

/// Shared service state. Cheap to clone.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    /// Loads the bundle and replays the queue; fails if either is unusable.
    pub fn from_config(cfg: &GatewayConfig) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let bundle = load_bundle(&cfg.bundle)?;
        let queue = ReviewQueue::open(&cfg.queue)?;
        let t = &cfg.targets;
        Ok(Self::with_parts(
            bundle,
            cfg.bundle.clone(),
            queue,
            Targets::stubs(&t.local, &t.rag, &t.large),
            cfg.cost_model,
            cfg.data_root.clone(),
        ))
    }

    pub fn with_parts(
        bundle: ModelBundle,
        bundle_path: PathBuf,
        queue: ReviewQueue,
        targets: Targets,
        cost_model: CostModel,
        data_root: Option<PathBuf>,
    ) -> Self {
        Self {
            inner: Arc::new(Inner {
                bundle: RwLock::new(Arc::new(bundle)),
                bundle_path,
                data_root,
                cost_model,
                targets,
                ledger: Mutex::new(Ledger::new(queue)),
                reload: tokio::sync::Mutex::new(()),
            }),
        }
    }

    pub fn bundle(&self) -> Arc<ModelBundle> {
        self.inner
            .bundle
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
    }

    fn ledger(&self) -> MutexGuard<'_, Ledger> {
        self.inner.ledger.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn data_root(&self) -> Option<&Path> {
        self.inner.data_root.as_deref()
    }

    fn targets(&self) -> &Targets {
        &self.inner.targets
    }

    /// Records a decision. Human-routed decisions are enqueued under the
    /// same lock and come back with their ticket; other actions return
    /// `None` and are dispatched by the caller.
    fn record(
        &self,
        req: &RouteRequest,
        decision: &RoutingDecision,
    ) -> Result<(u64, Option<TargetResponse>), ApiError> {
        let mut ledger = self.ledger();
        if decision.action == Action::Human {
            let item = ledger.queue.enqueue(req.clone(), decision.clone())?;
            let seq = ledger.record(Action::Human);
            return Ok((
                seq,
                Some(TargetResponse {
                    target: "human-queue".into(),
                    body: String::new(),
                    item_id: Some(item.item_id),
                    pending: true,
                }),
            ));
        }
        Ok((ledger.record(decision.action), None))
    }

    fn record_target_failure(&self) {
        self.ledger().target_failures += 1;
    }

    pub fn pending(&self) -> Vec<ReviewItem> {
        self.ledger().queue.pending()
    }

    pub fn resolve(&self, item_id: &str, resolution: String) -> Result<ReviewItem, QueueError> {
        self.ledger().queue.resolve(item_id, resolution)
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        self.ledger().snapshot(&self.inner.cost_model)
    }

    /// Loads the bundle file again and swaps it in. Requests already
    /// holding the old bundle finish on it; a failed load keeps it.
    pub async fn reload(&self) -> Result<(String, String), GatewayError> {
        let _guard = self.inner.reload.lock().await;
        let path = self.inner.bundle_path.clone();
        let fresh = tokio::task::spawn_blocking(move || load_bundle(&path))
            .await
            .map_err(|e| GatewayError::Io(std::io::Error::other(e)))??;
        let current = fresh.bundle_version.clone();
        let old = std::mem::replace(
            &mut *self.inner.bundle.write().unwrap_or_else(|e| e.into_inner()),
            Arc::new(fresh),
        );
        tracing::info!(previous = %old.bundle_version, current = %current, "bundle reloaded");
        Ok((old.bundle_version.clone(), current))
    }
}

pub fn app(state: AppState, max_body_bytes: usize) -> axum::Router {
    axum::Router::new()
        .route("/v1/score", post(api::post_score))
        .route("/v1/route", post(api::post_route))
        .route("/v1/review/pending", get(api::get_pending))
        .route("/v1/review/{id}/resolve", post(api::post_resolve))
        .route("/v1/health", get(api::get_health))
        .route("/v1/metrics", get(api::get_metrics))
        .route("/v1/admin/reload", post(api::post_reload))
        .layer(DefaultBodyLimit::max(max_body_bytes))
        .with_state(state)
}

/// Binds `cfg.listen` and serves until Ctrl-C.
pub async fn serve(cfg: GatewayConfig) -> Result<(), GatewayError> {
    let state = AppState::from_config(&cfg)?;
    let listener = tokio::net::TcpListener::bind(&cfg.listen).await?;
    let b = state.bundle();
    tracing::info!(
        listen = %listener.local_addr()?,
        bundle = %b.bundle_version,
        thresholds = %b.thresholds_version(),
        pending = state.metrics().pending_reviews,
        "gateway up"
    );
    axum::serve(listener, app(state, cfg.max_body_bytes))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
