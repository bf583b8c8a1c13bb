use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::api::RouteRequest;
use crate::router::{Action, RoutingDecision};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetResponse {
    pub target: String,
    /// Canned stub text, or empty for a review ticket.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub body: String,
    /// Set when the query was queued for human review.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_id: Option<String>,
    pub pending: bool,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("target `{target}` failed: {msg}")]
pub struct TargetError {
    pub target: String,
    pub msg: String,
}

/// A response pathway the gateway can dispatch to.
pub trait RoutingTarget: Send + Sync {
    fn name(&self) -> &str;
    fn handle(
        &self,
        request: &RouteRequest,
        decision: &RoutingDecision,
    ) -> Result<TargetResponse, TargetError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetSettings {
    pub enabled: bool,
    /// Prefix of the canned reply.
    pub label: Option<String>,
}

impl Default for TargetSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            label: None,
        }
    }
}

/// Canned responder for the local, rag and large pathways.
#[derive(Debug, Clone)]
pub struct StubTarget {
    name: String,
    label: String,
    enabled: bool,
}

impl StubTarget {
    pub fn new(action: Action, settings: &TargetSettings) -> Self {
        let name = format!("{}-stub", action.as_str());
        Self {
            label: settings
                .label
                .clone()
                .unwrap_or_else(|| format!("[{name}]")),
            name,
            enabled: settings.enabled,
        }
    }
}

impl RoutingTarget for StubTarget {
    fn name(&self) -> &str {
        &self.name
    }

    fn handle(
        &self,
        request: &RouteRequest,
        decision: &RoutingDecision,
    ) -> Result<TargetResponse, TargetError> {
        if !self.enabled {
            return Err(TargetError {
                target: self.name.clone(),
                msg: "target is disabled".into(),
            });
        }
        Ok(TargetResponse {
            target: self.name.clone(),
            body: format!(
                "{} canned response for `{}` (c_overall {:.3}, thresholds {})",
                self.label,
                request.query_id,
                decision.breakdown.c_overall,
                decision.thresholds_version
            ),
            item_id: None,
            pending: false,
        })
    }
}

/// The non-human targets, indexed by action. Human-routed requests go to
/// the review queue instead.
#[derive(Clone)]
pub struct Targets {
    local: Arc<dyn RoutingTarget>,
    rag: Arc<dyn RoutingTarget>,
    large: Arc<dyn RoutingTarget>,
}

impl Targets {
    pub fn new(
        local: Arc<dyn RoutingTarget>,
        rag: Arc<dyn RoutingTarget>,
        large: Arc<dyn RoutingTarget>,
    ) -> Self {
        Self { local, rag, large }
    }

    pub fn stubs(local: &TargetSettings, rag: &TargetSettings, large: &TargetSettings) -> Self {
        Self::new(
            Arc::new(StubTarget::new(Action::Local, local)),
            Arc::new(StubTarget::new(Action::Rag, rag)),
            Arc::new(StubTarget::new(Action::Large, large)),
        )
    }

    /// `None` for [`Action::Human`].
    pub fn for_action(&self, action: Action) -> Option<&Arc<dyn RoutingTarget>> {
        match action {
            Action::Local => Some(&self.local),
            Action::Rag => Some(&self.rag),
            Action::Large => Some(&self.large),
            Action::Human => None,
        }
    }
}

impl std::fmt::Debug for Targets {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Targets")
            .field("local", &self.local.name())
            .field("rag", &self.rag.name())
            .field("large", &self.large.name())
            .finish()
    }
}
