//! Threshold routing over four response pathways, cost accounting, and
//! grid-search calibration of thresholds and fusion weights.

mod calibrate;

use std::fmt;
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::signals::ConfidenceBreakdown;

pub use calibrate::{
    calibrate_thresholds, learn_fusion_weights, learn_fusion_weights_over, simplex_grid,
    threshold_grid, CalibrationObjective, CalibrationSample, WeightSample,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RouterError {
    #[error("confidence {0} lies outside [0, 1]")]
    Domain(f64),
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
    #[error("invalid cost model: {0}")]
    InvalidCost(String),
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error("no decisions to account for")]
    Empty,
}

/// Response pathway. Ordered by the confidence each one requires.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Human,
    Large,
    Rag,
    Local,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Local, Action::Rag, Action::Large, Action::Human];

    pub fn as_str(&self) -> &'static str {
        match self {
            Action::Local => "local",
            Action::Rag => "rag",
            Action::Large => "large",
            Action::Human => "human",
        }
    }

    pub fn index(&self) -> usize {
        match self {
            Action::Local => 0,
            Action::Rag => 1,
            Action::Large => 2,
            Action::Human => 3,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Action {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "local" => Ok(Action::Local),
            "rag" => Ok(Action::Rag),
            "large" => Ok(Action::Large),
            "human" => Ok(Action::Human),
            other => Err(format!("unknown action `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub high: f64,
    pub med: f64,
    pub low: f64,
}

impl Default for Thresholds {
    /// 0.75 / 0.55 / 0.35.
    fn default() -> Self {
        Self {
            high: 0.75,
            med: 0.55,
            low: 0.35,
        }
    }
}

impl Thresholds {
    pub fn new(high: f64, med: f64, low: f64) -> Result<Self, RouterError> {
        let t = Self { high, med, low };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), RouterError> {
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if !(in_unit(self.high) && in_unit(self.med) && in_unit(self.low)) {
            return Err(RouterError::InvalidThresholds(format!(
                "all thresholds must lie in (0, 1): {self:?}"
            )));
        }
        if !(self.high > self.med && self.med > self.low) {
            return Err(RouterError::InvalidThresholds(format!(
                "need high > med > low, got {} / {} / {}",
                self.high, self.med, self.low
            )));
        }
        Ok(())
    }

    /// Short content hash identifying this threshold triple.
    pub fn version(&self) -> String {
        let mut h = Sha256::new();
        for v in [self.high, self.med, self.low] {
            h.update(v.to_le_bytes());
        }
        let digest = h.finalize();
        format!("th-{}", hex_prefix(&digest, 6))
    }
}

pub(crate) fn hex_prefix(bytes: &[u8], n: usize) -> String {
    bytes.iter().take(n).map(|b| format!("{b:02x}")).collect()
}

/// Maps an overall confidence to an action.
pub fn route(c_overall: f64, th: &Thresholds) -> Result<Action, RouterError> {
    if !(0.0..=1.0).contains(&c_overall) {
        return Err(RouterError::Domain(c_overall));
    }
    Ok(route_unchecked(c_overall, th))
}

pub(crate) fn route_unchecked(c: f64, th: &Thresholds) -> Action {
    if c >= th.high {
        Action::Local
    } else if c >= th.med {
        Action::Rag
    } else if c >= th.low {
        Action::Large
    } else {
        Action::Human
    }
}

/// Per-action cost multipliers relative to local generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub local: f64,
    pub rag: f64,
    pub large: f64,
    pub human: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            local: 1.0,
            rag: 2.8,
            large: 5.0,
            human: 10.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), RouterError> {
        let costs = [self.local, self.rag, self.large, self.human];
        if costs.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(RouterError::InvalidCost(format!(
                "costs must be nonnegative: {costs:?}"
            )));
        }
        if self.local != 1.0 {
            return Err(RouterError::InvalidCost(format!(
                "local cost is the unit and must be 1.0, got {}",
                self.local
            )));
        }
        Ok(())
    }

    pub fn cost(&self, action: Action) -> f64 {
        match action {
            Action::Local => self.local,
            Action::Rag => self.rag,
            Action::Large => self.large,
            Action::Human => self.human,
        }
    }

    /// Mean cost of a mix given per-action counts (indexed by [`Action::index`]).
    pub fn mean_cost(&self, counts: &[u64; 4]) -> Option<f64> {
        let n: u64 = counts.iter().sum();
        if n == 0 {
            return None;
        }
        let total: f64 = Action::ALL
            .iter()
            .map(|a| counts[a.index()] as f64 * self.cost(*a))
            .sum();
        Some(total / n as f64 / self.local)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub query_id: String,
    pub action: Action,
    pub breakdown: ConfidenceBreakdown,
    pub thresholds_version: String,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

impl RoutingDecision {
    pub fn new(
        query_id: impl Into<String>,
        breakdown: ConfidenceBreakdown,
        thresholds: &Thresholds,
    ) -> Result<Self, RouterError> {
        Ok(Self {
            query_id: query_id.into(),
            action: route(breakdown.c_overall, thresholds)?,
            breakdown,
            thresholds_version: thresholds.version(),
            timestamp: now_millis(),
        })
    }
}

pub(crate) fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

pub fn action_counts<'a>(actions: impl IntoIterator<Item = &'a Action>) -> [u64; 4] {
    let mut counts = [0u64; 4];
    for a in actions {
        counts[a.index()] += 1;
    }
    counts
}

/// Mean per-decision cost multiplier, relative to all-local.
pub fn expected_cost(decisions: &[RoutingDecision], cost: &CostModel) -> Result<f64, RouterError> {
    let counts = action_counts(decisions.iter().map(|d| &d.action));
    cost.mean_cost(&counts).ok_or(RouterError::Empty)
}
