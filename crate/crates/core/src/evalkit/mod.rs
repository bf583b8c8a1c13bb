//! Detection and routing metrics, signal ablations and table-style reports.

mod ablation;
mod report;

use serde::{Deserialize, Serialize};

use crate::router::{action_counts, Action, CostModel, RouterError, RoutingDecision};
use crate::signals::SignalError;

pub use ablation::{
    compare_methods, outcomes_for, run_ablation, AblationConfig, AblationRow, Signal,
};
pub use report::{
    emit_ablation, emit_report, parse_markdown_report, render_ablation, render_report,
    ReportFormat, ReportRow, UNDEFINED,
};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no outcomes to evaluate")]
    Empty,
    #[error("label/decision mismatch: {0}")]
    Mismatch(String),
    #[error("invalid ablation config: {0}")]
    Config(String),
    #[error("report parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Router(#[from] RouterError),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledOutcome {
    pub query_id: String,
    pub hallucinated: bool,
    pub optimal_action: Option<Action>,
    pub decision: RoutingDecision,
}

impl LabeledOutcome {
    pub fn new(
        query_id: impl Into<String>,
        hallucinated: bool,
        optimal_action: Option<Action>,
        decision: RoutingDecision,
    ) -> Result<Self, EvalError> {
        let query_id = query_id.into();
        if decision.query_id != query_id {
            return Err(EvalError::Mismatch(format!(
                "label for `{query_id}` paired with decision for `{}`",
                decision.query_id
            )));
        }
        Ok(Self {
            query_id,
            hallucinated,
            optimal_action,
            decision,
        })
    }

    /// Anything not answered locally counts as flagged.
    pub fn flagged(&self) -> bool {
        self.decision.action != Action::Local
    }
}

/// Rates are `None` when their denominator is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub n: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub detection_rate: Option<f64>,
    pub false_positive_rate: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub routing_accuracy: Option<f64>,
    pub cost_multiplier: Option<f64>,
    pub action_counts: [u64; 4],
}

impl MetricsReport {
    pub fn with_method(mut self, method: impl Into<String>) -> Self {
        self.method = method.into();
        self
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// F1 as the harmonic mean of precision and recall; 0 when both are 0.
fn f1_of(precision: Option<f64>, recall: Option<f64>) -> Option<f64> {
    let (p, r) = (precision?, recall?);
    Some(if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    })
}

/// Confusion counts, rates and cost over labeled routing outcomes.
pub fn detection_metrics(
    outcomes: &[LabeledOutcome],
    cost: &CostModel,
) -> Result<MetricsReport, EvalError> {
    if outcomes.is_empty() {
        return Err(EvalError::Empty);
    }
    cost.validate()?;
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for o in outcomes {
        match (o.flagged(), o.hallucinated) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let counts = action_counts(outcomes.iter().map(|o| &o.decision.action));
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Ok(MetricsReport {
        method: String::new(),
        n: outcomes.len(),
        tp,
        fp,
        fn_,
        tn,
        detection_rate: recall,
        false_positive_rate: ratio(fp, fp + tn),
        precision,
        recall,
        f1: f1_of(precision, recall),
        routing_accuracy: routing_accuracy(outcomes),
        cost_multiplier: cost.mean_cost(&counts),
        action_counts: counts,
    })
}

/// Share of annotated outcomes whose action equals the optimal one.
pub fn routing_accuracy(outcomes: &[LabeledOutcome]) -> Option<f64> {
    let annotated: Vec<_> = outcomes
        .iter()
        .filter_map(|o| o.optimal_action.map(|a| a == o.decision.action))
        .collect();
    ratio(annotated.iter().filter(|m| **m).count(), annotated.len())
}
