//! Confidence-aware routing for language-model queries.
//!
//! Three signals are read off a transformer's per-layer hidden states:
//! semantic alignment with a reference embedding, internal convergence of
//! the layer trajectory, and a learned confidence predictor. They are fused
//! into one score in `[0, 1]` and thresholded into one of four pathways:
//! answer locally, answer with retrieval, escalate to a larger model, or
//! queue for human review.
//!
//! ```
//! use confroute::prelude::*;
//!
//! let th = Thresholds::default();
//! assert_eq!(route(0.80, &th).unwrap(), Action::Local);
//! assert_eq!(route(0.579, &th).unwrap(), Action::Rag);
//! assert_eq!(route(0.10, &th).unwrap(), Action::Human);
//! ```

pub mod bundle;
pub mod evalkit;
pub mod gateway;
pub mod ingest;
pub mod numkit;
pub mod router;
pub mod signals;
pub mod training;

pub use bundle::ModelBundle;

pub mod prelude {
    pub use crate::bundle::ModelBundle;
    pub use crate::evalkit::{
        compare_methods, detection_metrics, render_report, MetricsReport, ReportFormat,
    };
    pub use crate::ingest::{load_bundle, read_embedding, read_trace, save_bundle, CorpusSpec};
    pub use crate::router::{expected_cost, route, Action, CostModel, RoutingDecision, Thresholds};
    pub use crate::signals::{
        score, ConfidenceBreakdown, FusionWeights, HiddenStateTrace, ReferenceEmbedding,
    };
    pub use crate::training::{train, Tier, TierCounts, TrainConfig, TrainingSet};
}
