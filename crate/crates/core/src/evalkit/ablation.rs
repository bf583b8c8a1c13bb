use serde::{Deserialize, Serialize};

use super::{detection_metrics, EvalError, LabeledOutcome, MetricsReport};
use crate::bundle::ModelBundle;
use crate::router::{learn_fusion_weights_over, Action, RoutingDecision, WeightSample};
use crate::signals::{fuse, score, ConfidenceBreakdown, FusionWeights};
use crate::training::TrainingExample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Signal {
    Sem,
    Conv,
    Learned,
}

impl Signal {
    pub const ALL: [Signal; 3] = [Signal::Sem, Signal::Conv, Signal::Learned];

    fn index(self) -> usize {
        self as usize
    }
}

/// A signal subset to keep; excluded signals get zero weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub name: String,
    pub signals: Vec<Signal>,
    /// Re-learn weights over the subset instead of renormalizing the bundle's.
    pub relearn: bool,
}

impl AblationConfig {
    pub fn new(name: impl Into<String>, signals: &[Signal]) -> Result<Self, EvalError> {
        if signals.is_empty() {
            return Err(EvalError::Config("signal subset must be nonempty".into()));
        }
        let mut signals = signals.to_vec();
        signals.sort_unstable();
        signals.dedup();
        Ok(Self {
            name: name.into(),
            signals,
            relearn: false,
        })
    }

    pub fn relearning(mut self) -> Self {
        self.relearn = true;
        self
    }

    /// The four standard rows: each signal alone, then all combined.
    pub fn standard() -> Vec<Self> {
        [
            ("Semantic alignment only", &[Signal::Sem][..]),
            ("Internal convergence only", &[Signal::Conv][..]),
            ("Learned confidence only", &[Signal::Learned][..]),
            ("All combined", &Signal::ALL[..]),
        ]
        .into_iter()
        .map(|(name, s)| Self::new(name, s).expect("nonempty"))
        .collect()
    }

    pub fn active(&self) -> [bool; 3] {
        let mut a = [false; 3];
        for s in &self.signals {
            a[s.index()] = true;
        }
        a
    }

    /// Zeroes excluded weights and renormalizes the rest; falls back to
    /// uniform over the subset when the kept weights sum to zero. The full
    /// subset returns `w` unchanged.
    pub fn effective_weights(&self, w: &FusionWeights) -> FusionWeights {
        let active = self.active();
        if active.iter().all(|a| *a) {
            return *w;
        }
        let kept: Vec<f64> = w
            .as_array()
            .iter()
            .zip(active)
            .map(|(v, a)| if a { *v } else { 0.0 })
            .collect();
        let sum: f64 = kept.iter().sum();
        let k = active.iter().filter(|a| **a).count() as f64;
        let v: Vec<f64> = if sum > 0.0 {
            kept.iter().map(|x| x / sum).collect()
        } else {
            active
                .iter()
                .map(|a| if *a { 1.0 / k } else { 0.0 })
                .collect()
        };
        FusionWeights {
            sem: v[0],
            conv: v[1],
            learned: v[2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub weights: FusionWeights,
    pub report: MetricsReport,
}

fn breakdowns(
    bundle: &ModelBundle,
    examples: &[TrainingExample],
) -> Result<Vec<ConfidenceBreakdown>, EvalError> {
    examples
        .iter()
        .map(|e| score(&e.trace, &e.reference, bundle).map_err(EvalError::from))
        .collect()
}

fn outcomes_from(
    bundle: &ModelBundle,
    examples: &[TrainingExample],
    bds: &[ConfidenceBreakdown],
    weights: &FusionWeights,
) -> Result<Vec<LabeledOutcome>, EvalError> {
    examples
        .iter()
        .zip(bds)
        .map(|(e, b)| {
            let mut b = *b;
            b.c_overall = fuse(b.c_sem, b.c_conv, b.c_learned, weights);
            let d = RoutingDecision::new(e.query_id(), b, &bundle.thresholds)?;
            LabeledOutcome::new(e.query_id(), e.hallucinated, Some(e.optimal_action), d)
        })
        .collect()
}

/// Scores and routes every example under `bundle`, fusing with `weights`.
pub fn outcomes_for(
    bundle: &ModelBundle,
    examples: &[TrainingExample],
    weights: &FusionWeights,
) -> Result<Vec<LabeledOutcome>, EvalError> {
    outcomes_from(bundle, examples, &breakdowns(bundle, examples)?, weights)
}

/// One metrics row per config, in config order.
pub fn run_ablation(
    bundle: &ModelBundle,
    examples: &[TrainingExample],
    configs: &[AblationConfig],
) -> Result<Vec<AblationRow>, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::Empty);
    }
    let bds = breakdowns(bundle, examples)?;
    let mut rows = Vec::with_capacity(configs.len());
    for cfg in configs {
        if cfg.signals.is_empty() {
            return Err(EvalError::Config(format!(
                "`{}` has an empty signal subset",
                cfg.name
            )));
        }
        let weights = if cfg.relearn {
            let samples: Vec<WeightSample> = bds
                .iter()
                .zip(examples)
                .map(|(b, e)| WeightSample {
                    signals: b.signals(),
                    hallucinated: e.hallucinated,
                })
                .collect();
            learn_fusion_weights_over(&samples, bundle.thresholds.high, 0.05, cfg.active())?
        } else {
            cfg.effective_weights(&bundle.weights)
        };
        let outcomes = outcomes_from(bundle, examples, &bds, &weights)?;
        rows.push(AblationRow {
            config: cfg.name.clone(),
            weights,
            report: detection_metrics(&outcomes, &bundle.cost_model)?.with_method(cfg.name.clone()),
        });
    }
    Ok(rows)
}

/// Fixed-pathway baselines next to confidence routing.
pub fn compare_methods(
    bundle: &ModelBundle,
    examples: &[TrainingExample],
) -> Result<Vec<MetricsReport>, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::Empty);
    }
    let bds = breakdowns(bundle, examples)?;
    let fixed = |action: Action| -> Result<Vec<LabeledOutcome>, EvalError> {
        examples
            .iter()
            .zip(&bds)
            .map(|(e, b)| {
                let mut d = RoutingDecision::new(e.query_id(), *b, &bundle.thresholds)?;
                d.action = action;
                LabeledOutcome::new(e.query_id(), e.hallucinated, Some(e.optimal_action), d)
            })
            .collect()
    };
    let routed = outcomes_from(bundle, examples, &bds, &bundle.weights)?;
    Ok(vec![
        detection_metrics(&fixed(Action::Local)?, &bundle.cost_model)?.with_method("Always local"),
        detection_metrics(&fixed(Action::Rag)?, &bundle.cost_model)?.with_method("Always RAG"),
        detection_metrics(&routed, &bundle.cost_model)?.with_method("Confidence routing"),
    ])
}
