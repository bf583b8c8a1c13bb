use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{TrainingError, TrainingExample};
use crate::numkit::{cosine, dot, norm, sigmoid, BatchStats, NumError, Vector, ZERO_NORM};
use crate::signals::{ConfidencePredictor, ProjectionModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_align: f64,
    pub lambda_conf: f64,
    pub lambda_l2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_align: 1.0,
            lambda_conf: 1.0,
            lambda_l2: 1e-5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let ws = [self.lambda_align, self.lambda_conf, self.lambda_l2];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(TrainingError::Config(format!(
                "loss weights must be nonnegative: {ws:?}"
            )));
        }
        if self.lambda_align == 0.0 && self.lambda_conf == 0.0 {
            return Err(TrainingError::Config(
                "at least one of lambda_align and lambda_conf must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Unweighted loss terms plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub align: f64,
    pub conf: f64,
    pub l2: f64,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub parts: LossParts,
    /// One buffer per parameter group: projection groups, then predictor groups.
    pub grads: Vec<Vec<f64>>,
    pub batch_stats: Vec<BatchStats>,
}

fn sum_squares(proj: &ProjectionModel, pred: &ConfidencePredictor) -> f64 {
    proj.param_groups()
        .into_iter()
        .chain(pred.param_groups())
        .map(|(_, g)| dot(g, g))
        .sum()
}

/// d cos(p, r) / d p.
fn cosine_grad(p: &[f64], r: &[f64]) -> (f64, Vector) {
    let np = norm(p);
    let nr = norm(r);
    if np < ZERO_NORM || nr < ZERO_NORM {
        return (0.0, Vector::zeros(p.len()));
    }
    let c = dot(p, r) / (np * nr);
    let g = p
        .iter()
        .zip(r)
        .map(|(pi, ri)| ri / (np * nr) - c * pi / (np * np))
        .collect();
    (c, g)
}

/// `λ_align·mean((cos − t)²) + λ_conf·mean((c_learned − t)²) + λ_l2·Σθ²` in
/// train mode, with gradients for every parameter of both networks.
///
/// The alignment term uses the unclamped cosine so examples whose projection
/// currently points away from the reference still receive gradient.
pub fn combined_loss<R: Rng + ?Sized>(
    batch: &[&TrainingExample],
    proj: &ProjectionModel,
    pred: &ConfidencePredictor,
    lw: &LossWeights,
    rng: &mut R,
) -> Result<LossOutput, TrainingError> {
    if batch.len() < 2 {
        return Err(NumError::InvalidBatch {
            size: batch.len(),
            min: 2,
        }
        .into());
    }
    let n = batch.len() as f64;
    let mut grads: Vec<Vec<f64>> = proj
        .param_groups()
        .into_iter()
        .chain(pred.param_groups())
        .map(|(_, g)| vec![0.0; g.len()])
        .collect();
    let n_proj = proj.group_count();

    let mut align = 0.0;
    for ex in batch {
        let trace = proj.forward_train(ex.trace.final_hidden(), rng)?;
        let (c, dc) = cosine_grad(&trace.output, ex.reference.vector());
        let err = c - ex.target_confidence;
        align += err * err;
        if lw.lambda_align > 0.0 {
            let scale = lw.lambda_align * 2.0 * err / n;
            let d_out: Vec<f64> = dc.iter().map(|g| g * scale).collect();
            proj.backward(&trace, &d_out, &mut grads[..n_proj])?;
        }
    }
    align /= n;

    let inputs: Vec<Vector> = batch
        .iter()
        .map(|e| e.trace.final_hidden().clone())
        .collect();
    let ptrace = pred.forward_train(&inputs, rng)?;
    let mut conf = 0.0;
    let mut d_logits = Vec::with_capacity(batch.len());
    for (z, ex) in ptrace.logits.iter().zip(batch) {
        let s = sigmoid(*z);
        let err = s - ex.target_confidence;
        conf += err * err;
        d_logits.push(lw.lambda_conf * 2.0 * err / n * s * (1.0 - s));
    }
    conf /= n;
    if lw.lambda_conf > 0.0 {
        pred.backward(&ptrace, &d_logits, &mut grads[n_proj..])?;
    }

    let l2 = sum_squares(proj, pred);
    if lw.lambda_l2 > 0.0 {
        for (g, (_, p)) in grads
            .iter_mut()
            .zip(proj.param_groups().into_iter().chain(pred.param_groups()))
        {
            for (gi, pi) in g.iter_mut().zip(p) {
                *gi += 2.0 * lw.lambda_l2 * pi;
            }
        }
    }

    Ok(LossOutput {
        parts: LossParts {
            total: lw.lambda_align * align + lw.lambda_conf * conf + lw.lambda_l2 * l2,
            align,
            conf,
            l2,
        },
        grads,
        batch_stats: ptrace.batch_stats,
    })
}

/// Eval-mode loss (running statistics, no dropout, no gradients).
pub fn evaluate_loss(
    examples: &[TrainingExample],
    proj: &ProjectionModel,
    pred: &ConfidencePredictor,
    lw: &LossWeights,
) -> Result<LossParts, TrainingError> {
    if examples.is_empty() {
        return Err(TrainingError::Dataset(
            "cannot evaluate loss on an empty set".into(),
        ));
    }
    let n = examples.len() as f64;
    let (mut align, mut conf) = (0.0, 0.0);
    for ex in examples {
        let p = proj.project(ex.trace.final_hidden())?;
        let c = cosine(&p, ex.reference.vector())?;
        align += (c - ex.target_confidence).powi(2);
        let s = sigmoid(pred.logit(ex.trace.final_hidden())?);
        conf += (s - ex.target_confidence).powi(2);
    }
    align /= n;
    conf /= n;
    let l2 = sum_squares(proj, pred);
    Ok(LossParts {
        total: lw.lambda_align * align + lw.lambda_conf * conf + lw.lambda_l2 * l2,
        align,
        conf,
        l2,
    })
}
