use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{combined_loss, evaluate_loss, LossWeights};
use super::{split, TrainingError, TrainingExample, TrainingSet};
use crate::bundle::ModelBundle;
use crate::numkit::{adamw_step, AdamWConfig, AdamWState, PlateauConfig, PlateauSchedule};
use crate::router::{
    calibrate_thresholds, learn_fusion_weights, CalibrationObjective, CalibrationSample, CostModel,
    Thresholds, WeightSample,
};
use crate::signals::{score, ConfidencePredictor, FusionWeights, ProjectionModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub plateau: PlateauConfig,
    pub train_fraction: f64,
    /// Keep the confidence predictor at its initialization and train only the projection.
    pub freeze_predictor: bool,
    /// Routing thresholds used while learning fusion weights.
    pub initial_thresholds: Thresholds,
    pub weight_grid_step: f64,
    pub threshold_grid_step: f64,
    pub objective: CalibrationObjective,
    pub cost_model: CostModel,
    /// Run the weight/threshold phase; when off the bundle keeps uniform
    /// weights and `initial_thresholds`.
    pub calibrate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            seed: 0,
            loss_weights: LossWeights::default(),
            plateau: PlateauConfig::default(),
            train_fraction: 0.8,
            freeze_predictor: false,
            initial_thresholds: Thresholds::default(),
            weight_grid_step: 0.05,
            threshold_grid_step: 0.01,
            objective: CalibrationObjective::F1,
            cost_model: CostModel::default(),
            calibrate: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        if self.epochs == 0 {
            return Err(TrainingError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(TrainingError::Config(format!(
                "batch_size must be at least 2 for batch norm, got {}",
                self.batch_size
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(TrainingError::Config(format!(
                "train_fraction must lie in (0, 1], got {}",
                self.train_fraction
            )));
        }
        self.loss_weights.validate()?;
        self.initial_thresholds.validate()?;
        self.cost_model.validate()?;
        AdamWState::new(&[], self.optimizer)?;
        PlateauSchedule::new(self.optimizer.lr, self.plateau)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's mini-batches (train mode).
    pub total: f64,
    pub align: f64,
    pub conf: f64,
    pub l2: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    /// Eval-mode loss on the validation split, when there is one.
    pub val_total: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn first(&self) -> Option<&EpochRecord> {
        self.epochs.first()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,total,align,conf,l2,lr\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.total, r.align, r.conf, r.l2, r.lr
            ));
        }
        out
    }
}

/// Shuffled mini-batches; a trailing singleton is folded into the previous batch.
fn batches(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut out: Vec<Vec<usize>> = idx.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let tail = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(tail);
    }
    out
}

/// Two-phase training. Phase 1 fits the projection and predictor jointly on
/// the training split; phase 2 learns fusion weights and calibrates
/// thresholds on the validation split.
pub fn train(
    dataset: &TrainingSet,
    cfg: &TrainConfig,
) -> Result<(ModelBundle, TrainingHistory), TrainingError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainingError::Dataset(
            "cannot train on an empty dataset".into(),
        ));
    }
    let h = dataset.examples[0].trace.hidden_dim();
    if let Some(bad) = dataset.examples.iter().find(|e| e.trace.hidden_dim() != h) {
        return Err(TrainingError::Dataset(format!(
            "mixed hidden dims: {} has {}, expected {h}",
            bad.query_id(),
            bad.trace.hidden_dim()
        )));
    }
    let (train_set, val_set) = split(dataset, cfg.train_fraction, cfg.seed)?;
    if train_set.len() < 2 {
        return Err(TrainingError::Dataset(format!(
            "training split has {} examples; batch norm needs at least 2",
            train_set.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut proj = ProjectionModel::new(h, &mut rng);
    let mut pred = ConfidencePredictor::new(h, &mut rng);

    let sizes: Vec<usize> = proj
        .param_groups()
        .into_iter()
        .chain(pred.param_groups())
        .map(|(_, g)| g.len())
        .collect();
    let n_proj = proj.group_count();
    let trained_groups = if cfg.freeze_predictor {
        n_proj
    } else {
        sizes.len()
    };
    let mut opt = AdamWState::new(&sizes[..trained_groups], cfg.optimizer)?;
    let mut sched = PlateauSchedule::new(cfg.optimizer.lr, cfg.plateau)?;
    let mut history = TrainingHistory::default();

    for epoch in 1..=cfg.epochs {
        let lr = sched.lr;
        opt.lr = lr;
        let (mut total, mut align, mut conf, mut l2) = (0.0, 0.0, 0.0, 0.0);
        for b in batches(train_set.len(), cfg.batch_size, &mut rng) {
            let batch: Vec<&TrainingExample> = b.iter().map(|&i| &train_set.examples[i]).collect();
            let out = combined_loss(&batch, &proj, &pred, &cfg.loss_weights, &mut rng)?;
            if !out.parts.total.is_finite() {
                return Err(TrainingError::Divergence { epoch });
            }
            let w = batch.len() as f64;
            total += w * out.parts.total;
            align += w * out.parts.align;
            conf += w * out.parts.conf;
            l2 += w * out.parts.l2;

            let mut params: Vec<&mut [f64]> = proj.params_mut();
            if !cfg.freeze_predictor {
                params.extend(pred.params_mut());
            }
            adamw_step(&mut params, &out.grads[..trained_groups], &mut opt)?;
            if !cfg.freeze_predictor {
                pred.update_running_stats(&out.batch_stats);
            }
        }
        let n = train_set.len() as f64;
        let record_total = total / n;
        if !record_total.is_finite() {
            return Err(TrainingError::Divergence { epoch });
        }
        let val_total = if val_set.is_empty() {
            None
        } else {
            let v = evaluate_loss(&val_set.examples, &proj, &pred, &cfg.loss_weights)?.total;
            if !v.is_finite() {
                return Err(TrainingError::Divergence { epoch });
            }
            Some(v)
        };
        history.epochs.push(EpochRecord {
            epoch,
            total: record_total,
            align: align / n,
            conf: conf / n,
            l2: l2 / n,
            lr,
            val_total,
        });
        sched.step(val_total.unwrap_or(record_total));
        tracing::debug!(epoch, total = record_total, ?val_total, lr, "epoch done");
    }

    let mut bundle =
        ModelBundle::new(proj, pred, FusionWeights::uniform(), cfg.initial_thresholds)?;
    bundle.cost_model = cfg.cost_model;
    if cfg.calibrate {
        let pools: [&[TrainingExample]; 3] =
            [&val_set.examples, &train_set.examples, &dataset.examples];
        let pool = pools
            .into_iter()
            .find(|p| p.iter().any(|e| e.hallucinated) && p.iter().any(|e| !e.hallucinated))
            .ok_or_else(|| {
                TrainingError::Dataset(
                    "calibration needs both hallucinated and correct examples".into(),
                )
            })?;
        calibrate_bundle(&mut bundle, pool, cfg)?;
    }
    bundle.bundle_version = bundle.fingerprint();
    Ok((bundle, history))
}

/// Phase 2 on an already-trained bundle: fusion weights, then thresholds.
pub fn calibrate_bundle(
    bundle: &mut ModelBundle,
    examples: &[TrainingExample],
    cfg: &TrainConfig,
) -> Result<(), TrainingError> {
    let mut breakdowns = Vec::with_capacity(examples.len());
    for e in examples {
        breakdowns.push(score(&e.trace, &e.reference, bundle)?);
    }
    let weight_samples: Vec<WeightSample> = breakdowns
        .iter()
        .zip(examples)
        .map(|(b, e)| WeightSample {
            signals: b.signals(),
            hallucinated: e.hallucinated,
        })
        .collect();
    bundle.weights = learn_fusion_weights(
        &weight_samples,
        cfg.initial_thresholds.high,
        cfg.weight_grid_step,
    )?;

    let samples: Vec<CalibrationSample> = breakdowns
        .iter()
        .zip(examples)
        .map(|(b, e)| CalibrationSample {
            score: crate::signals::fuse(b.c_sem, b.c_conv, b.c_learned, &bundle.weights),
            hallucinated: e.hallucinated,
            optimal_action: Some(e.optimal_action),
        })
        .collect();
    bundle.thresholds = calibrate_thresholds(
        &samples,
        &cfg.cost_model,
        cfg.objective,
        cfg.threshold_grid_step,
    )?;
    bundle.bundle_version = bundle.fingerprint();
    Ok(())
}
