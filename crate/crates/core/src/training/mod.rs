//! Tiered training data, the combined alignment/confidence loss with
//! hand-derived gradients, and the end-to-end training pipeline.

mod loss;
mod trainer;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ingest::{self, IngestError, Manifest};
use crate::numkit::NumError;
use crate::router::{Action, RouterError};
use crate::signals::{HiddenStateTrace, ReferenceEmbedding, SignalError};

pub use loss::{combined_loss, evaluate_loss, LossOutput, LossParts, LossWeights};
pub use trainer::{calibrate_bundle, train, EpochRecord, TrainConfig, TrainingHistory};

#[derive(Debug, thiserror::Error)]
pub enum TrainingError {
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Router(#[from] RouterError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

/// Confidence tier of a labeled example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    High,
    Medium,
    Low,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::High, Tier::Medium, Tier::Low];

    /// Supervision target for both the alignment and the confidence loss.
    pub fn target_confidence(&self) -> f64 {
        match self {
            Tier::High => 0.9,
            Tier::Medium => 0.6,
            Tier::Low => 0.15,
        }
    }

    /// Pathway a query of this tier should take when no annotation says otherwise.
    pub fn default_action(&self) -> Action {
        match self {
            Tier::High => Action::Local,
            Tier::Medium => Action::Rag,
            Tier::Low => Action::Human,
        }
    }

    /// Anything below the high tier should be flagged (routed away from local).
    pub fn default_hallucinated(&self) -> bool {
        *self != Tier::High
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Tier::High => "high",
            Tier::Medium => "medium",
            Tier::Low => "low",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tier {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "high" => Ok(Tier::High),
            "medium" => Ok(Tier::Medium),
            "low" => Ok(Tier::Low),
            other => Err(format!("unknown tier `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub query_text: String,
    pub trace: HiddenStateTrace,
    pub reference: ReferenceEmbedding,
    pub tier: Tier,
    pub target_confidence: f64,
    pub hallucinated: bool,
    pub optimal_action: Action,
}

impl TrainingExample {
    /// Example with tier-derived target, hallucination label and optimal action.
    pub fn new(
        query_text: impl Into<String>,
        trace: HiddenStateTrace,
        reference: ReferenceEmbedding,
        tier: Tier,
    ) -> Self {
        Self {
            query_text: query_text.into(),
            trace,
            reference,
            tier,
            target_confidence: tier.target_confidence(),
            hallucinated: tier.default_hallucinated(),
            optimal_action: tier.default_action(),
        }
    }

    pub fn query_id(&self) -> &str {
        self.trace.query_id()
    }
}

/// Requested number of examples per tier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierCounts {
    pub high: usize,
    pub medium: usize,
    pub low: usize,
}

impl TierCounts {
    /// 33 high, 12 medium, 27 low: 72 in total.
    pub const STANDARD: TierCounts = TierCounts {
        high: 33,
        medium: 12,
        low: 27,
    };

    pub fn get(&self, tier: Tier) -> usize {
        match tier {
            Tier::High => self.high,
            Tier::Medium => self.medium,
            Tier::Low => self.low,
        }
    }

    pub fn total(&self) -> usize {
        self.high + self.medium + self.low
    }
}

impl Default for TierCounts {
    fn default() -> Self {
        Self::STANDARD
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingSet {
    pub examples: Vec<TrainingExample>,
    pub tier_counts: BTreeMap<Tier, usize>,
}

impl TrainingSet {
    pub fn from_examples(examples: Vec<TrainingExample>) -> Self {
        let mut tier_counts = BTreeMap::new();
        for e in &examples {
            *tier_counts.entry(e.tier).or_insert(0) += 1;
        }
        Self {
            examples,
            tier_counts,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn count(&self, tier: Tier) -> usize {
        self.tier_counts.get(&tier).copied().unwrap_or(0)
    }
}

/// Picks the first `counts` ids per tier in sorted order.
fn select_ids<'a>(
    pool: impl Iterator<Item = (&'a str, Tier)>,
    counts: TierCounts,
) -> Result<Vec<(String, Tier)>, TrainingError> {
    if counts.total() == 0 {
        return Err(TrainingError::Dataset(
            "requested an empty training set".into(),
        ));
    }
    let mut by_tier: BTreeMap<Tier, Vec<&str>> = BTreeMap::new();
    for (id, tier) in pool {
        by_tier.entry(tier).or_default().push(id);
    }
    let shortfalls: Vec<String> = Tier::ALL
        .iter()
        .filter_map(|t| {
            let have = by_tier.get(t).map_or(0, Vec::len);
            let need = counts.get(*t);
            (have < need).then(|| format!("{t}: need {need}, have {have}"))
        })
        .collect();
    if !shortfalls.is_empty() {
        return Err(TrainingError::Dataset(format!(
            "insufficient examples ({})",
            shortfalls.join("; ")
        )));
    }
    let mut out = Vec::with_capacity(counts.total());
    for t in Tier::ALL {
        let mut ids = by_tier.remove(&t).unwrap_or_default();
        ids.sort_unstable();
        out.extend(
            ids.into_iter()
                .take(counts.get(t))
                .map(|id| (id.to_string(), t)),
        );
    }
    out.sort();
    Ok(out)
}

/// Selects `counts` examples per tier from an in-memory pool, by sorted query id.
pub fn select_examples(
    pool: Vec<TrainingExample>,
    counts: TierCounts,
) -> Result<TrainingSet, TrainingError> {
    let chosen = select_ids(pool.iter().map(|e| (e.query_id(), e.tier)), counts)?;
    let mut by_id: BTreeMap<String, TrainingExample> = pool
        .into_iter()
        .map(|e| (e.query_id().to_string(), e))
        .collect();
    let examples = chosen
        .into_iter()
        .map(|(id, _)| by_id.remove(&id).expect("selected from pool"))
        .collect();
    Ok(TrainingSet::from_examples(examples))
}

/// Loads `counts` tiered examples from a manifest, by sorted query id.
pub fn build_dataset(
    manifest: &Manifest,
    counts: TierCounts,
) -> Result<TrainingSet, TrainingError> {
    let pool = manifest
        .records()
        .filter_map(|r| r.tier.map(|t| (r.query_id.as_str(), t)));
    let chosen = select_ids(pool, counts)?;
    let mut examples = Vec::with_capacity(chosen.len());
    for (id, tier) in chosen {
        let rec = manifest.get(&id).expect("selected from manifest");
        let (trace, reference) = ingest::load_record(manifest, rec)?;
        let mut ex = TrainingExample::new(rec.query_text.clone(), trace, reference, tier);
        if let Some(h) = rec.hallucinated {
            ex.hallucinated = h;
        }
        if let Some(a) = rec.optimal_action {
            ex.optimal_action = a;
        }
        examples.push(ex);
    }
    Ok(TrainingSet::from_examples(examples))
}

/// Every tiered record in a manifest, by sorted query id.
pub fn labeled_examples(manifest: &Manifest) -> Result<TrainingSet, TrainingError> {
    let mut counts = TierCounts {
        high: 0,
        medium: 0,
        low: 0,
    };
    for t in manifest.records().filter_map(|r| r.tier) {
        match t {
            Tier::High => counts.high += 1,
            Tier::Medium => counts.medium += 1,
            Tier::Low => counts.low += 1,
        }
    }
    build_dataset(manifest, counts)
}

/// Per-tier training quotas: `floor(n·ratio)` overall, distributed by
/// largest remainder (ties go to the earlier tier in high, medium, low order).
fn stratified_quotas(counts: &[(Tier, usize)], ratio: f64) -> Vec<usize> {
    let n: usize = counts.iter().map(|c| c.1).sum();
    let total = ((n as f64 * ratio) + 1e-9).floor() as usize;
    let exact: Vec<f64> = counts.iter().map(|c| c.1 as f64 * ratio).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - quotas[a] as f64;
        let rb = exact[b] - quotas[b] as f64;
        rb.partial_cmp(&ra)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut remaining = total.saturating_sub(quotas.iter().sum());
    for i in order {
        if remaining == 0 {
            break;
        }
        if quotas[i] < counts[i].1 {
            quotas[i] += 1;
            remaining -= 1;
        }
    }
    quotas
}

/// Stratified, seed-deterministic split; `train_fraction` of each tier goes
/// to the first set. Both halves keep the dataset's original order.
pub fn split(
    dataset: &TrainingSet,
    train_fraction: f64,
    seed: u64,
) -> Result<(TrainingSet, TrainingSet), TrainingError> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(TrainingError::Config(format!(
            "train fraction must lie in [0, 1], got {train_fraction}"
        )));
    }
    let tiers: Vec<(Tier, usize)> = Tier::ALL.iter().map(|t| (*t, dataset.count(*t))).collect();
    let quotas = stratified_quotas(&tiers, train_fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; dataset.len()];
    for ((tier, _), quota) in tiers.iter().zip(quotas) {
        let mut idx: Vec<usize> = dataset
            .examples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.tier == *tier)
            .map(|(i, _)| i)
            .collect();
        idx.shuffle(&mut rng);
        for &i in idx.iter().take(quota) {
            in_train[i] = true;
        }
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (e, t) in dataset.examples.iter().zip(in_train) {
        if t {
            train.push(e.clone());
        } else {
            val.push(e.clone());
        }
    }
    Ok((
        TrainingSet::from_examples(train),
        TrainingSet::from_examples(val),
    ))
}
