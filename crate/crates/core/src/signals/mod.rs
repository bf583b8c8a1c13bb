//! The three confidence signals and their fusion.
//!
//! * semantic alignment: clamped cosine between the projected final hidden
//!   state and a unit-norm reference embedding,
//! * internal convergence: early-half over late-half layer variance, squashed
//!   into `[0, 1)` before fusion,
//! * learned confidence: a small supervised network over the final hidden state.

mod predictor;
mod projection;

use serde::{Deserialize, Serialize};

use crate::bundle::ModelBundle;
use crate::numkit::{cosine, NumError, Vector};

pub use predictor::{predictor_widths, ConfidencePredictor, PredictorTrace};
pub use projection::{
    ProjectionModel, ProjectionTrace, ResidualBlock, DEFAULT_DROPOUT, DEFAULT_PROJECTION_DEPTH,
};

/// Dimension of reference embeddings.
pub const REFERENCE_DIM: usize = 384;
/// Allowed deviation of a reference embedding's norm from 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SignalError {
    #[error("{what}: expected dimension {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
    #[error("invalid reference embedding: {0}")]
    InvalidEmbedding(String),
    #[error("invalid fusion weights: {0}")]
    InvalidWeights(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Per-layer hidden vectors for one query; the last layer is the final hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStateTrace {
    query_id: String,
    layers: Vec<Vector>,
}

impl HiddenStateTrace {
    pub fn new(query_id: impl Into<String>, layers: Vec<Vector>) -> Result<Self, SignalError> {
        if layers.len() < 2 {
            return Err(SignalError::InvalidTrace(format!(
                "need at least 2 layers, got {}",
                layers.len()
            )));
        }
        let h = layers[0].dim();
        if h == 0 {
            return Err(SignalError::InvalidTrace("hidden dimension is zero".into()));
        }
        for (l, v) in layers.iter().enumerate() {
            if v.dim() != h {
                return Err(SignalError::InvalidTrace(format!(
                    "layer {l} has dimension {}, expected {h}",
                    v.dim()
                )));
            }
            if !v.is_finite() {
                return Err(SignalError::InvalidTrace(format!(
                    "layer {l} has non-finite entries"
                )));
            }
        }
        Ok(Self {
            query_id: query_id.into(),
            layers,
        })
    }

    pub fn query_id(&self) -> &str {
        &self.query_id
    }

    pub fn set_query_id(&mut self, id: impl Into<String>) {
        self.query_id = id.into();
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers[0].dim()
    }

    pub fn layers(&self) -> &[Vector] {
        &self.layers
    }

    pub fn final_hidden(&self) -> &Vector {
        self.layers.last().expect("at least two layers")
    }
}

/// Unit-norm 384-dimensional anchor embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEmbedding {
    query_id: String,
    vector: Vector,
}

impl ReferenceEmbedding {
    pub fn new(query_id: impl Into<String>, vector: Vector) -> Result<Self, SignalError> {
        if vector.dim() != REFERENCE_DIM {
            return Err(SignalError::Dimension {
                what: "reference embedding",
                expected: REFERENCE_DIM,
                actual: vector.dim(),
            });
        }
        if !vector.is_finite() {
            return Err(SignalError::InvalidEmbedding("non-finite entries".into()));
        }
        let n = vector.norm();
        if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(SignalError::InvalidEmbedding(format!("norm {n} is not 1")));
        }
        Ok(Self {
            query_id: query_id.into(),
            vector,
        })
    }

    pub fn query_id(&self) -> &str {
        &self.query_id
    }

    pub fn vector(&self) -> &Vector {
        &self.vector
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConfig {
    pub epsilon: f64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self { epsilon: 1e-6 }
    }
}

impl ConvergenceConfig {
    pub fn new(epsilon: f64) -> Result<Self, SignalError> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(SignalError::InvalidConfig(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        Ok(Self { epsilon })
    }
}

/// Simplex weights over (semantic, convergence, learned).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub sem: f64,
    pub conv: f64,
    pub learned: f64,
}

impl FusionWeights {
    pub fn new(sem: f64, conv: f64, learned: f64) -> Result<Self, SignalError> {
        let w = Self { sem, conv, learned };
        w.validate()?;
        Ok(w)
    }

    pub fn uniform() -> Self {
        Self {
            sem: 1.0 / 3.0,
            conv: 1.0 / 3.0,
            learned: 1.0 / 3.0,
        }
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        let ws = self.as_array();
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(SignalError::InvalidWeights(format!(
                "weights must be nonnegative: {ws:?}"
            )));
        }
        let sum: f64 = ws.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(SignalError::InvalidWeights(format!(
                "weights sum to {sum}, not 1"
            )));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.sem, self.conv, self.learned]
    }

    /// Shannon entropy of the weight vector.
    pub fn entropy(&self) -> f64 {
        self.as_array()
            .iter()
            .filter(|w| **w > 0.0)
            .map(|w| -w * w.ln())
            .sum()
    }
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self::uniform()
    }
}

/// The three signal values for one query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalValues {
    pub sem: f64,
    pub conv: f64,
    pub learned: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBreakdown {
    pub c_sem: f64,
    pub c_conv_raw: f64,
    pub c_conv: f64,
    pub c_learned: f64,
    pub c_overall: f64,
}

impl ConfidenceBreakdown {
    pub fn signals(&self) -> SignalValues {
        SignalValues {
            sem: self.c_sem,
            conv: self.c_conv,
            learned: self.c_learned,
        }
    }
}

/// `clamp(cos(P(h_final), e_ref), 0, 1)` with the projection in eval mode.
pub fn semantic_alignment(
    trace: &HiddenStateTrace,
    proj: &ProjectionModel,
    reference: &ReferenceEmbedding,
) -> Result<f64, SignalError> {
    if trace.hidden_dim() != proj.input_dim() {
        return Err(SignalError::Dimension {
            what: "trace hidden_dim vs projection input",
            expected: proj.input_dim(),
            actual: trace.hidden_dim(),
        });
    }
    if proj.output_dim() != reference.vector().dim() {
        return Err(SignalError::Dimension {
            what: "projection output vs reference embedding",
            expected: reference.vector().dim(),
            actual: proj.output_dim(),
        });
    }
    let projected = proj.project(trace.final_hidden())?;
    Ok(cosine(&projected, reference.vector())?.clamp(0.0, 1.0))
}

/// Mean over dimensions of the per-dimension population variance across `layers`.
pub fn slice_variance(layers: &[Vector]) -> f64 {
    let Some(first) = layers.first() else {
        return 0.0;
    };
    let n = layers.len() as f64;
    let h = first.dim();
    let mut total = 0.0;
    for j in 0..h {
        let mean = layers.iter().map(|v| v[j]).sum::<f64>() / n;
        total += layers
            .iter()
            .map(|v| (v[j] - mean) * (v[j] - mean))
            .sum::<f64>()
            / n;
    }
    total / h as f64
}

/// Index of the shared middle layer: `⌈L/2⌉ - 1` (0-based).
pub fn split_point(num_layers: usize) -> usize {
    num_layers.div_ceil(2) - 1
}

/// Early and late slice variances `(V1, V2)`; the middle layer belongs to both slices.
pub fn slice_variances(trace: &HiddenStateTrace) -> (f64, f64) {
    let mid = split_point(trace.num_layers());
    let layers = trace.layers();
    (
        slice_variance(&layers[..=mid]),
        slice_variance(&layers[mid..]),
    )
}

/// `V1 / (V2 + ε)`.
pub fn internal_convergence_raw(
    trace: &HiddenStateTrace,
    cfg: &ConvergenceConfig,
) -> Result<f64, SignalError> {
    if trace.num_layers() < 2 {
        return Err(SignalError::InvalidTrace("need at least 2 layers".into()));
    }
    let (v1, v2) = slice_variances(trace);
    Ok(v1 / (v2 + cfg.epsilon))
}

/// Monotone squash `r / (1 + r)` into `[0, 1)`.
pub fn normalize_convergence(raw: f64) -> f64 {
    if raw.is_infinite() {
        return 1.0;
    }
    let raw = raw.max(0.0);
    raw / (1.0 + raw)
}

pub fn learned_confidence(h_final: &[f64], pred: &ConfidencePredictor) -> Result<f64, SignalError> {
    if h_final.len() != pred.input_dim() {
        return Err(SignalError::Dimension {
            what: "trace hidden_dim vs predictor input",
            expected: pred.input_dim(),
            actual: h_final.len(),
        });
    }
    Ok(pred.predict(h_final)?)
}

pub fn fuse(c_sem: f64, c_conv: f64, c_learned: f64, w: &FusionWeights) -> f64 {
    (w.sem * c_sem + w.conv * c_conv + w.learned * c_learned).clamp(0.0, 1.0)
}

/// Full breakdown for one query under a bundle (eval mode, deterministic).
pub fn score(
    trace: &HiddenStateTrace,
    reference: &ReferenceEmbedding,
    bundle: &ModelBundle,
) -> Result<ConfidenceBreakdown, SignalError> {
    let c_sem = semantic_alignment(trace, &bundle.projection, reference)?;
    let c_conv_raw = internal_convergence_raw(trace, &bundle.convergence)?;
    let c_conv = normalize_convergence(c_conv_raw);
    let c_learned = learned_confidence(trace.final_hidden(), &bundle.predictor)?;
    Ok(ConfidenceBreakdown {
        c_sem,
        c_conv_raw,
        c_conv,
        c_learned,
        c_overall: fuse(c_sem, c_conv, c_learned, &bundle.weights),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::router::Thresholds;
    use proptest::prelude::*;

    fn trace_from(rows: &[Vec<f64>]) -> HiddenStateTrace {
        HiddenStateTrace::new("q", rows.iter().cloned().map(Vector::new).collect()).unwrap()
    }

    fn unit_ref(dir: usize) -> ReferenceEmbedding {
        let mut v = Vector::zeros(REFERENCE_DIM);
        v[dir] = 1.0;
        ReferenceEmbedding::new("q", v).unwrap()
    }

    /// Naive oracle: pairwise-difference form of population variance,
    /// `Var = 1/(2n²) Σᵢ Σⱼ (xᵢ − xⱼ)²`, computed with scalar loops.
    #[allow(clippy::needless_range_loop)]
    fn oracle_ratio(rows: &[Vec<f64>], eps: f64) -> f64 {
        let l = rows.len();
        let m = l.div_ceil(2);
        let h = rows[0].len();
        let var = |from: usize, to: usize| {
            let n = (to - from + 1) as f64;
            let mut acc = 0.0;
            for d in 0..h {
                let mut s = 0.0;
                for i in from..=to {
                    for j in from..=to {
                        let diff = rows[i][d] - rows[j][d];
                        s += diff * diff;
                    }
                }
                acc += s / (2.0 * n * n);
            }
            acc / h as f64
        };
        var(0, m - 1) / (var(m - 1, l - 1) + eps)
    }

    #[test]
    fn convergence_examples() {
        let cfg = ConvergenceConfig::default();
        let same = trace_from(&vec![vec![1.0, -2.0]; 5]);
        assert_eq!(internal_convergence_raw(&same, &cfg).unwrap(), 0.0);

        let t = trace_from(&[vec![0.0], vec![2.0], vec![1.0], vec![1.0]]);
        let (v1, v2) = slice_variances(&t);
        assert!((v1 - 1.0).abs() < 1e-15);
        assert!((v2 - 2.0 / 9.0).abs() < 1e-15);
        let r = internal_convergence_raw(&t, &cfg).unwrap();
        assert!((r - 1.0 / (2.0 / 9.0 + 1e-6)).abs() < 1e-12);
        assert!((r - 4.49998).abs() < 1e-5);

        let t = trace_from(&[vec![0.0], vec![4.0], vec![4.0], vec![4.0]]);
        let r = internal_convergence_raw(&t, &cfg).unwrap();
        assert!((r - 4.0 / 1e-6).abs() < 1e-3);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_convergence(0.0), 0.0);
        assert_eq!(normalize_convergence(1.0), 0.5);
        assert!((normalize_convergence(4.5) - 9.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn semantic_alignment_examples() {
        let proj = ProjectionModel::canonical(REFERENCE_DIM);
        let r = unit_ref(3);
        let mut h = vec![0.0; REFERENCE_DIM];
        h[3] = 1.0;
        let t = trace_from(&[vec![0.0; REFERENCE_DIM], h.clone()]);
        assert!((semantic_alignment(&t, &proj, &r).unwrap() - 1.0).abs() < 1e-15);

        h[3] = -1.0;
        let t = trace_from(&[vec![0.0; REFERENCE_DIM], h]);
        assert_eq!(semantic_alignment(&t, &proj, &r).unwrap(), 0.0);

        let mut orth = vec![0.0; REFERENCE_DIM];
        orth[4] = 2.0;
        let t = trace_from(&[vec![0.0; REFERENCE_DIM], orth]);
        assert_eq!(semantic_alignment(&t, &proj, &r).unwrap(), 0.0);

        let small = trace_from(&[vec![0.0; 8], vec![1.0; 8]]);
        assert!(matches!(
            semantic_alignment(&small, &proj, &r),
            Err(SignalError::Dimension { .. })
        ));
    }

    #[test]
    fn learned_confidence_of_zero_network() {
        let p = ConfidencePredictor::zeros(8);
        assert_eq!(learned_confidence(&[0.4; 8], &p).unwrap(), 0.5);
        assert!(learned_confidence(&[0.4; 7], &p).is_err());
    }

    #[test]
    fn fuse_examples() {
        let w = FusionWeights::new(1.0, 0.0, 0.0).unwrap();
        assert_eq!(fuse(0.3, 0.9, 0.1, &w), 0.3);
        let w = FusionWeights::new(0.2, 0.5, 0.3).unwrap();
        assert!((fuse(0.7, 0.7, 0.7, &w) - 0.7).abs() < 1e-15);
        let c = fuse(0.9, 0.6, 0.9, &FusionWeights::uniform());
        assert!((c - 0.8).abs() < 1e-15);
    }

    #[test]
    fn weights_validation() {
        assert!(FusionWeights::new(0.5, 0.5, 0.1).is_err());
        assert!(FusionWeights::new(-0.1, 0.6, 0.5).is_err());
        assert!(FusionWeights::uniform().validate().is_ok());
    }

    #[test]
    fn trace_validation() {
        assert!(HiddenStateTrace::new("x", vec![Vector::zeros(3)]).is_err());
        assert!(HiddenStateTrace::new("x", vec![Vector::zeros(3), Vector::zeros(2)]).is_err());
        assert!(HiddenStateTrace::new(
            "x",
            vec![Vector::zeros(2), Vector::new(vec![f64::NAN, 0.0])]
        )
        .is_err());
    }

    #[test]
    fn reference_validation() {
        assert!(ReferenceEmbedding::new("r", Vector::zeros(REFERENCE_DIM)).is_err());
        assert!(ReferenceEmbedding::new("r", Vector::filled(10, 0.1)).is_err());
    }

    fn identity_bundle(h: usize) -> ModelBundle {
        ModelBundle::new(
            ProjectionModel::canonical(h),
            ConfidencePredictor::zeros(h),
            FusionWeights::uniform(),
            Thresholds::default(),
        )
        .unwrap()
    }

    #[test]
    fn score_fills_breakdown() {
        let b = identity_bundle(4);
        let t = trace_from(&vec![vec![1.0, 0.0, 0.0, 0.0]; 3]);
        let s = score(&t, &unit_ref(0), &b).unwrap();
        assert_eq!(s.c_conv, 0.0);
        assert!((s.c_sem - 1.0).abs() < 1e-15);
        assert_eq!(s.c_learned, 0.5);
        let w = b.weights;
        assert!(
            (s.c_overall - (w.sem * s.c_sem + w.conv * s.c_conv + w.learned * s.c_learned)).abs()
                < 1e-9
        );
    }

    fn trace_strategy(max_l: usize, max_h: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        (2..=max_l, 1..=max_h).prop_flat_map(|(l, h)| {
            prop::collection::vec(prop::collection::vec(-100.0f64..100.0, h), l)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn convergence_matches_pairwise_oracle(rows in trace_strategy(6, 4)) {
            let t = trace_from(&rows);
            let got = internal_convergence_raw(&t, &ConvergenceConfig::default()).unwrap();
            let want = oracle_ratio(&rows, 1e-6);
            prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{got} vs {want}");
        }

        #[test]
        fn convergence_permutation_and_translation_invariant(
            rows in trace_strategy(6, 4),
            shift in -50.0f64..50.0,
            rot in 0usize..4,
        ) {
            let cfg = ConvergenceConfig::default();
            let base = internal_convergence_raw(&trace_from(&rows), &cfg).unwrap();
            let h = rows[0].len();
            let permuted: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| (0..h).map(|j| r[(j + rot) % h]).collect())
                .collect();
            let shifted: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| r.iter().enumerate().map(|(j, v)| v + shift * (j as f64 + 1.0)).collect())
                .collect();
            let p = internal_convergence_raw(&trace_from(&permuted), &cfg).unwrap();
            let s = internal_convergence_raw(&trace_from(&shifted), &cfg).unwrap();
            prop_assert!((p - base).abs() <= 1e-9 * base.max(1.0));
            prop_assert!((s - base).abs() <= 1e-6 * base.max(1.0));
        }

        #[test]
        fn breakdown_fields_in_range(rows in trace_strategy(6, 4), dir in 0usize..4) {
            let h = rows[0].len();
            let b = identity_bundle(h);
            let s = score(&trace_from(&rows), &unit_ref(dir.min(h - 1)), &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&s.c_sem));
            prop_assert!(s.c_conv_raw >= 0.0);
            prop_assert!((0.0..=1.0).contains(&s.c_conv));
            prop_assert!(s.c_learned > 0.0 && s.c_learned < 1.0);
            prop_assert!((0.0..=1.0).contains(&s.c_overall));
        }

        #[test]
        fn fuse_is_monotone(
            a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0, bump in 0.0f64..1.0,
            w0 in 0.0f64..1.0, w1 in 0.0f64..1.0,
        ) {
            let (s, t) = (w0.min(w1), w0.max(w1));
            let w = FusionWeights::new(s, t - s, 1.0 - t).unwrap();
            let base = fuse(a, b, c, &w);
            prop_assert!(fuse((a + bump).min(1.0), b, c, &w) >= base);
            prop_assert!(fuse(a, (b + bump).min(1.0), c, &w) >= base);
            prop_assert!(fuse(a, b, (c + bump).min(1.0), &w) >= base);
        }

        #[test]
        fn alignment_invariant_to_positive_rescaling(
            h in prop::collection::vec(-5.0f64..5.0, 6),
            k in 0.01f64..100.0,
        ) {
            let proj = ProjectionModel::canonical(6);
            let r = unit_ref(2);
            let scaled: Vec<f64> = h.iter().map(|v| v * k).collect();
            let a = semantic_alignment(&trace_from(&[vec![0.0; 6], h]), &proj, &r).unwrap();
            let b = semantic_alignment(&trace_from(&[vec![0.0; 6], scaled]), &proj, &r).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
