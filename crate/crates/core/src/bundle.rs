use sha2::{Digest, Sha256};

use crate::router::{hex_prefix, CostModel, Thresholds};
use crate::signals::{
    ConfidencePredictor, ConvergenceConfig, FusionWeights, ProjectionModel, SignalError,
    REFERENCE_DIM,
};

/// The deployable unit: trained networks, fusion weights, thresholds and
/// the convergence configuration. Immutable once loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub projection: ProjectionModel,
    pub predictor: ConfidencePredictor,
    pub weights: FusionWeights,
    pub thresholds: Thresholds,
    pub convergence: ConvergenceConfig,
    pub cost_model: CostModel,
    pub bundle_version: String,
}

impl ModelBundle {
    pub fn new(
        projection: ProjectionModel,
        predictor: ConfidencePredictor,
        weights: FusionWeights,
        thresholds: Thresholds,
    ) -> Result<Self, SignalError> {
        let mut b = Self {
            projection,
            predictor,
            weights,
            thresholds,
            convergence: ConvergenceConfig::default(),
            cost_model: CostModel::default(),
            bundle_version: String::new(),
        };
        b.validate()?;
        b.bundle_version = b.fingerprint();
        Ok(b)
    }

    pub fn hidden_dim(&self) -> usize {
        self.projection.input_dim()
    }

    pub fn thresholds_version(&self) -> String {
        self.thresholds.version()
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        self.projection.validate()?;
        self.predictor.validate()?;
        if self.projection.output_dim() != REFERENCE_DIM {
            return Err(SignalError::Dimension {
                what: "projection output",
                expected: REFERENCE_DIM,
                actual: self.projection.output_dim(),
            });
        }
        if self.predictor.input_dim() != self.hidden_dim() {
            return Err(SignalError::Dimension {
                what: "predictor input vs projection input",
                expected: self.hidden_dim(),
                actual: self.predictor.input_dim(),
            });
        }
        self.weights.validate()?;
        self.thresholds
            .validate()
            .map_err(|e| SignalError::InvalidConfig(e.to_string()))?;
        self.cost_model
            .validate()
            .map_err(|e| SignalError::InvalidConfig(e.to_string()))?;
        ConvergenceConfig::new(self.convergence.epsilon)?;
        let finite = self
            .projection
            .param_groups()
            .into_iter()
            .chain(self.predictor.param_groups())
            .all(|(_, g)| g.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(SignalError::InvalidConfig("non-finite parameters".into()));
        }
        Ok(())
    }

    /// Content hash over every parameter and setting.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, g) in self
            .projection
            .param_groups()
            .into_iter()
            .chain(self.predictor.param_groups())
        {
            h.update(name.as_bytes());
            for v in g {
                h.update(v.to_le_bytes());
            }
        }
        for bn in &self.predictor.norms {
            for v in bn.running_mean.iter().chain(bn.running_var.iter()) {
                h.update(v.to_le_bytes());
            }
        }
        for v in self.weights.as_array() {
            h.update(v.to_le_bytes());
        }
        for v in [
            self.thresholds.high,
            self.thresholds.med,
            self.thresholds.low,
            self.convergence.epsilon,
        ] {
            h.update(v.to_le_bytes());
        }
        format!("b-{}", hex_prefix(&h.finalize(), 8))
    }
}
