use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numkit::{
    check_dropout_p, dropout_mask, sigmoid, BatchNorm, BatchNormCache, BatchStats, Linear,
    NumError, Vector,
};

use super::projection::DEFAULT_DROPOUT;

/// Four linear stages `H → H/2 → H/4 → H/8 → 1`, with batch norm, tanh and
/// dropout between stages and a sigmoid on the scalar output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidencePredictor {
    pub stages: Vec<Linear>,
    pub norms: Vec<BatchNorm>,
    pub dropout: f64,
}

pub fn predictor_widths(hidden_dim: usize) -> [usize; 5] {
    [
        hidden_dim,
        (hidden_dim / 2).max(1),
        (hidden_dim / 4).max(1),
        (hidden_dim / 8).max(1),
        1,
    ]
}

struct StageCache {
    input: Vec<Vector>,
    bn: BatchNormCache,
    activation: Vec<Vector>,
    masks: Vec<Vec<f64>>,
}

/// Intermediate values of one train-mode batch forward pass.
pub struct PredictorTrace {
    stages: Vec<StageCache>,
    last_input: Vec<Vector>,
    pub logits: Vec<f64>,
    pub batch_stats: Vec<BatchStats>,
}

impl ConfidencePredictor {
    pub fn new<R: Rng + ?Sized>(hidden_dim: usize, rng: &mut R) -> Self {
        let w = predictor_widths(hidden_dim);
        Self {
            stages: (0..4)
                .map(|k| Linear::init(w[k], w[k + 1], 1.0, rng))
                .collect(),
            norms: (1..4).map(|k| BatchNorm::new(w[k])).collect(),
            dropout: DEFAULT_DROPOUT,
        }
    }

    /// All weights and biases zero; predicts exactly 0.5 everywhere.
    pub fn zeros(hidden_dim: usize) -> Self {
        let w = predictor_widths(hidden_dim);
        Self {
            stages: (0..4).map(|k| Linear::zeros(w[k], w[k + 1])).collect(),
            norms: (1..4).map(|k| BatchNorm::new(w[k])).collect(),
            dropout: DEFAULT_DROPOUT,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.stages[0].input_dim()
    }

    pub fn validate(&self) -> Result<(), NumError> {
        check_dropout_p(self.dropout)?;
        if self.stages.len() != 4 || self.norms.len() != 3 {
            return Err(NumError::InvalidParameter(format!(
                "predictor needs 4 stages and 3 norms, got {} and {}",
                self.stages.len(),
                self.norms.len()
            )));
        }
        let w = predictor_widths(self.input_dim());
        for (k, s) in self.stages.iter().enumerate() {
            if s.input_dim() != w[k] || s.output_dim() != w[k + 1] || s.bias.dim() != w[k + 1] {
                return Err(NumError::DimensionMismatch {
                    op: "predictor stage",
                    expected: w[k + 1],
                    actual: s.output_dim(),
                });
            }
        }
        for (k, bn) in self.norms.iter().enumerate() {
            let d = w[k + 1];
            if [
                bn.gain.dim(),
                bn.bias.dim(),
                bn.running_mean.dim(),
                bn.running_var.dim(),
            ]
            .iter()
            .any(|n| *n != d)
            {
                return Err(NumError::DimensionMismatch {
                    op: "predictor batch norm",
                    expected: d,
                    actual: bn.gain.dim(),
                });
            }
            if bn.running_var.iter().any(|v| *v < 0.0) {
                return Err(NumError::InvalidParameter(
                    "negative running variance".into(),
                ));
            }
        }
        Ok(())
    }

    /// Eval-mode logit: running batch-norm statistics, dropout off.
    pub fn logit(&self, h: &[f64]) -> Result<f64, NumError> {
        let mut a = Vector::new(h.to_vec());
        for (stage, bn) in self.stages.iter().zip(&self.norms) {
            let z = stage.forward(&a)?;
            a = bn.forward_eval(&z)?.iter().map(|v| v.tanh()).collect();
        }
        Ok(self.stages[3].forward(&a)?[0])
    }

    /// Eval-mode confidence, strictly inside (0, 1).
    pub fn predict(&self, h: &[f64]) -> Result<f64, NumError> {
        Ok(sigmoid(self.logit(h)?).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON))
    }

    /// Train-mode forward over a batch (batch statistics, one dropout mask per sample and stage).
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        batch: &[Vector],
        rng: &mut R,
    ) -> Result<PredictorTrace, NumError> {
        let mut a: Vec<Vector> = batch.to_vec();
        let mut caches = Vec::with_capacity(3);
        let mut stats = Vec::with_capacity(3);
        for (stage, bn) in self.stages.iter().zip(&self.norms) {
            let z = a
                .iter()
                .map(|x| stage.forward(x))
                .collect::<Result<Vec<_>, _>>()?;
            let (normed, cache, st) = bn.forward_train(&z)?;
            let activation: Vec<Vector> = normed
                .iter()
                .map(|v| v.iter().map(|x| x.tanh()).collect())
                .collect();
            let masks: Vec<Vec<f64>> = activation
                .iter()
                .map(|v| dropout_mask(v.dim(), self.dropout, rng))
                .collect();
            let next = activation
                .iter()
                .zip(&masks)
                .map(|(v, m)| v.iter().zip(m).map(|(x, k)| x * k).collect())
                .collect();
            caches.push(StageCache {
                input: a,
                bn: cache,
                activation,
                masks,
            });
            stats.push(st);
            a = next;
        }
        let logits = a
            .iter()
            .map(|x| self.stages[3].forward(x).map(|y| y[0]))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(PredictorTrace {
            stages: caches,
            last_input: a,
            logits,
            batch_stats: stats,
        })
    }

    /// Backpropagates per-sample logit gradients into `grads`
    /// ([`Self::param_groups`] order).
    pub fn backward(
        &self,
        trace: &PredictorTrace,
        d_logits: &[f64],
        grads: &mut [Vec<f64>],
    ) -> Result<(), NumError> {
        // group layout: [w0, b0, g0, beta0, w1, b1, g1, beta1, w2, b2, g2, beta2, w3, b3]
        let mut d_a: Vec<Vector> = Vec::with_capacity(d_logits.len());
        {
            let (gw, gb) = grads[12..14].split_at_mut(1);
            for (x, &dl) in trace.last_input.iter().zip(d_logits) {
                d_a.push(self.stages[3].backward(x, &[dl], &mut gw[0], &mut gb[0])?);
            }
        }
        for k in (0..3).rev() {
            let cache = &trace.stages[k];
            let g = &mut grads[4 * k..4 * k + 4];
            let d_norm: Vec<Vector> = d_a
                .iter()
                .zip(cache.activation.iter().zip(&cache.masks))
                .map(|(d, (act, m))| {
                    d.iter()
                        .zip(act.iter().zip(m))
                        .map(|(dv, (av, mv))| dv * mv * (1.0 - av * av))
                        .collect()
                })
                .collect();
            let (g_lin, g_bn) = g.split_at_mut(2);
            let (g_gain, g_beta) = g_bn.split_at_mut(1);
            let dz = self.norms[k].backward(&d_norm, &cache.bn, &mut g_gain[0], &mut g_beta[0]);
            let (gw, gb) = g_lin.split_at_mut(1);
            d_a = cache
                .input
                .iter()
                .zip(&dz)
                .map(|(x, d)| self.stages[k].backward(x, d, &mut gw[0], &mut gb[0]))
                .collect::<Result<Vec<_>, _>>()?;
        }
        Ok(())
    }

    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        for (bn, st) in self.norms.iter_mut().zip(stats) {
            bn.update_running(st);
        }
    }

    pub fn group_count(&self) -> usize {
        14
    }

    pub fn param_groups(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::with_capacity(14);
        for k in 0..3 {
            out.push((
                format!("predictor.stage{k}.weight"),
                self.stages[k].weight.as_slice(),
            ));
            out.push((
                format!("predictor.stage{k}.bias"),
                self.stages[k].bias.as_slice(),
            ));
            out.push((
                format!("predictor.norm{k}.gain"),
                self.norms[k].gain.as_slice(),
            ));
            out.push((
                format!("predictor.norm{k}.bias"),
                self.norms[k].bias.as_slice(),
            ));
        }
        out.push((
            "predictor.stage3.weight".into(),
            self.stages[3].weight.as_slice(),
        ));
        out.push((
            "predictor.stage3.bias".into(),
            self.stages[3].bias.as_slice(),
        ));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(14);
        let (first, last) = self.stages.split_at_mut(3);
        for (s, bn) in first.iter_mut().zip(self.norms.iter_mut()) {
            out.push(s.weight.as_mut_slice());
            out.push(s.bias.as_mut_slice());
            out.push(bn.gain.as_mut_slice());
            out.push(bn.bias.as_mut_slice());
        }
        out.push(last[0].weight.as_mut_slice());
        out.push(last[0].bias.as_mut_slice());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn widths_halve_progressively() {
        assert_eq!(predictor_widths(64), [64, 32, 16, 8, 1]);
        assert_eq!(predictor_widths(4), [4, 2, 1, 1, 1]);
    }

    #[test]
    fn zero_predictor_is_one_half() {
        let p = ConfidencePredictor::zeros(16);
        assert_eq!(p.predict(&[3.0; 16]).unwrap(), 0.5);
    }

    #[test]
    fn output_strictly_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = ConfidencePredictor::new(8, &mut rng);
        p.stages[3].bias[0] = 1e4;
        let c = p.predict(&[1.0; 8]).unwrap();
        assert!(c > 0.0 && c < 1.0);
        p.stages[3].bias[0] = -1e4;
        let c = p.predict(&[1.0; 8]).unwrap();
        assert!(c > 0.0 && c < 1.0);
    }

    #[test]
    fn group_order_matches_mutable_view() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ConfidencePredictor::new(16, &mut rng);
        let sizes: Vec<usize> = p.param_groups().iter().map(|(_, g)| g.len()).collect();
        let sizes_mut: Vec<usize> = p.params_mut().iter().map(|g| g.len()).collect();
        assert_eq!(sizes, sizes_mut);
        assert_eq!(sizes.len(), p.group_count());
    }
}
