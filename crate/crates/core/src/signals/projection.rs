use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numkit::{
    check_dropout_p, dropout_mask, layer_norm_backward, LayerNorm, LayerNormCache, Linear,
    NumError, Tensor2, Vector,
};

use super::REFERENCE_DIM;

/// Pre-norm residual block: `x + dropout(tanh(W·LN(x) + b))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub norm: LayerNorm,
    pub linear: Linear,
}

/// Maps a final hidden state into the reference-embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionModel {
    pub blocks: Vec<ResidualBlock>,
    pub output: Linear,
    pub dropout: f64,
}

pub const DEFAULT_PROJECTION_DEPTH: usize = 3;
pub const DEFAULT_DROPOUT: f64 = 0.1;

struct BlockCache {
    input: Vector,
    ln: LayerNormCache,
    normed: Vector,
    activation: Vector,
    mask: Vec<f64>,
}

/// Intermediate values of one train-mode forward pass.
pub struct ProjectionTrace {
    blocks: Vec<BlockCache>,
    last_hidden: Vector,
    pub output: Vector,
}

impl ProjectionModel {
    pub fn new<R: Rng + ?Sized>(hidden_dim: usize, rng: &mut R) -> Self {
        Self::with_shape(
            hidden_dim,
            DEFAULT_PROJECTION_DEPTH,
            REFERENCE_DIM,
            DEFAULT_DROPOUT,
            rng,
        )
    }

    pub fn with_shape<R: Rng + ?Sized>(
        hidden_dim: usize,
        depth: usize,
        output_dim: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..depth)
            .map(|_| ResidualBlock {
                norm: LayerNorm::new(hidden_dim),
                linear: Linear::init(hidden_dim, hidden_dim, 0.5, rng),
            })
            .collect();
        Self {
            blocks,
            output: Linear::init(hidden_dim, output_dim, 1.0, rng),
            dropout,
        }
    }

    /// Residual branches switched off and the output map set to the
    /// zero-padding (or truncating) embedding of the hidden state.
    pub fn canonical(hidden_dim: usize) -> Self {
        let blocks = (0..DEFAULT_PROJECTION_DEPTH)
            .map(|_| ResidualBlock {
                norm: LayerNorm::new(hidden_dim),
                linear: Linear::zeros(hidden_dim, hidden_dim),
            })
            .collect();
        let mut w = Tensor2::zeros(REFERENCE_DIM, hidden_dim);
        for i in 0..REFERENCE_DIM.min(hidden_dim) {
            w.set(i, i, 1.0);
        }
        Self {
            blocks,
            output: Linear {
                weight: w,
                bias: Vector::zeros(REFERENCE_DIM),
            },
            dropout: DEFAULT_DROPOUT,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.output.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.output.output_dim()
    }

    pub fn validate(&self) -> Result<(), NumError> {
        check_dropout_p(self.dropout)?;
        let h = self.input_dim();
        for b in &self.blocks {
            for (what, n) in [
                ("projection norm gain", b.norm.gain.dim()),
                ("projection norm bias", b.norm.bias.dim()),
                ("projection block bias", b.linear.bias.dim()),
                ("projection block rows", b.linear.weight.rows()),
                ("projection block cols", b.linear.weight.cols()),
            ] {
                if n != h {
                    return Err(NumError::DimensionMismatch {
                        op: what,
                        expected: h,
                        actual: n,
                    });
                }
            }
        }
        if self.output.bias.dim() != self.output_dim() {
            return Err(NumError::DimensionMismatch {
                op: "projection output bias",
                expected: self.output_dim(),
                actual: self.output.bias.dim(),
            });
        }
        Ok(())
    }

    /// Eval-mode projection (dropout off).
    pub fn project(&self, h: &[f64]) -> Result<Vector, NumError> {
        let mut x = Vector::new(h.to_vec());
        for b in &self.blocks {
            let (u, _) = b.norm.forward(&x)?;
            let v = b.linear.forward(&u)?;
            for (xi, vi) in x.iter_mut().zip(v.iter()) {
                *xi += vi.tanh();
            }
        }
        self.output.forward(&x)
    }

    /// Train-mode forward; draws one dropout mask per block from `rng`.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        h: &[f64],
        rng: &mut R,
    ) -> Result<ProjectionTrace, NumError> {
        let mut x = Vector::new(h.to_vec());
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (u, ln) = b.norm.forward(&x)?;
            let a: Vector = b.linear.forward(&u)?.iter().map(|v| v.tanh()).collect();
            let mask = dropout_mask(a.dim(), self.dropout, rng);
            let next: Vector = x
                .iter()
                .zip(a.iter().zip(&mask))
                .map(|(xi, (ai, mi))| xi + ai * mi)
                .collect();
            caches.push(BlockCache {
                input: x,
                ln,
                normed: u,
                activation: a,
                mask,
            });
            x = next;
        }
        let output = self.output.forward(&x)?;
        Ok(ProjectionTrace {
            blocks: caches,
            last_hidden: x,
            output,
        })
    }

    /// Backpropagates `d_output` and accumulates into `grads` (one buffer per
    /// parameter group, in [`Self::param_groups`] order). Returns the input gradient.
    pub fn backward(
        &self,
        trace: &ProjectionTrace,
        d_output: &[f64],
        grads: &mut [Vec<f64>],
    ) -> Result<Vector, NumError> {
        let n_groups = self.group_count();
        let (block_grads, out_grads) = grads[..n_groups].split_at_mut(4 * self.blocks.len());
        let (dw, db) = out_grads.split_at_mut(1);
        let mut dx = self
            .output
            .backward(&trace.last_hidden, d_output, &mut dw[0], &mut db[0])?;

        for (i, (b, cache)) in self.blocks.iter().zip(&trace.blocks).enumerate().rev() {
            let g = &mut block_grads[4 * i..4 * i + 4];
            let dv: Vec<f64> = dx
                .iter()
                .zip(cache.mask.iter().zip(cache.activation.iter()))
                .map(|(d, (m, a))| d * m * (1.0 - a * a))
                .collect();
            let (g_norm, g_lin) = g.split_at_mut(2);
            let (g_w, g_b) = g_lin.split_at_mut(1);
            let du = b
                .linear
                .backward(&cache.normed, &dv, &mut g_w[0], &mut g_b[0])?;
            let (g_gain, g_bias) = g_norm.split_at_mut(1);
            let dln =
                layer_norm_backward(&du, &b.norm.gain, &cache.ln, &mut g_gain[0], &mut g_bias[0]);
            debug_assert_eq!(cache.input.dim(), dln.dim());
            for (d, l) in dx.iter_mut().zip(dln.iter()) {
                *d += l;
            }
        }
        Ok(dx)
    }

    pub fn group_count(&self) -> usize {
        4 * self.blocks.len() + 2
    }

    pub fn param_groups(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::with_capacity(self.group_count());
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((
                format!("projection.block{i}.norm.gain"),
                b.norm.gain.as_slice(),
            ));
            out.push((
                format!("projection.block{i}.norm.bias"),
                b.norm.bias.as_slice(),
            ));
            out.push((
                format!("projection.block{i}.linear.weight"),
                b.linear.weight.as_slice(),
            ));
            out.push((
                format!("projection.block{i}.linear.bias"),
                b.linear.bias.as_slice(),
            ));
        }
        out.push((
            "projection.output.weight".into(),
            self.output.weight.as_slice(),
        ));
        out.push(("projection.output.bias".into(), self.output.bias.as_slice()));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(self.group_count());
        for b in &mut self.blocks {
            out.push(b.norm.gain.as_mut_slice());
            out.push(b.norm.bias.as_mut_slice());
            out.push(b.linear.weight.as_mut_slice());
            out.push(b.linear.bias.as_mut_slice());
        }
        out.push(self.output.weight.as_mut_slice());
        out.push(self.output.bias.as_mut_slice());
        out
    }
}
