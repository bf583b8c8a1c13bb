//! Dense numeric kernels, differentiable layers, AdamW and a plateau
//! scheduler. Everything runs in `f64` and is deterministic given explicit
//! state and seeded RNGs.

mod layers;
mod optim;
mod tensor;

pub(crate) use layers::standard_normal;
pub use layers::{
    batch_norm, check_dropout_p, dropout, dropout_mask, layer_norm, layer_norm_backward,
    layer_norm_forward, sigmoid, BatchNorm, BatchNormCache, BatchStats, LayerNorm, LayerNormCache,
    Linear, Mode,
};
pub use optim::{
    adamw_step, plateau_step, AdamWConfig, AdamWState, PlateauConfig, PlateauSchedule,
};
pub use tensor::{cosine, dot, matvec, mean_var, norm, Tensor2, Vector, ZERO_NORM};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumError {
    #[error("{op}: dimension mismatch (expected {expected}, got {actual})")]
    DimensionMismatch {
        op: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("batch of size {size} is too small (need at least {min})")]
    InvalidBatch { size: usize, min: usize },
    #[error("{0}")]
    InvalidParameter(String),
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Vector
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    Vector::new(grad)
}
