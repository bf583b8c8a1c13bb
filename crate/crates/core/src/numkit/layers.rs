//! Differentiable layers with hand-derived backward passes.
//!
//! Every layer exposes a forward pass returning whatever cache its backward
//! pass needs. Parameter gradients are accumulated into caller-provided
//! buffers so a network can collect them into one flat list of groups.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{check_dims, dot, mean_var, Tensor2, Vector};
use super::NumError;

/// Train mode uses batch statistics and active dropout; eval mode is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Linear

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor2,
    pub bias: Vector,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor2::zeros(output, input),
            bias: Vector::zeros(output),
        }
    }

    /// Gaussian weights with standard deviation `scale / sqrt(input)`, zero bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, scale: f64, rng: &mut R) -> Self {
        let std = scale / (input.max(1) as f64).sqrt();
        let data = (0..input * output)
            .map(|_| std * standard_normal(rng))
            .collect();
        Self {
            weight: Tensor2::from_vec(output, input, data).expect("shape by construction"),
            bias: Vector::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vector, NumError> {
        let mut y = self.weight.matvec(x)?;
        for (v, b) in y.iter_mut().zip(self.bias.iter()) {
            *v += b;
        }
        Ok(y)
    }

    /// Accumulates `dW += dy xᵀ`, `db += dy` and returns `dx = Wᵀ dy`.
    pub fn backward(
        &self,
        x: &[f64],
        dy: &[f64],
        dweight: &mut [f64],
        dbias: &mut [f64],
    ) -> Result<Vector, NumError> {
        let (rows, cols) = (self.weight.rows(), self.weight.cols());
        check_dims("linear backward dy", rows, dy.len())?;
        check_dims("linear backward x", cols, x.len())?;
        for (r, &g) in dy.iter().enumerate() {
            dbias[r] += g;
            if g == 0.0 {
                continue;
            }
            for (w, &xc) in dweight[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *w += g * xc;
            }
        }
        self.weight.matvec_transposed(dy)
    }
}

// ---------------------------------------------------------------------------
// Layer normalization

/// Layer normalization with population variance.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vector, NumError> {
    Ok(layer_norm_forward(x, gain, bias, eps)?.0)
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Vec<f64>,
    inv_std: f64,
}

pub fn layer_norm_forward(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> Result<(Vector, LayerNormCache), NumError> {
    check_dims("layer_norm gain", x.len(), gain.len())?;
    check_dims("layer_norm bias", x.len(), bias.len())?;
    let (mean, var) = mean_var(x);
    let denom = (var + eps).sqrt();
    // eps = 0 with constant input: treat as already centered
    let inv_std = if denom > 0.0 { 1.0 / denom } else { 0.0 };
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let y = xhat
        .iter()
        .zip(gain.iter().zip(bias))
        .map(|(h, (g, b))| h * g + b)
        .collect();
    Ok((y, LayerNormCache { xhat, inv_std }))
}

/// Returns `dx`; accumulates into `dgain` and `dbias`.
pub fn layer_norm_backward(
    dy: &[f64],
    gain: &[f64],
    cache: &LayerNormCache,
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vector {
    let n = dy.len() as f64;
    let mut dxhat = Vec::with_capacity(dy.len());
    for i in 0..dy.len() {
        dgain[i] += dy[i] * cache.xhat[i];
        dbias[i] += dy[i];
        dxhat.push(dy[i] * gain[i]);
    }
    let mean_d = dxhat.iter().sum::<f64>() / n;
    let mean_dx = dot(&dxhat, &cache.xhat) / n;
    dxhat
        .iter()
        .zip(&cache.xhat)
        .map(|(d, h)| cache.inv_std * (d - mean_d - h * mean_dx))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Vector,
    pub bias: Vector,
    pub eps: f64,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(dim: usize) -> Self {
        Self {
            gain: Vector::filled(dim, 1.0),
            bias: Vector::zeros(dim),
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vector, LayerNormCache), NumError> {
        layer_norm_forward(x, &self.gain, &self.bias, self.eps)
    }
}

// ---------------------------------------------------------------------------
// Batch normalization

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gain: Vector,
    pub bias: Vector,
    pub running_mean: Vector,
    pub running_var: Vector,
    pub momentum: f64,
    pub eps: f64,
}

/// Per-feature statistics of one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    xhat: Vec<Vec<f64>>,
    inv_std: Vec<f64>,
}

impl BatchNorm {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(dim: usize) -> Self {
        Self {
            gain: Vector::filled(dim, 1.0),
            bias: Vector::zeros(dim),
            running_mean: Vector::zeros(dim),
            running_var: Vector::filled(dim, 1.0),
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.dim()
    }

    pub fn forward_train(
        &self,
        batch: &[Vector],
    ) -> Result<(Vec<Vector>, BatchNormCache, BatchStats), NumError> {
        if batch.len() < 2 {
            return Err(NumError::InvalidBatch {
                size: batch.len(),
                min: 2,
            });
        }
        let dim = self.dim();
        for x in batch {
            check_dims("batch_norm", dim, x.dim())?;
        }
        let n = batch.len() as f64;
        let mut mean = vec![0.0; dim];
        for x in batch {
            for (m, v) in mean.iter_mut().zip(x.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for x in batch {
            for j in 0..dim {
                let d = x[j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();

        let mut xhat = Vec::with_capacity(batch.len());
        let mut out = Vec::with_capacity(batch.len());
        for x in batch {
            let h: Vec<f64> = (0..dim).map(|j| (x[j] - mean[j]) * inv_std[j]).collect();
            out.push(
                (0..dim)
                    .map(|j| h[j] * self.gain[j] + self.bias[j])
                    .collect::<Vector>(),
            );
            xhat.push(h);
        }
        Ok((
            out,
            BatchNormCache { xhat, inv_std },
            BatchStats { mean, var },
        ))
    }

    pub fn forward_eval(&self, x: &[f64]) -> Result<Vector, NumError> {
        check_dims("batch_norm", self.dim(), x.len())?;
        Ok((0..x.len())
            .map(|j| {
                (x[j] - self.running_mean[j]) / (self.running_var[j] + self.eps).sqrt()
                    * self.gain[j]
                    + self.bias[j]
            })
            .collect())
    }

    /// Returns per-sample `dx`; accumulates into `dgain` and `dbias`.
    pub fn backward(
        &self,
        dy: &[Vector],
        cache: &BatchNormCache,
        dgain: &mut [f64],
        dbias: &mut [f64],
    ) -> Vec<Vector> {
        let dim = self.dim();
        let n = dy.len() as f64;
        let mut sum_d = vec![0.0; dim];
        let mut sum_dh = vec![0.0; dim];
        let dxhat: Vec<Vec<f64>> = dy
            .iter()
            .zip(&cache.xhat)
            .map(|(g, h)| {
                (0..dim)
                    .map(|j| {
                        dgain[j] += g[j] * h[j];
                        dbias[j] += g[j];
                        let d = g[j] * self.gain[j];
                        sum_d[j] += d;
                        sum_dh[j] += d * h[j];
                        d
                    })
                    .collect()
            })
            .collect();
        dxhat
            .iter()
            .zip(&cache.xhat)
            .map(|(d, h)| {
                (0..dim)
                    .map(|j| cache.inv_std[j] / n * (n * d[j] - sum_d[j] - h[j] * sum_dh[j]))
                    .collect()
            })
            .collect()
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for j in 0..self.dim() {
            self.running_mean[j] = (1.0 - m) * self.running_mean[j] + m * stats.mean[j];
            self.running_var[j] = (1.0 - m) * self.running_var[j] + m * stats.var[j];
        }
    }
}

/// Batch normalization; train mode normalizes with batch statistics and
/// updates the running statistics, eval mode uses the running statistics.
pub fn batch_norm(
    batch: &[Vector],
    bn: &mut BatchNorm,
    mode: Mode,
) -> Result<Vec<Vector>, NumError> {
    match mode {
        Mode::Train => {
            let (out, _, stats) = bn.forward_train(batch)?;
            bn.update_running(&stats);
            Ok(out)
        }
        Mode::Eval => batch.iter().map(|x| bn.forward_eval(x)).collect(),
    }
}

// ---------------------------------------------------------------------------
// Dropout

pub fn check_dropout_p(p: f64) -> Result<(), NumError> {
    if !(0.0..1.0).contains(&p) {
        return Err(NumError::InvalidParameter(format!(
            "dropout probability must lie in [0, 1), got {p}"
        )));
    }
    Ok(())
}

/// Inverted-dropout mask: entries are 0 with probability `p`, else `1/(1-p)`.
pub fn dropout_mask<R: Rng + ?Sized>(dim: usize, p: f64, rng: &mut R) -> Vec<f64> {
    if p == 0.0 {
        return vec![1.0; dim];
    }
    let keep = 1.0 / (1.0 - p);
    (0..dim)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect()
}

pub fn dropout<R: Rng + ?Sized>(
    x: &[f64],
    p: f64,
    rng: &mut R,
    mode: Mode,
) -> Result<Vector, NumError> {
    check_dropout_p(p)?;
    if mode == Mode::Eval || p == 0.0 {
        return Ok(Vector::new(x.to_vec()));
    }
    let mask = dropout_mask(x.len(), p, rng);
    Ok(x.iter().zip(&mask).map(|(v, m)| v * m).collect())
}

pub(crate) fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    StandardNormal.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::finite_diff_grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| standard_normal(rng)).collect()
    }

    #[test]
    fn layer_norm_examples() {
        let y = layer_norm(&[2.0, 2.0, 2.0], &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
        let y = layer_norm(&[1.0, 3.0], &[1.0; 2], &[0.0; 2], 0.0).unwrap();
        assert_eq!(y.as_slice(), &[-1.0, 1.0]);
        let y = layer_norm(&[5.0, -1.0, 0.3], &[0.0; 3], &[0.1, 0.2, 0.3], 1e-5).unwrap();
        assert_eq!(y.as_slice(), &[0.1, 0.2, 0.3]);
        assert!(layer_norm(&[1.0], &[1.0, 1.0], &[0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = random_vec(&mut rng, 17);
            let y = layer_norm(&x, &[1.0; 17], &[0.0; 17], 0.0).unwrap();
            let (m, v) = mean_var(&y);
            assert!(m.abs() < 1e-9);
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_norm_examples() {
        let mut bn = BatchNorm::new(2);
        let same = vec![Vector::new(vec![1.5, -2.0]); 2];
        let out = batch_norm(&same, &mut bn, Mode::Train).unwrap();
        assert!(out.iter().all(|v| v.iter().all(|x| *x == 0.0)));

        let bn = BatchNorm::new(3);
        let x = [0.3, -1.0, 2.0];
        let y = bn.forward_eval(&x).unwrap();
        for (a, b) in x.iter().zip(y.iter()) {
            assert!((a / (1.0f64 + 1e-5).sqrt() - b).abs() < 1e-15);
        }

        let mut bn = BatchNorm::new(1);
        bn.eps = 0.0;
        let batch = vec![Vector::new(vec![1.0]), Vector::new(vec![3.0])];
        let out = batch_norm(&batch, &mut bn, Mode::Train).unwrap();
        assert_eq!(out[0][0], -1.0);
        assert_eq!(out[1][0], 1.0);
        // running stats moved toward batch stats (mean 2, var 1)
        assert!((bn.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((bn.running_var[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn batch_norm_rejects_single_sample() {
        let mut bn = BatchNorm::new(2);
        let err = batch_norm(&[Vector::zeros(2)], &mut bn, Mode::Train).unwrap_err();
        assert!(matches!(err, NumError::InvalidBatch { size: 1, .. }));
    }

    #[test]
    fn dropout_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = [1.0, 2.0, 3.0];
        assert_eq!(
            dropout(&x, 0.0, &mut rng, Mode::Train).unwrap().as_slice(),
            &x
        );
        assert_eq!(
            dropout(&x, 0.7, &mut rng, Mode::Eval).unwrap().as_slice(),
            &x
        );
        assert!(dropout(&x, 1.0, &mut rng, Mode::Train).is_err());
    }

    #[test]
    fn dropout_preserves_mean_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let trials = 100_000;
        let mut total = 0.0;
        for _ in 0..trials {
            total += dropout(&[1.0], 0.5, &mut rng, Mode::Train).unwrap()[0];
        }
        let mean = total / trials as f64;
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let lin = Linear::init(5, 4, 1.0, &mut rng);
            let x = random_vec(&mut rng, 5);
            let c = random_vec(&mut rng, 4);
            let loss = |l: &Linear, x: &[f64]| dot(&l.forward(x).unwrap(), &c);
            let mut dw = vec![0.0; 20];
            let mut db = vec![0.0; 4];
            let dx = lin.backward(&x, &c, &mut dw, &mut db).unwrap();

            let w0 = lin.weight.as_slice().to_vec();
            let num_w = finite_diff_grad(
                |w| {
                    let mut l = lin.clone();
                    l.weight.as_mut_slice().copy_from_slice(w);
                    loss(&l, &x)
                },
                &w0,
                1e-5,
            );
            let num_x = finite_diff_grad(|xv| loss(&lin, xv), &x, 1e-5);
            for (a, n) in dw.iter().zip(num_w.iter()) {
                assert!(rel_err(*a, *n) < 1e-4);
            }
            for (a, n) in dx.iter().zip(num_x.iter()) {
                assert!(rel_err(*a, *n) < 1e-4);
            }
            for (a, n) in db.iter().zip(&c) {
                assert!(rel_err(*a, *n) < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let x = random_vec(&mut rng, 6);
            let gain = random_vec(&mut rng, 6);
            let bias = random_vec(&mut rng, 6);
            let c = random_vec(&mut rng, 6);
            let f = |x: &[f64], g: &[f64], b: &[f64]| dot(&layer_norm(x, g, b, 1e-5).unwrap(), &c);
            let (_, cache) = layer_norm_forward(&x, &gain, &bias, 1e-5).unwrap();
            let mut dg = vec![0.0; 6];
            let mut dbias = vec![0.0; 6];
            let dx = layer_norm_backward(&c, &gain, &cache, &mut dg, &mut dbias);
            let nx = finite_diff_grad(|v| f(v, &gain, &bias), &x, 1e-5);
            let ng = finite_diff_grad(|v| f(&x, v, &bias), &gain, 1e-5);
            for (a, n) in dx.iter().zip(nx.iter()).chain(dg.iter().zip(ng.iter())) {
                assert!(rel_err(*a, *n) < 1e-4, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn batch_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let mut bn = BatchNorm::new(3);
            bn.gain = Vector::new(random_vec(&mut rng, 3));
            bn.bias = Vector::new(random_vec(&mut rng, 3));
            let batch: Vec<Vector> = (0..4)
                .map(|_| Vector::new(random_vec(&mut rng, 3)))
                .collect();
            let cs: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut rng, 3)).collect();
            let f = |bn: &BatchNorm, batch: &[Vector]| {
                let (out, _, _) = bn.forward_train(batch).unwrap();
                out.iter().zip(&cs).map(|(o, c)| dot(o, c)).sum::<f64>()
            };
            let (_, cache, _) = bn.forward_train(&batch).unwrap();
            let dy: Vec<Vector> = cs.iter().cloned().map(Vector::new).collect();
            let mut dg = vec![0.0; 3];
            let mut db = vec![0.0; 3];
            let dx = bn.backward(&dy, &cache, &mut dg, &mut db);

            let flat: Vec<f64> = batch.iter().flat_map(|v| v.iter().copied()).collect();
            let nx = finite_diff_grad(
                |v| {
                    let b: Vec<Vector> = v.chunks(3).map(|c| Vector::new(c.to_vec())).collect();
                    f(&bn, &b)
                },
                &flat,
                1e-5,
            );
            let ng = finite_diff_grad(
                |g| {
                    let mut b2 = bn.clone();
                    b2.gain = Vector::new(g.to_vec());
                    f(&b2, &batch)
                },
                &bn.gain,
                1e-5,
            );
            let dxf: Vec<f64> = dx.iter().flat_map(|v| v.iter().copied()).collect();
            for (a, n) in dxf.iter().zip(nx.iter()).chain(dg.iter().zip(ng.iter())) {
                assert!(rel_err(*a, *n) < 1e-4, "{a} vs {n}");
            }
        }
    }
}
