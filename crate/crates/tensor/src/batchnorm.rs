use crate::error::{shape_err, Result, TensorError};
use crate::{Real, Tensor};

/// Running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<F: Real> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
    pub momentum: F,
}

impl<F: Real> RunningStats<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![F::ZERO; channels],
            var: vec![F::ONE; channels],
            momentum: F::from_f64(BN_MOMENTUM),
        }
    }

    /// Exponential update with a batch's mean and unbiased variance.
    pub fn update(&mut self, batch_mean: &[F], batch_var: &[F]) {
        let m = self.momentum;
        for (r, &b) in self.mean.iter_mut().zip(batch_mean) {
            *r = (F::ONE - m) * *r + m * b;
        }
        for (r, &b) in self.var.iter_mut().zip(batch_var) {
            *r = (F::ONE - m) * *r + m * b;
        }
    }
}

/// Values saved by the forward pass for [`batchnorm_backward`].
#[derive(Debug, Clone)]
pub struct BatchNormCache<F: Real> {
    mode: BnMode,
    shape: Vec<usize>,
    x_hat: Vec<F>,
    inv_std: Vec<F>,
}

#[derive(Debug, Clone)]
pub struct BatchNormOutput<F: Real> {
    pub output: Tensor<F>,
    pub cache: BatchNormCache<F>,
    /// Batch mean and unbiased variance, present in train mode.
    pub batch_stats: Option<(Vec<F>, Vec<F>)>,
}

fn dims<F: Real>(input: &Tensor<F>, channels: usize) -> Result<(usize, usize, usize)> {
    let s = input.shape();
    if s.len() < 2 {
        return shape_err("batchnorm", format!("input {s:?} has no channel axis"));
    }
    if s[1] != channels {
        return shape_err(
            "batchnorm",
            format!("input has {} channels, parameters have {channels}", s[1]),
        );
    }
    Ok((s[0], s[1], s[2..].iter().product()))
}

/// Batch normalization over axis 1 without mutating running statistics.
pub fn batchnorm_forward<F: Real>(
    input: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    stats: &RunningStats<F>,
    mode: BnMode,
    epsilon: F,
) -> Result<BatchNormOutput<F>> {
    let c = gamma.len();
    if beta.len() != c || stats.mean.len() != c || stats.var.len() != c {
        return shape_err("batchnorm", "gamma, beta and running statistics lengths differ");
    }
    let (n, _, inner) = dims(input, c)?;
    let count = n * inner;
    let x = input.data();
    let mut mean = vec![F::ZERO; c];
    let mut var = vec![F::ZERO; c];
    match mode {
        BnMode::Train => {
            if count == 0 {
                return Err(TensorError::EmptyBatch { op: "batchnorm" });
            }
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * inner;
                    mean[ch] += x[base..base + inner].iter().copied().sum::<F>();
                }
            }
            let cnt = F::from_usize(count);
            mean.iter_mut().for_each(|m| *m /= cnt);
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * inner;
                    let m = mean[ch];
                    var[ch] += x[base..base + inner]
                        .iter()
                        .map(|&v| (v - m) * (v - m))
                        .sum::<F>();
                }
            }
            var.iter_mut().for_each(|v| *v /= cnt);
        }
        BnMode::Eval => {
            mean.copy_from_slice(&stats.mean);
            var.copy_from_slice(&stats.var);
        }
    }
    let inv_std: Vec<F> = var.iter().map(|&v| F::ONE / (v + epsilon).sqrt()).collect();
    let mut x_hat = vec![F::ZERO; x.len()];
    let mut out = vec![F::ZERO; x.len()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * inner;
            let (m, is, g, b) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in base..base + inner {
                let h = (x[i] - m) * is;
                x_hat[i] = h;
                out[i] = g * h + b;
            }
        }
    }
    let batch_stats = (mode == BnMode::Train).then(|| {
        let unbiased = if count > 1 {
            let scale = F::from_usize(count) / F::from_usize(count - 1);
            var.iter().map(|&v| v * scale).collect()
        } else {
            var.clone()
        };
        (mean, unbiased)
    });
    Ok(BatchNormOutput {
        output: Tensor::new(input.shape(), out)?,
        cache: BatchNormCache {
            mode,
            shape: input.shape().to_vec(),
            x_hat,
            inv_std,
        },
        batch_stats,
    })
}

/// Batch normalization; in train mode the running statistics are updated.
pub fn batchnorm<F: Real>(
    input: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    stats: &mut RunningStats<F>,
    mode: BnMode,
    epsilon: F,
) -> Result<(Tensor<F>, BatchNormCache<F>)> {
    let out = batchnorm_forward(input, gamma, beta, stats, mode, epsilon)?;
    if let Some((m, v)) = &out.batch_stats {
        stats.update(m, v);
    }
    Ok((out.output, out.cache))
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub fn batchnorm_backward<F: Real>(
    cache: &BatchNormCache<F>,
    gamma: &Tensor<F>,
    grad_out: &Tensor<F>,
) -> Result<(Tensor<F>, Vec<F>, Vec<F>)> {
    if grad_out.shape() != cache.shape.as_slice() {
        return shape_err(
            "batchnorm_backward",
            format!("grad {:?} vs input {:?}", grad_out.shape(), cache.shape),
        );
    }
    let c = gamma.len();
    let n = cache.shape[0];
    let inner: usize = cache.shape[2..].iter().product();
    let g = grad_out.data();
    let mut dgamma = vec![F::ZERO; c];
    let mut dbeta = vec![F::ZERO; c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * inner;
            for i in base..base + inner {
                dgamma[ch] += g[i] * cache.x_hat[i];
                dbeta[ch] += g[i];
            }
        }
    }
    let mut dx = vec![F::ZERO; g.len()];
    let count = F::from_usize(n * inner);
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * inner;
            let scale = gamma.data()[ch] * cache.inv_std[ch];
            match cache.mode {
                BnMode::Eval => {
                    for i in base..base + inner {
                        dx[i] = g[i] * scale;
                    }
                }
                BnMode::Train => {
                    // dx = gamma*inv_std/M * (M*g - sum(g) - x_hat*sum(g*x_hat))
                    let (sg, sgx) = (dbeta[ch], dgamma[ch]);
                    for i in base..base + inner {
                        dx[i] = scale * (g[i] - (sg + cache.x_hat[i] * sgx) / count);
                    }
                }
            }
        }
    }
    Ok((Tensor::new(&cache.shape, dx)?, dgamma, dbeta))
}
