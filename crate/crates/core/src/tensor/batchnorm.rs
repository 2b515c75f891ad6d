use super::Tensor5;
use crate::error::{bail, Result};

/// Per-channel affine batch normalization with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Weight of the new batch statistic in the running average.
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormParams {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// What the backward pass needs from a training-mode forward.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    shape: [usize; 5],
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
    gamma: Vec<f64>,
}

/// Training mode normalizes each channel with the statistics of `x` over
/// batch and spatial positions (biased variance) and folds them into the
/// running averages. Inference mode uses the running statistics only and
/// leaves `p` untouched.
pub fn batchnorm_forward(x: &Tensor5, p: &mut BatchNormParams, training: bool) -> Result<(Tensor5, Option<BatchNormCache>)> {
    if training {
        let (y, cache) = forward_train(x, p)?;
        Ok((y, Some(cache)))
    } else {
        Ok((forward_infer(x, p)?, None))
    }
}

fn check_channels(x: &Tensor5, p: &BatchNormParams) -> Result<()> {
    if x.channels() != p.channels() {
        bail!(Shape, "batch norm has {} channels, input has {}", p.channels(), x.channels());
    }
    Ok(())
}

pub(crate) fn forward_train(x: &Tensor5, p: &mut BatchNormParams) -> Result<(Tensor5, BatchNormCache)> {
    check_channels(x, p)?;
    let c = p.channels();
    let count = x.positions();
    if count < 2 {
        bail!(InvalidArgument, "training-mode batch norm needs at least 2 positions per channel, got {count}");
    }
    let mut mean = vec![0.0; c];
    for v in x.data().chunks_exact(c) {
        for (m, xv) in mean.iter_mut().zip(v) {
            *m += xv;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; c];
    for v in x.data().chunks_exact(c) {
        for ((s, xv), m) in var.iter_mut().zip(v).zip(&mean) {
            let d = xv - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= count as f64);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.eps).sqrt()).collect();

    let mut x_hat = x.data().to_vec();
    let mut y = Tensor5::zeros(x.shape());
    for (xh_row, y_row) in x_hat.chunks_exact_mut(c).zip(y.data_mut().chunks_exact_mut(c)) {
        for ch in 0..c {
            let xh = (xh_row[ch] - mean[ch]) * inv_std[ch];
            xh_row[ch] = xh;
            y_row[ch] = p.gamma[ch] * xh + p.beta[ch];
        }
    }
    let mom = p.momentum;
    for ch in 0..c {
        p.running_mean[ch] = (1.0 - mom) * p.running_mean[ch] + mom * mean[ch];
        p.running_var[ch] = (1.0 - mom) * p.running_var[ch] + mom * var[ch];
    }
    Ok((y, BatchNormCache { shape: x.shape(), x_hat, inv_std, gamma: p.gamma.clone() }))
}

pub(crate) fn forward_infer(x: &Tensor5, p: &BatchNormParams) -> Result<Tensor5> {
    check_channels(x, p)?;
    let c = p.channels();
    let scale: Vec<f64> = (0..c).map(|ch| p.gamma[ch] / (p.running_var[ch] + p.eps).sqrt()).collect();
    let mut y = x.clone();
    for row in y.data_mut().chunks_exact_mut(c) {
        for ch in 0..c {
            row[ch] = (row[ch] - p.running_mean[ch]) * scale[ch] + p.beta[ch];
        }
    }
    Ok(y)
}

/// Returns `(grad_x, grad_gamma, grad_beta)` for the training-mode forward
/// that produced `cache`.
pub fn batchnorm_backward(cache: &BatchNormCache, grad_out: &Tensor5) -> Result<(Tensor5, Vec<f64>, Vec<f64>)> {
    if grad_out.shape() != cache.shape {
        bail!(Shape, "stale batch-norm cache: cached {:?}, grad_out {:?}", cache.shape, grad_out.shape());
    }
    let c = cache.gamma.len();
    let count = cache.x_hat.len() / c;
    let mut grad_gamma = vec![0.0; c];
    let mut grad_beta = vec![0.0; c];
    for (g_row, xh_row) in grad_out.data().chunks_exact(c).zip(cache.x_hat.chunks_exact(c)) {
        for ch in 0..c {
            grad_beta[ch] += g_row[ch];
            grad_gamma[ch] += g_row[ch] * xh_row[ch];
        }
    }
    // dx = γ·inv_std/N · (N·dy − Σdy − x̂·Σ(dy·x̂))
    let n = count as f64;
    let mut grad_x = Tensor5::zeros(cache.shape);
    for ((gx_row, g_row), xh_row) in grad_x
        .data_mut()
        .chunks_exact_mut(c)
        .zip(grad_out.data().chunks_exact(c))
        .zip(cache.x_hat.chunks_exact(c))
    {
        for ch in 0..c {
            let k = cache.gamma[ch] * cache.inv_std[ch] / n;
            gx_row[ch] = k * (n * g_row[ch] - grad_beta[ch] - xh_row[ch] * grad_gamma[ch]);
        }
    }
    Ok((grad_x, grad_gamma, grad_beta))
}
