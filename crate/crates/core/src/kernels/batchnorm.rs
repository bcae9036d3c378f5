//! Batch normalization over (N, H, W) per channel, forward and backward.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Forward-pass mode: training normalizes by batch statistics, evaluation by
/// the running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Learnable scale/shift plus running statistics for one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    /// Fresh state: gamma 1, beta 0, running stats at the standard-normal
    /// defaults, momentum 0.1, epsilon 1e-5.
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Copy only the running statistics from `from`, leaving the learnable
    /// gamma/beta untouched. Forward caches snapshot the state before the
    /// optimizer runs, so adopting whole states would roll back parameters.
    pub fn adopt_stats(&mut self, from: &BatchNormState) {
        self.running_mean.copy_from_slice(&from.running_mean);
        self.running_var.copy_from_slice(&from.running_var);
    }

    fn validate(&self, input: &Tensor) -> Result<()> {
        let c = input.c();
        for (name, len) in [
            ("gamma", self.gamma.len()),
            ("beta", self.beta.len()),
            ("running_mean", self.running_mean.len()),
            ("running_var", self.running_var.len()),
        ] {
            if len != c {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm",
                    detail: format!("{name} length {len} vs input channels {c}"),
                });
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument {
                op: "batch_norm",
                detail: format!("epsilon must be positive, got {}", self.epsilon),
            });
        }
        if let Some(v) = self.running_var.iter().find(|v| **v < 0.0) {
            return Err(Error::InvalidArgument {
                op: "batch_norm",
                detail: format!("negative running variance {v}"),
            });
        }
        Ok(())
    }
}

/// Per-channel intermediates retained for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    gamma: Vec<f64>,
}

/// Gradients of the train-mode batch-norm map.
#[derive(Debug, Clone)]
pub struct BatchNormGrads {
    pub d_input: Tensor,
    pub d_gamma: Vec<f64>,
    pub d_beta: Vec<f64>,
}

/// Train-mode forward: normalize by biased batch statistics and fold them
/// into the running estimates. Returns the output, the *new* state (the
/// input state is untouched), and the backward cache.
pub fn batch_norm_train(
    input: &Tensor,
    state: &BatchNormState,
) -> Result<(Tensor, BatchNormState, BatchNormCache)> {
    state.validate(input)?;
    let (n, c, h, w) = (input.n(), input.c(), input.h(), input.w());
    let m = n * h * w;
    if m == 0 {
        return Err(Error::InvalidArgument {
            op: "batch_norm",
            detail: "train mode requires a non-empty batch".into(),
        });
    }

    let mut out = Tensor::zeros(input.shape());
    let mut xhat = Tensor::zeros(input.shape());
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    let mut inv_std = vec![0.0; c];

    // Channel planes are strided across samples, so parallelize per channel
    // with plain indexed writes; each channel touches disjoint entries.
    let hw = h * w;
    let results: Vec<(usize, f64, f64, f64, Vec<f64>, Vec<f64>)> = (0..c)
        .into_par_iter()
        .map(|ci| {
            let mut sum = 0.0;
            for ni in 0..n {
                for &x in input.plane(ni, ci) {
                    sum += x;
                }
            }
            let mu = sum / m as f64;
            let mut sq = 0.0;
            for ni in 0..n {
                for &x in input.plane(ni, ci) {
                    let d = x - mu;
                    sq += d * d;
                }
            }
            let v = sq / m as f64;
            let istd = 1.0 / (v + state.epsilon).sqrt();
            let mut xhat_c = Vec::with_capacity(n * hw);
            let mut out_c = Vec::with_capacity(n * hw);
            let (g, b) = (state.gamma[ci], state.beta[ci]);
            for ni in 0..n {
                for &x in input.plane(ni, ci) {
                    let xh = (x - mu) * istd;
                    xhat_c.push(xh);
                    out_c.push(g * xh + b);
                }
            }
            (ci, mu, v, istd, xhat_c, out_c)
        })
        .collect();

    for (ci, mu, v, istd, xhat_c, out_c) in results {
        mean[ci] = mu;
        var[ci] = v;
        inv_std[ci] = istd;
        for ni in 0..n {
            out.plane_mut(ni, ci)
                .copy_from_slice(&out_c[ni * hw..(ni + 1) * hw]);
            xhat.plane_mut(ni, ci)
                .copy_from_slice(&xhat_c[ni * hw..(ni + 1) * hw]);
        }
    }

    let mut new_state = state.clone();
    for ci in 0..c {
        new_state.running_mean[ci] =
            (1.0 - state.momentum) * state.running_mean[ci] + state.momentum * mean[ci];
        new_state.running_var[ci] =
            (1.0 - state.momentum) * state.running_var[ci] + state.momentum * var[ci];
    }

    let cache = BatchNormCache {
        xhat,
        inv_std,
        gamma: state.gamma.clone(),
    };
    Ok((out, new_state, cache))
}

/// Eval-mode forward: normalize by the running statistics; no state change.
pub fn batch_norm_eval(input: &Tensor, state: &BatchNormState) -> Result<Tensor> {
    state.validate(input)?;
    let (n, c) = (input.n(), input.c());
    let mut out = Tensor::zeros(input.shape());
    for ci in 0..c {
        let istd = 1.0 / (state.running_var[ci] + state.epsilon).sqrt();
        let (g, b, mu) = (state.gamma[ci], state.beta[ci], state.running_mean[ci]);
        for ni in 0..n {
            let src = input.plane(ni, ci).to_vec();
            let dst = out.plane_mut(ni, ci);
            for (d, x) in dst.iter_mut().zip(src) {
                *d = g * (x - mu) * istd + b;
            }
        }
    }
    Ok(out)
}

/// Backward through the train-mode map. For m elements per channel:
/// d_x = inv_std/m * (m*d_xhat - sum(d_xhat) - xhat * sum(d_xhat*xhat)).
pub fn batch_norm_backward(cache: &BatchNormCache, d_output: &Tensor) -> Result<BatchNormGrads> {
    cache.xhat.check_same_shape("batch_norm_backward", d_output)?;
    let (n, c, h, w) = (
        cache.xhat.n(),
        cache.xhat.c(),
        cache.xhat.h(),
        cache.xhat.w(),
    );
    let m = (n * h * w) as f64;
    let hw = h * w;

    let mut d_input = Tensor::zeros(cache.xhat.shape());
    let mut d_gamma = vec![0.0; c];
    let mut d_beta = vec![0.0; c];

    let results: Vec<(usize, f64, f64, Vec<f64>)> = (0..c)
        .into_par_iter()
        .map(|ci| {
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for ni in 0..n {
                let dy = d_output.plane(ni, ci);
                let xh = cache.xhat.plane(ni, ci);
                for (g, x) in dy.iter().zip(xh) {
                    sum_dy += g;
                    sum_dy_xhat += g * x;
                }
            }
            let gamma = cache.gamma[ci];
            let istd = cache.inv_std[ci];
            let mut d_in_c = Vec::with_capacity(n * hw);
            for ni in 0..n {
                let dy = d_output.plane(ni, ci);
                let xh = cache.xhat.plane(ni, ci);
                for (g, x) in dy.iter().zip(xh) {
                    let d_xhat = g * gamma;
                    d_in_c.push(istd / m * (m * d_xhat - gamma * sum_dy - x * gamma * sum_dy_xhat));
                }
            }
            (ci, sum_dy, sum_dy_xhat, d_in_c)
        })
        .collect();

    for (ci, sum_dy, sum_dy_xhat, d_in_c) in results {
        d_beta[ci] = sum_dy;
        d_gamma[ci] = sum_dy_xhat;
        for ni in 0..n {
            d_input
                .plane_mut(ni, ci)
                .copy_from_slice(&d_in_c[ni * hw..(ni + 1) * hw]);
        }
    }

    Ok(BatchNormGrads {
        d_input,
        d_gamma,
        d_beta,
    })
}
