//! Linear readout, global average pooling, softmax, and cross-entropy.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Affine map over flattened features: input (N, D, 1, 1) times weights
/// (K, D) plus bias (K) gives logits (N, K, 1, 1). Weights ride in a tensor
/// shaped (K, D, 1, 1).
pub fn linear(input: &Tensor, weights: &Tensor, bias: &[f64]) -> Result<Tensor> {
    let (n, d) = (input.n(), input.c() * input.h() * input.w());
    let (k, dw) = (weights.n(), weights.c() * weights.h() * weights.w());
    if d != dw {
        return Err(Error::ShapeMismatch {
            op: "linear",
            detail: format!("input features {d} vs weight columns {dw}"),
        });
    }
    if bias.len() != k {
        return Err(Error::ShapeMismatch {
            op: "linear",
            detail: format!("bias length {} vs output dim {k}", bias.len()),
        });
    }
    let mut out = Tensor::zeros([n, k, 1, 1]);
    let x = input.data();
    let w = weights.data();
    for ni in 0..n {
        let row = &x[ni * d..(ni + 1) * d];
        for ki in 0..k {
            let wrow = &w[ki * d..(ki + 1) * d];
            let mut acc = bias[ki];
            for (a, b) in row.iter().zip(wrow) {
                acc += a * b;
            }
            out.data_mut()[ni * k + ki] = acc;
        }
    }
    Ok(out)
}

/// Gradients of [`linear`]: d_input (N, D), d_weights (K, D), d_bias (K).
pub fn linear_backward(
    input: &Tensor,
    weights: &Tensor,
    d_output: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let (n, d) = (input.n(), input.c() * input.h() * input.w());
    let k = weights.n();
    if d_output.shape() != [n, k, 1, 1] {
        return Err(Error::ShapeMismatch {
            op: "linear_backward",
            detail: format!("d_output {:?} vs expected {:?}", d_output.shape(), [n, k, 1, 1]),
        });
    }
    let mut d_input = Tensor::zeros(input.shape());
    let mut d_weights = Tensor::zeros(weights.shape());
    let mut d_bias = vec![0.0; k];
    let x = input.data();
    let w = weights.data();
    let g = d_output.data();
    for ni in 0..n {
        let xrow = &x[ni * d..(ni + 1) * d];
        for ki in 0..k {
            let gv = g[ni * k + ki];
            d_bias[ki] += gv;
            let wrow = &w[ki * d..(ki + 1) * d];
            let di = &mut d_input.data_mut()[ni * d..(ni + 1) * d];
            for (dst, wv) in di.iter_mut().zip(wrow) {
                *dst += gv * wv;
            }
            let dw = &mut d_weights.data_mut()[ki * d..(ki + 1) * d];
            for (dst, xv) in dw.iter_mut().zip(xrow) {
                *dst += gv * xv;
            }
        }
    }
    Ok((d_input, d_weights, d_bias))
}

/// Average over spatial positions: (N, C, H, W) -> (N, C, 1, 1).
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = (input.n(), input.c(), input.h(), input.w());
    if h * w == 0 {
        return Err(Error::InvalidArgument {
            op: "global_avg_pool",
            detail: "empty spatial extent".into(),
        });
    }
    let mut out = Tensor::zeros([n, c, 1, 1]);
    for ni in 0..n {
        for ci in 0..c {
            let sum: f64 = input.plane(ni, ci).iter().sum();
            out.data_mut()[ni * c + ci] = sum / (h * w) as f64;
        }
    }
    Ok(out)
}

/// Backward of the pool: spreads each gradient evenly over its plane.
pub fn global_avg_pool_backward(input_shape: [usize; 4], d_output: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input_shape;
    if d_output.shape() != [n, c, 1, 1] {
        return Err(Error::ShapeMismatch {
            op: "global_avg_pool_backward",
            detail: format!("d_output {:?} vs expected {:?}", d_output.shape(), [n, c, 1, 1]),
        });
    }
    let mut d_input = Tensor::zeros(input_shape);
    let scale = 1.0 / (h * w) as f64;
    for ni in 0..n {
        for ci in 0..c {
            let g = d_output.data()[ni * c + ci] * scale;
            for v in d_input.plane_mut(ni, ci) {
                *v = g;
            }
        }
    }
    Ok(d_input)
}

/// Row softmax over logits (N, K, 1, 1), stabilized by max subtraction.
pub fn softmax(logits: &Tensor) -> Tensor {
    let (n, k) = (logits.n(), logits.c());
    let mut out = Tensor::zeros(logits.shape());
    for ni in 0..n {
        let row = &logits.data()[ni * k..(ni + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let orow = &mut out.data_mut()[ni * k..(ni + 1) * k];
        for (o, &l) in orow.iter_mut().zip(row) {
            *o = (l - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Backward through softmax given its output probabilities:
/// d_logit = p * (d_p - sum(p * d_p)) per row.
pub fn softmax_backward(probs: &Tensor, d_probs: &Tensor) -> Result<Tensor> {
    probs.check_same_shape("softmax_backward", d_probs)?;
    let (n, k) = (probs.n(), probs.c());
    let mut d_logits = Tensor::zeros(probs.shape());
    for ni in 0..n {
        let p = &probs.data()[ni * k..(ni + 1) * k];
        let dp = &d_probs.data()[ni * k..(ni + 1) * k];
        let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
        let out = &mut d_logits.data_mut()[ni * k..(ni + 1) * k];
        for i in 0..k {
            out[i] = p[i] * (dp[i] - dot);
        }
    }
    Ok(d_logits)
}

/// Validate that every row of `labels` is a distribution: entries >= 0 and
/// row sum within 1e-9 of 1. Reports the first offending row.
pub fn validate_distribution_rows(op: &'static str, rows: &Tensor) -> Result<()> {
    let (n, k) = (rows.n(), rows.c());
    for ni in 0..n {
        let row = &rows.data()[ni * k..(ni + 1) * k];
        let mut sum = 0.0;
        for &y in row {
            if y < 0.0 {
                return Err(Error::InvalidDistribution {
                    op,
                    row: ni,
                    detail: format!("negative entry {y}"),
                });
            }
            sum += y;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDistribution {
                op,
                row: ni,
                detail: format!("row sums to {sum}"),
            });
        }
    }
    Ok(())
}

/// Mean soft-label cross-entropy over the batch, with the exact gradient
/// d_logits = (softmax - labels) / N.
pub fn softmax_cross_entropy(logits: &Tensor, soft_labels: &Tensor) -> Result<(f64, Tensor)> {
    logits.check_same_shape("softmax_cross_entropy", soft_labels)?;
    validate_distribution_rows("softmax_cross_entropy", soft_labels)?;
    let (n, k) = (logits.n(), logits.c());
    let probs = softmax(logits);
    let mut loss = 0.0;
    for ni in 0..n {
        let row = &logits.data()[ni * k..(ni + 1) * k];
        let y = &soft_labels.data()[ni * k..(ni + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = row.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
        for (l, yv) in row.iter().zip(y) {
            if *yv > 0.0 {
                loss -= yv * (l - log_z);
            }
        }
    }
    loss /= n as f64;
    let mut d_logits = Tensor::zeros(logits.shape());
    for (i, d) in d_logits.data_mut().iter_mut().enumerate() {
        *d = (probs.data()[i] - soft_labels.data()[i]) / n as f64;
    }
    Ok((loss, d_logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::gradcheck::{finite_difference_gradient, max_relative_error};
    use crate::rng::Rng;

    #[test]
    fn identity_weights_pass_input_through() {
        let input = Tensor::from_vec([1, 3, 1, 1], vec![1.0, -2.0, 0.5]).unwrap();
        let mut weights = Tensor::zeros([3, 3, 1, 1]);
        for i in 0..3 {
            *weights.at_mut(i, i, 0, 0) = 1.0;
        }
        let out = linear(&input, &weights, &[0.0; 3]).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn pooling_constant_plane_returns_constant() {
        let input = Tensor::filled([2, 3, 4, 4], 2.5);
        let out = global_avg_pool(&input).unwrap();
        assert!(out.data().iter().all(|&x| (x - 2.5).abs() < 1e-15));
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = Rng::seed_from_u64(21);
        let input = Tensor::from_fn([2, 4, 1, 1], || rng.uniform(-1.0, 1.0));
        let weights = Tensor::from_fn([3, 4, 1, 1], || rng.uniform(-1.0, 1.0));
        let bias: Vec<f64> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let out = linear(&input, &weights, &bias).unwrap();
        let probe: Vec<f64> = (0..out.len()).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let d_out = Tensor::from_vec(out.shape(), probe.clone()).unwrap();
        let (d_in, d_w, d_b) = linear_backward(&input, &weights, &d_out).unwrap();

        let f_in = |xs: &[f64]| {
            let t = Tensor::from_vec(input.shape(), xs.to_vec()).unwrap();
            let o = linear(&t, &weights, &bias).unwrap();
            o.data().iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let fd = finite_difference_gradient(&f_in, input.data(), 1e-4).unwrap();
        assert!(max_relative_error(d_in.data(), &fd) < 1e-6);

        let f_w = |ws: &[f64]| {
            let t = Tensor::from_vec(weights.shape(), ws.to_vec()).unwrap();
            let o = linear(&input, &t, &bias).unwrap();
            o.data().iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let fd_w = finite_difference_gradient(&f_w, weights.data(), 1e-4).unwrap();
        assert!(max_relative_error(d_w.data(), &fd_w) < 1e-6);

        let f_b = |bs: &[f64]| {
            let o = linear(&input, &weights, bs).unwrap();
            o.data().iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let fd_b = finite_difference_gradient(&f_b, &bias, 1e-4).unwrap();
        assert!(max_relative_error(&d_b, &fd_b) < 1e-6);
    }

    #[test]
    fn pool_backward_matches_finite_differences() {
        let mut rng = Rng::seed_from_u64(22);
        let input = Tensor::from_fn([2, 3, 3, 3], || rng.uniform(-1.0, 1.0));
        let out = global_avg_pool(&input).unwrap();
        let probe: Vec<f64> = (0..out.len()).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let d_out = Tensor::from_vec(out.shape(), probe.clone()).unwrap();
        let d_in = global_avg_pool_backward(input.shape(), &d_out).unwrap();
        let f = |xs: &[f64]| {
            let t = Tensor::from_vec(input.shape(), xs.to_vec()).unwrap();
            let o = global_avg_pool(&t).unwrap();
            o.data().iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let fd = finite_difference_gradient(&f, input.data(), 1e-4).unwrap();
        assert!(max_relative_error(d_in.data(), &fd) < 1e-6);
    }

    #[test]
    fn uniform_logits_one_hot_label_gives_ln_k() {
        let logits = Tensor::zeros([1, 10, 1, 1]);
        let mut labels = Tensor::zeros([1, 10, 1, 1]);
        labels.data_mut()[3] = 1.0;
        let (loss, _) = softmax_cross_entropy(&logits, &labels).unwrap();
        assert!((loss - 10.0_f64.ln()).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn label_equal_to_softmax_is_stationary() {
        let logits = Tensor::from_vec([1, 3, 1, 1], vec![0.3, -1.0, 2.0]).unwrap();
        let labels = softmax(&logits);
        let (_, d) = softmax_cross_entropy(&logits, &labels).unwrap();
        assert!(d.data().iter().all(|&x| x.abs() < 1e-15));
    }

    #[test]
    fn soft_label_on_flat_logits_gives_ln_2() {
        let logits = Tensor::zeros([1, 2, 1, 1]);
        let labels = Tensor::from_vec([1, 2, 1, 1], vec![0.7, 0.3]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &labels).unwrap();
        assert!((loss - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn invalid_label_row_reports_index() {
        let logits = Tensor::zeros([2, 2, 1, 1]);
        let labels = Tensor::from_vec([2, 2, 1, 1], vec![0.5, 0.5, 0.9, 0.3]).unwrap();
        match softmax_cross_entropy(&logits, &labels) {
            Err(Error::InvalidDistribution { row, .. }) => assert_eq!(row, 1),
            other => panic!("expected distribution error, got {other:?}"),
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = Rng::seed_from_u64(23);
        let logits = Tensor::from_fn([3, 5, 1, 1], || rng.uniform(-2.0, 2.0));
        let mut labels = Tensor::zeros([3, 5, 1, 1]);
        for ni in 0..3 {
            let ws = {
                let mut v: Vec<f64> = (0..5).map(|_| rng.uniform(0.01, 1.0)).collect();
                let s: f64 = v.iter().sum();
                v.iter_mut().for_each(|x| *x /= s);
                v
            };
            labels.data_mut()[ni * 5..(ni + 1) * 5].copy_from_slice(&ws);
        }
        let (_, d) = softmax_cross_entropy(&logits, &labels).unwrap();
        let f = |ls: &[f64]| {
            let t = Tensor::from_vec(logits.shape(), ls.to_vec()).unwrap();
            softmax_cross_entropy(&t, &labels).unwrap().0
        };
        let fd = finite_difference_gradient(&f, logits.data(), 1e-4).unwrap();
        assert!(max_relative_error(d.data(), &fd) < 1e-7);
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = Rng::seed_from_u64(24);
        let logits = Tensor::from_fn([2, 4, 1, 1], || rng.uniform(-2.0, 2.0));
        let probe: Vec<f64> = (0..logits.len()).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let p = softmax(&logits);
        let d_p = Tensor::from_vec(p.shape(), probe.clone()).unwrap();
        let d_logits = softmax_backward(&p, &d_p).unwrap();
        let f = |ls: &[f64]| {
            let t = Tensor::from_vec(logits.shape(), ls.to_vec()).unwrap();
            softmax(&t)
                .data()
                .iter()
                .zip(&probe)
                .map(|(a, b)| a * b)
                .sum()
        };
        let fd = finite_difference_gradient(&f, logits.data(), 1e-4).unwrap();
        assert!(max_relative_error(d_logits.data(), &fd) < 1e-7);
    }
}
