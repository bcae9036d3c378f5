//! Finite-difference verification suites.
//!
//! Three scopes: `kernel` sweeps every forward/backward kernel pair over
//! randomized small shapes, `grcl` checks the recurrent block, and
//! `network` samples coordinates of the full tiny-preset gradient. All use
//! central differences at eps = 1e-4 in 64-bit arithmetic, with relative
//! error |a-b| / max(1, |a|, |b|).
//!
//! The `corrupt` flag perturbs one analytic gradient before comparison; it
//! exists so callers can prove the harness actually fails on a broken
//! backward pass.

use crate::grcl::block::{grcl_backward, grcl_forward, ForwardMode, GateMode};
use crate::grcl::network::{build_grcnn, GrcnnConfig};
use crate::kernels::activation::{relu, relu_backward, sigmoid, sigmoid_backward};
use crate::kernels::batchnorm::{batch_norm_backward, batch_norm_train, BatchNormState, Phase};
use crate::kernels::conv::{conv2d, conv2d_backward, conv2d_cached, ConvSpec};
use crate::kernels::dense::{
    global_avg_pool, global_avg_pool_backward, linear, linear_backward, softmax_cross_entropy,
};
use crate::kernels::gradcheck::{finite_difference_gradient, max_relative_error, relative_error};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const FD_EPS: f64 = 1e-4;
pub const KERNEL_TOLERANCE: f64 = 1e-5;
pub const NETWORK_TOLERANCE: f64 = 1e-4;

/// Outcome of one named check. `skipped` counts coordinates excluded by
/// the kink filter.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub skipped: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Disagreement bound between the eps and eps/2 central differences above
/// which a coordinate is treated as non-smooth. For smooth maps the two
/// estimates agree to O(eps^2) ~ 1e-8; a probe interval straddling a ReLU
/// kink disagrees at the gradient scale.
const KINK_FILTER: f64 = 1e-5;

/// Central-difference comparison that skips coordinates whose probe
/// interval crosses a ReLU kink: central differences are not a derivative
/// oracle across a non-differentiable point, so those coordinates carry no
/// information. Detection is by step-size agreement; skipped coordinates
/// are counted so a broken backward pass cannot hide behind the filter.
fn fd_check_filtered(
    f: &dyn Fn(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    eps: f64,
) -> (f64, usize) {
    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    let mut skipped = 0usize;
    for i in 0..params.len() {
        let orig = work[i];
        let mut eval = |v: f64| {
            work[i] = v;
            let y = f(&work);
            work[i] = orig;
            y
        };
        let fd_full = (eval(orig + eps) - eval(orig - eps)) / (2.0 * eps);
        let fd_half = (eval(orig + eps / 2.0) - eval(orig - eps / 2.0)) / eps;
        if relative_error(fd_full, fd_half) > KINK_FILTER {
            skipped += 1;
            continue;
        }
        worst = worst.max(relative_error(analytic[i], fd_half));
    }
    (worst, skipped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Kernel,
    Grcl,
    Network,
}

impl Scope {
    pub fn parse(name: &str) -> Option<Scope> {
        match name {
            "kernel" => Some(Scope::Kernel),
            "grcl" => Some(Scope::Grcl),
            "network" => Some(Scope::Network),
            _ => None,
        }
    }
}

fn random_tensor(shape: [usize; 4], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, || rng.uniform(-1.0, 1.0))
}

fn probe_for(len: usize, rng: &mut Rng) -> Vec<f64> {
    (0..len).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

/// Kernel-scope suite: conv2d, batch norm, sigmoid, linear, pooling, and
/// softmax cross-entropy, each over `seeds` random draws.
pub fn kernel_suite(seeds: u64, corrupt: bool) -> Vec<CheckResult> {
    let mut conv_err: f64 = 0.0;
    let mut bn_err: f64 = 0.0;
    let mut act_err: f64 = 0.0;
    let mut relu_err: f64 = 0.0;
    let mut relu_skipped: usize = 0;
    let mut lin_err: f64 = 0.0;
    let mut pool_err: f64 = 0.0;
    let mut ce_err: f64 = 0.0;

    for seed in 0..seeds {
        let mut rng = Rng::seed_from_u64(0xC0FFEE ^ seed);

        // conv2d: input, weight and bias gradients
        {
            let in_c = 1 + (seed as usize) % 3;
            let out_c = 1 + (seed as usize / 2) % 3;
            let stride = if seed % 2 == 0 { (1, 1) } else { (2, 2) };
            let spec = ConvSpec::new(in_c, out_c, (3, 3), stride, (1, 1));
            let input = random_tensor([2, in_c, 5, 5], &mut rng);
            let weights = random_tensor([out_c, in_c, 3, 3], &mut rng);
            let bias: Vec<f64> = (0..out_c).map(|_| rng.uniform(-0.5, 0.5)).collect();
            let (out, cache) = conv2d_cached(&input, &weights, Some(&bias), &spec).unwrap();
            let probe = probe_for(out.len(), &mut rng);
            let d_out = Tensor::from_vec(out.shape(), probe.clone()).unwrap();
            let mut grads = conv2d_backward(&cache, &d_out).unwrap();
            if corrupt {
                grads.d_weights.data_mut()[0] += 1e-2;
            }
            let f_in = |xs: &[f64]| {
                let t = Tensor::from_vec(input.shape(), xs.to_vec()).unwrap();
                let o = conv2d(&t, &weights, Some(&bias), &spec).unwrap();
                o.data().iter().zip(&probe).map(|(a, b)| a * b).sum()
            };
            let fd = finite_difference_gradient(&f_in, input.data(), FD_EPS).unwrap();
            conv_err = conv_err.max(max_relative_error(grads.d_input.data(), &fd));
            let f_w = |ws: &[f64]| {
                let t = Tensor::from_vec(weights.shape(), ws.to_vec()).unwrap();
                let o = conv2d(&input, &t, Some(&bias), &spec).unwrap();
                o.data().iter().zip(&probe).map(|(a, b)| a * b).sum()
            };
            let fd = finite_difference_gradient(&f_w, weights.data(), FD_EPS).unwrap();
            conv_err = conv_err.max(max_relative_error(grads.d_weights.data(), &fd));
            let f_b = |bs: &[f64]| {
                let o = conv2d(&input, &weights, Some(bs), &spec).unwrap();
                o.data().iter().zip(&probe).map(|(a, b)| a * b).sum()
            };
            let fd = finite_difference_gradient(&f_b, &bias, FD_EPS).unwrap();
            conv_err = conv_err.max(max_relative_error(&grads.d_bias, &fd));
        }

        // batch norm (train mode): input, gamma, beta
        {
            let c = 1 + (seed as usize) % 3;
            let input = random_tensor([3, c, 4, 4], &mut rng);
            let mut state = BatchNormState::new(c);
            for g in state.gamma.iter_mut() {
                *g = rng.uniform(0.5, 1.5);
            }
            for b in state.beta.iter_mut() {
                *b = rng.uniform(-0.5, 0.5);
            }
            let (out, _, cache) = batch_norm_train(&input, &state).unwrap();
            let probe = probe_for(out.len(), &mut rng);
            let d_out = Tensor::from_vec(out.shape(), probe.clone()).unwrap();
            let grads = batch_norm_backward(&cache, &d_out).unwrap();
            let f_in = |xs: &[f64]| {
                let t = Tensor::from_vec(input.shape(), xs.to_vec()).unwrap();
                let (o, _, _) = batch_norm_train(&t, &state).unwrap();
                o.data().iter().zip(&probe).map(|(a, b)| a * b).sum()
            };
            let fd = finite_difference_gradient(&f_in, input.data(), FD_EPS).unwrap();
            bn_err = bn_err.max(max_relative_error(grads.d_input.data(), &fd));
            let f_g = |gs: &[f64]| {
                let mut s = state.clone();
                s.gamma = gs.to_vec();
                let (o, _, _) = batch_norm_train(&input, &s).unwrap();
                o.data().iter().zip(&probe).map(|(a, b)| a * b).sum()
            };
            let fd = finite_difference_gradient(&f_g, &state.gamma, FD_EPS).unwrap();
            bn_err = bn_err.max(max_relative_error(&grads.d_gamma, &fd));
            let f_b = |bs: &[f64]| {
                let mut s = state.clone();
                s.beta = bs.to_vec();
                let (o, _, _) = batch_norm_train(&input, &s).unwrap();
                o.data().iter().zip(&probe).map(|(a, b)| a * b).sum()
            };
            let fd = finite_difference_gradient(&f_b, &state.beta, FD_EPS).unwrap();
            bn_err = bn_err.max(max_relative_error(&grads.d_beta, &fd));
        }

        // sigmoid
        {
            let input = random_tensor([1, 2, 3, 3], &mut rng);
            let probe = probe_for(input.len(), &mut rng);
            let s = sigmoid(&input);
            let d_out = Tensor::from_vec(input.shape(), probe.clone()).unwrap();
            let analytic = sigmoid_backward(&s, &d_out).unwrap();
            let f = |xs: &[f64]| {
                let t = Tensor::from_vec(input.shape(), xs.to_vec()).unwrap();
                sigmoid(&t)
                    .data()
                    .iter()
                    .zip(&probe)
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let fd = finite_difference_gradient(&f, input.data(), FD_EPS).unwrap();
            act_err = act_err.max(max_relative_error(analytic.data(), &fd));
        }

        // relu: kink coordinates are filtered out by step-size agreement
        {
            let input = random_tensor([1, 2, 3, 3], &mut rng);
            let probe = probe_for(input.len(), &mut rng);
            let d_out = Tensor::from_vec(input.shape(), probe.clone()).unwrap();
            let analytic = relu_backward(&input, &d_out).unwrap();
            let f = |xs: &[f64]| {
                let t = Tensor::from_vec(input.shape(), xs.to_vec()).unwrap();
                relu(&t)
                    .data()
                    .iter()
                    .zip(&probe)
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let (err, sk) = fd_check_filtered(&f, input.data(), analytic.data(), FD_EPS);
            relu_err = relu_err.max(err);
            relu_skipped += sk;
        }

        // linear
        {
            let input = random_tensor([2, 4, 1, 1], &mut rng);
            let weights = random_tensor([3, 4, 1, 1], &mut rng);
            let bias: Vec<f64> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let out = linear(&input, &weights, &bias).unwrap();
            let probe = probe_for(out.len(), &mut rng);
            let d_out = Tensor::from_vec(out.shape(), probe.clone()).unwrap();
            let (d_in, d_w, d_b) = linear_backward(&input, &weights, &d_out).unwrap();
            let f_in = |xs: &[f64]| {
                let t = Tensor::from_vec(input.shape(), xs.to_vec()).unwrap();
                let o = linear(&t, &weights, &bias).unwrap();
                o.data().iter().zip(&probe).map(|(a, b)| a * b).sum()
            };
            let fd = finite_difference_gradient(&f_in, input.data(), FD_EPS).unwrap();
            lin_err = lin_err.max(max_relative_error(d_in.data(), &fd));
            let f_w = |ws: &[f64]| {
                let t = Tensor::from_vec(weights.shape(), ws.to_vec()).unwrap();
                let o = linear(&input, &t, &bias).unwrap();
                o.data().iter().zip(&probe).map(|(a, b)| a * b).sum()
            };
            let fd = finite_difference_gradient(&f_w, weights.data(), FD_EPS).unwrap();
            lin_err = lin_err.max(max_relative_error(d_w.data(), &fd));
            let f_b = |bs: &[f64]| {
                let o = linear(&input, &weights, bs).unwrap();
                o.data().iter().zip(&probe).map(|(a, b)| a * b).sum()
            };
            let fd = finite_difference_gradient(&f_b, &bias, FD_EPS).unwrap();
            lin_err = lin_err.max(max_relative_error(&d_b, &fd));
        }

        // global average pooling
        {
            let input = random_tensor([2, 3, 4, 4], &mut rng);
            let out = global_avg_pool(&input).unwrap();
            let probe = probe_for(out.len(), &mut rng);
            let d_out = Tensor::from_vec(out.shape(), probe.clone()).unwrap();
            let d_in = global_avg_pool_backward(input.shape(), &d_out).unwrap();
            let f = |xs: &[f64]| {
                let t = Tensor::from_vec(input.shape(), xs.to_vec()).unwrap();
                let o = global_avg_pool(&t).unwrap();
                o.data().iter().zip(&probe).map(|(a, b)| a * b).sum()
            };
            let fd = finite_difference_gradient(&f, input.data(), FD_EPS).unwrap();
            pool_err = pool_err.max(max_relative_error(d_in.data(), &fd));
        }

        // softmax cross-entropy on soft labels
        {
            let logits = random_tensor([3, 5, 1, 1], &mut rng);
            let mut labels = Tensor::zeros([3, 5, 1, 1]);
            for ni in 0..3 {
                let mut row: Vec<f64> = (0..5).map(|_| rng.uniform(0.05, 1.0)).collect();
                let sum: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= sum);
                labels.data_mut()[ni * 5..(ni + 1) * 5].copy_from_slice(&row);
            }
            let (_, d) = softmax_cross_entropy(&logits, &labels).unwrap();
            let f = |ls: &[f64]| {
                let t = Tensor::from_vec(logits.shape(), ls.to_vec()).unwrap();
                softmax_cross_entropy(&t, &labels).unwrap().0
            };
            let fd = finite_difference_gradient(&f, logits.data(), FD_EPS).unwrap();
            ce_err = ce_err.max(max_relative_error(d.data(), &fd));
        }
    }

    let result = |name: &str, err: f64, skipped: usize| CheckResult {
        name: name.to_string(),
        max_rel_err: err,
        tolerance: KERNEL_TOLERANCE,
        skipped,
    };
    vec![
        result("conv2d", conv_err, 0),
        result("batch_norm", bn_err, 0),
        result("relu", relu_err, relu_skipped),
        result("sigmoid", act_err, 0),
        result("linear", lin_err, 0),
        result("global_avg_pool", pool_err, 0),
        result("softmax_cross_entropy", ce_err, 0),
    ]
}

/// Block-scope suite: full gradient of the recurrent block on a small
/// shape (N=2, C=4, 8x8, T=3) per seed, kink coordinates filtered.
pub fn grcl_suite(seeds: u64, corrupt: bool) -> Vec<CheckResult> {
    let mut worst: f64 = 0.0;
    let mut skipped = 0usize;
    for seed in 0..seeds {
        let mut rng = Rng::seed_from_u64(0xB10C ^ seed);
        let params = {
            use crate::grcl::block::{ConvBlock, GrclParams};
            let he = |shape: [usize; 4], rng: &mut Rng| {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let std = (2.0 / fan_in).sqrt();
                Tensor::from_fn(shape, || rng.normal() * std)
            };
            let block = |in_c: usize, out_c: usize, relu: bool, rng: &mut Rng| ConvBlock {
                spec: ConvSpec::same(in_c, out_c, (3, 3)),
                weight: he([out_c, in_c, 3, 3], rng),
                bias: None,
                bn: Some(BatchNormState::new(out_c)),
                relu,
            };
            GrclParams {
                t_steps: 3,
                tie_weights: true,
                kernel: (3, 3),
                a0: block(4, 4, true, &mut rng),
                c_gate: block(4, 4, false, &mut rng),
                a_weights: vec![he([4, 4, 3, 3], &mut rng)],
                b_weights: vec![he([4, 4, 3, 3], &mut rng)],
                a_bn: (0..3).map(|_| BatchNormState::new(4)).collect(),
                b_bn: (0..3).map(|_| BatchNormState::new(4)).collect(),
            }
        };
        let u = random_tensor([2, 4, 8, 8], &mut rng);
        let (x, cache) = grcl_forward(&u, &params, GateMode::Learned, ForwardMode::Train).unwrap();
        let probe = probe_for(x.len(), &mut rng);
        let d_out = Tensor::from_vec(x.shape(), probe.clone()).unwrap();
        let (mut d_u, grads) = grcl_backward(&params, &cache.unwrap(), &d_out).unwrap();
        if corrupt {
            d_u.data_mut()[0] += 1e-2;
        }
        let loss = |u: &Tensor, p: &crate::grcl::block::GrclParams| -> f64 {
            let (x, _) = grcl_forward(u, p, GateMode::Learned, ForwardMode::Train).unwrap();
            x.data().iter().zip(&probe).map(|(a, b)| a * b).sum()
        };

        let f_u = |xs: &[f64]| {
            let t = Tensor::from_vec(u.shape(), xs.to_vec()).unwrap();
            loss(&t, &params)
        };
        let (err, sk) = fd_check_filtered(&f_u, u.data(), d_u.data(), FD_EPS);
        worst = worst.max(err);
        skipped += sk;

        let f_a = |ws: &[f64]| {
            let mut p = params.clone();
            p.a_weights[0] = Tensor::from_vec(params.a_weights[0].shape(), ws.to_vec()).unwrap();
            loss(&u, &p)
        };
        let (err, sk) = fd_check_filtered(
            &f_a,
            params.a_weights[0].data(),
            grads.d_a_weights[0].data(),
            FD_EPS,
        );
        worst = worst.max(err);
        skipped += sk;

        let f_b = |ws: &[f64]| {
            let mut p = params.clone();
            p.b_weights[0] = Tensor::from_vec(params.b_weights[0].shape(), ws.to_vec()).unwrap();
            loss(&u, &p)
        };
        let (err, sk) = fd_check_filtered(
            &f_b,
            params.b_weights[0].data(),
            grads.d_b_weights[0].data(),
            FD_EPS,
        );
        worst = worst.max(err);
        skipped += sk;

        let f_c = |ws: &[f64]| {
            let mut p = params.clone();
            p.c_gate.weight = Tensor::from_vec(params.c_gate.weight.shape(), ws.to_vec()).unwrap();
            loss(&u, &p)
        };
        let (err, sk) = fd_check_filtered(
            &f_c,
            params.c_gate.weight.data(),
            grads.d_c.d_weight.data(),
            FD_EPS,
        );
        worst = worst.max(err);
        skipped += sk;
    }
    vec![CheckResult {
        name: "grcl_block".to_string(),
        max_rel_err: worst,
        tolerance: KERNEL_TOLERANCE,
        skipped,
    }]
}

/// Network-scope suite: the tiny preset's full backward pass against
/// central differences on sampled coordinates of every parameter tensor,
/// kink coordinates filtered.
pub fn network_suite(seeds: u64, coords_per_tensor: usize, corrupt: bool) -> Vec<CheckResult> {
    let mut worst: f64 = 0.0;
    let mut skipped = 0usize;
    for seed in 0..seeds {
        let mut rng = Rng::seed_from_u64(0x4E457457 ^ seed);
        let net = build_grcnn(&GrcnnConfig::tiny(), &mut rng).unwrap();
        let batch = Tensor::from_fn([2, 3, 16, 16], || rng.uniform(0.0, 1.0));
        let k = net.config.class_count;
        let probe = probe_for(2 * k, &mut rng);
        let loss_at = |gi: usize, ci: usize, delta: f64| -> f64 {
            let mut shifted = net.clone();
            let mut idx = 0usize;
            shifted.for_each_param_mut(&mut |_, data| {
                if idx == gi {
                    data[ci] += delta;
                }
                idx += 1;
            });
            let (logits, _) = shifted.forward(&batch, Phase::Train).unwrap();
            logits.data().iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let (logits, cache) = net.forward(&batch, Phase::Train).unwrap();
        let d = Tensor::from_vec(logits.shape(), probe.clone()).unwrap();
        let mut grads = net.backward(&cache.unwrap(), &d).unwrap();
        if corrupt {
            grads.entries[0].1[0] += 1e-2;
        }
        for (gi, (_, grad)) in grads.entries.iter().enumerate() {
            for _ in 0..coords_per_tensor.min(grad.len()) {
                let ci = rng.below(grad.len());
                let fd_full =
                    (loss_at(gi, ci, FD_EPS) - loss_at(gi, ci, -FD_EPS)) / (2.0 * FD_EPS);
                let fd_half = (loss_at(gi, ci, FD_EPS / 2.0) - loss_at(gi, ci, -FD_EPS / 2.0))
                    / FD_EPS;
                if relative_error(fd_full, fd_half) > KINK_FILTER {
                    skipped += 1;
                    continue;
                }
                worst = worst.max(relative_error(grad[ci], fd_half));
            }
        }
    }
    vec![CheckResult {
        name: "network_tiny".to_string(),
        max_rel_err: worst,
        tolerance: NETWORK_TOLERANCE,
        skipped,
    }]
}

/// Run one scope with its standard seed counts.
pub fn run_scope(scope: Scope, seed_count: Option<u64>, corrupt: bool) -> Vec<CheckResult> {
    match scope {
        Scope::Kernel => kernel_suite(seed_count.unwrap_or(20), corrupt),
        Scope::Grcl => grcl_suite(seed_count.unwrap_or(10), corrupt),
        Scope::Network => network_suite(seed_count.unwrap_or(10), 4, corrupt),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_suite_passes_on_a_few_seeds() {
        let results = kernel_suite(3, false);
        for r in &results {
            assert!(r.passed(), "{}: {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn corrupted_backward_is_detected() {
        let results = kernel_suite(1, true);
        assert!(results.iter().any(|r| !r.passed()));
    }

    #[test]
    fn grcl_suite_passes_on_a_few_seeds() {
        let results = grcl_suite(2, false);
        for r in &results {
            assert!(r.passed(), "{}: {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn network_suite_passes_on_one_seed() {
        let results = network_suite(1, 2, false);
        for r in &results {
            assert!(r.passed(), "{}: {}", r.name, r.max_rel_err);
        }
    }
}
