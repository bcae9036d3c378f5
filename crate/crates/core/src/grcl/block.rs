//! The gated recurrent convolutional block.
//!
//! One block computes a T-step recursion over its input `u`:
//!
//! ```text
//! x_0 = A0(u)
//! g_t = B_t(x_{t-1}) + C(u)          t = 1..T
//! x_t = x_{t-1} + sigmoid(g_t) * A_t(x_{t-1})
//! ```
//!
//! A0 and A_t are conv -> batch norm -> ReLU; B_t and C are conv -> batch
//! norm with no ReLU, since the sigmoid follows immediately and a preceding
//! ReLU would halve the gate's input range. C(u) is computed once per
//! forward and reused by every step.

use crate::error::{Error, Result};
use crate::kernels::activation::{hadamard, relu, relu_backward, sigmoid, sigmoid_backward};
use crate::kernels::batchnorm::{
    batch_norm_backward, batch_norm_eval, batch_norm_train, BatchNormCache, BatchNormState,
};
use crate::kernels::conv::{conv2d, conv2d_backward, conv2d_cached, Conv2dCache, ConvSpec};
use crate::tensor::Tensor;

/// How a forward pass treats batch-norm layers.
///
/// `TrainFrozen` is used for parameter groups that are frozen during a
/// fine-tuning stage: normalization uses the running statistics and the
/// running estimates are left untouched, so a frozen group stays bitwise
/// identical through any number of steps while gradients still flow through
/// it to the trainable groups upstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Eval,
    Train,
    TrainFrozen,
}

/// Gate behavior of the recursion.
///
/// - `Learned`: multiplier = sigmoid(g_t).
/// - `Ablated`: multiplier identically 1; the gate branch is never computed,
///   reducing the block to a plain residual chain.
/// - `SaturatedOpen`: the gate branch is computed but the sigmoid output is
///   forced to 1 (no gradient enters the gate branch).
/// - `SaturatedClosed`: the sigmoid output is forced to 0; every increment
///   vanishes, so x_T == x_0 bitwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    Learned,
    Ablated,
    SaturatedOpen,
    SaturatedClosed,
}

/// conv (+ optional bias) -> optional batch norm -> optional ReLU.
/// Convolutions followed by batch norm carry no bias (redundant with beta).
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub spec: ConvSpec,
    pub weight: Tensor,
    pub bias: Option<Vec<f64>>,
    pub bn: Option<BatchNormState>,
    pub relu: bool,
}

/// Cache of one conv->bn->relu application.
#[derive(Debug, Clone)]
pub struct OpCache {
    conv: Conv2dCache,
    bn: BnCache,
    pre_relu: Option<Tensor>,
}

#[derive(Debug, Clone)]
enum BnCache {
    None,
    /// Train mode: full cache plus the updated running statistics.
    Batch(BatchNormCache, BatchNormState),
    /// Frozen mode: per-channel scale gamma/sqrt(running_var+eps).
    Running(Vec<f64>),
}

/// Gradients of one conv->bn->relu application.
#[derive(Debug, Clone)]
pub struct OpGrads {
    pub d_weight: Tensor,
    pub d_bias: Option<Vec<f64>>,
    pub d_gamma: Option<Vec<f64>>,
    pub d_beta: Option<Vec<f64>>,
}

impl OpGrads {
    fn zeros_like(block: &ConvBlock) -> OpGrads {
        OpGrads {
            d_weight: Tensor::zeros(block.weight.shape()),
            d_bias: block.bias.as_ref().map(|b| vec![0.0; b.len()]),
            d_gamma: block.bn.as_ref().map(|bn| vec![0.0; bn.channels()]),
            d_beta: block.bn.as_ref().map(|bn| vec![0.0; bn.channels()]),
        }
    }
}

/// Forward through conv -> bn -> relu with the given mode.
pub fn op_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&[f64]>,
    spec: &ConvSpec,
    bn: Option<&BatchNormState>,
    with_relu: bool,
    mode: ForwardMode,
) -> Result<(Tensor, Option<OpCache>)> {
    let wants_cache = mode != ForwardMode::Eval;
    let (mut x, conv_cache) = if wants_cache {
        let (x, c) = conv2d_cached(input, weight, bias, spec)?;
        (x, Some(c))
    } else {
        (conv2d(input, weight, bias, spec)?, None)
    };

    let bn_cache = match (bn, mode) {
        (None, _) => BnCache::None,
        (Some(state), ForwardMode::Train) => {
            let (out, new_state, cache) = batch_norm_train(&x, state)?;
            x = out;
            BnCache::Batch(cache, new_state)
        }
        (Some(state), ForwardMode::TrainFrozen) | (Some(state), ForwardMode::Eval) => {
            let out = batch_norm_eval(&x, state)?;
            let scale: Vec<f64> = state
                .gamma
                .iter()
                .zip(&state.running_var)
                .map(|(g, v)| g / (v + state.epsilon).sqrt())
                .collect();
            x = out;
            BnCache::Running(scale)
        }
    };

    let pre_relu = if with_relu && wants_cache {
        Some(x.clone())
    } else {
        None
    };
    if with_relu {
        x = relu(&x);
    }

    if !wants_cache {
        return Ok((x, None));
    }
    Ok((
        x,
        Some(OpCache {
            conv: conv_cache.expect("cache requested"),
            bn: bn_cache,
            pre_relu,
        }),
    ))
}

/// Backward through conv -> bn -> relu. Parameter gradients for the batch
/// norm are only produced in batch (train) mode; in frozen mode the layer is
/// a fixed per-channel affine map and only d_input flows.
pub fn op_backward(cache: &OpCache, d_output: &Tensor) -> Result<(Tensor, OpGrads)> {
    let mut d = d_output.clone();
    if let Some(pre) = &cache.pre_relu {
        d = relu_backward(pre, &d)?;
    }
    let (d_conv_out, d_gamma, d_beta) = match &cache.bn {
        BnCache::None => (d, None, None),
        BnCache::Batch(bn_cache, _) => {
            let grads = batch_norm_backward(bn_cache, &d)?;
            (grads.d_input, Some(grads.d_gamma), Some(grads.d_beta))
        }
        BnCache::Running(scale) => {
            let (n, c) = (d.n(), d.c());
            let mut out = Tensor::zeros(d.shape());
            for ni in 0..n {
                for ci in 0..c {
                    let k = scale[ci];
                    let src = d.plane(ni, ci).to_vec();
                    for (dst, g) in out.plane_mut(ni, ci).iter_mut().zip(src) {
                        *dst = k * g;
                    }
                }
            }
            (out, None, None)
        }
    };
    let conv_grads = conv2d_backward(&cache.conv, &d_conv_out)?;
    Ok((
        conv_grads.d_input,
        OpGrads {
            d_weight: conv_grads.d_weights,
            d_bias: if conv_grads.d_bias.is_empty() {
                None
            } else {
                Some(conv_grads.d_bias)
            },
            d_gamma,
            d_beta,
        },
    ))
}

impl ConvBlock {
    pub fn forward(&self, input: &Tensor, mode: ForwardMode) -> Result<(Tensor, Option<OpCache>)> {
        op_forward(
            input,
            &self.weight,
            self.bias.as_deref(),
            &self.spec,
            self.bn.as_ref(),
            self.relu,
            mode,
        )
    }

    /// Updated running statistics recorded by a train-mode forward, if any.
    pub fn bn_update_from(cache: &OpCache) -> Option<&BatchNormState> {
        match &cache.bn {
            BnCache::Batch(_, new_state) => Some(new_state),
            _ => None,
        }
    }
}

/// Parameter bundle of one gated recurrent block.
///
/// When `tie_weights` is true there is a single weight set for all A_t (and
/// one for all B_t) with T independent batch-norm states; when false, each
/// step holds its own weights.
#[derive(Debug, Clone)]
pub struct GrclParams {
    pub t_steps: usize,
    pub tie_weights: bool,
    pub kernel: (usize, usize),
    pub a0: ConvBlock,
    pub c_gate: ConvBlock,
    pub a_weights: Vec<Tensor>,
    pub b_weights: Vec<Tensor>,
    /// Per-step batch-norm states; empty disables normalization inside the
    /// recursion (used by closed-form tests).
    pub a_bn: Vec<BatchNormState>,
    pub b_bn: Vec<BatchNormState>,
}

impl GrclParams {
    /// Channel count the recursion runs at.
    pub fn channels(&self) -> usize {
        self.a0.spec.out_channels
    }

    fn weight_index(&self, t: usize) -> usize {
        if self.tie_weights {
            0
        } else {
            t
        }
    }

    fn rec_spec(&self) -> ConvSpec {
        ConvSpec::same(self.channels(), self.channels(), self.kernel)
    }

    pub fn validate(&self) -> Result<()> {
        let expected = if self.tie_weights { 1 } else { self.t_steps.max(1) };
        if self.t_steps > 0 && (self.a_weights.len() != expected || self.b_weights.len() != expected)
        {
            return Err(Error::ShapeMismatch {
                op: "grcl",
                detail: format!(
                    "expected {expected} recurrent weight sets, found {} / {}",
                    self.a_weights.len(),
                    self.b_weights.len()
                ),
            });
        }
        if !self.a_bn.is_empty() && self.a_bn.len() != self.t_steps {
            return Err(Error::ShapeMismatch {
                op: "grcl",
                detail: format!(
                    "per-step batch-norm count {} vs T = {}",
                    self.a_bn.len(),
                    self.t_steps
                ),
            });
        }
        if self.b_bn.len() != self.a_bn.len() {
            return Err(Error::ShapeMismatch {
                op: "grcl",
                detail: "gate and update branches must agree on batch-norm usage".into(),
            });
        }
        let ch = self.channels();
        if self.c_gate.spec.out_channels != ch {
            return Err(Error::ShapeMismatch {
                op: "grcl",
                detail: format!(
                    "gate projection channels {} vs block channels {ch}",
                    self.c_gate.spec.out_channels
                ),
            });
        }
        Ok(())
    }
}

/// Cache of one step of the recursion.
#[derive(Debug, Clone)]
struct StepCache {
    a: OpCache,
    a_out: Tensor,
    b: Option<OpCache>,
    sig: Option<Tensor>,
    d_x_shape: [usize; 4],
}

/// Everything grcl_backward needs, including the updated batch-norm states
/// the trainer folds back into the parameters after the optimizer step.
#[derive(Debug, Clone)]
pub struct GrclCache {
    tie_weights: bool,
    a0: OpCache,
    c: Option<OpCache>,
    c_out: Option<Tensor>,
    steps: Vec<StepCache>,
}

/// Gradients of the block with respect to every parameter.
#[derive(Debug, Clone)]
pub struct GrclGrads {
    pub d_a0: OpGrads,
    pub d_c: OpGrads,
    pub d_a_weights: Vec<Tensor>,
    pub d_b_weights: Vec<Tensor>,
    /// (d_gamma, d_beta) per step, aligned with `a_bn` / `b_bn`.
    pub d_a_bn: Vec<(Vec<f64>, Vec<f64>)>,
    pub d_b_bn: Vec<(Vec<f64>, Vec<f64>)>,
}

fn tag_step(e: Error, t: usize) -> Error {
    match e {
        Error::ShapeMismatch { op, detail } => Error::ShapeMismatch {
            op,
            detail: format!("step {t}: {detail}"),
        },
        Error::InvalidArgument { op, detail } => Error::InvalidArgument {
            op,
            detail: format!("step {t}: {detail}"),
        },
        other => other,
    }
}

/// Forward pass of the block. `T = 0` returns `A0(u)` with no recursion.
pub fn grcl_forward(
    u: &Tensor,
    params: &GrclParams,
    gate: GateMode,
    mode: ForwardMode,
) -> Result<(Tensor, Option<GrclCache>)> {
    params.validate()?;
    let wants_cache = mode != ForwardMode::Eval;
    let (x0, a0_cache) = params.a0.forward(u, mode)?;

    // C(u) is computed once and reused for every step.
    let needs_gate = matches!(gate, GateMode::Learned | GateMode::SaturatedOpen)
        && params.t_steps > 0;
    let (c_out, c_cache) = if needs_gate {
        let (c, cc) = params.c_gate.forward(u, mode)?;
        (Some(c), cc)
    } else {
        (None, None)
    };

    let rec_spec = params.rec_spec();
    let mut x = x0;
    let mut steps = Vec::with_capacity(params.t_steps);
    for t in 0..params.t_steps {
        if gate == GateMode::SaturatedClosed {
            // multiplier forced to 0: x_t = x_{t-1} exactly; nothing to compute
            break;
        }
        let wi = params.weight_index(t);
        let (a_out, a_cache) = op_forward(
            &x,
            &params.a_weights[wi],
            None,
            &rec_spec,
            params.a_bn.get(t),
            true,
            mode,
        )
        .map_err(|e| tag_step(e, t))?;

        let (b_cache, sig) = match gate {
            GateMode::Learned => {
                let (b_out, b_cache) = op_forward(
                    &x,
                    &params.b_weights[wi],
                    None,
                    &rec_spec,
                    params.b_bn.get(t),
                    false,
                    mode,
                )
                .map_err(|e| tag_step(e, t))?;
                let g = b_out.add(c_out.as_ref().expect("gate branch present"))?;
                (b_cache, Some(sigmoid(&g)))
            }
            GateMode::SaturatedOpen => {
                // branch computed so running statistics keep moving, but the
                // squash is forced to 1 and carries no gradient
                let (b_out, b_cache) = op_forward(
                    &x,
                    &params.b_weights[wi],
                    None,
                    &rec_spec,
                    params.b_bn.get(t),
                    false,
                    mode,
                )
                .map_err(|e| tag_step(e, t))?;
                let _ = b_out;
                (b_cache, None)
            }
            GateMode::Ablated | GateMode::SaturatedClosed => (None, None),
        };

        let increment = match &sig {
            Some(s) => hadamard(s, &a_out)?,
            None => a_out.clone(), // multiplier identically 1
        };
        let x_next = x.add(&increment).map_err(|e| tag_step(e, t))?;

        if wants_cache {
            steps.push(StepCache {
                a: a_cache.expect("train cache"),
                a_out,
                b: b_cache,
                sig,
                d_x_shape: x.shape(),
            });
        }
        x = x_next;
    }

    if !wants_cache {
        return Ok((x, None));
    }
    Ok((
        x,
        Some(GrclCache {
            tie_weights: params.tie_weights,
            a0: a0_cache.expect("train cache"),
            c: c_cache,
            c_out,
            steps,
        }),
    ))
}

/// Exact reverse-mode gradients through the recursion, including the
/// sigmoid path through the gates and the C(u) contribution summed across
/// all steps.
pub fn grcl_backward(
    params: &GrclParams,
    cache: &GrclCache,
    d_xt: &Tensor,
) -> Result<(Tensor, GrclGrads)> {
    let weight_sets = params.a_weights.len();
    let mut d_a_weights: Vec<Tensor> = params
        .a_weights
        .iter()
        .map(|w| Tensor::zeros(w.shape()))
        .collect();
    let mut d_b_weights: Vec<Tensor> = params
        .b_weights
        .iter()
        .map(|w| Tensor::zeros(w.shape()))
        .collect();
    let empty_bn = |states: &[BatchNormState]| -> Vec<(Vec<f64>, Vec<f64>)> {
        states
            .iter()
            .map(|s| (vec![0.0; s.channels()], vec![0.0; s.channels()]))
            .collect()
    };
    let mut d_a_bn = empty_bn(&params.a_bn);
    let mut d_b_bn = empty_bn(&params.b_bn);

    let mut d_x = d_xt.clone();
    let mut d_c_out: Option<Tensor> = cache.c_out.as_ref().map(|c| Tensor::zeros(c.shape()));

    for (t, step) in cache.steps.iter().enumerate().rev() {
        if d_x.shape() != step.d_x_shape {
            return Err(Error::ShapeMismatch {
                op: "grcl_backward",
                detail: format!("step {t}: upstream gradient {:?}", d_x.shape()),
            });
        }
        let wi = if cache.tie_weights { 0 } else { t };
        debug_assert!(wi < weight_sets);

        // x_next = x + s * a_out (or x + a_out when the multiplier is 1)
        let (d_a_out, d_sig) = match &step.sig {
            Some(s) => {
                let d_a = hadamard(&d_x, s)?;
                let d_s = hadamard(&d_x, &step.a_out)?;
                (d_a, Some(d_s))
            }
            None => (d_x.clone(), None),
        };

        // gate branch: g = B_t(x) + C(u), s = sigmoid(g)
        if let (Some(d_s), Some(s)) = (d_sig, &step.sig) {
            let d_g = sigmoid_backward(s, &d_s)?;
            if let Some(acc) = d_c_out.as_mut() {
                let sum = acc.add(&d_g)?;
                *acc = sum;
            }
            let b_cache = step.b.as_ref().expect("learned gate cached");
            let (d_x_from_b, b_grads) = op_backward(b_cache, &d_g)?;
            d_x = d_x.add(&d_x_from_b)?;
            d_b_weights[wi] = d_b_weights[wi].add(&b_grads.d_weight)?;
            if let (Some(dg), Some(db)) = (b_grads.d_gamma, b_grads.d_beta) {
                for (acc, v) in d_b_bn[t].0.iter_mut().zip(dg) {
                    *acc += v;
                }
                for (acc, v) in d_b_bn[t].1.iter_mut().zip(db) {
                    *acc += v;
                }
            }
        }

        // update branch: a_out = relu(bn(conv(x)))
        let (d_x_from_a, a_grads) = op_backward(&step.a, &d_a_out)?;
        d_x = d_x.add(&d_x_from_a)?;
        d_a_weights[wi] = d_a_weights[wi].add(&a_grads.d_weight)?;
        if let (Some(dg), Some(db)) = (a_grads.d_gamma, a_grads.d_beta) {
            for (acc, v) in d_a_bn[t].0.iter_mut().zip(dg) {
                *acc += v;
            }
            for (acc, v) in d_a_bn[t].1.iter_mut().zip(db) {
                *acc += v;
            }
        }
    }

    // d_x now holds the gradient at x_0 = A0(u)
    let (d_u_a0, d_a0) = op_backward(&cache.a0, &d_x)?;
    let mut d_u = d_u_a0;

    let d_c = match (&cache.c, d_c_out) {
        (Some(c_cache), Some(d_c_acc)) => {
            let (d_u_c, d_c) = op_backward(c_cache, &d_c_acc)?;
            d_u = d_u.add(&d_u_c)?;
            d_c
        }
        _ => OpGrads::zeros_like(&params.c_gate),
    };

    Ok((
        d_u,
        GrclGrads {
            d_a0,
            d_c,
            d_a_weights,
            d_b_weights,
            d_a_bn,
            d_b_bn,
        },
    ))
}

/// Fold updated batch-norm running statistics from a train-mode cache back
/// into the parameter bundle. Only the running estimates move; gamma/beta
/// belong to the optimizer. Called by the trainer between steps.
pub fn apply_grcl_bn_updates(params: &mut GrclParams, cache: &GrclCache) {
    if let (Some(bn), Some(new)) = (&mut params.a0.bn, ConvBlock::bn_update_from(&cache.a0)) {
        bn.adopt_stats(new);
    }
    if let Some(c_cache) = &cache.c {
        if let (Some(bn), Some(new)) = (&mut params.c_gate.bn, ConvBlock::bn_update_from(c_cache))
        {
            bn.adopt_stats(new);
        }
    }
    for (t, step) in cache.steps.iter().enumerate() {
        if let BnCache::Batch(_, new) = &step.a.bn {
            if let Some(slot) = params.a_bn.get_mut(t) {
                slot.adopt_stats(new);
            }
        }
        if let Some(b) = &step.b {
            if let BnCache::Batch(_, new) = &b.bn {
                if let Some(slot) = params.b_bn.get_mut(t) {
                    slot.adopt_stats(new);
                }
            }
        }
    }
}
