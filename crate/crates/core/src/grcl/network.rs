//! Full network assembly: two stem convolutions, four gated recurrent
//! blocks with inter-block transitions, global average pooling, and a
//! linear readout.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::grcl::block::{
    apply_grcl_bn_updates, grcl_backward, grcl_forward, ConvBlock, ForwardMode, GateMode,
    GrclCache, GrclParams, OpCache, OpGrads,
};
use crate::kernels::batchnorm::{BatchNormState, Phase};
use crate::kernels::conv::ConvSpec;
use crate::kernels::dense::{global_avg_pool, global_avg_pool_backward, linear, linear_backward};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Architecture of one recurrent block slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub channels: usize,
    pub downsample: bool,
    pub t_steps: usize,
    pub tie_weights: bool,
}

/// Network architecture description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrcnnConfig {
    pub input_channels: usize,
    pub class_count: usize,
    /// Output channels of the two stem convolutions (3x3 stride 1, then
    /// 3x3 stride 2).
    pub stem: [usize; 2],
    pub blocks: Vec<BlockSpec>,
    pub kernel: (usize, usize),
}

impl GrcnnConfig {
    /// Full-size preset: four blocks at T = 3 with ResNet-style widths.
    pub fn paper() -> Self {
        GrcnnConfig {
            input_channels: 3,
            class_count: 1000,
            stem: [64, 64],
            blocks: [(64, false), (128, true), (256, true), (512, true)]
                .into_iter()
                .map(|(channels, downsample)| BlockSpec {
                    channels,
                    downsample,
                    t_steps: 3,
                    tie_weights: true,
                })
                .collect(),
            kernel: (3, 3),
        }
    }

    /// Desk-scale preset with reduced channels, sized for 32x32 inputs and
    /// CPU training.
    pub fn tiny() -> Self {
        GrcnnConfig {
            input_channels: 3,
            class_count: 10,
            stem: [8, 8],
            blocks: [(8, false), (16, true), (32, true), (32, true)]
                .into_iter()
                .map(|(channels, downsample)| BlockSpec {
                    channels,
                    downsample,
                    t_steps: 2,
                    tie_weights: true,
                })
                .collect(),
            kernel: (3, 3),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("network needs at least one block".into()));
        }
        if self.class_count == 0 {
            return Err(Error::Config("class count must be positive".into()));
        }
        Ok(())
    }

    /// Canonical digest string; configs with different digests are not
    /// checkpoint-compatible.
    pub fn digest(&self) -> String {
        let blocks: Vec<String> = self
            .blocks
            .iter()
            .map(|b| {
                format!(
                    "{}x{}t{}tie{}",
                    b.channels, b.downsample as u8, b.t_steps, b.tie_weights as u8
                )
            })
            .collect();
        format!(
            "in{}k{}-{}stem{}x{}blocks[{}]classes{}",
            self.input_channels,
            self.kernel.0,
            self.kernel.1,
            self.stem[0],
            self.stem[1],
            blocks.join(","),
            self.class_count
        )
    }
}

/// The assembled network. Parameters are enumerated in a fixed canonical
/// order; `frozen_groups` marks parameter groups the optimizer must not
/// touch.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: GrcnnConfig,
    pub gate_mode: GateMode,
    pub stem: Vec<ConvBlock>,
    pub transitions: Vec<Option<ConvBlock>>,
    pub blocks: Vec<GrclParams>,
    pub readout_weight: Tensor,
    pub readout_bias: Vec<f64>,
    frozen_groups: BTreeSet<String>,
}

fn he_conv(shape: [usize; 4], rng: &mut Rng) -> Tensor {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    let std = (2.0 / fan_in).sqrt();
    Tensor::from_fn(shape, || rng.normal() * std)
}

fn conv_bn_relu(
    in_c: usize,
    out_c: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    relu: bool,
    rng: &mut Rng,
) -> ConvBlock {
    ConvBlock {
        spec: ConvSpec::new(
            in_c,
            out_c,
            kernel,
            stride,
            (kernel.0 / 2, kernel.1 / 2),
        ),
        weight: he_conv([out_c, in_c, kernel.0, kernel.1], rng),
        bias: None,
        bn: Some(BatchNormState::new(out_c)),
        relu,
    }
}

/// Deterministic network construction: He fan-in initialization for conv
/// weights, gamma 1 / beta 0 batch norms (so fresh gates sit near
/// sigmoid(0) = 0.5), zero-initialized readout bias.
pub fn build_grcnn(config: &GrcnnConfig, rng: &mut Rng) -> Result<Network> {
    config.validate()?;
    let k = config.kernel;
    let stem = vec![
        conv_bn_relu(config.input_channels, config.stem[0], k, (1, 1), true, rng),
        conv_bn_relu(config.stem[0], config.stem[1], k, (2, 2), true, rng),
    ];

    let mut transitions = Vec::with_capacity(config.blocks.len());
    let mut blocks = Vec::with_capacity(config.blocks.len());
    let mut in_c = config.stem[1];
    for spec in &config.blocks {
        let transition = if spec.downsample || in_c != spec.channels {
            let stride = if spec.downsample { (2, 2) } else { (1, 1) };
            let t = conv_bn_relu(in_c, spec.channels, (1, 1), stride, true, rng);
            in_c = spec.channels;
            Some(t)
        } else {
            None
        };
        transitions.push(transition);

        let ch = spec.channels;
        let sets = if spec.tie_weights { 1 } else { spec.t_steps.max(1) };
        let block = GrclParams {
            t_steps: spec.t_steps,
            tie_weights: spec.tie_weights,
            kernel: k,
            a0: conv_bn_relu(in_c, ch, k, (1, 1), true, rng),
            c_gate: conv_bn_relu(in_c, ch, k, (1, 1), false, rng),
            a_weights: (0..sets)
                .map(|_| he_conv([ch, ch, k.0, k.1], rng))
                .collect(),
            b_weights: (0..sets)
                .map(|_| he_conv([ch, ch, k.0, k.1], rng))
                .collect(),
            a_bn: (0..spec.t_steps).map(|_| BatchNormState::new(ch)).collect(),
            b_bn: (0..spec.t_steps).map(|_| BatchNormState::new(ch)).collect(),
        };
        block.validate()?;
        blocks.push(block);
        in_c = ch;
    }

    let d = in_c;
    let kk = config.class_count;
    let std = (2.0 / d as f64).sqrt();
    let readout_weight = Tensor::from_fn([kk, d, 1, 1], || rng.normal() * std);

    Ok(Network {
        config: config.clone(),
        gate_mode: GateMode::Learned,
        stem,
        transitions,
        blocks,
        readout_weight,
        readout_bias: vec![0.0; kk],
        frozen_groups: BTreeSet::new(),
    })
}

/// One named parameter group per architectural unit; the unit of freezing.
fn group_of(param_name: &str) -> &str {
    param_name.split('.').next().unwrap_or(param_name)
}

/// Forward-pass cache for the whole network.
pub struct NetCache {
    stem: Vec<OpCache>,
    transitions: Vec<Option<OpCache>>,
    blocks: Vec<GrclCache>,
    pool_input_shape: [usize; 4],
    pooled: Tensor,
}

/// Parameter gradients in canonical order, name included for alignment
/// checks and error reporting.
pub struct Gradients {
    pub entries: Vec<(String, Vec<f64>)>,
}

impl Network {
    /// Group names in canonical order.
    pub fn group_names(&self) -> Vec<String> {
        let mut names = vec!["stem1".to_string(), "stem2".to_string()];
        for i in 0..self.blocks.len() {
            if self.transitions[i].is_some() {
                names.push(format!("trans{}", i + 1));
            }
            names.push(format!("grcl{}", i + 1));
        }
        names.push("readout".to_string());
        names
    }

    /// Restrict training to the given groups; everything else is frozen.
    /// Passing every group name is equivalent to no freezing.
    pub fn freeze_all_except(&mut self, trainable: &[&str]) -> Result<()> {
        let known = self.group_names();
        for t in trainable {
            if !known.iter().any(|k| k == t) {
                return Err(Error::Config(format!(
                    "unknown parameter group '{t}' (known: {})",
                    known.join(", ")
                )));
            }
        }
        self.frozen_groups = known
            .into_iter()
            .filter(|g| !trainable.contains(&g.as_str()))
            .collect();
        Ok(())
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen_groups.clear();
    }

    pub fn is_group_frozen(&self, group: &str) -> bool {
        self.frozen_groups.contains(group)
    }

    pub fn is_param_frozen(&self, param_name: &str) -> bool {
        self.frozen_groups.contains(group_of(param_name))
    }

    pub fn frozen_groups(&self) -> &BTreeSet<String> {
        &self.frozen_groups
    }

    /// Visit every trainable parameter in canonical order.
    pub fn for_each_param(&self, f: &mut dyn FnMut(&str, &[f64])) {
        let visit_conv_block = |name: &str, b: &ConvBlock, f: &mut dyn FnMut(&str, &[f64])| {
            f(&format!("{name}.conv.weight"), b.weight.data());
            if let Some(bias) = &b.bias {
                f(&format!("{name}.conv.bias"), bias);
            }
            if let Some(bn) = &b.bn {
                f(&format!("{name}.bn.gamma"), &bn.gamma);
                f(&format!("{name}.bn.beta"), &bn.beta);
            }
        };
        visit_conv_block("stem1", &self.stem[0], f);
        visit_conv_block("stem2", &self.stem[1], f);
        for (i, block) in self.blocks.iter().enumerate() {
            let bi = i + 1;
            if let Some(t) = &self.transitions[i] {
                visit_conv_block(&format!("trans{bi}"), t, f);
            }
            visit_conv_block(&format!("grcl{bi}.a0"), &block.a0, f);
            visit_conv_block(&format!("grcl{bi}.c"), &block.c_gate, f);
            for (j, w) in block.a_weights.iter().enumerate() {
                f(&format!("grcl{bi}.a.conv{j}.weight"), w.data());
            }
            for (t, bn) in block.a_bn.iter().enumerate() {
                f(&format!("grcl{bi}.a.bn{t}.gamma"), &bn.gamma);
                f(&format!("grcl{bi}.a.bn{t}.beta"), &bn.beta);
            }
            for (j, w) in block.b_weights.iter().enumerate() {
                f(&format!("grcl{bi}.b.conv{j}.weight"), w.data());
            }
            for (t, bn) in block.b_bn.iter().enumerate() {
                f(&format!("grcl{bi}.b.bn{t}.gamma"), &bn.gamma);
                f(&format!("grcl{bi}.b.bn{t}.beta"), &bn.beta);
            }
        }
        f("readout.weight", self.readout_weight.data());
        f("readout.bias", &self.readout_bias);
    }

    /// Mutable visit, same canonical order as [`Network::for_each_param`].
    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        fn visit_conv_block(name: &str, b: &mut ConvBlock, f: &mut dyn FnMut(&str, &mut [f64])) {
            f(&format!("{name}.conv.weight"), b.weight.data_mut());
            if let Some(bias) = &mut b.bias {
                f(&format!("{name}.conv.bias"), bias);
            }
            if let Some(bn) = &mut b.bn {
                f(&format!("{name}.bn.gamma"), &mut bn.gamma);
                f(&format!("{name}.bn.beta"), &mut bn.beta);
            }
        }
        visit_conv_block("stem1", &mut self.stem[0], f);
        visit_conv_block("stem2", &mut self.stem[1], f);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let bi = i + 1;
            if let Some(t) = &mut self.transitions[i] {
                visit_conv_block(&format!("trans{bi}"), t, f);
            }
            visit_conv_block(&format!("grcl{bi}.a0"), &mut block.a0, f);
            visit_conv_block(&format!("grcl{bi}.c"), &mut block.c_gate, f);
            for (j, w) in block.a_weights.iter_mut().enumerate() {
                f(&format!("grcl{bi}.a.conv{j}.weight"), w.data_mut());
            }
            for (t, bn) in block.a_bn.iter_mut().enumerate() {
                f(&format!("grcl{bi}.a.bn{t}.gamma"), &mut bn.gamma);
                f(&format!("grcl{bi}.a.bn{t}.beta"), &mut bn.beta);
            }
            for (j, w) in block.b_weights.iter_mut().enumerate() {
                f(&format!("grcl{bi}.b.conv{j}.weight"), w.data_mut());
            }
            for (t, bn) in block.b_bn.iter_mut().enumerate() {
                f(&format!("grcl{bi}.b.bn{t}.gamma"), &mut bn.gamma);
                f(&format!("grcl{bi}.b.bn{t}.beta"), &mut bn.beta);
            }
        }
        f("readout.weight", self.readout_weight.data_mut());
        f("readout.bias", &mut self.readout_bias);
    }

    /// Visit batch-norm running statistics (not optimizer parameters, but
    /// checkpointed alongside them).
    pub fn for_each_stat(&self, f: &mut dyn FnMut(&str, &[f64])) {
        let visit = |name: &str, bn: &Option<BatchNormState>, f: &mut dyn FnMut(&str, &[f64])| {
            if let Some(bn) = bn {
                f(&format!("{name}.bn.running_mean"), &bn.running_mean);
                f(&format!("{name}.bn.running_var"), &bn.running_var);
            }
        };
        visit("stem1", &self.stem[0].bn, f);
        visit("stem2", &self.stem[1].bn, f);
        for (i, block) in self.blocks.iter().enumerate() {
            let bi = i + 1;
            if let Some(t) = &self.transitions[i] {
                visit(&format!("trans{bi}"), &t.bn, f);
            }
            visit(&format!("grcl{bi}.a0"), &block.a0.bn, f);
            visit(&format!("grcl{bi}.c"), &block.c_gate.bn, f);
            for (t, bn) in block.a_bn.iter().enumerate() {
                f(&format!("grcl{bi}.a.bn{t}.running_mean"), &bn.running_mean);
                f(&format!("grcl{bi}.a.bn{t}.running_var"), &bn.running_var);
            }
            for (t, bn) in block.b_bn.iter().enumerate() {
                f(&format!("grcl{bi}.b.bn{t}.running_mean"), &bn.running_mean);
                f(&format!("grcl{bi}.b.bn{t}.running_var"), &bn.running_var);
            }
        }
    }

    pub fn for_each_stat_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        fn visit(name: &str, bn: &mut Option<BatchNormState>, f: &mut dyn FnMut(&str, &mut [f64])) {
            if let Some(bn) = bn {
                f(&format!("{name}.bn.running_mean"), &mut bn.running_mean);
                f(&format!("{name}.bn.running_var"), &mut bn.running_var);
            }
        }
        visit("stem1", &mut self.stem[0].bn, f);
        visit("stem2", &mut self.stem[1].bn, f);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let bi = i + 1;
            if let Some(t) = &mut self.transitions[i] {
                visit(&format!("trans{bi}"), &mut t.bn, f);
            }
            visit(&format!("grcl{bi}.a0"), &mut block.a0.bn, f);
            visit(&format!("grcl{bi}.c"), &mut block.c_gate.bn, f);
            for (t, bn) in block.a_bn.iter_mut().enumerate() {
                f(&format!("grcl{bi}.a.bn{t}.running_mean"), &mut bn.running_mean);
                f(&format!("grcl{bi}.a.bn{t}.running_var"), &mut bn.running_var);
            }
            for (t, bn) in block.b_bn.iter_mut().enumerate() {
                f(&format!("grcl{bi}.b.bn{t}.running_mean"), &mut bn.running_mean);
                f(&format!("grcl{bi}.b.bn{t}.running_var"), &mut bn.running_var);
            }
        }
    }

    /// Export parameters as (name, shape, data) records in canonical order.
    /// Conv and readout weights keep their 4-D shapes; per-channel vectors
    /// export as rank 1.
    pub fn export_params(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut shapes: std::collections::BTreeMap<String, Vec<usize>> =
            std::collections::BTreeMap::new();
        fn record_conv(
            shapes: &mut std::collections::BTreeMap<String, Vec<usize>>,
            name: &str,
            b: &ConvBlock,
        ) {
            shapes.insert(format!("{name}.conv.weight"), b.weight.shape().to_vec());
        }
        record_conv(&mut shapes, "stem1", &self.stem[0]);
        record_conv(&mut shapes, "stem2", &self.stem[1]);
        for (i, block) in self.blocks.iter().enumerate() {
            let bi = i + 1;
            if let Some(t) = &self.transitions[i] {
                record_conv(&mut shapes, &format!("trans{bi}"), t);
            }
            record_conv(&mut shapes, &format!("grcl{bi}.a0"), &block.a0);
            record_conv(&mut shapes, &format!("grcl{bi}.c"), &block.c_gate);
            for (j, w) in block.a_weights.iter().enumerate() {
                shapes.insert(format!("grcl{bi}.a.conv{j}.weight"), w.shape().to_vec());
            }
            for (j, w) in block.b_weights.iter().enumerate() {
                shapes.insert(format!("grcl{bi}.b.conv{j}.weight"), w.shape().to_vec());
            }
        }
        shapes.insert(
            "readout.weight".into(),
            self.readout_weight.shape().to_vec(),
        );

        let mut records = Vec::new();
        self.for_each_param(&mut |name, data| {
            let dims = shapes
                .get(name)
                .cloned()
                .unwrap_or_else(|| vec![data.len()]);
            records.push((name.to_string(), dims, data.to_vec()));
        });
        records
    }

    /// Export batch-norm running statistics as rank-1 records.
    pub fn export_stats(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut records = Vec::new();
        self.for_each_stat(&mut |name, data| {
            records.push((name.to_string(), vec![data.len()], data.to_vec()));
        });
        records
    }

    /// Overwrite parameters from records. The record list must name every
    /// parameter in canonical order with matching shapes; validation happens
    /// before any write, so a mismatch leaves the network untouched.
    pub fn import_params(&mut self, records: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        let current = self.export_params();
        if current.len() != records.len() {
            return Err(Error::CheckpointShape(format!(
                "parameter count {} vs expected {}",
                records.len(),
                current.len()
            )));
        }
        for ((name, dims, data), (want_name, want_dims, want_data)) in
            records.iter().zip(&current)
        {
            if name != want_name {
                return Err(Error::CheckpointShape(format!(
                    "parameter order mismatch: found '{name}', expected '{want_name}'"
                )));
            }
            if dims != want_dims || data.len() != want_data.len() {
                return Err(Error::CheckpointShape(format!(
                    "{name}: shape {dims:?} vs expected {want_dims:?}"
                )));
            }
        }
        let mut idx = 0usize;
        self.for_each_param_mut(&mut |_, data| {
            data.copy_from_slice(&records[idx].2);
            idx += 1;
        });
        Ok(())
    }

    /// Overwrite running statistics from records; same contract as
    /// [`Network::import_params`].
    pub fn import_stats(&mut self, records: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        let current = self.export_stats();
        if current.len() != records.len() {
            return Err(Error::CheckpointShape(format!(
                "stat count {} vs expected {}",
                records.len(),
                current.len()
            )));
        }
        for ((name, _, data), (want_name, _, want_data)) in records.iter().zip(&current) {
            if name != want_name || data.len() != want_data.len() {
                return Err(Error::CheckpointShape(format!(
                    "stat record '{name}' does not match expected '{want_name}'"
                )));
            }
        }
        let mut idx = 0usize;
        self.for_each_stat_mut(&mut |_, data| {
            data.copy_from_slice(&records[idx].2);
            idx += 1;
        });
        Ok(())
    }

    /// Snapshot of every parameter, for diff reports and freeze checks.
    pub fn param_snapshot(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        self.for_each_param(&mut |name, data| out.push((name.to_string(), data.to_vec())));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut count = 0;
        self.for_each_param(&mut |_, data| count += data.len());
        count
    }

    fn mode_for(&self, group: &str, phase: Phase) -> ForwardMode {
        match phase {
            Phase::Eval => ForwardMode::Eval,
            Phase::Train => {
                if self.is_group_frozen(group) {
                    ForwardMode::TrainFrozen
                } else {
                    ForwardMode::Train
                }
            }
        }
    }

    /// Forward pass: stem, blocks with transitions, pool, readout.
    /// A cache is returned in the train phase only.
    pub fn forward(&self, batch: &Tensor, phase: Phase) -> Result<(Tensor, Option<NetCache>)> {
        let wants_cache = phase == Phase::Train;
        let mut stem_caches = Vec::new();
        let mut x = batch.clone();
        for (i, s) in self.stem.iter().enumerate() {
            let mode = self.mode_for(&format!("stem{}", i + 1), phase);
            let (out, cache) = s.forward(&x, mode)?;
            x = out;
            if let Some(c) = cache {
                stem_caches.push(c);
            }
        }

        let mut transition_caches = Vec::new();
        let mut block_caches = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let bi = i + 1;
            let t_cache = match &self.transitions[i] {
                Some(t) => {
                    let mode = self.mode_for(&format!("trans{bi}"), phase);
                    let (out, cache) = t.forward(&x, mode)?;
                    x = out;
                    cache
                }
                None => None,
            };
            transition_caches.push(t_cache);
            let mode = self.mode_for(&format!("grcl{bi}"), phase);
            let (out, cache) = grcl_forward(&x, block, self.gate_mode, mode)?;
            x = out;
            if let Some(c) = cache {
                block_caches.push(c);
            }
        }

        let pool_input_shape = x.shape();
        let pooled = global_avg_pool(&x)?;
        let logits = linear(&pooled, &self.readout_weight, &self.readout_bias)?;

        if !wants_cache {
            return Ok((logits, None));
        }
        Ok((
            logits,
            Some(NetCache {
                stem: stem_caches,
                transitions: transition_caches,
                blocks: block_caches,
                pool_input_shape,
                pooled,
            }),
        ))
    }

    /// Backward pass; returns parameter gradients in canonical order.
    pub fn backward(&self, cache: &NetCache, d_logits: &Tensor) -> Result<Gradients> {
        let (d_pooled, d_readout_w, d_readout_b) =
            linear_backward(&cache.pooled, &self.readout_weight, d_logits)?;
        let mut d_x = global_avg_pool_backward(cache.pool_input_shape, &d_pooled)?;

        let mut block_grads = Vec::with_capacity(self.blocks.len());
        let mut transition_grads: Vec<Option<OpGrads>> = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let (d_in, grads) = grcl_backward(block, &cache.blocks[i], &d_x)?;
            d_x = d_in;
            block_grads.push(grads);
            let t_grad = match &cache.transitions[i] {
                Some(t_cache) => {
                    let (d_in, grads) = crate::grcl::block::op_backward(t_cache, &d_x)?;
                    d_x = d_in;
                    Some(grads)
                }
                None => None,
            };
            transition_grads.push(t_grad);
        }
        block_grads.reverse();
        transition_grads.reverse();

        let mut stem_grads = Vec::with_capacity(2);
        for cache_i in cache.stem.iter().rev() {
            let (d_in, grads) = crate::grcl::block::op_backward(cache_i, &d_x)?;
            d_x = d_in;
            stem_grads.push(grads);
        }
        stem_grads.reverse();

        // flatten in the same canonical order as for_each_param
        let mut entries: Vec<(String, Vec<f64>)> = Vec::new();
        let push_conv_block =
            |name: &str, b: &ConvBlock, g: &OpGrads, entries: &mut Vec<(String, Vec<f64>)>| {
                entries.push((format!("{name}.conv.weight"), g.d_weight.data().to_vec()));
                if b.bias.is_some() {
                    entries.push((
                        format!("{name}.conv.bias"),
                        g.d_bias.clone().unwrap_or_default(),
                    ));
                }
                if let Some(bn) = &b.bn {
                    // frozen-mode backward produces no bn parameter grads
                    let ch = bn.channels();
                    entries.push((
                        format!("{name}.bn.gamma"),
                        g.d_gamma.clone().unwrap_or_else(|| vec![0.0; ch]),
                    ));
                    entries.push((
                        format!("{name}.bn.beta"),
                        g.d_beta.clone().unwrap_or_else(|| vec![0.0; ch]),
                    ));
                }
            };
        push_conv_block("stem1", &self.stem[0], &stem_grads[0], &mut entries);
        push_conv_block("stem2", &self.stem[1], &stem_grads[1], &mut entries);
        for (i, block) in self.blocks.iter().enumerate() {
            let bi = i + 1;
            if let (Some(t), Some(g)) = (&self.transitions[i], &transition_grads[i]) {
                push_conv_block(&format!("trans{bi}"), t, g, &mut entries);
            }
            let g = &block_grads[i];
            push_conv_block(&format!("grcl{bi}.a0"), &block.a0, &g.d_a0, &mut entries);
            push_conv_block(&format!("grcl{bi}.c"), &block.c_gate, &g.d_c, &mut entries);
            for (j, w) in g.d_a_weights.iter().enumerate() {
                entries.push((format!("grcl{bi}.a.conv{j}.weight"), w.data().to_vec()));
            }
            for (t, (dg, db)) in g.d_a_bn.iter().enumerate() {
                entries.push((format!("grcl{bi}.a.bn{t}.gamma"), dg.clone()));
                entries.push((format!("grcl{bi}.a.bn{t}.beta"), db.clone()));
            }
            for (j, w) in g.d_b_weights.iter().enumerate() {
                entries.push((format!("grcl{bi}.b.conv{j}.weight"), w.data().to_vec()));
            }
            for (t, (dg, db)) in g.d_b_bn.iter().enumerate() {
                entries.push((format!("grcl{bi}.b.bn{t}.gamma"), dg.clone()));
                entries.push((format!("grcl{bi}.b.bn{t}.beta"), db.clone()));
            }
        }
        entries.push(("readout.weight".to_string(), d_readout_w.data().to_vec()));
        entries.push(("readout.bias".to_string(), d_readout_b));

        Ok(Gradients { entries })
    }

    /// Fold updated batch-norm running statistics from a train-mode cache
    /// into the network. Single-writer: called by the trainer between steps.
    pub fn apply_bn_updates(&mut self, cache: &NetCache) {
        for (s, c) in self.stem.iter_mut().zip(&cache.stem) {
            if let (Some(bn), Some(new)) = (&mut s.bn, ConvBlock::bn_update_from(c)) {
                bn.adopt_stats(new);
            }
        }
        for (i, block) in self.blocks.iter_mut().enumerate() {
            if let (Some(t), Some(c)) = (&mut self.transitions[i], &cache.transitions[i]) {
                if let (Some(bn), Some(new)) = (&mut t.bn, ConvBlock::bn_update_from(c)) {
                    bn.adopt_stats(new);
                }
            }
            apply_grcl_bn_updates(block, &cache.blocks[i]);
        }
    }
}

/// Convenience free function mirroring the operation-level naming.
pub fn network_forward(net: &Network, batch: &Tensor, phase: Phase) -> Result<(Tensor, Option<NetCache>)> {
    net.forward(batch, phase)
}

pub fn network_backward(net: &Network, cache: &NetCache, d_logits: &Tensor) -> Result<Gradients> {
    net.backward(cache, d_logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::gradcheck::relative_error;

    fn micro_config() -> GrcnnConfig {
        GrcnnConfig {
            input_channels: 2,
            class_count: 3,
            stem: [3, 4],
            blocks: vec![
                BlockSpec {
                    channels: 4,
                    downsample: false,
                    t_steps: 2,
                    tie_weights: true,
                },
                BlockSpec {
                    channels: 6,
                    downsample: true,
                    t_steps: 1,
                    tie_weights: false,
                },
            ],
            kernel: (3, 3),
        }
    }

    #[test]
    fn paper_preset_has_four_blocks_at_t3() {
        let mut rng = Rng::seed_from_u64(50);
        let net = build_grcnn(&GrcnnConfig::paper(), &mut rng).unwrap();
        assert_eq!(net.blocks.len(), 4);
        for b in &net.blocks {
            assert_eq!(b.t_steps, 3);
        }
        assert_eq!(net.config.class_count, 1000);
    }

    #[test]
    fn same_seed_builds_bitwise_identical_networks() {
        let a = build_grcnn(&GrcnnConfig::tiny(), &mut Rng::seed_from_u64(7)).unwrap();
        let b = build_grcnn(&GrcnnConfig::tiny(), &mut Rng::seed_from_u64(7)).unwrap();
        let mut pa = Vec::new();
        a.for_each_param(&mut |n, d| pa.push((n.to_string(), d.to_vec())));
        let mut pb = Vec::new();
        b.for_each_param(&mut |n, d| pb.push((n.to_string(), d.to_vec())));
        assert_eq!(pa, pb);
        let c = build_grcnn(&GrcnnConfig::tiny(), &mut Rng::seed_from_u64(8)).unwrap();
        let mut pc = Vec::new();
        c.for_each_param(&mut |n, d| pc.push((n.to_string(), d.to_vec())));
        assert_ne!(pa, pc);
    }

    #[test]
    fn tiny_preset_produces_k_logits_on_32x32() {
        let mut rng = Rng::seed_from_u64(51);
        let net = build_grcnn(&GrcnnConfig::tiny(), &mut rng).unwrap();
        let batch = Tensor::from_fn([2, 3, 32, 32], || rng.uniform(0.0, 1.0));
        let (logits, cache) = net.forward(&batch, Phase::Train).unwrap();
        assert_eq!(logits.shape(), [2, 10, 1, 1]);
        assert!(cache.is_some());
        logits.check_finite("tiny forward").unwrap();
    }

    #[test]
    fn paper_preset_forward_produces_class_logits() {
        let mut rng = Rng::seed_from_u64(59);
        let net = build_grcnn(&GrcnnConfig::paper(), &mut rng).unwrap();
        let batch = Tensor::from_fn([1, 3, 32, 32], || rng.uniform(0.0, 1.0));
        let (logits, _) = net.forward(&batch, Phase::Eval).unwrap();
        assert_eq!(logits.shape(), [1, 1000, 1, 1]);
        logits.check_finite("paper forward").unwrap();
    }

    #[test]
    fn zero_readout_gives_zero_logits() {
        let mut rng = Rng::seed_from_u64(52);
        let mut net = build_grcnn(&micro_config(), &mut rng).unwrap();
        net.readout_weight = Tensor::zeros(net.readout_weight.shape());
        net.readout_bias.iter_mut().for_each(|b| *b = 0.0);
        let batch = Tensor::from_fn([1, 2, 8, 8], || rng.uniform(0.0, 1.0));
        let (logits, _) = net.forward(&batch, Phase::Eval).unwrap();
        assert!(logits.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn eval_phase_is_deterministic_and_stat_preserving() {
        let mut rng = Rng::seed_from_u64(53);
        let net = build_grcnn(&micro_config(), &mut rng).unwrap();
        let batch = Tensor::from_fn([2, 2, 8, 8], || rng.uniform(0.0, 1.0));
        let (a, cache_a) = net.forward(&batch, Phase::Eval).unwrap();
        let (b, _) = net.forward(&batch, Phase::Eval).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(cache_a.is_none());
    }

    #[test]
    fn gradient_entries_align_with_param_visit_order() {
        let mut rng = Rng::seed_from_u64(54);
        let net = build_grcnn(&micro_config(), &mut rng).unwrap();
        let batch = Tensor::from_fn([2, 2, 8, 8], || rng.uniform(0.0, 1.0));
        let (logits, cache) = net.forward(&batch, Phase::Train).unwrap();
        let d = Tensor::filled(logits.shape(), 0.1);
        let grads = net.backward(&cache.unwrap(), &d).unwrap();
        let mut names = Vec::new();
        let mut lens = Vec::new();
        net.for_each_param(&mut |n, d| {
            names.push(n.to_string());
            lens.push(d.len());
        });
        assert_eq!(grads.entries.len(), names.len());
        for ((gn, gd), (n, l)) in grads.entries.iter().zip(names.iter().zip(&lens)) {
            assert_eq!(gn, n);
            assert_eq!(gd.len(), *l);
        }
    }

    #[test]
    fn full_network_gradient_check_on_sampled_coordinates() {
        let mut rng = Rng::seed_from_u64(55);
        let net = build_grcnn(&micro_config(), &mut rng).unwrap();
        let batch = Tensor::from_fn([2, 2, 8, 8], || rng.uniform(0.0, 1.0));
        let probe: Vec<f64> = (0..2 * 3).map(|_| rng.uniform(-1.0, 1.0)).collect();

        let loss = |n: &Network| -> f64 {
            let (logits, _) = n.forward(&batch, Phase::Train).unwrap();
            logits.data().iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let (logits, cache) = net.forward(&batch, Phase::Train).unwrap();
        let d = Tensor::from_vec(logits.shape(), probe.clone()).unwrap();
        let grads = net.backward(&cache.unwrap(), &d).unwrap();

        // sample a handful of coordinates per parameter group
        let mut worst: f64 = 0.0;
        let mut coord_rng = Rng::seed_from_u64(99);
        for (gi, (name, grad)) in grads.entries.iter().enumerate() {
            for _ in 0..3.min(grad.len()) {
                let ci = coord_rng.below(grad.len());
                let eps = 1e-4;
                let mut plus = net.clone();
                let mut minus = net.clone();
                let mut k = 0;
                plus.for_each_param_mut(&mut |_, data| {
                    if k == gi {
                        data[ci] += eps;
                    }
                    k += 1;
                });
                k = 0;
                minus.for_each_param_mut(&mut |_, data| {
                    if k == gi {
                        data[ci] -= eps;
                    }
                    k += 1;
                });
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
                let err = relative_error(grad[ci], fd);
                assert!(err < 1e-4, "{name}[{ci}]: analytic {} fd {fd} err {err}", grad[ci]);
                worst = worst.max(err);
            }
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn freeze_validates_group_names() {
        let mut rng = Rng::seed_from_u64(57);
        let mut net = build_grcnn(&micro_config(), &mut rng).unwrap();
        assert!(net.freeze_all_except(&["grcl1"]).is_ok());
        assert!(net.is_group_frozen("stem1"));
        assert!(!net.is_group_frozen("grcl1"));
        assert!(net.freeze_all_except(&["nope"]).is_err());
    }

    #[test]
    fn freeze_all_groups_trainable_equals_unfrozen() {
        let mut rng = Rng::seed_from_u64(58);
        let mut net = build_grcnn(&micro_config(), &mut rng).unwrap();
        let groups = net.group_names();
        let refs: Vec<&str> = groups.iter().map(|s| s.as_str()).collect();
        net.freeze_all_except(&refs).unwrap();
        assert!(net.frozen_groups().is_empty());
    }

    #[test]
    fn config_digest_distinguishes_architectures() {
        assert_ne!(GrcnnConfig::paper().digest(), GrcnnConfig::tiny().digest());
        assert_eq!(GrcnnConfig::tiny().digest(), GrcnnConfig::tiny().digest());
    }
}
