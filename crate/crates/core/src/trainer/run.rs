//! The optimization loop: per-epoch training with staged augmentation,
//! evaluation, fine-tuning stages, checkpoint cadence, and a divergence
//! guard. Given (seed, config, initial checkpoint) the whole trajectory is
//! bitwise deterministic.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::augment::augmix::{augmix, AugmixConfig};
use crate::augment::cutmix::cutmix;
use crate::augment::phase::blend;
use crate::error::{Error, Result};
use crate::grcl::network::{Gradients, Network};
use crate::kernels::batchnorm::Phase;
use crate::kernels::dense::softmax_cross_entropy;
use crate::objectives::{total_loss, LossWeights, ReferenceDistribution, SuperclassMap, SuperclassTarget};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::trainer::checkpoint::Checkpoint;
use crate::trainer::data::Dataset;
use crate::trainer::optim::{OptimizerState, SgdHyper};

/// Training stage. The fine-tuning stages freeze everything except one
/// recurrent block and blend overlays into the inputs: stage one draws from
/// both texture and noise pools, stage two from textures only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    FinetuneV1,
    FinetuneV2,
}

impl Stage {
    pub fn parse(name: &str) -> Result<Stage> {
        match name {
            "pretrain" => Ok(Stage::Pretrain),
            "v1" | "finetune_v1" => Ok(Stage::FinetuneV1),
            "v2" | "finetune_v2" => Ok(Stage::FinetuneV2),
            other => Err(Error::Config(format!("unknown stage '{other}'"))),
        }
    }

    /// Parameter group trained by this stage; None trains everything.
    pub fn trainable_group(self) -> Option<&'static str> {
        match self {
            Stage::Pretrain => None,
            Stage::FinetuneV1 => Some("grcl1"),
            Stage::FinetuneV2 => Some("grcl2"),
        }
    }
}

/// Overlay pools for the fine-tuning stages (grayscale, any size; overlays
/// tile over the image when smaller).
#[derive(Debug, Clone, Default)]
pub struct OverlayPools {
    pub textures: Vec<Tensor>,
    pub noise: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub hyper: SgdHyper,
    /// Multiply lr by `lr_decay` after `lr_decay_epoch` epochs (1-based).
    pub lr_decay_epoch: Option<usize>,
    pub lr_decay: f64,
    pub loss_weights: LossWeights,
    pub cutmix: bool,
    /// Per-batch application probability when CutMix is enabled.
    pub cutmix_prob: f64,
    pub augmix: bool,
    pub augmix_cfg: AugmixConfig,
    pub stage: Stage,
    /// Per-sample overlay blending probability in fine-tuning stages.
    pub p_blend: f64,
    /// Blend strength draws uniformly from this range.
    pub blend_alpha: (f64, f64),
    /// Abort when the batch loss exceeds this bound or leaves the finite
    /// range.
    pub divergence_limit: f64,
    /// Save a checkpoint every n epochs (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            hyper: SgdHyper::default(),
            lr_decay_epoch: Some(20),
            lr_decay: 0.1,
            loss_weights: LossWeights {
                w_main: 1.0,
                w_js: 12.0,
                w_super: 0.5,
            },
            cutmix: false,
            cutmix_prob: 0.5,
            augmix: false,
            augmix_cfg: AugmixConfig::default(),
            stage: Stage::Pretrain,
            p_blend: 0.5,
            blend_alpha: (0.2, 0.6),
            divergence_limit: 1e4,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, data_len: usize, pools: Option<&OverlayPools>) -> Result<()> {
        if data_len == 0 {
            return Err(Error::Config("dataset is empty".into()));
        }
        if self.batch_size == 0 || self.batch_size > data_len {
            return Err(Error::Config(format!(
                "batch size {} must lie in 1..={data_len}",
                self.batch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.p_blend) || !(0.0..=1.0).contains(&self.cutmix_prob) {
            return Err(Error::Config(
                "application probabilities must lie in [0, 1]".into(),
            ));
        }
        match self.stage {
            Stage::Pretrain => {}
            Stage::FinetuneV1 => {
                let pools = pools.ok_or_else(|| {
                    Error::Config("fine-tune stage one requires texture and noise pools".into())
                })?;
                if pools.textures.is_empty() || pools.noise.is_empty() {
                    return Err(Error::Config(
                        "fine-tune stage one requires non-empty texture and noise pools".into(),
                    ));
                }
            }
            Stage::FinetuneV2 => {
                let pools = pools.ok_or_else(|| {
                    Error::Config("fine-tune stage two requires a texture pool".into())
                })?;
                if pools.textures.is_empty() {
                    return Err(Error::Config(
                        "fine-tune stage two requires a non-empty texture pool".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Aggregated metrics of one training epoch.
#[derive(Debug, Clone, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_main: f64,
    pub loss_js: f64,
    pub loss_super: f64,
    /// Accuracy of the (possibly mixed) training batches against the
    /// dominant label.
    pub batch_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
}

/// Evaluation result on a held-out set.
#[derive(Debug, Clone, Serialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub mean_loss: f64,
    /// Class-level accuracy grouped by the true label's superclass.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_superclass_accuracy: Option<Vec<f64>>,
}

/// Superclass regularizer bundle owned by the caller.
#[derive(Debug, Clone)]
pub struct SuperclassAssets {
    pub map: SuperclassMap,
    pub reference: ReferenceDistribution,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Tile a grayscale overlay over the target height/width.
fn tiled_overlay(overlay: &Tensor, h: usize, w: usize) -> Tensor {
    let [_, _, oh, ow] = overlay.shape();
    let mut out = Tensor::zeros([1, 1, h, w]);
    for y in 0..h {
        for x in 0..w {
            *out.at_mut(0, 0, y, x) = overlay.at(0, 0, y % oh, x % ow);
        }
    }
    out
}

/// One pass over the dataset. Augmentation randomness derives from
/// per-sample seeds pre-assigned at epoch start, so the produced batch
/// stream does not depend on evaluation order.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    net: &mut Network,
    opt: &mut OptimizerState,
    data: &Dataset,
    cfg: &TrainConfig,
    superclass: Option<&SuperclassAssets>,
    pools: Option<&OverlayPools>,
    rng: &mut Rng,
    epoch: usize,
) -> Result<EpochMetrics> {
    cfg.validate(data.len(), pools)?;
    let trainable = {
        let mut any = false;
        net.for_each_param(&mut |name, _| any |= !net.is_param_frozen(name));
        any
    };
    if !trainable {
        return Err(Error::Config(
            "training requested with an empty trainable set".into(),
        ));
    }

    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);
    let epoch_seed = rng.next_u64();

    let lr = match cfg.lr_decay_epoch {
        Some(at) if epoch + 1 > at => cfg.hyper.lr * cfg.lr_decay,
        _ => cfg.hyper.lr,
    };
    opt.hyper = SgdHyper { lr, ..cfg.hyper };

    let mut sums = (0.0, 0.0, 0.0, 0.0); // total, main, js, super
    let mut correct = 0usize;
    let mut seen = 0usize;
    let mut batch_count = 0usize;

    for chunk in order.chunks(cfg.batch_size) {
        let (mut images, mut labels) = data.batch(chunk)?;
        let [n, _, h, w] = images.shape();
        let k = data.class_count;

        // per-sample streams keyed by position within the epoch
        let sample_rng =
            |offset: usize| Rng::seed_from_u64(epoch_seed).derive((seen + offset) as u64);

        // stage overlay blending
        if cfg.stage != Stage::Pretrain && cfg.p_blend > 0.0 {
            let pools = pools.expect("validated above");
            for bi in 0..n {
                let mut r = sample_rng(bi);
                if !r.coin(cfg.p_blend) {
                    continue;
                }
                let pool = match cfg.stage {
                    Stage::FinetuneV1 => {
                        if r.coin(0.5) {
                            &pools.textures
                        } else {
                            &pools.noise
                        }
                    }
                    _ => &pools.textures,
                };
                let overlay = tiled_overlay(&pool[r.below(pool.len())], h, w);
                let alpha = r.uniform(cfg.blend_alpha.0, cfg.blend_alpha.1);
                let plane = images.c() * h * w;
                let single = Tensor::from_vec(
                    [1, images.c(), h, w],
                    images.data()[bi * plane..(bi + 1) * plane].to_vec(),
                )?;
                let blended = blend(&single, &overlay, alpha)?;
                images.data_mut()[bi * plane..(bi + 1) * plane]
                    .copy_from_slice(blended.data());
            }
        }

        // per-batch CutMix
        if cfg.cutmix && rng.coin(cfg.cutmix_prob) {
            let mut partner: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut partner);
            let plane = images.c() * h * w;
            let src_images = images.clone();
            let src_labels = labels.clone();
            for bi in 0..n {
                let pa = Tensor::from_vec(
                    [1, images.c(), h, w],
                    src_images.data()[bi * plane..(bi + 1) * plane].to_vec(),
                )?;
                let pb = Tensor::from_vec(
                    [1, images.c(), h, w],
                    src_images.data()[partner[bi] * plane..(partner[bi] + 1) * plane].to_vec(),
                )?;
                let la = &src_labels.data()[bi * k..(bi + 1) * k];
                let lb = &src_labels.data()[partner[bi] * k..(partner[bi] + 1) * k];
                let mixed = cutmix(&pa, la, &pb, lb, rng)?;
                images.data_mut()[bi * plane..(bi + 1) * plane]
                    .copy_from_slice(mixed.image.data());
                labels.data_mut()[bi * k..(bi + 1) * k].copy_from_slice(&mixed.soft_label);
            }
        }

        // AugMix views; per-sample draws are independent, so the batch
        // parallelism cannot change the result
        let aug_batches = if cfg.augmix {
            let plane = images.c() * h * w;
            let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
                .into_par_iter()
                .map(|bi| {
                    let single = Tensor::from_vec(
                        [1, images.c(), h, w],
                        images.data()[bi * plane..(bi + 1) * plane].to_vec(),
                    )?;
                    let mut r = sample_rng(bi).derive(0x41554731);
                    let triple = augmix(&single, &cfg.augmix_cfg, &mut r)?;
                    Ok((
                        triple.aug1.data().to_vec(),
                        triple.aug2.data().to_vec(),
                    ))
                })
                .collect::<Result<_>>()?;
            let mut aug1 = Tensor::zeros(images.shape());
            let mut aug2 = Tensor::zeros(images.shape());
            for (bi, (a1, a2)) in per_sample.iter().enumerate() {
                aug1.data_mut()[bi * plane..(bi + 1) * plane].copy_from_slice(a1);
                aug2.data_mut()[bi * plane..(bi + 1) * plane].copy_from_slice(a2);
            }
            Some((aug1, aug2))
        } else {
            None
        };

        // forward all streams (in parallel when augmented: they read the
        // same immutable network); only the clean stream updates running
        // stats
        let (logits, cache, aug_forward) = match &aug_batches {
            Some((a1, a2)) => {
                let (clean_res, (res1, res2)) = rayon::join(
                    || net.forward(&images, Phase::Train),
                    || {
                        rayon::join(
                            || net.forward(a1, Phase::Train),
                            || net.forward(a2, Phase::Train),
                        )
                    },
                );
                let (logits, cache) = clean_res?;
                let (l1, c1) = res1?;
                let (l2, c2) = res2?;
                (
                    logits,
                    cache.expect("train cache"),
                    Some(((l1, c1.expect("train cache")), (l2, c2.expect("train cache")))),
                )
            }
            None => {
                let (logits, cache) = net.forward(&images, Phase::Train)?;
                (logits, cache.expect("train cache"), None)
            }
        };

        let logits_aug = aug_forward
            .as_ref()
            .map(|((l1, _), (l2, _))| (l1, l2));
        let target = superclass.map(|s| SuperclassTarget {
            map: &s.map,
            reference: &s.reference,
        });
        let (breakdown, grads) =
            total_loss(&logits, &labels, logits_aug, target, &cfg.loss_weights)?;

        if !breakdown.total.is_finite() || breakdown.total > cfg.divergence_limit {
            return Err(Error::Divergence {
                loss: breakdown.total,
                last_checkpoint: None,
            });
        }

        let param_grads = match (&aug_forward, &grads.d_logits_aug) {
            (Some(((_, c1), (_, c2))), Some((d1, d2))) => {
                let (g_clean, (g1, g2)) = rayon::join(
                    || net.backward(&cache, &grads.d_logits_clean),
                    || rayon::join(|| net.backward(c1, d1), || net.backward(c2, d2)),
                );
                let mut total = g_clean?;
                accumulate(&mut total, &g1?)?;
                accumulate(&mut total, &g2?)?;
                total
            }
            _ => net.backward(&cache, &grads.d_logits_clean)?,
        };

        opt.step(net, &param_grads)?;
        net.apply_bn_updates(&cache);

        sums.0 += breakdown.total;
        sums.1 += breakdown.main;
        sums.2 += breakdown.js;
        sums.3 += breakdown.superclass;
        batch_count += 1;
        for bi in 0..n {
            let predicted = argmax(&logits.data()[bi * k..(bi + 1) * k]);
            let truth = argmax(&labels.data()[bi * k..(bi + 1) * k]);
            if predicted == truth {
                correct += 1;
            }
        }
        seen += n;
    }

    let b = batch_count as f64;
    Ok(EpochMetrics {
        epoch,
        lr,
        loss_total: sums.0 / b,
        loss_main: sums.1 / b,
        loss_js: sums.2 / b,
        loss_super: sums.3 / b,
        batch_accuracy: correct as f64 / seen as f64,
        test_accuracy: None,
    })
}

/// Run one fine-tuning stage end to end: validates the stage's overlay
/// pools, freezes everything except the stage's block, and trains for the
/// configured epochs. Stage one draws overlays from both texture and noise
/// pools per sample; stage two from textures only.
#[allow(clippy::too_many_arguments)]
pub fn finetune_stage(
    net: &mut Network,
    stage: Stage,
    pools: &OverlayPools,
    train_data: &Dataset,
    cfg: &TrainConfig,
    superclass: Option<&SuperclassAssets>,
    rng: &mut Rng,
    metrics_log: &mut dyn Write,
) -> Result<Vec<EpochMetrics>> {
    if stage == Stage::Pretrain {
        return Err(Error::Config(
            "finetune_stage requires a fine-tuning stage, not pretrain".into(),
        ));
    }
    let cfg = TrainConfig {
        stage,
        ..cfg.clone()
    };
    run_training(
        net,
        &mut OptimizerState::new(cfg.hyper),
        train_data,
        None,
        &cfg,
        superclass,
        Some(pools),
        rng,
        None,
        metrics_log,
        0,
        &mut |_| false,
    )
}

fn accumulate(into: &mut Gradients, from: &Gradients) -> Result<()> {
    if into.entries.len() != from.entries.len() {
        return Err(Error::ShapeMismatch {
            op: "train_epoch",
            detail: "gradient accumulation across streams".into(),
        });
    }
    for ((_, a), (_, b)) in into.entries.iter_mut().zip(&from.entries) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
    Ok(())
}

/// Deterministic evaluation: eval-phase forward, no parameter mutation.
pub fn evaluate(
    net: &Network,
    data: &Dataset,
    batch_size: usize,
    map: Option<&SuperclassMap>,
) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::Config("evaluation dataset is empty".into()));
    }
    let batch_size = batch_size.max(1).min(data.len());
    let k = data.class_count;
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let mut seen = 0usize;
    let mut super_total = vec![0usize; crate::objectives::SUPERCLASS_COUNT];
    let mut super_correct = vec![0usize; crate::objectives::SUPERCLASS_COUNT];

    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (images, labels) = data.batch(chunk)?;
        let (logits, _) = net.forward(&images, Phase::Eval)?;
        let (loss, _) = softmax_cross_entropy(&logits, &labels)?;
        loss_sum += loss * chunk.len() as f64;
        for (bi, &di) in chunk.iter().enumerate() {
            let predicted = argmax(&logits.data()[bi * k..(bi + 1) * k]);
            let truth = data.labels[di];
            if predicted == truth {
                correct += 1;
            }
            if let Some(m) = map {
                if let Some(s) = m.superclass_of(truth) {
                    super_total[s] += 1;
                    if predicted == truth {
                        super_correct[s] += 1;
                    }
                }
            }
        }
        seen += chunk.len();
    }
    let per_superclass_accuracy = map.map(|_| {
        super_total
            .iter()
            .zip(&super_correct)
            .map(|(&t, &c)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
            .collect()
    });
    Ok(EvalMetrics {
        accuracy: correct as f64 / seen as f64,
        mean_loss: loss_sum / seen as f64,
        per_superclass_accuracy,
    })
}

/// Multi-epoch run: trains, optionally evaluates each epoch, writes one
/// JSON metrics line per epoch, and checkpoints on the configured cadence.
/// Returns the per-epoch metrics. An early-stop predicate can cut the run
/// short once a target is reached.
#[allow(clippy::too_many_arguments)]
pub fn run_training(
    net: &mut Network,
    opt: &mut OptimizerState,
    train_data: &Dataset,
    test_data: Option<&Dataset>,
    cfg: &TrainConfig,
    superclass: Option<&SuperclassAssets>,
    pools: Option<&OverlayPools>,
    rng: &mut Rng,
    out_dir: Option<&Path>,
    metrics_log: &mut dyn Write,
    start_epoch: usize,
    early_stop: &mut dyn FnMut(&EpochMetrics) -> bool,
) -> Result<Vec<EpochMetrics>> {
    if let Some(group) = cfg.stage.trainable_group() {
        net.freeze_all_except(&[group])?;
    }
    let mut history = Vec::new();
    let mut last_checkpoint: Option<PathBuf> = None;
    for epoch in start_epoch..start_epoch + cfg.epochs {
        let mut metrics =
            match train_epoch(net, opt, train_data, cfg, superclass, pools, rng, epoch) {
                Ok(m) => m,
                Err(Error::Divergence { loss, .. }) => {
                    return Err(Error::Divergence {
                        loss,
                        last_checkpoint: last_checkpoint
                            .as_ref()
                            .map(|p| p.display().to_string()),
                    })
                }
                Err(other) => return Err(other),
            };
        if let Some(test) = test_data {
            metrics.test_accuracy = Some(evaluate(net, test, cfg.batch_size, None)?.accuracy);
        }
        let line = serde_json::to_string(&metrics)
            .map_err(|e| Error::Internal(format!("metrics serialization: {e}")))?;
        writeln!(metrics_log, "{line}").map_err(|e| Error::Internal(e.to_string()))?;

        let should_checkpoint = cfg.checkpoint_every > 0
            && (epoch + 1 - start_epoch).is_multiple_of(cfg.checkpoint_every);
        if let (Some(dir), true) = (out_dir, should_checkpoint) {
            let path = dir.join(format!("epoch{:04}.ckpt", epoch + 1));
            Checkpoint::capture(net, opt, rng, (epoch + 1) as u32).save(&path)?;
            last_checkpoint = Some(path);
        }
        let stop = early_stop(&metrics);
        history.push(metrics);
        if stop {
            break;
        }
    }
    if let Some(dir) = out_dir {
        let final_epoch = start_epoch + history.len();
        let path = dir.join("final.ckpt");
        Checkpoint::capture(net, opt, rng, final_epoch as u32).save(&path)?;
    }
    Ok(history)
}
