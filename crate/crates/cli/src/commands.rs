//! Implementations of the six subcommands.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use grcl_core::augment::texture_noise::{
    generate_texture_noise_dataset, load_overlay_pool, PairStatus,
};
use grcl_core::error::{Error, Result};
use grcl_core::grcl::network::build_grcnn;
use grcl_core::grcl::probe::{receptive_field_probe, ProbeTarget};
use grcl_core::objectives::{ReferenceDistribution, SuperclassMap};
use grcl_core::rng::Rng;
use grcl_core::trainer::{
    evaluate, run_training, Checkpoint, Dataset, OptimizerState, OverlayPools, Stage,
    SuperclassAssets,
};
use grcl_core::verify::{run_scope, Scope};

use crate::config::{resolve_and_echo, ResolvedConfig};
use crate::{CommonArgs, DataArgs, Failure};

/// Salt so the synthetic test split never overlaps the training draw.
const TEST_SEED_SALT: u64 = 0x7465_7374;

fn named_from(data: &DataArgs) -> Vec<(String, String)> {
    let mut named = Vec::new();
    let mut push_path = |key: &str, p: &Option<PathBuf>| {
        if let Some(p) = p {
            named.push((key.to_string(), p.display().to_string()));
        }
    };
    push_path("data.train_dir", &data.train_dir);
    push_path("data.test_dir", &data.test_dir);
    push_path("data.superclass_map", &data.superclass_map);
    push_path("data.superclass_ref", &data.superclass_ref);
    named
}

fn load_train_dataset(cfg: &ResolvedConfig) -> Result<Dataset> {
    match &cfg.train_dir {
        Some(dir) => Dataset::load_image_folders(dir),
        None if cfg.synthetic => Ok(grcl_core::trainer::synthetic_dataset(
            cfg.synthetic_train,
            cfg.seed,
        )),
        None => Err(Error::Config(
            "no training data: set data.train_dir or data.synthetic=true".into(),
        )),
    }
}

fn load_test_dataset(cfg: &ResolvedConfig) -> Result<Dataset> {
    match &cfg.test_dir {
        Some(dir) => Dataset::load_image_folders(dir),
        None if cfg.synthetic => Ok(grcl_core::trainer::synthetic_dataset(
            cfg.synthetic_test,
            cfg.seed ^ TEST_SEED_SALT,
        )),
        None => Err(Error::Config(
            "no evaluation data: set data.test_dir or data.synthetic=true".into(),
        )),
    }
}

fn load_superclass(cfg: &ResolvedConfig, class_count: usize) -> Result<Option<SuperclassAssets>> {
    match (&cfg.superclass_map, &cfg.superclass_ref) {
        (Some(map), Some(reference)) => Ok(Some(SuperclassAssets {
            map: SuperclassMap::load(map, class_count)?,
            reference: ReferenceDistribution::load(reference)?,
        })),
        (None, None) => Ok(None),
        _ => Err(Error::Config(
            "superclass regularizer needs both data.superclass_map and data.superclass_ref".into(),
        )),
    }
}

fn metrics_writer(out_dir: &Path) -> Result<fs::File> {
    let path = out_dir.join("metrics.jsonl");
    fs::File::create(&path).map_err(|e| Error::io(&path, e))
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_train(
    common: CommonArgs,
    data: DataArgs,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    cutmix: bool,
    augmix: bool,
) -> std::result::Result<(), Failure> {
    let mut named = named_from(&data);
    if let Some(e) = epochs {
        named.push(("trainer.epochs".into(), e.to_string()));
    }
    if let Some(b) = batch_size {
        named.push(("trainer.batch_size".into(), b.to_string()));
    }
    if let Some(l) = lr {
        named.push(("trainer.lr".into(), l.to_string()));
    }
    if cutmix {
        named.push(("trainer.cutmix".into(), "true".into()));
    }
    if augmix {
        named.push(("trainer.augmix".into(), "true".into()));
    }
    let cfg = resolve_and_echo(
        "train",
        &common.out,
        common.config.as_deref(),
        common.preset.as_deref(),
        common.seed,
        &named,
        &common.set,
        &[],
    )?;

    let train_data = load_train_dataset(&cfg)?;
    let test_data = load_test_dataset(&cfg)?;
    let superclass = load_superclass(&cfg, train_data.class_count)?;
    let train_cfg = cfg.train_config(Stage::Pretrain);

    let mut rng = Rng::seed_from_u64(cfg.seed);
    let mut net = build_grcnn(&cfg.network_config(), &mut rng)?;
    if net.config.class_count != train_data.class_count {
        return Err(Error::Config(format!(
            "preset expects {} classes, dataset has {}",
            net.config.class_count, train_data.class_count
        ))
        .into());
    }
    let mut opt = OptimizerState::new(train_cfg.hyper);
    let mut log = metrics_writer(&common.out)?;
    let history = run_training(
        &mut net,
        &mut opt,
        &train_data,
        Some(&test_data),
        &train_cfg,
        superclass.as_ref(),
        None,
        &mut rng,
        Some(&common.out),
        &mut log,
        0,
        &mut |_| false,
    )?;
    if let Some(last) = history.last() {
        println!(
            "trained {} epochs: loss {:.4}, batch accuracy {:.3}, test accuracy {:.3}",
            history.len(),
            last.loss_total,
            last.batch_accuracy,
            last.test_accuracy.unwrap_or(f64::NAN)
        );
    }
    println!("final checkpoint: {}", common.out.join("final.ckpt").display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_finetune(
    common: CommonArgs,
    data: DataArgs,
    stage: String,
    checkpoint: PathBuf,
    textures: Option<PathBuf>,
    noise: Option<PathBuf>,
    epochs: Option<usize>,
    lr: Option<f64>,
) -> std::result::Result<(), Failure> {
    let stage = Stage::parse(&stage)?;
    let mut named = named_from(&data);
    if let Some(e) = epochs {
        named.push(("trainer.epochs".into(), e.to_string()));
    }
    if let Some(l) = lr {
        named.push(("trainer.lr".into(), l.to_string()));
    }
    let stage_name = match stage {
        Stage::FinetuneV1 => "v1",
        Stage::FinetuneV2 => "v2",
        Stage::Pretrain => "pretrain",
    };
    let extra = vec![
        ("finetune.stage".to_string(), stage_name.to_string()),
        (
            "finetune.checkpoint".to_string(),
            checkpoint.display().to_string(),
        ),
        (
            "finetune.textures".to_string(),
            textures
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        ),
        (
            "finetune.noise".to_string(),
            noise
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        ),
    ];
    let cfg = resolve_and_echo(
        "finetune",
        &common.out,
        common.config.as_deref(),
        common.preset.as_deref(),
        common.seed,
        &named,
        &common.set,
        &extra,
    )?;

    // stage-required pools
    let textures_dir = textures.ok_or_else(|| {
        Error::Config("fine-tuning requires --textures with a PNG directory".into())
    })?;
    if stage == Stage::FinetuneV1 && noise.is_none() {
        return Err(Error::Config(
            "stage v1 blends both textures and noise: --noise is required".into(),
        )
        .into());
    }
    let pools = OverlayPools {
        textures: load_overlay_pool(&textures_dir)?,
        noise: match &noise {
            Some(dir) => load_overlay_pool(dir)?,
            None => Vec::new(),
        },
    };

    let mut net = build_grcnn(&cfg.network_config(), &mut Rng::seed_from_u64(cfg.seed))?;
    let loaded = Checkpoint::load(&checkpoint)?;
    let (_, _, base_epoch) = loaded.restore(&mut net)?;
    let before = net.param_snapshot();

    let train_data = load_train_dataset(&cfg)?;
    let test_data = load_test_dataset(&cfg)?;
    let superclass = load_superclass(&cfg, train_data.class_count)?;
    let train_cfg = cfg.train_config(stage);

    // the stage is its own experiment: fresh optimizer, stage-keyed stream
    let mut rng = Rng::seed_from_u64(cfg.seed).derive(match stage {
        Stage::FinetuneV1 => 1,
        Stage::FinetuneV2 => 2,
        Stage::Pretrain => 0,
    });
    let mut opt = OptimizerState::new(train_cfg.hyper);
    let mut log = metrics_writer(&common.out)?;
    let history = run_training(
        &mut net,
        &mut opt,
        &train_data,
        Some(&test_data),
        &train_cfg,
        superclass.as_ref(),
        Some(&pools),
        &mut rng,
        Some(&common.out),
        &mut log,
        0,
        &mut |_| false,
    )?;

    // diff report: which parameters changed relative to the base checkpoint
    let after = net.param_snapshot();
    let report_path = common.out.join("param-diff.txt");
    let mut report = String::new();
    let mut changed_groups: Vec<String> = Vec::new();
    for ((name, b), (_, a)) in before.iter().zip(&after) {
        if b != a {
            report.push_str(name);
            report.push('\n');
            let group = name.split('.').next().unwrap_or(name).to_string();
            if !changed_groups.contains(&group) {
                changed_groups.push(group);
            }
        }
    }
    report.push_str(&format!("# changed groups: {}\n", changed_groups.join(", ")));
    fs::write(&report_path, &report).map_err(|e| Error::io(&report_path, e))?;

    println!(
        "fine-tuned {} epochs from checkpoint at epoch {base_epoch}; changed groups: {}",
        history.len(),
        changed_groups.join(", ")
    );
    println!("diff report: {}", report_path.display());
    Ok(())
}

pub fn cmd_gen_noise(common: CommonArgs, textures: PathBuf) -> std::result::Result<(), Failure> {
    let extra = vec![(
        "gen_noise.textures".to_string(),
        textures.display().to_string(),
    )];
    let cfg = resolve_and_echo(
        "gen-noise",
        &common.out,
        common.config.as_deref(),
        common.preset.as_deref(),
        common.seed,
        &[],
        &common.set,
        &extra,
    )?;

    let manifest = generate_texture_noise_dataset(&textures, &common.out, cfg.seed)?;
    let report_path = common.out.join("verification.txt");
    let mut report = String::new();
    let mut failures = 0usize;
    for entry in &manifest.entries {
        match &entry.status {
            PairStatus::Ok(checks) => {
                let pass = checks.spectrum_rel_err < 1e-9 && checks.mean_abs_err < 1e-9;
                if !pass {
                    failures += 1;
                }
                report.push_str(&format!(
                    "{}\t{}\tspectrum_rel_err={:.3e}\tmean_abs_err={:.3e}\n",
                    entry.name,
                    if pass { "PASS" } else { "FAIL" },
                    checks.spectrum_rel_err,
                    checks.mean_abs_err
                ));
            }
            PairStatus::Skipped { reason } => {
                report.push_str(&format!("{}\tSKIP\t{}\n", entry.name, reason));
            }
        }
    }
    fs::write(&report_path, &report).map_err(|e| Error::io(&report_path, e))?;
    println!(
        "generated {} noise images ({} skipped) under {}",
        manifest.generated(),
        manifest.skipped(),
        common.out.display()
    );
    print!("{report}");
    if failures > 0 {
        return Err(Failure::verification(format!(
            "{failures} generated pairs failed spectrum verification"
        )));
    }
    Ok(())
}

pub fn cmd_eval(
    common: CommonArgs,
    data: DataArgs,
    checkpoint: PathBuf,
) -> std::result::Result<(), Failure> {
    let named = named_from(&data);
    let extra = vec![(
        "eval.checkpoint".to_string(),
        checkpoint.display().to_string(),
    )];
    let cfg = resolve_and_echo(
        "eval",
        &common.out,
        common.config.as_deref(),
        common.preset.as_deref(),
        common.seed,
        &named,
        &common.set,
        &extra,
    )?;

    let mut net = build_grcnn(&cfg.network_config(), &mut Rng::seed_from_u64(cfg.seed))?;
    Checkpoint::load(&checkpoint)?.restore(&mut net)?;
    let test_data = load_test_dataset(&cfg)?;
    let map = match (&cfg.superclass_map, &cfg.superclass_ref) {
        (Some(path), _) => Some(SuperclassMap::load(path, test_data.class_count)?),
        _ => None,
    };
    let metrics = evaluate(&net, &test_data, cfg.batch_size, map.as_ref())?;
    let path = common.out.join("eval.json");
    let body = serde_json::to_string_pretty(&metrics)
        .map_err(|e| Error::Internal(format!("metrics serialization: {e}")))?;
    fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    println!(
        "accuracy {:.4}, mean loss {:.4} over {} samples",
        metrics.accuracy,
        metrics.mean_loss,
        test_data.len()
    );
    Ok(())
}

pub fn cmd_rf_probe(
    common: CommonArgs,
    t_values: String,
    input_size: usize,
    kernel: usize,
) -> std::result::Result<(), Failure> {
    let extra = vec![
        ("rf_probe.t_values".to_string(), t_values.clone()),
        ("rf_probe.input_size".to_string(), input_size.to_string()),
        ("rf_probe.kernel".to_string(), kernel.to_string()),
    ];
    let _cfg = resolve_and_echo(
        "rf-probe",
        &common.out,
        common.config.as_deref(),
        common.preset.as_deref(),
        common.seed,
        &[],
        &common.set,
        &extra,
    )?;

    let ts: Vec<usize> = t_values
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid recursion depth '{s}'")))
        })
        .collect::<Result<_>>()?;
    let center = (input_size / 2, input_size / 2);

    let mut csv = String::from("target,t,support_pixels,support_h,support_w,radius\n");
    let control = receptive_field_probe(
        ProbeTarget::SingleConv {
            kernel: (kernel, kernel),
        },
        (input_size, input_size),
        center,
    )?;
    let (ch, cw) = control.extent();
    csv.push_str(&format!(
        "single_conv,-,{},{ch},{cw},{}\n",
        control.count(),
        control.radius_chebyshev(center)
    ));
    println!(
        "single_conv control: support {} pixels ({ch}x{cw}), radius {}",
        control.count(),
        control.radius_chebyshev(center)
    );
    for &t in &ts {
        let map = receptive_field_probe(
            ProbeTarget::Grcl {
                kernel: (kernel, kernel),
                t_steps: t,
            },
            (input_size, input_size),
            center,
        )?;
        let (sh, sw) = map.extent();
        csv.push_str(&format!(
            "grcl,{t},{},{sh},{sw},{}\n",
            map.count(),
            map.radius_chebyshev(center)
        ));
        println!(
            "grcl T={t}: support {} pixels ({sh}x{sw}), radius {}",
            map.count(),
            map.radius_chebyshev(center)
        );
    }
    let path = common.out.join("rf-probe.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    println!("report: {}", path.display());
    Ok(())
}

pub fn cmd_grad_check(
    common: CommonArgs,
    scope: String,
    seeds: Option<u64>,
    corrupt: bool,
) -> std::result::Result<(), Failure> {
    let extra = vec![
        ("grad_check.scope".to_string(), scope.clone()),
        (
            "grad_check.seeds".to_string(),
            seeds.map(|s| s.to_string()).unwrap_or_else(|| "default".into()),
        ),
    ];
    let _cfg = resolve_and_echo(
        "grad-check",
        &common.out,
        common.config.as_deref(),
        common.preset.as_deref(),
        common.seed,
        &[],
        &common.set,
        &extra,
    )?;

    let scope = Scope::parse(&scope)
        .ok_or_else(|| Error::Config(format!("unknown grad-check scope '{scope}'")))?;
    let results = run_scope(scope, seeds, corrupt);
    let path = common.out.join("grad-check.txt");
    let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut failures = 0usize;
    for r in &results {
        let line = format!(
            "{}\tmax_rel_err={:.3e}\ttolerance={:.0e}\t{}",
            r.name,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        println!("{line}");
        writeln!(file, "{line}").map_err(|e| Error::io(&path, e))?;
        if !r.passed() {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(Failure::verification(format!(
            "{failures} gradient checks exceeded tolerance"
        )));
    }
    Ok(())
}
