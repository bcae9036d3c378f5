//! Run configuration with flat dotted keys.
//!
//! Precedence: preset defaults, then `--config` file values, then named
//! command-line flags, then `--set key=value` overrides. Every run echoes
//! its fully resolved configuration to `<out>/resolved-config.json` before
//! doing any work.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use grcl_core::augment::AugmixConfig;
use grcl_core::error::{Error, Result};
use grcl_core::grcl::network::GrcnnConfig;
use grcl_core::objectives::LossWeights;
use grcl_core::trainer::{SgdHyper, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub seed: u64,
    pub preset: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_epoch: usize, // 0 disables
    pub lr_decay: f64,
    pub checkpoint_every: usize,
    pub divergence_limit: f64,
    pub cutmix: bool,
    pub cutmix_prob: f64,
    pub augmix: bool,
    pub p_blend: f64,
    pub blend_alpha_lo: f64,
    pub blend_alpha_hi: f64,
    pub augmix_width: usize,
    pub augmix_depth: usize,
    pub augmix_severity: f64,
    pub augmix_dirichlet_alpha: f64,
    pub augmix_beta_alpha: f64,
    pub w_main: f64,
    pub w_js: f64,
    pub w_super: f64,
    pub synthetic: bool,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub train_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
    pub superclass_map: Option<PathBuf>,
    pub superclass_ref: Option<PathBuf>,
}

impl Default for ResolvedConfig {
    fn default() -> Self {
        ResolvedConfig {
            seed: 0,
            preset: "tiny".into(),
            epochs: 10,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay_epoch: 20,
            lr_decay: 0.1,
            checkpoint_every: 0,
            divergence_limit: 1e4,
            cutmix: false,
            cutmix_prob: 0.5,
            augmix: false,
            p_blend: 0.5,
            blend_alpha_lo: 0.2,
            blend_alpha_hi: 0.6,
            augmix_width: 3,
            augmix_depth: 3,
            augmix_severity: 3.0,
            augmix_dirichlet_alpha: 1.0,
            augmix_beta_alpha: 1.0,
            w_main: 1.0,
            w_js: 12.0,
            w_super: 0.5,
            synthetic: true,
            synthetic_train: 5000,
            synthetic_test: 1000,
            train_dir: None,
            test_dir: None,
            superclass_map: None,
            superclass_ref: None,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected a boolean, got '{other}'"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

impl ResolvedConfig {
    /// Apply one flat key. Unknown keys are configuration errors.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "model.preset" => {
                if value != "tiny" && value != "paper" {
                    return Err(Error::Config(format!(
                        "model.preset must be 'tiny' or 'paper', got '{value}'"
                    )));
                }
                self.preset = value.to_string();
            }
            "trainer.epochs" => self.epochs = parse_num(key, value)?,
            "trainer.batch_size" => self.batch_size = parse_num(key, value)?,
            "trainer.lr" => self.lr = parse_num(key, value)?,
            "trainer.momentum" => self.momentum = parse_num(key, value)?,
            "trainer.weight_decay" => self.weight_decay = parse_num(key, value)?,
            "trainer.lr_decay_epoch" => self.lr_decay_epoch = parse_num(key, value)?,
            "trainer.lr_decay" => self.lr_decay = parse_num(key, value)?,
            "trainer.checkpoint_every" => self.checkpoint_every = parse_num(key, value)?,
            "trainer.divergence_limit" => self.divergence_limit = parse_num(key, value)?,
            "trainer.cutmix" => self.cutmix = parse_bool(key, value)?,
            "trainer.cutmix_prob" => self.cutmix_prob = parse_num(key, value)?,
            "trainer.augmix" => self.augmix = parse_bool(key, value)?,
            "trainer.p_blend" => self.p_blend = parse_num(key, value)?,
            "trainer.blend_alpha_lo" => self.blend_alpha_lo = parse_num(key, value)?,
            "trainer.blend_alpha_hi" => self.blend_alpha_hi = parse_num(key, value)?,
            "augmix.width" => self.augmix_width = parse_num(key, value)?,
            "augmix.depth" => self.augmix_depth = parse_num(key, value)?,
            "augmix.severity" => self.augmix_severity = parse_num(key, value)?,
            "augmix.dirichlet_alpha" => self.augmix_dirichlet_alpha = parse_num(key, value)?,
            "augmix.beta_alpha" => self.augmix_beta_alpha = parse_num(key, value)?,
            "loss.w_main" => self.w_main = parse_num(key, value)?,
            "loss.w_js" => self.w_js = parse_num(key, value)?,
            "loss.w_super" => self.w_super = parse_num(key, value)?,
            "data.synthetic" => self.synthetic = parse_bool(key, value)?,
            "data.synthetic_train" => self.synthetic_train = parse_num(key, value)?,
            "data.synthetic_test" => self.synthetic_test = parse_num(key, value)?,
            "data.train_dir" => self.train_dir = non_empty_path(value),
            "data.test_dir" => self.test_dir = non_empty_path(value),
            "data.superclass_map" => self.superclass_map = non_empty_path(value),
            "data.superclass_ref" => self.superclass_ref = non_empty_path(value),
            other => return Err(Error::Config(format!("unknown configuration key '{other}'"))),
        }
        Ok(())
    }

    /// Merge a JSON file of flat dotted keys.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let obj = value.as_object().ok_or_else(|| {
            Error::Config(format!("{}: top level must be a JSON object", path.display()))
        })?;
        // apply in sorted key order so file semantics don't depend on layout
        let mut keys: Vec<&String> = obj.keys().collect();
        keys.sort();
        for key in keys {
            let v = &obj[key];
            let as_str = match v {
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Bool(b) => b.to_string(),
                serde_json::Value::Number(n) => n.to_string(),
                other => {
                    return Err(Error::Config(format!(
                        "{}: key '{key}' has unsupported value {other}",
                        path.display()
                    )))
                }
            };
            self.apply(key, &as_str)?;
        }
        Ok(())
    }

    /// Apply `key=value` override pairs.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        for pair in pairs {
            let (key, value) = pair.split_once('=').ok_or_else(|| {
                Error::Config(format!("override '{pair}' is not of the form key=value"))
            })?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Flat-key JSON echo of the fully resolved configuration.
    pub fn to_flat_json(&self, command: &str, extra: &[(String, String)]) -> String {
        let mut map: BTreeMap<String, serde_json::Value> = BTreeMap::new();
        let mut put = |k: &str, v: serde_json::Value| {
            map.insert(k.to_string(), v);
        };
        use serde_json::json;
        put("command", json!(command));
        put("seed", json!(self.seed));
        put("model.preset", json!(self.preset));
        put("trainer.epochs", json!(self.epochs));
        put("trainer.batch_size", json!(self.batch_size));
        put("trainer.lr", json!(self.lr));
        put("trainer.momentum", json!(self.momentum));
        put("trainer.weight_decay", json!(self.weight_decay));
        put("trainer.lr_decay_epoch", json!(self.lr_decay_epoch));
        put("trainer.lr_decay", json!(self.lr_decay));
        put("trainer.checkpoint_every", json!(self.checkpoint_every));
        put("trainer.divergence_limit", json!(self.divergence_limit));
        put("trainer.cutmix", json!(self.cutmix));
        put("trainer.cutmix_prob", json!(self.cutmix_prob));
        put("trainer.augmix", json!(self.augmix));
        put("trainer.p_blend", json!(self.p_blend));
        put("trainer.blend_alpha_lo", json!(self.blend_alpha_lo));
        put("trainer.blend_alpha_hi", json!(self.blend_alpha_hi));
        put("augmix.width", json!(self.augmix_width));
        put("augmix.depth", json!(self.augmix_depth));
        put("augmix.severity", json!(self.augmix_severity));
        put("augmix.dirichlet_alpha", json!(self.augmix_dirichlet_alpha));
        put("augmix.beta_alpha", json!(self.augmix_beta_alpha));
        put("loss.w_main", json!(self.w_main));
        put("loss.w_js", json!(self.w_js));
        put("loss.w_super", json!(self.w_super));
        put("data.synthetic", json!(self.synthetic));
        put("data.synthetic_train", json!(self.synthetic_train));
        put("data.synthetic_test", json!(self.synthetic_test));
        let path_str = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        put("data.train_dir", json!(path_str(&self.train_dir)));
        put("data.test_dir", json!(path_str(&self.test_dir)));
        put("data.superclass_map", json!(path_str(&self.superclass_map)));
        put("data.superclass_ref", json!(path_str(&self.superclass_ref)));
        for (k, v) in extra {
            map.insert(k.clone(), json!(v));
        }
        serde_json::to_string_pretty(&map).expect("flat map serializes")
    }

    pub fn network_config(&self) -> GrcnnConfig {
        match self.preset.as_str() {
            "paper" => GrcnnConfig::paper(),
            _ => GrcnnConfig::tiny(),
        }
    }

    pub fn train_config(&self, stage: grcl_core::trainer::Stage) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            hyper: SgdHyper {
                lr: self.lr,
                momentum: self.momentum,
                weight_decay: self.weight_decay,
            },
            lr_decay_epoch: if self.lr_decay_epoch == 0 {
                None
            } else {
                Some(self.lr_decay_epoch)
            },
            lr_decay: self.lr_decay,
            loss_weights: LossWeights {
                w_main: self.w_main,
                w_js: self.w_js,
                w_super: self.w_super,
            },
            cutmix: self.cutmix,
            cutmix_prob: self.cutmix_prob,
            augmix: self.augmix,
            augmix_cfg: AugmixConfig {
                width: self.augmix_width,
                max_depth: self.augmix_depth,
                magnitude: self.augmix_severity,
                dirichlet_alpha: self.augmix_dirichlet_alpha,
                beta_alpha: self.augmix_beta_alpha,
            },
            stage,
            p_blend: self.p_blend,
            blend_alpha: (self.blend_alpha_lo, self.blend_alpha_hi),
            divergence_limit: self.divergence_limit,
            checkpoint_every: self.checkpoint_every,
        }
    }
}

fn non_empty_path(value: &str) -> Option<PathBuf> {
    if value.is_empty() {
        None
    } else {
        Some(PathBuf::from(value))
    }
}

/// Resolve in precedence order and echo into the output directory.
#[allow(clippy::too_many_arguments)]
pub fn resolve_and_echo(
    command: &str,
    out_dir: &Path,
    config_file: Option<&Path>,
    preset: Option<&str>,
    seed: Option<u64>,
    named: &[(String, String)],
    overrides: &[String],
    extra_echo: &[(String, String)],
) -> Result<ResolvedConfig> {
    let mut cfg = ResolvedConfig::default();
    if let Some(p) = preset {
        cfg.apply("model.preset", p)?;
    }
    if let Some(file) = config_file {
        cfg.apply_file(file)?;
    }
    for (k, v) in named {
        cfg.apply(k, v)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.apply_overrides(overrides)?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let echo = cfg.to_flat_json(command, extra_echo);
    let echo_path = out_dir.join("resolved-config.json");
    fs::write(&echo_path, echo).map_err(|e| Error::io(&echo_path, e))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_file_then_flags_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("cfg.json");
        fs::write(&file, r#"{"trainer.lr": 0.2, "trainer.epochs": 3}"#).unwrap();
        let cfg = resolve_and_echo(
            "train",
            dir.path(),
            Some(&file),
            Some("tiny"),
            Some(9),
            &[("trainer.epochs".into(), "5".into())],
            &["trainer.lr=0.7".into()],
            &[],
        )
        .unwrap();
        assert_eq!(cfg.epochs, 5); // flag beats file
        assert_eq!(cfg.lr, 0.7); // override beats everything
        assert_eq!(cfg.seed, 9);
        assert!(dir.path().join("resolved-config.json").exists());
    }

    #[test]
    fn unknown_key_is_a_config_error() {
        let mut cfg = ResolvedConfig::default();
        assert!(matches!(
            cfg.apply("trainer.wharble", "1"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bad_override_shape_is_a_config_error() {
        let mut cfg = ResolvedConfig::default();
        assert!(cfg.apply_overrides(&["no_equals_sign".into()]).is_err());
    }

    #[test]
    fn echo_subsumes_every_field() {
        let cfg = ResolvedConfig::default();
        let echo = cfg.to_flat_json("train", &[]);
        let parsed: serde_json::Value = serde_json::from_str(&echo).unwrap();
        for key in [
            "seed",
            "model.preset",
            "trainer.lr",
            "loss.w_js",
            "data.synthetic",
            "augmix.width",
        ] {
            assert!(parsed.get(key).is_some(), "missing {key}");
        }
    }
}
