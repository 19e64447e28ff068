//! Flat `key = value` run configuration. Unknown keys are rejected,
//! absent keys fall back to the defaults below, and `--set` overrides go
//! through the same parser as file lines.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anomamba_core::anomaly::ScoreStat;
use anomamba_core::blocks::{EncoderKind, NoiseMode};
use anomamba_core::model::{ModelConfig, NoiseSettings};
use anomamba_core::optim::AdamConfig;

use crate::error::{io_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub image_size: usize,
    pub encoder: String,
    /// Tensor archive with pretrained weights; required for resnet34.
    pub encoder_weights: String,
    pub data_root: String,
    /// Empty means every class directory found under the data root.
    pub classes: Vec<String>,
    /// One model over all classes; false trains per class.
    pub multi_class: bool,
    pub state_dim: usize,
    /// 0 derives max(1, channels/16) per decoder stage.
    pub dt_rank: usize,
    pub m: usize,
    pub pyramid_levels: usize,
    pub share_pyramid: bool,
    pub use_global: bool,
    pub use_local: bool,
    pub use_pyramid: bool,
    pub use_noise: bool,
    pub noise_sigma: f32,
    pub noise_mode: String,
    pub lr: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub smooth_sigma: f32,
    pub score_stat: String,
    pub score_top_k: usize,
    pub fpr_limit: f64,
    /// Extra checkpoint every k epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            image_size: 256,
            encoder: "resnet34".into(),
            encoder_weights: String::new(),
            data_root: "data".into(),
            classes: Vec::new(),
            multi_class: true,
            state_dim: 16,
            dt_rank: 0,
            m: 3,
            pyramid_levels: 2,
            share_pyramid: false,
            use_global: true,
            use_local: true,
            use_pyramid: true,
            use_noise: true,
            noise_sigma: 0.1,
            noise_mode: "relative".into(),
            lr: 5e-4,
            weight_decay: 1e-4,
            epochs: 500,
            batch_size: 8,
            seed: 0,
            smooth_sigma: 4.0,
            score_stat: "max".into(),
            score_top_k: 50,
            fpr_limit: 0.3,
            checkpoint_every: 0,
        }
    }
}

fn cfg_err(m: impl Into<String>) -> Error {
    Error::Config(m.into())
}

fn parse_int<T: TryFrom<i128>>(key: &str, value: &str) -> Result<T> {
    let raw: i128 =
        value.parse().map_err(|_| cfg_err(format!("{key}: '{value}' is not an integer")))?;
    T::try_from(raw).map_err(|_| cfg_err(format!("{key} = {value} out of range")))
}

fn parse_float(key: &str, value: &str) -> Result<f64> {
    let v: f64 =
        value.parse().map_err(|_| cfg_err(format!("{key}: '{value}' is not a number")))?;
    if !v.is_finite() {
        return Err(cfg_err(format!("{key} must be finite")));
    }
    Ok(v)
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(cfg_err(format!("{key}: '{value}' is not true/false"))),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            cfg.apply(line).map_err(|e| cfg_err(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    /// Applies one `key = value` assignment (config line or `--set`).
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| cfg_err(format!("'{assignment}' is not key = value")))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "image_size" => self.image_size = parse_int(key, value)?,
            "encoder" => self.encoder = value.into(),
            "encoder_weights" => self.encoder_weights = value.into(),
            "data_root" => self.data_root = value.into(),
            "classes" => {
                self.classes = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect();
            }
            "multi_class" => self.multi_class = parse_bool(key, value)?,
            "state_dim" => self.state_dim = parse_int(key, value)?,
            "dt_rank" => self.dt_rank = parse_int(key, value)?,
            "m" => self.m = parse_int(key, value)?,
            "pyramid_levels" => self.pyramid_levels = parse_int(key, value)?,
            "share_pyramid" => self.share_pyramid = parse_bool(key, value)?,
            "use_global" => self.use_global = parse_bool(key, value)?,
            "use_local" => self.use_local = parse_bool(key, value)?,
            "use_pyramid" => self.use_pyramid = parse_bool(key, value)?,
            "use_noise" => self.use_noise = parse_bool(key, value)?,
            "noise_sigma" => self.noise_sigma = parse_float(key, value)? as f32,
            "noise_mode" => self.noise_mode = value.into(),
            "lr" => self.lr = parse_float(key, value)? as f32,
            "weight_decay" => self.weight_decay = parse_float(key, value)? as f32,
            "epochs" => self.epochs = parse_int(key, value)?,
            "batch_size" => self.batch_size = parse_int(key, value)?,
            "seed" => self.seed = parse_int(key, value)?,
            "smooth_sigma" => self.smooth_sigma = parse_float(key, value)? as f32,
            "score_stat" => self.score_stat = value.into(),
            "score_top_k" => self.score_top_k = parse_int(key, value)?,
            "fpr_limit" => self.fpr_limit = parse_float(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_int(key, value)?,
            _ => return Err(cfg_err(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_kind()?;
        self.noise_mode_value()?;
        self.score_stat_value()?;
        if self.image_size == 0 {
            return Err(cfg_err("image_size must be positive"));
        }
        if self.epochs == 0 {
            return Err(cfg_err("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(cfg_err("batch_size must be at least 1"));
        }
        if self.state_dim == 0 {
            return Err(cfg_err("state_dim must be positive"));
        }
        if self.use_global && self.m == 0 {
            return Err(cfg_err("m must be at least 1 when use_global = true"));
        }
        if !self.use_global && !self.use_local {
            return Err(cfg_err("use_global and use_local cannot both be false"));
        }
        if self.pyramid_levels > 6 {
            return Err(cfg_err("pyramid_levels larger than 6 is not meaningful"));
        }
        if !(self.lr > 0.0) {
            return Err(cfg_err("lr must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(cfg_err("weight_decay must be non-negative"));
        }
        if self.noise_sigma < 0.0 {
            return Err(cfg_err("noise_sigma must be non-negative"));
        }
        if self.smooth_sigma < 0.0 {
            return Err(cfg_err("smooth_sigma must be non-negative"));
        }
        if !(self.fpr_limit > 0.0 && self.fpr_limit <= 1.0) {
            return Err(cfg_err("fpr_limit must be in (0, 1]"));
        }
        if self.score_stat == "topk" && self.score_top_k == 0 {
            return Err(cfg_err("score_top_k must be at least 1"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "image_size = {}", self.image_size);
        let _ = writeln!(s, "encoder = {}", self.encoder);
        let _ = writeln!(s, "encoder_weights = {}", self.encoder_weights);
        let _ = writeln!(s, "data_root = {}", self.data_root);
        let _ = writeln!(s, "classes = {}", self.classes.join(","));
        let _ = writeln!(s, "multi_class = {}", self.multi_class);
        let _ = writeln!(s, "state_dim = {}", self.state_dim);
        let _ = writeln!(s, "dt_rank = {}", self.dt_rank);
        let _ = writeln!(s, "m = {}", self.m);
        let _ = writeln!(s, "pyramid_levels = {}", self.pyramid_levels);
        let _ = writeln!(s, "share_pyramid = {}", self.share_pyramid);
        let _ = writeln!(s, "use_global = {}", self.use_global);
        let _ = writeln!(s, "use_local = {}", self.use_local);
        let _ = writeln!(s, "use_pyramid = {}", self.use_pyramid);
        let _ = writeln!(s, "use_noise = {}", self.use_noise);
        let _ = writeln!(s, "noise_sigma = {}", self.noise_sigma);
        let _ = writeln!(s, "noise_mode = {}", self.noise_mode);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "smooth_sigma = {}", self.smooth_sigma);
        let _ = writeln!(s, "score_stat = {}", self.score_stat);
        let _ = writeln!(s, "score_top_k = {}", self.score_top_k);
        let _ = writeln!(s, "fpr_limit = {}", self.fpr_limit);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        s
    }

    pub fn encoder_kind(&self) -> Result<EncoderKind> {
        match self.encoder.as_str() {
            "resnet34" => Ok(EncoderKind::ResNet34),
            "tiny" => Ok(EncoderKind::Tiny),
            other => Err(cfg_err(format!("encoder: '{other}' is not resnet34/tiny"))),
        }
    }

    pub fn noise_mode_value(&self) -> Result<NoiseMode> {
        match self.noise_mode.as_str() {
            "relative" => Ok(NoiseMode::Relative),
            "absolute" => Ok(NoiseMode::Absolute),
            other => Err(cfg_err(format!("noise_mode: '{other}' is not relative/absolute"))),
        }
    }

    pub fn score_stat_value(&self) -> Result<ScoreStat> {
        match self.score_stat.as_str() {
            "max" => Ok(ScoreStat::Max),
            "topk" => Ok(ScoreStat::TopKMean(self.score_top_k)),
            other => Err(cfg_err(format!("score_stat: '{other}' is not max/topk"))),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            state_dim: self.state_dim,
            dt_rank: if self.dt_rank == 0 { None } else { Some(self.dt_rank) },
            m: self.m,
            pyramid_levels: self.pyramid_levels,
            share_pyramid: self.share_pyramid,
            use_global: self.use_global,
            use_local: self.use_local,
            use_pyramid: self.use_pyramid,
            stage_depths: None,
            seed: self.seed,
        }
    }

    pub fn noise_settings(&self) -> Result<NoiseSettings> {
        Ok(NoiseSettings {
            enabled: self.use_noise,
            sigma: self.noise_sigma,
            mode: self.noise_mode_value()?,
        })
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamConfig::default() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_paper_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.image_size, 256);
        assert_eq!(cfg.encoder, "resnet34");
        assert_eq!(cfg.m, 3);
        assert_eq!(cfg.pyramid_levels, 2);
        assert_eq!(cfg.lr, 5e-4);
        assert_eq!(cfg.weight_decay, 1e-4);
        assert_eq!(cfg.epochs, 500);
        cfg.validate().unwrap();
    }

    #[test]
    fn serialize_parse_is_idempotent() {
        let mut cfg = RunConfig::default();
        cfg.classes = vec!["bottle".into(), "cable".into()];
        cfg.lr = 3.5e-3;
        cfg.use_noise = false;
        let text = cfg.to_text();
        let parsed = RunConfig::parse(&text).unwrap();
        assert_eq!(parsed, cfg);
        assert_eq!(parsed.to_text(), text);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::parse("bogus_key = 1").unwrap_err().to_string().contains("bogus_key"));
        assert!(RunConfig::parse("epochs = ten").is_err());
        assert!(RunConfig::parse("use_noise = yes").is_err());
        assert!(RunConfig::parse("epochs").is_err());
    }

    #[test]
    fn negative_epochs_fail_before_validation() {
        let err = RunConfig::parse("epochs = -1").unwrap_err().to_string();
        assert!(err.contains("out of range"), "{err}");
        let mut cfg = RunConfig::default();
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = RunConfig::parse("# header\n\n  seed = 9\n# tail\n").unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn set_overrides_reuse_the_parser() {
        let mut cfg = RunConfig::parse("seed = 1").unwrap();
        cfg.apply("use_noise=false").unwrap();
        cfg.apply(" pyramid_levels = 1 ").unwrap();
        assert!(!cfg.use_noise);
        assert_eq!(cfg.pyramid_levels, 1);
        assert!(cfg.apply("nope=1").is_err());
    }

    #[test]
    fn validation_rejects_out_of_range_values() {
        for bad in [
            "fpr_limit = 0",
            "fpr_limit = 1.5",
            "lr = 0",
            "batch_size = 0",
            "encoder = vgg",
            "noise_mode = speckle",
            "score_stat = median",
        ] {
            let cfg = RunConfig::parse(bad).unwrap();
            assert!(cfg.validate().is_err(), "{bad} should fail validation");
        }
        let cfg = RunConfig::parse("use_global = false\nuse_local = false").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn derived_model_config_maps_toggles() {
        let cfg =
            RunConfig::parse("dt_rank = 0\nstate_dim = 8\nuse_pyramid = false\nseed = 4").unwrap();
        let mc = cfg.model_config();
        assert_eq!(mc.dt_rank, None);
        assert_eq!(mc.state_dim, 8);
        assert!(!mc.use_pyramid);
        assert_eq!(mc.seed, 4);
        let ns = cfg.noise_settings().unwrap();
        assert!(ns.enabled);
        assert_eq!(ns.sigma, 0.1);
    }
}
