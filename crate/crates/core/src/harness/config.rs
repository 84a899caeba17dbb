//! `key = value` configuration files with command-line overrides.
//!
//! Lines starting with `#` are comments. Later assignments win, so overrides
//! are applied by appending them after the file contents.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::{LossConfig, RatrConfig};
use crate::mgfe::FusionKind;
use crate::model::ModelConfig;

use super::data::SynthSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub data: SynthSpec,
    pub loss: LossConfig,
    /// Optimizer steps in the run; the schedule is defined over steps.
    pub steps: usize,
    pub warmup_steps: usize,
    pub base_lr: f64,
    pub warmup_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_p: usize,
    pub batch_k: usize,
    pub flip_prob: f64,
    pub pad: usize,
    pub erase_prob: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn desk() -> Self {
        let model = ModelConfig::desk();
        let data = SynthSpec::desk(&model);
        Self {
            model,
            data,
            loss: LossConfig { ratr: RatrConfig { tau: 0.01, rho: 1.0 }, ..LossConfig::default() },
            steps: 300,
            warmup_steps: 30,
            base_lr: 0.008,
            warmup_lr: 8e-5,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_p: 8,
            batch_k: 4,
            flip_prob: 0.5,
            pad: 10,
            erase_prob: 0.5,
            eval_every: 50,
            seed: 0,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch_p * self.batch_k
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.ratr.validate()?;
        if self.model.num_identities != self.data.train_identities {
            return Err(Error::Config(format!(
                "classifier has {} outputs but the training split has {} identities",
                self.model.num_identities, self.data.train_identities
            )));
        }
        if self.model.num_cameras != self.data.num_cameras {
            return Err(Error::Config("model and data disagree on the camera count".into()));
        }
        if (self.model.image_height, self.model.image_width) != (self.data.height, self.data.width) {
            return Err(Error::Config("model and data disagree on the image size".into()));
        }
        if self.batch_p < 2 || self.batch_k < 2 {
            return Err(Error::Config("P and K must both be at least 2".into()));
        }
        if self.batch_p > self.data.train_identities || self.batch_k > self.data.images_per_identity {
            return Err(Error::Config("P×K batch does not fit in the training split".into()));
        }
        if self.steps == 0 || self.warmup_steps >= self.steps {
            return Err(Error::Config("need steps > warmup_steps".into()));
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut pairs = parse_pairs(&text)?;
        pairs.extend_from_slice(overrides);
        Self::from_pairs(&pairs)
    }

    /// Desk defaults with `pairs` applied in order.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::desk();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if set_model_key(&mut self.model, key, value)? {
            if key == "num_cameras" {
                self.data.num_cameras = self.model.num_cameras;
            }
            if key == "image_height" || key == "image_width" {
                self.data.height = self.model.image_height;
                self.data.width = self.model.image_width;
            }
            return Ok(());
        }
        match key {
            "steps" => self.steps = num(key, value)?,
            "warmup_steps" => self.warmup_steps = num(key, value)?,
            "base_lr" => self.base_lr = num(key, value)?,
            "warmup_lr" => self.warmup_lr = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "batch_p" => self.batch_p = num(key, value)?,
            "batch_k" => self.batch_k = num(key, value)?,
            "flip_prob" => self.flip_prob = num(key, value)?,
            "pad" => self.pad = num(key, value)?,
            "erase_prob" => self.erase_prob = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "label_smoothing" => self.loss.label_smoothing = num(key, value)?,
            "margin" => self.loss.margin = num(key, value)?,
            "tau" => self.loss.ratr.tau = num(key, value)?,
            "rho" => self.loss.ratr.rho = num(key, value)?,
            "train_identities" => {
                self.data.train_identities = num(key, value)?;
                self.model.num_identities = self.data.train_identities;
            }
            "test_identities" => self.data.test_identities = num(key, value)?,
            "images_per_identity" => self.data.images_per_identity = num(key, value)?,
            "noise" => self.data.noise = num(key, value)?,
            "color_shift" => self.data.color_shift = num(key, value)?,
            "data_seed" => self.data.seed = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut pairs = model_config_pairs(&self.model);
        pairs.retain(|(k, _)| k != "num_identities");
        let d = &self.data;
        let l = &self.loss;
        pairs.extend(
            [
                ("train_identities", d.train_identities.to_string()),
                ("test_identities", d.test_identities.to_string()),
                ("images_per_identity", d.images_per_identity.to_string()),
                ("noise", d.noise.to_string()),
                ("color_shift", d.color_shift.to_string()),
                ("data_seed", d.seed.to_string()),
                ("steps", self.steps.to_string()),
                ("warmup_steps", self.warmup_steps.to_string()),
                ("base_lr", self.base_lr.to_string()),
                ("warmup_lr", self.warmup_lr.to_string()),
                ("momentum", self.momentum.to_string()),
                ("weight_decay", self.weight_decay.to_string()),
                ("batch_p", self.batch_p.to_string()),
                ("batch_k", self.batch_k.to_string()),
                ("flip_prob", self.flip_prob.to_string()),
                ("pad", self.pad.to_string()),
                ("erase_prob", self.erase_prob.to_string()),
                ("eval_every", self.eval_every.to_string()),
                ("seed", self.seed.to_string()),
                ("label_smoothing", l.label_smoothing.to_string()),
                ("margin", l.margin.to_string()),
                ("tau", l.ratr.tau.to_string()),
                ("rho", l.ratr.rho.to_string()),
            ]
            .map(|(k, v)| (k.to_string(), v)),
        );
        pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

/// Parses `key = value` lines.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses a `key=value` override as given on the command line.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn set_model_key(m: &mut ModelConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "image_height" => m.image_height = num(key, value)?,
        "image_width" => m.image_width = num(key, value)?,
        "patch_size" => m.patch_size = num(key, value)?,
        "stride" => m.stride = num(key, value)?,
        "embed_dim" => m.embed_dim = num(key, value)?,
        "depth" => m.depth = num(key, value)?,
        "num_class_tokens" => m.num_class_tokens = num(key, value)?,
        "reduction" => m.reduction = num(key, value)?,
        "branches" => m.branches = num(key, value)?,
        "d_state" => m.d_state = num(key, value)?,
        "fusion" => m.fusion = value.parse::<FusionKind>()?,
        "drop_rate" => m.drop_rate = num(key, value)?,
        "num_cameras" => m.num_cameras = num(key, value)?,
        "side_weight" => m.side_weight = num(key, value)?,
        "num_identities" => m.num_identities = num(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

pub fn model_config_pairs(m: &ModelConfig) -> Vec<(String, String)> {
    [
        ("image_height", m.image_height.to_string()),
        ("image_width", m.image_width.to_string()),
        ("patch_size", m.patch_size.to_string()),
        ("stride", m.stride.to_string()),
        ("embed_dim", m.embed_dim.to_string()),
        ("depth", m.depth.to_string()),
        ("num_class_tokens", m.num_class_tokens.to_string()),
        ("reduction", m.reduction.to_string()),
        ("branches", m.branches.to_string()),
        ("d_state", m.d_state.to_string()),
        ("fusion", m.fusion.to_string()),
        ("drop_rate", m.drop_rate.to_string()),
        ("num_cameras", m.num_cameras.to_string()),
        ("side_weight", m.side_weight.to_string()),
        ("num_identities", m.num_identities.to_string()),
    ]
    .map(|(k, v)| (k.to_string(), v))
    .to_vec()
}

pub fn model_config_from_pairs(pairs: &[(String, String)]) -> Result<ModelConfig> {
    let mut m = ModelConfig::desk();
    let mut seen = Vec::new();
    for (k, v) in pairs {
        if !set_model_key(&mut m, k, v)? {
            return Err(Error::Config(format!("unknown model key `{k}`")));
        }
        seen.push(k.as_str());
    }
    for (k, _) in model_config_pairs(&m) {
        if !seen.contains(&k.as_str()) {
            return Err(Error::Config(format!("missing model key `{k}`")));
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_override_precedence() {
        let mut cfg = TrainConfig::desk();
        cfg.steps = 77;
        cfg.model.fusion = FusionKind::Gem;
        let text = cfg.to_text();
        let mut pairs = parse_pairs(&text).unwrap();
        assert_eq!(TrainConfig::from_pairs(&pairs).unwrap(), cfg);
        pairs.push(parse_override("steps=12").unwrap());
        assert_eq!(TrainConfig::from_pairs(&pairs).unwrap().steps, 12);
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(parse_pairs("steps 3").is_err());
        assert!(TrainConfig::from_pairs(&[("nope".into(), "1".into())]).is_err());
        assert!(TrainConfig::from_pairs(&[("steps".into(), "x".into())]).is_err());
        assert!(TrainConfig::from_pairs(&[("fusion".into(), "median".into())]).is_err());
        assert_eq!(parse_pairs("# c\n\n a = b \n").unwrap(), vec![("a".to_string(), "b".to_string())]);
    }

    #[test]
    fn desk_is_valid() {
        TrainConfig::desk().validate().unwrap();
        let mut c = TrainConfig::desk();
        c.model.num_identities = 5;
        assert!(c.validate().is_err());
    }
}
