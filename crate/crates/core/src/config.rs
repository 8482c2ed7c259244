//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::cdda::AttentionPreset;
use crate::ddm::GateMode;
use crate::error::{io_err, Error, Result};
use crate::net::NetworkConfig;

pub const SEED_ENV: &str = "D3NET_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub total_steps: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Empty means "not set".
    pub train_manifest: PathBuf,
    pub eval_manifest: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: NetworkConfig::default(),
            total_steps: 1000,
            batch_size: 8,
            patch_size: 32,
            lr_init: 1e-4,
            lr_final: 1e-6,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            train_manifest: PathBuf::new(),
            eval_manifest: PathBuf::new(),
        }
    }
}

const KEYS: [&str; 20] = [
    "base_channels",
    "unet_depth",
    "n_stages",
    "attention_preset",
    "gate_mode",
    "freq_channels",
    "prompt_dim",
    "strategy_dim",
    "seed",
    "total_steps",
    "batch_size",
    "patch_size",
    "lr_init",
    "lr_final",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "train_manifest",
    "eval_manifest",
    "format",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.batch_size == 0 || self.patch_size == 0 {
            return Err(Error::Config("batch_size and patch_size must be positive".into()));
        }
        if !self.patch_size.is_multiple_of(self.network.alignment()) {
            return Err(Error::Config(format!(
                "patch_size {} must be a multiple of {}",
                self.patch_size,
                self.network.alignment()
            )));
        }
        if !(self.lr_init > 0.0 && self.lr_final > 0.0 && self.lr_final <= self.lr_init) {
            return Err(Error::Config("need 0 < lr_final <= lr_init".into()));
        }
        for (k, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{k} must lie in [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let n = &mut self.network;
        match key {
            "base_channels" => n.base_channels = num(key, v)?,
            "unet_depth" => n.unet_depth = num(key, v)?,
            "n_stages" => n.stages = num(key, v)?,
            "attention_preset" => n.attention_preset = v.parse::<AttentionPreset>().map_err(|e| Error::Config(e.to_string()))?,
            "gate_mode" => n.gate_mode = v.parse::<GateMode>().map_err(|e| Error::Config(e.to_string()))?,
            "freq_channels" => n.freq_channels = num(key, v)?,
            "prompt_dim" => n.prompt_dim = num(key, v)?,
            "strategy_dim" => n.strategy_dim = num(key, v)?,
            "seed" => n.seed = num(key, v)?,
            "total_steps" => self.total_steps = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "patch_size" => self.patch_size = num(key, v)?,
            "lr_init" => self.lr_init = num(key, v)?,
            "lr_final" => self.lr_final = num(key, v)?,
            "adam_beta1" => self.adam_beta1 = num(key, v)?,
            "adam_beta2" => self.adam_beta2 = num(key, v)?,
            "adam_eps" => self.adam_eps = num(key, v)?,
            "train_manifest" => self.train_manifest = v.into(),
            "eval_manifest" => self.eval_manifest = v.into(),
            "format" if v == "1" => {}
            "format" => return Err(Error::Config(format!("unsupported config format {v:?}"))),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Unset keys keep their defaults; unknown or repeated keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.contains(&k) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
            seen.push(k);
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                e => e,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text: every key, fixed order, shortest round-trip floats.
    pub fn emit(&self) -> String {
        let n = &self.network;
        let values: [String; 20] = [
            n.base_channels.to_string(),
            n.unet_depth.to_string(),
            n.stages.to_string(),
            n.attention_preset.to_string(),
            n.gate_mode.to_string(),
            n.freq_channels.to_string(),
            n.prompt_dim.to_string(),
            n.strategy_dim.to_string(),
            n.seed.to_string(),
            self.total_steps.to_string(),
            self.batch_size.to_string(),
            self.patch_size.to_string(),
            self.lr_init.to_string(),
            self.lr_final.to_string(),
            self.adam_beta1.to_string(),
            self.adam_beta2.to_string(),
            self.adam_eps.to_string(),
            self.train_manifest.display().to_string(),
            self.eval_manifest.display().to_string(),
            "1".to_string(),
        ];
        let mut s = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        RunConfig::parse(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    /// Applies `D3NET_SEED` if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.network.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}: cannot parse {v:?}")))?;
        }
        Ok(())
    }
}
