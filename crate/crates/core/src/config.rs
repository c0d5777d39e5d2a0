//! Run configuration: a flat TOML document with typed keys.
//!
//! Values are layered defaults → file → `MIND_<KEY>` environment variables.
//! Unknown keys are rejected at every layer.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mind::ModelConfig;
use crate::objective::{LossWeights, OptimConfig, DEFAULT_BETA, DEFAULT_CLIP, DEFAULT_LAMBDA};
use crate::sadgate::RouterMode;
use crate::synthgen::{Heterogeneity, SynthSpec};

pub const ENV_PREFIX: &str = "MIND_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub d_in: usize,
    pub d: usize,
    pub h: usize,
    pub o: usize,
    pub e: usize,
    pub k: usize,
    pub s: usize,
    pub router: RouterMode,
    pub afire: bool,
    pub afire_hidden: usize,

    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub div: f64,
    pub final_div: f64,
    pub warmup: f64,
    pub beta: f64,
    pub lambda: f64,
    pub clip: f64,
    pub seed: u64,

    /// Dataset directory; when absent, data is synthesized from the `synth_*` keys.
    pub data: Option<PathBuf>,
    pub tr_seconds: f64,
    pub win: usize,
    pub stride: usize,
    pub split_ratio: f64,

    pub synth_mode: Heterogeneity,
    pub synth_experts: usize,
    pub synth_hidden: usize,
    pub synth_episodes: usize,
    pub synth_trs: usize,
    pub synth_sigma: f64,
    pub synth_ceiling: Option<f64>,
    pub synth_teacher_k: usize,
    pub synth_ar: f64,
    pub synth_gate_scale: f64,
    pub synth_kappa: f64,
    pub synth_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthSpec::default();
        Self {
            d_in: 16,
            d: 16,
            h: 32,
            o: 32,
            e: 4,
            k: 2,
            s: 4,
            router: RouterMode::Both,
            afire: false,
            afire_hidden: 32,

            epochs: 30,
            batch_size: 8,
            peak_lr: 0.05,
            weight_decay: 1e-4,
            div: 25.0,
            final_div: 1e4,
            warmup: 0.3,
            beta: DEFAULT_BETA,
            lambda: DEFAULT_LAMBDA,
            clip: DEFAULT_CLIP,
            seed: 0,

            data: None,
            tr_seconds: synth.tr_seconds,
            win: 100,
            stride: 50,
            split_ratio: 0.9,

            synth_mode: synth.mode,
            synth_experts: synth.experts,
            synth_hidden: synth.hidden,
            synth_episodes: synth.episodes,
            synth_trs: synth.trs,
            synth_sigma: synth.sigma,
            synth_ceiling: synth.ceiling,
            synth_teacher_k: synth.teacher_k,
            synth_ar: synth.ar,
            synth_gate_scale: synth.gate_scale,
            synth_kappa: synth.kappa,
            synth_seed: synth.seed,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_in", self.d_in),
            ("d", self.d),
            ("h", self.h),
            ("o", self.o),
            ("e", self.e),
            ("s", self.s),
            ("afire_hidden", self.afire_hidden),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("win", self.win),
            ("stride", self.stride),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.k == 0 || self.k > self.e {
            return Err(Error::InvalidConfig(format!("k = {} must lie in 1..={}", self.k, self.e)));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::InvalidConfig(format!("split_ratio {} not in (0, 1)", self.split_ratio)));
        }
        if !(self.tr_seconds > 0.0) {
            return Err(Error::InvalidConfig("tr_seconds must be positive".into()));
        }
        if self.beta < 0.0 || self.lambda < 0.0 || self.clip < 0.0 {
            return Err(Error::InvalidConfig("beta, lambda and clip must be non-negative".into()));
        }
        self.model_config().validate()?;
        self.optim_config(1).validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_in: self.d_in,
            d: self.d,
            h: self.h,
            o: self.o,
            e: self.e,
            k: self.k,
            s: self.s,
            router: self.router,
            afire: self.afire,
            afire_hidden: self.afire_hidden,
            w_max: self.win,
        }
    }

    pub fn optim_config(&self, total_steps: usize) -> OptimConfig {
        OptimConfig {
            peak_lr: self.peak_lr,
            weight_decay: self.weight_decay,
            total_steps,
            warmup: self.warmup,
            div: self.div,
            final_div: self.final_div,
            ..OptimConfig::default()
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            beta: self.beta,
            lambda: self.lambda,
        }
    }

    /// Synthetic spec matching the model dimensions.
    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            d: self.d_in,
            o: self.o,
            experts: self.synth_experts,
            hidden: self.synth_hidden,
            subjects: self.s,
            episodes: self.synth_episodes,
            trs: self.synth_trs,
            mode: self.synth_mode,
            sigma: self.synth_sigma,
            ceiling: self.synth_ceiling,
            teacher_k: self.synth_teacher_k,
            ar: self.synth_ar,
            gate_scale: self.synth_gate_scale,
            kappa: self.synth_kappa,
            tr_seconds: self.tr_seconds,
            seed: self.synth_seed,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Defaults, then the optional file, then `MIND_*` overrides from `env`.
    pub fn load<I>(path: Option<&Path>, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        Self::default().layered(path, env)
    }

    /// `self` as the base layer, then the optional file, then `MIND_*` overrides.
    pub fn layered<I>(&self, path: Option<&Path>, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let invalid = |e: toml::ser::Error| Error::InvalidConfig(e.to_string());
        let mut table = toml::Table::try_from(self).map_err(invalid)?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let file = text
                .parse::<toml::Table>()
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?;
            table.extend(file);
        }
        for (key, raw) in env {
            let Some(name) = key.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            table.insert(name.to_ascii_lowercase(), parse_env_value(&raw));
        }
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_env_and_file(path: Option<&Path>) -> Result<Self> {
        Self::load(path, std::env::vars())
    }
}

/// Interpret an environment value as a TOML scalar, falling back to a string.
fn parse_env_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
