//! Flat run configuration shared by the model, trainer and CLI.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Mode;
use crate::error::{Error, Result};
use crate::tensor::DType;

/// Which branches the KL coupling term covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlBranches {
    /// Composition only.
    C,
    /// Attribute, object and composition, summed.
    Aoc,
}

impl FromStr for KlBranches {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "c" => Ok(KlBranches::C),
            "aoc" => Ok(KlBranches::Aoc),
            other => Err(format!("unknown kl_branches `{other}` (expected c or aoc)")),
        }
    }
}

impl fmt::Display for KlBranches {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KlBranches::C => "c",
            KlBranches::Aoc => "aoc",
        })
    }
}

/// Decoupling module architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecouplerKind {
    Ca,
    Mlp,
}

impl FromStr for DecouplerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ca" => Ok(DecouplerKind::Ca),
            "mlp" => Ok(DecouplerKind::Mlp),
            other => Err(format!("unknown decoupler `{other}` (expected ca or mlp)")),
        }
    }
}

impl fmt::Display for DecouplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecouplerKind::Ca => "ca",
            DecouplerKind::Mlp => "mlp",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Element type of parameters and activations.
    pub dtype: DType,
    /// Seed for parameter init and batch order.
    pub seed: u64,
    /// Seed of the frozen encoders.
    pub encoder_seed: u64,

    pub vocab_size: usize,
    pub d_tok: usize,
    pub text_heads: usize,
    pub text_blocks: usize,
    /// Heads of the cross-attention decouplers.
    pub heads: usize,

    pub tau_t: f64,
    /// Initial visual temperature (learned in log space).
    pub tau_v: f64,
    pub gamma_ao: f64,
    pub gamma_c: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Visual-path weight at fusion.
    pub lambda: f64,
    pub kl_branches: KlBranches,
    pub kl_detach_target: bool,
    /// Std of the noise added to the composition projector's initial weights.
    pub proxy_noise: f64,

    pub no_vp: bool,
    pub no_tp: bool,
    pub i2t: DecouplerKind,
    pub i2v: DecouplerKind,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,

    /// Evaluation candidate set.
    pub mode: Mode,
    /// Worker threads for ablations and scoring (0 = available parallelism).
    pub threads: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            dtype: DType::F32,
            seed: 0,
            encoder_seed: 0,
            vocab_size: 256,
            d_tok: 32,
            text_heads: 4,
            text_blocks: 2,
            heads: 4,
            tau_t: 0.01,
            tau_v: 0.01,
            gamma_ao: 1.0,
            gamma_c: 1.0,
            alpha: 1.0,
            beta: 1.0,
            lambda: 1.0,
            kl_branches: KlBranches::Aoc,
            kl_detach_target: false,
            proxy_noise: 0.01,
            no_vp: false,
            no_tp: false,
            i2t: DecouplerKind::Ca,
            i2v: DecouplerKind::Mlp,
            epochs: 20,
            batch_size: 64,
            lr: 5e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            mode: Mode::Closed,
            threads: 0,
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let cfg: Config = serde_json::from_value(v.clone()).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let positive = [("tau_t", self.tau_t), ("tau_v", self.tau_v)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        let nonneg = [
            ("gamma_ao", self.gamma_ao),
            ("gamma_c", self.gamma_c),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("proxy_noise", self.proxy_noise),
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return fail(format!("eps must be positive, got {}", self.eps));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be at least 1".into());
        }
        if self.heads == 0 || self.text_heads == 0 || !self.d_tok.is_multiple_of(self.text_heads) {
            return fail(format!("text_heads {} must divide d_tok {}", self.text_heads, self.d_tok));
        }
        if self.no_vp && self.no_tp {
            return fail("no_vp and no_tp together leave nothing to train".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = Config::default();
        assert_eq!(Config::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(cfg.lambda, 1.0);
    }

    #[test]
    fn partial_file_keeps_defaults_and_rejects_unknown_keys() {
        let cfg = Config::from_toml_str("lr = 0.01\ni2v = \"ca\"\ndtype = \"f64\"").unwrap();
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.i2v, DecouplerKind::Ca);
        assert_eq!(cfg.dtype, DType::F64);
        assert_eq!(cfg.epochs, 20);
        assert!(Config::from_toml_str("learning_rate = 0.1").is_err());
    }

    #[test]
    fn invalid_values() {
        assert!(Config::from_toml_str("tau_t = 0.0").is_err());
        assert!(Config::from_toml_str("lambda = -1.0").is_err());
        assert!(Config::from_toml_str("no_vp = true\nno_tp = true").is_err());
    }
}
