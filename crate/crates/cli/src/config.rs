use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use somala::model::BlockKind;
use somala::optimizer::{HessianMode, MinibatchMode, StopRule};
use somala::{Algorithm, Error, ModelKind, OptimizerConfig, Result, SamplerKind};

/// Optimiser settings as read from a JSON file or the command line. Every
/// field is optional; unset fields fall back to the algorithm defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub algorithm: Option<Algorithm>,
    /// MALA `h` or random-walk `sigma^2`, whichever the algorithm uses.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_exponent: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_rescale: Option<BTreeMap<BlockKind, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub averaging_start_epoch: Option<usize>,
    /// `false` disables the DIFF_MAX rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_rule: Option<StopRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minibatch_mode: Option<MinibatchMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hessian: Option<HessianMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub information: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retain_latents: Option<usize>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident, $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl ConfigFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
    }

    pub fn read_list(path: &Path) -> Result<Vec<Self>> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
    }

    /// Fields set in `top` replace those in `self`.
    pub fn overlay(mut self, top: &ConfigFile) -> Self {
        let dst = &mut self;
        overlay!(
            dst,
            top,
            label,
            algorithm,
            step,
            batch_size,
            inner_steps,
            gamma_exponent,
            gamma_scale,
            base_scale,
            block_rescale,
            averaging_start_epoch,
            stop,
            stop_rule,
            max_epochs,
            minibatch_mode,
            hessian,
            information,
            retain_latents
        );
        self
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algorithm.unwrap_or(Algorithm::DSomala)
    }

    pub fn resolve(&self, model: ModelKind, n_obs: usize, seed: u64) -> Result<OptimizerConfig> {
        let algo = self.algorithm();
        let step = self.step.unwrap_or(match algo.sampler_kind() {
            SamplerKind::Mala => 0.1,
            SamplerKind::Rwmh => 0.3,
        });
        let batch = match (algo.minibatch(), self.batch_size) {
            (true, Some(n)) => n,
            (true, None) => 250.min(n_obs),
            (false, Some(n)) if n != n_obs => {
                return Err(Error::InvalidInput(format!(
                    "{algo} is a fullbatch algorithm; --n {n} conflicts with N = {n_obs}"
                )))
            }
            (false, _) => n_obs,
        };
        let mut cfg = OptimizerConfig::new(algo, model, step, batch);
        cfg.seed = seed;
        if let Some(v) = self.inner_steps {
            cfg.sampler.inner_steps = v;
        }
        if let Some(v) = self.gamma_exponent {
            cfg.gamma_exponent = v;
        }
        if let Some(v) = self.gamma_scale {
            cfg.gamma_scale = v;
        }
        if self.base_scale.is_some() {
            cfg.base_scale = self.base_scale;
        }
        if let Some(v) = &self.block_rescale {
            cfg.block_rescale = v.clone();
        }
        if let Some(v) = self.averaging_start_epoch {
            cfg.averaging_start_epoch = v;
        }
        if let Some(rule) = self.stop_rule {
            cfg.stop = Some(rule);
        }
        if self.stop == Some(false) {
            cfg.stop = None;
        }
        if let Some(v) = self.max_epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = self.minibatch_mode {
            cfg.minibatch_mode = v;
        }
        if let Some(v) = self.hessian {
            cfg.hessian = v;
        }
        if let Some(v) = self.information {
            cfg.information = v;
        }
        if let Some(v) = self.retain_latents {
            cfg.retain_latents = v;
        }
        cfg.validate(n_obs)?;
        Ok(cfg)
    }
}
