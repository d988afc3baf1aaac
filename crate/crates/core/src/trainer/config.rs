use serde::{Deserialize, Serialize};

use super::adamw::AdamWConfig;
use crate::error::{Error, Result};
use crate::masking::BottleneckMode;
use crate::toyvqa::{CueVariant, DataConfig, ModelConfig};

/// Mask used to evaluate a model that finished Stage I.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage1Eval {
    #[default]
    Bottleneck,
    Causal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub lr: f64,
}

/// Backbone pretraining: stop after the first epoch whose `test_iid`
/// accuracy reaches `iid_threshold`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Phase0Config {
    pub max_epochs: usize,
    pub lr: f64,
    pub iid_threshold: f64,
}

impl Default for Phase0Config {
    fn default() -> Self {
        Self {
            max_epochs: 10,
            lr: 3e-4,
            iid_threshold: 0.85,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Cue tokens per sample; 0 trains without cues.
    pub k: usize,
    pub lora_rank: usize,
    pub phase0: Phase0Config,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub adamw: AdamWConfig,
    pub seed: u64,
    pub mask_mode: BottleneckMode,
    pub cue_variant: CueVariant,
    pub stage1_eval: Stage1Eval,
    /// Keep token and position embeddings frozen in Stage II.
    pub freeze_embeddings: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 16,
            lora_rank: 8,
            phase0: Phase0Config::default(),
            stage1: StageConfig { epochs: 2, lr: 1e-5 },
            stage2: StageConfig { epochs: 3, lr: 5e-6 },
            batch_size: 8,
            eval_batch_size: 50,
            adamw: AdamWConfig::default(),
            seed: 0,
            mask_mode: BottleneckMode::Prose,
            cue_variant: CueVariant::Cte,
            stage1_eval: Stage1Eval::Bottleneck,
            freeze_embeddings: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [("phase0", self.phase0.lr), ("stage1", self.stage1.lr), ("stage2", self.stage2.lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name}.lr must be positive, got {lr}")));
            }
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.lora_rank == 0 {
            return Err(Error::Config("lora_rank must be positive".into()));
        }
        if self.phase0.max_epochs == 0 {
            return Err(Error::Config("phase0.max_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Every knob of a run; the TOML config file mirrors this structure.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Sets both the data and the training seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.model.g != self.data.g {
            return Err(Error::Config(format!(
                "model.g = {} but data.g = {}",
                self.model.g, self.data.g
            )));
        }
        if self.model.cte.d_llm != self.model.decoder.d_llm || self.model.cte.d_visual != self.model.decoder.d_llm {
            return Err(Error::Config("model.cte widths must equal model.decoder.d_llm".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.k, c.lora_rank, c.batch_size), (16, 8, 8));
        assert_eq!(c.stage1, StageConfig { epochs: 2, lr: 1e-5 });
        assert_eq!(c.stage2, StageConfig { epochs: 3, lr: 5e-6 });
        assert_eq!((c.adamw.beta1, c.adamw.beta2, c.adamw.weight_decay, c.adamw.eps), (0.9, 0.999, 0.01, 1e-8));
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let c = RunConfig::default().with_seed(7);
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = RunConfig::from_toml("[train]\nk = 4\n[train.stage1]\nepochs = 1\nlr = 0.001\n").unwrap();
        assert_eq!(partial.train.k, 4);
        assert_eq!(partial.train.stage1.lr, 1e-3);
        assert_eq!(partial.train.stage2, TrainConfig::default().stage2);
        assert!(RunConfig::from_toml("[train]\nkk = 4\n").is_err());
        assert!(RunConfig::from_toml("[bogus]\n").is_err());
        assert!(RunConfig::from_toml("[train.stage2]\nepochs = 1\nlr = 0.0\n").is_err());
        assert!(RunConfig::from_toml("[data]\ng = 5\n").is_err());
    }
}
