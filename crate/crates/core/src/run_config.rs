//! The JSON run configuration read by the command-line tool.
//!
//! Every key is optional. Missing keys take their defaults and `resolved`
//! writes all of them back out, so the echoed file reproduces the run on its
//! own. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{FusionMode, ModelConfig, StageConfig, STAGE_KINDS};
use crate::dataset::DatasetSpec;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

pub const DEFAULT_VARIANT: &str = "FG-Tiny";
pub const DEFAULT_NUM_CLASSES: usize = 2;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Default seed for model initialization and training.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSection>,
}

/// Registry variant plus optional overrides. `stages` lists `[blocks, hidden]`
/// for S0 through S4.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stages: Option<Vec<[usize; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_ratio: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mbconv_expansion: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub se_reduction: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_p_start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_p_end: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam_eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub balance: Option<bool>,
}

/// Where the samples come from: a dataset directory or a synthetic spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<DatasetSpec>,
}

impl DataSection {
    pub fn validate(&self) -> Result<()> {
        match (&self.path, &self.synthetic) {
            (Some(_), None) => Ok(()),
            (None, Some(spec)) => spec.validate(),
            _ => Err(Error::Config(
                "data section needs exactly one of `path` or `synthetic`".into(),
            )),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let variant = m.variant.as_deref().unwrap_or(DEFAULT_VARIANT);
        let mut cfg = ModelConfig::variant(variant)?;
        if let Some(stages) = &m.stages {
            if stages.len() != STAGE_KINDS.len() {
                return Err(Error::Config(format!(
                    "model.stages needs 5 [blocks, hidden] pairs, got {}",
                    stages.len()
                )));
            }
            cfg.stages = stages
                .iter()
                .zip(STAGE_KINDS)
                .map(|(&[b, h], kind)| StageConfig::new(b, h, kind))
                .collect();
        }
        cfg.image_size = m.image_size.unwrap_or(cfg.image_size);
        cfg.in_channels = m.in_channels.unwrap_or(cfg.in_channels);
        cfg.input_mean = m.input_mean.unwrap_or(cfg.input_mean);
        cfg.input_std = m.input_std.unwrap_or(cfg.input_std);
        cfg.num_classes = m.num_classes.unwrap_or(DEFAULT_NUM_CLASSES);
        cfg.meta_dim = m.meta_dim.unwrap_or(cfg.meta_dim);
        cfg.heads = m.heads.unwrap_or(cfg.heads);
        cfg.mlp_ratio = m.mlp_ratio.unwrap_or(cfg.mlp_ratio);
        cfg.mbconv_expansion = m.mbconv_expansion.unwrap_or(cfg.mbconv_expansion);
        cfg.se_reduction = m.se_reduction.unwrap_or(cfg.se_reduction);
        cfg.fusion = m.fusion.unwrap_or(cfg.fusion);
        cfg.mask_p_start = m.mask_p_start.unwrap_or(cfg.mask_p_start);
        cfg.mask_p_end = m.mask_p_end.unwrap_or(cfg.mask_p_end);
        cfg.seed = m.seed.unwrap_or(self.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            epochs: t.epochs.unwrap_or(d.epochs),
            batch_size: t.batch_size.unwrap_or(d.batch_size),
            learning_rate: t.learning_rate.unwrap_or(d.learning_rate),
            beta1: t.beta1.unwrap_or(d.beta1),
            beta2: t.beta2.unwrap_or(d.beta2),
            adam_eps: t.adam_eps.unwrap_or(d.adam_eps),
            seed: t.seed.unwrap_or(self.seed),
            checkpoint_every: t.checkpoint_every.unwrap_or(d.checkpoint_every),
            balance: t.balance.unwrap_or(d.balance),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The same run with every default written out.
    pub fn resolved(&self) -> Result<RunConfig> {
        let m = self.model_config()?;
        let t = self.train_config()?;
        if let Some(d) = &self.data {
            d.validate()?;
        }
        Ok(RunConfig {
            seed: self.seed,
            model: ModelSection {
                variant: Some(m.variant.clone()),
                stages: Some(m.stages.iter().map(|s| [s.blocks, s.hidden]).collect()),
                image_size: Some(m.image_size),
                in_channels: Some(m.in_channels),
                input_mean: Some(m.input_mean),
                input_std: Some(m.input_std),
                num_classes: Some(m.num_classes),
                meta_dim: Some(m.meta_dim),
                heads: Some(m.heads),
                mlp_ratio: Some(m.mlp_ratio),
                mbconv_expansion: Some(m.mbconv_expansion),
                se_reduction: Some(m.se_reduction),
                fusion: Some(m.fusion),
                mask_p_start: Some(m.mask_p_start),
                mask_p_end: Some(m.mask_p_end),
                seed: Some(m.seed),
            },
            train: TrainSection {
                epochs: Some(t.epochs),
                batch_size: Some(t.batch_size),
                learning_rate: Some(t.learning_rate),
                beta1: Some(t.beta1),
                beta2: Some(t.beta2),
                adam_eps: Some(t.adam_eps),
                seed: Some(t.seed),
                checkpoint_every: Some(t.checkpoint_every),
                balance: Some(t.balance),
            },
            data: self.data.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_tiny_two_class() {
        let rc = RunConfig::from_json("{}").unwrap();
        let m = rc.model_config().unwrap();
        assert_eq!(m.variant, "FG-Tiny");
        assert_eq!(m.num_classes, 2);
        assert_eq!(m.fusion, FusionMode::VisionOnly);
        assert_eq!(rc.train_config().unwrap(), TrainConfig::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        for (text, key) in [
            (r#"{"sead": 1}"#, "`sead`"),
            (r#"{"model": {"fusoin": "early"}}"#, "`fusoin`"),
            (r#"{"train": {"lr": 1}}"#, "`lr`"),
        ] {
            let err = RunConfig::from_json(text).unwrap_err().to_string();
            assert!(err.contains(key), "{err} should name {key}");
        }
    }

    #[test]
    fn top_level_seed_is_the_default_for_both_sections() {
        let rc = RunConfig::from_json(r#"{"seed": 5, "train": {"seed": 2}}"#).unwrap();
        assert_eq!(rc.model_config().unwrap().seed, 5);
        assert_eq!(rc.train_config().unwrap().seed, 2);
    }

    #[test]
    fn resolved_echo_is_a_fixed_point() {
        let rc = RunConfig::from_json(
            r#"{"seed": 3, "model": {"fusion": "early", "image_size": 64}, "train": {"epochs": 2},
                "data": {"synthetic": {"train": 4, "val": 2, "test": 2}}}"#,
        )
        .unwrap();
        let echo = rc.resolved().unwrap();
        let back = RunConfig::from_json(&echo.to_json()).unwrap();
        assert_eq!(back, echo);
        assert_eq!(back.resolved().unwrap(), echo);
        assert_eq!(back.model_config().unwrap(), rc.model_config().unwrap());
        assert_eq!(back.train_config().unwrap(), rc.train_config().unwrap());
    }

    #[test]
    fn explicit_stages_replace_the_variant_table() {
        let rc = RunConfig::from_json(r#"{"model": {"stages": [[1,8],[1,8],[1,16],[1,32],[1,64]]}}"#).unwrap();
        assert_eq!(rc.model_config().unwrap().stages[4].hidden, 64);
        let short = RunConfig::from_json(r#"{"model": {"stages": [[1,8]]}}"#).unwrap();
        assert!(short.model_config().is_err());
    }

    #[test]
    fn data_section_needs_exactly_one_source() {
        let both = RunConfig::from_json(
            r#"{"data": {"path": "x", "synthetic": {"train": 1, "val": 1, "test": 1}}}"#,
        )
        .unwrap();
        assert!(both.resolved().is_err());
        let neither = RunConfig::from_json(r#"{"data": {}}"#).unwrap();
        assert!(neither.resolved().is_err());
    }
}
