//! Model configuration and the registry of named variants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageKind {
    ConvStem,
    Mbconv,
    Transformer,
}

/// Block count and hidden width of one stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub blocks: usize,
    pub hidden: usize,
    pub kind: StageKind,
}

impl StageConfig {
    pub const fn new(blocks: usize, hidden: usize, kind: StageKind) -> Self {
        StageConfig {
            blocks,
            hidden,
            kind,
        }
    }
}

/// How metadata enters the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Image only.
    VisionOnly,
    /// Meta tokens attend alongside vision tokens in S3 and S4.
    Early,
    /// Meta embedding concatenated with the aggregated class representation.
    Late,
}

impl FusionMode {
    pub fn uses_meta(self) -> bool {
        !matches!(self, FusionMode::VisionOnly)
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vision-only" | "vision" => Ok(FusionMode::VisionOnly),
            "early" => Ok(FusionMode::Early),
            "late" => Ok(FusionMode::Late),
            other => Err(Error::Config(format!(
                "unknown fusion mode `{other}` (expected vision-only, early or late)"
            ))),
        }
    }
}

pub const STAGE_KINDS: [StageKind; 5] = [
    StageKind::ConvStem,
    StageKind::Mbconv,
    StageKind::Mbconv,
    StageKind::Transformer,
    StageKind::Transformer,
];

/// Spatial downsampling from the input image to the S4 token grid.
pub const TOTAL_STRIDE: usize = 32;

/// Width of the encoded metadata vector: normalized age plus a one-hot over
/// (female, male).
pub const META_DIM: usize = 3;

pub const VARIANTS: [&str; 4] = ["FG-0", "FG-1", "FG-2", "FG-Tiny"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: String,
    /// S0 through S4.
    pub stages: Vec<StageConfig>,
    pub image_size: usize,
    pub in_channels: usize,
    /// Pixels are mapped to `(x - input_mean) / input_std` before the stem.
    #[serde(default = "default_input_mean")]
    pub input_mean: f64,
    #[serde(default = "default_input_std")]
    pub input_std: f64,
    pub num_classes: usize,
    pub meta_dim: usize,
    /// Attention heads in S3 and S4.
    pub heads: [usize; 2],
    pub mlp_ratio: usize,
    pub mbconv_expansion: usize,
    pub se_reduction: usize,
    pub fusion: FusionMode,
    pub mask_p_start: f64,
    pub mask_p_end: f64,
    pub seed: u64,
}

fn default_input_mean() -> f64 {
    0.5
}

fn default_input_std() -> f64 {
    0.25
}

fn stages(table: [(usize, usize); 5]) -> Vec<StageConfig> {
    table
        .iter()
        .zip(STAGE_KINDS)
        .map(|(&(b, h), kind)| StageConfig::new(b, h, kind))
        .collect()
}

impl ModelConfig {
    /// Looks up a registry variant with 3 classes, a single input channel and
    /// vision-only fusion.
    pub fn variant(name: &str) -> Result<Self> {
        let (table, image_size) = match name {
            "FG-0" => ([(3, 64), (2, 96), (3, 192), (5, 384), (2, 768)], 224),
            "FG-1" => ([(3, 64), (2, 96), (6, 192), (14, 384), (3, 768)], 224),
            "FG-2" => ([(3, 128), (2, 128), (6, 256), (14, 512), (3, 1024)], 224),
            "FG-Tiny" => ([(2, 8), (1, 8), (1, 16), (1, 32), (1, 32)], 32),
            other => {
                return Err(Error::Config(format!(
                    "unknown variant `{other}` (known: {})",
                    VARIANTS.join(", ")
                )))
            }
        };
        let stages = stages(table);
        let heads = if name == "FG-Tiny" {
            [2, 2]
        } else {
            [stages[3].hidden / 32, stages[4].hidden / 32]
        };
        Ok(ModelConfig {
            variant: name.to_string(),
            stages,
            image_size,
            in_channels: 1,
            input_mean: default_input_mean(),
            input_std: default_input_std(),
            num_classes: 3,
            meta_dim: META_DIM,
            heads,
            mlp_ratio: 4,
            mbconv_expansion: 4,
            se_reduction: 4,
            fusion: FusionMode::VisionOnly,
            mask_p_start: 0.0,
            mask_p_end: 0.5,
            seed: 0,
        })
    }

    pub fn tiny() -> Self {
        Self::variant("FG-Tiny").expect("registry variant")
    }

    pub fn with_fusion(mut self, fusion: FusionMode) -> Self {
        self.fusion = fusion;
        self
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn stage(&self, index: usize) -> &StageConfig {
        &self.stages[index]
    }

    /// Side of the S3 and S4 token grids.
    pub fn grids(&self) -> [usize; 2] {
        [self.image_size / 16, self.image_size / 32]
    }

    /// Side of the S2 feature map.
    pub fn s2_side(&self) -> usize {
        self.image_size / 8
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.stages.len() != 5 {
            return fail(format!("expected 5 stages, got {}", self.stages.len()));
        }
        for (i, (s, kind)) in self.stages.iter().zip(STAGE_KINDS).enumerate() {
            if s.kind != kind {
                return fail(format!("stage S{i} must be {kind:?}, got {:?}", s.kind));
            }
            if s.blocks == 0 || s.hidden == 0 {
                return fail(format!("stage S{i}: blocks and hidden must be ≥ 1"));
            }
        }
        if self.image_size == 0 || self.image_size % TOTAL_STRIDE != 0 {
            return fail(format!(
                "image_size {} is not divisible by the total stride {TOTAL_STRIDE} \
                 (S0 /2, S1 /2, S2 /2, S3 /2, S4 /2)",
                self.image_size
            ));
        }
        if self.in_channels == 0 {
            return fail("in_channels must be ≥ 1".into());
        }
        if !self.input_mean.is_finite() || !(self.input_std > 0.0 && self.input_std.is_finite()) {
            return fail(format!(
                "input normalization needs a finite mean and positive std, got {} / {}",
                self.input_mean, self.input_std
            ));
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes must be ≥ 2, got {}", self.num_classes));
        }
        if self.meta_dim != META_DIM {
            return fail(format!(
                "meta_dim must be {META_DIM} (age + one-hot sex), got {}",
                self.meta_dim
            ));
        }
        for (i, (&h, stage)) in self.heads.iter().zip(&self.stages[3..]).enumerate() {
            if h == 0 || stage.hidden % h != 0 {
                return fail(format!(
                    "stage S{}: hidden {} not divisible by {h} heads",
                    i + 3,
                    stage.hidden
                ));
            }
        }
        if self.mlp_ratio == 0 || self.mbconv_expansion == 0 || self.se_reduction == 0 {
            return fail("mlp_ratio, mbconv_expansion and se_reduction must be ≥ 1".into());
        }
        for i in 1..=2 {
            let first_in = self.stages[i - 1].hidden;
            for cin in [first_in, self.stages[i].hidden] {
                let expanded = cin * self.mbconv_expansion;
                if expanded % self.se_reduction != 0 {
                    return fail(format!(
                        "stage S{i}: expanded width {expanded} not divisible by SE reduction {}",
                        self.se_reduction
                    ));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.mask_p_start)
            || !(0.0..=1.0).contains(&self.mask_p_end)
            || self.mask_p_start > self.mask_p_end
        {
            return fail(format!(
                "mask schedule needs 0 ≤ p_start ≤ p_end ≤ 1, got {} → {}",
                self.mask_p_start, self.mask_p_end
            ));
        }
        Ok(())
    }
}
