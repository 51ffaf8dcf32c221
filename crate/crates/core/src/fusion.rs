//! Metadata encoding and the ways it is fused with the visual pathway:
//! meta tokens inside S3/S4 attention (early fusion), concatenation with the
//! aggregated class representation before the head (late fusion), and the
//! cross-stage class-token aggregation shared by every mode.
//!
//! During training, meta tokens are dropped in favor of a learned null token
//! with a probability that grows linearly over the epochs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{TokenSequence, LN_EPS};
use crate::autodiff::{Tape, Var};
use crate::backbone::{ForwardOutput, MetaInput, Model};
use crate::config::FusionMode;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Number of meta tokens: one for age, one for sex.
pub const N_META_TOKENS: usize = 2;

pub const MAX_AGE: f64 = 120.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sex {
    #[serde(rename = "F")]
    Female,
    #[serde(rename = "M")]
    Male,
    #[serde(rename = "U")]
    Unknown,
}

impl Sex {
    pub fn code(self) -> &'static str {
        match self {
            Sex::Female => "F",
            Sex::Male => "M",
            Sex::Unknown => "U",
        }
    }
}

impl std::str::FromStr for Sex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "F" | "f" => Ok(Sex::Female),
            "M" | "m" => Ok(Sex::Male),
            "U" | "u" => Ok(Sex::Unknown),
            other => Err(Error::Validation(format!(
                "sex must be one of F, M, U; got `{other}`"
            ))),
        }
    }
}

/// One subject's metadata.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaRecord {
    /// Years.
    pub age: f64,
    pub sex: Sex,
}

impl MetaRecord {
    pub fn new(age: f64, sex: Sex) -> Result<Self> {
        let rec = MetaRecord { age, sex };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.age.is_finite() || self.age < 0.0 || self.age > MAX_AGE {
            return Err(Error::Validation(format!(
                "age must be within [0, {MAX_AGE}], got {}",
                self.age
            )));
        }
        Ok(())
    }

    /// Parses the inline form `age=10,sex=M`.
    pub fn parse_inline(text: &str) -> Result<Self> {
        let grammar = "expected `age=<years>,sex=<F|M|U>`";
        let (mut age, mut sex) = (None, None);
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::Validation(format!("malformed meta `{text}`: {grammar}")))?;
            match key.trim() {
                "age" => {
                    age = Some(value.trim().parse::<f64>().map_err(|_| {
                        Error::Validation(format!("malformed age `{value}`: {grammar}"))
                    })?)
                }
                "sex" => sex = Some(value.trim().parse::<Sex>()?),
                other => {
                    return Err(Error::Validation(format!(
                        "unknown meta key `{other}`: {grammar}"
                    )))
                }
            }
        }
        match (age, sex) {
            (Some(age), Some(sex)) => MetaRecord::new(age, sex),
            _ => Err(Error::Validation(format!("incomplete meta `{text}`: {grammar}"))),
        }
    }
}

/// `[age/100, is_female, is_male]`; unknown sex encodes as an all-zero one-hot.
pub fn encode_meta(rec: &MetaRecord) -> Result<[f64; 3]> {
    rec.validate()?;
    let (f, m) = match rec.sex {
        Sex::Female => (1.0, 0.0),
        Sex::Male => (0.0, 1.0),
        Sex::Unknown => (0.0, 0.0),
    };
    Ok([rec.age / 100.0, f, m])
}

/// Which meta tokens (age, sex) are replaced by the null token.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct MetaMask(pub [bool; N_META_TOKENS]);

impl MetaMask {
    pub const NONE: MetaMask = MetaMask([false; N_META_TOKENS]);
    pub const ALL: MetaMask = MetaMask([true; N_META_TOKENS]);

    pub fn is_masked(&self, token: usize) -> bool {
        self.0[token]
    }

    pub fn all(&self) -> bool {
        self.0.iter().all(|&m| m)
    }
}

/// Linear ramp of the masking probability over training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSchedule {
    pub p_start: f64,
    pub p_end: f64,
    pub total_epochs: usize,
}

impl MaskSchedule {
    pub fn new(p_start: f64, p_end: f64, total_epochs: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_start)
            || !(0.0..=1.0).contains(&p_end)
            || p_start > p_end
            || total_epochs == 0
        {
            return Err(Error::Config(format!(
                "mask schedule needs 0 ≤ p_start ≤ p_end ≤ 1 and ≥ 1 epoch, got \
                 {p_start} → {p_end} over {total_epochs}"
            )));
        }
        Ok(MaskSchedule {
            p_start,
            p_end,
            total_epochs,
        })
    }
}

pub fn mask_probability(schedule: &MaskSchedule, epoch: usize) -> Result<f64> {
    if epoch >= schedule.total_epochs {
        return Err(Error::Validation(format!(
            "epoch {epoch} outside schedule of {} epochs",
            schedule.total_epochs
        )));
    }
    if schedule.total_epochs == 1 {
        return Ok(schedule.p_start);
    }
    let frac = epoch as f64 / (schedule.total_epochs - 1) as f64;
    Ok(schedule.p_start + (schedule.p_end - schedule.p_start) * frac)
}

pub(crate) fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-sample masking seed, independent of the order samples are visited in.
pub fn mask_seed(global_seed: u64, sample_key: u64, epoch: usize) -> u64 {
    splitmix(splitmix(splitmix(global_seed) ^ sample_key) ^ epoch as u64)
}

/// Stable 64-bit key for a sample id (FNV-1a).
pub fn sample_key(id: &str) -> u64 {
    id.bytes().fold(0xCBF2_9CE4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Independently masks each meta token with probability `p`.
pub fn sample_meta_mask(p: f64, seed: u64) -> MetaMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = MetaMask::NONE;
    for m in mask.0.iter_mut() {
        // random_bool(0) is never true and random_bool(1) always is.
        *m = rng.random_bool(p.clamp(0.0, 1.0));
    }
    mask
}

/// Replaces the masked meta rows of `seq` with `null` (`[1 × d]`).
/// Class and vision tokens are never touched.
pub fn apply_meta_mask(
    tape: &mut Tape,
    seq: &TokenSequence,
    null: Var,
    mask: MetaMask,
) -> Result<TokenSequence> {
    let layout = seq.layout;
    if layout.n_meta != N_META_TOKENS {
        return Err(Error::shape(
            "apply_meta_mask",
            format!("expected {N_META_TOKENS} meta tokens, layout has {}", layout.n_meta),
        ));
    }
    if !mask.0.iter().any(|&m| m) {
        return Ok(*seq);
    }
    let mut rows = Vec::new();
    if layout.n_class > 0 {
        rows.push(tape.narrow(seq.tokens, 0, 0, layout.n_class)?);
    }
    for i in 0..N_META_TOKENS {
        if mask.is_masked(i) {
            rows.push(null);
        } else {
            rows.push(tape.narrow(seq.tokens, 0, layout.meta_start() + i, 1)?);
        }
    }
    rows.push(tape.narrow(seq.tokens, 0, layout.vision_start(), layout.n_vision())?);
    let tokens = tape.concat(&rows, 0)?;
    TokenSequence::new(tape, tokens, layout)
}

pub(crate) fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.bias_last(y, b)
}

/// Embeds an encoded record `v` (`[1 × 3]`) as two tokens `[2 × d]`:
/// `gelu(age·W_age + b_age)` and `gelu(onehot·W_sex + b_sex)`.
pub fn embed_meta(tape: &mut Tape, store: &ParamStore, prefix: &str, v: Var) -> Result<Var> {
    if tape.shape(v) != [1, 3] {
        return Err(Error::shape(
            "embed_meta",
            format!("encoded meta must be [1×3], got {:?}", tape.shape(v)),
        ));
    }
    let age = tape.narrow(v, 1, 0, 1)?;
    let sex = tape.narrow(v, 1, 1, 2)?;
    let mut tokens = Vec::with_capacity(N_META_TOKENS);
    for (name, input) in [("age", age), ("sex", sex)] {
        let w = tape.param(store, &format!("{prefix}.{name}.weight"))?;
        let b = tape.param(store, &format!("{prefix}.{name}.bias"))?;
        let t = linear(tape, input, w, b)?;
        tokens.push(tape.gelu(t)?);
    }
    tape.concat(&tokens, 0)
}

/// Single-vector metadata embedding `gelu(v·W + b)` used by late fusion.
pub fn embed_meta_vector(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    v: Var,
) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.weight"))?;
    let b = tape.param(store, &format!("{prefix}.bias"))?;
    let t = linear(tape, v, w, b)?;
    tape.gelu(t)
}

/// Merges the S3 and S4 class tokens (`[1 × d3]`, `[1 × d4]`) into `y` (`[1 × d4]`):
/// the S3 token is normalized and projected by a two-layer MLP, stacked with
/// the S4 token as a length-2 sequence, reduced by a width-2 1-D convolution
/// and normalized.
pub fn aggregate_class_tokens(
    tape: &mut Tape,
    store: &ParamStore,
    z1: Var,
    z2: Var,
) -> Result<Var> {
    let mut p = |name: &str| tape.param(store, &format!("agg.{name}"));
    let (ng, nb) = (p("norm.gamma")?, p("norm.beta")?);
    let (w1, b1) = (p("mlp.fc1.weight")?, p("mlp.fc1.bias")?);
    let (w2, b2) = (p("mlp.fc2.weight")?, p("mlp.fc2.bias")?);
    let (kc, bc) = (p("conv.weight")?, p("conv.bias")?);
    let (og, ob) = (p("out_norm.gamma")?, p("out_norm.beta")?);

    let n = tape.layer_norm(z1, ng, nb, LN_EPS)?;
    let h = linear(tape, n, w1, b1)?;
    let h = tape.gelu(h)?;
    let projected = linear(tape, h, w2, b2)?;

    let d4 = tape.shape(z2)[1];
    let stacked = tape.concat(&[projected, z2], 0)?;
    let channels = tape.transpose(stacked)?;
    let conv = tape.conv1d(channels, kc)?;
    let conv = tape.bias_first(conv, bc)?;
    let row = tape.reshape(conv, &[1, d4])?;
    tape.layer_norm(row, og, ob, LN_EPS)
}

/// Two-layer head over `[y; m]`.
pub fn late_fusion_head(
    tape: &mut Tape,
    store: &ParamStore,
    y: Var,
    m: Var,
) -> Result<Var> {
    let joined = tape.concat(&[y, m], 1)?;
    let w1 = tape.param(store, "late.fc1.weight")?;
    let b1 = tape.param(store, "late.fc1.bias")?;
    let w2 = tape.param(store, "late.fc2.weight")?;
    let b2 = tape.param(store, "late.fc2.bias")?;
    let h = linear(tape, joined, w1, b1)?;
    let h = tape.gelu(h)?;
    linear(tape, h, w2, b2)
}

/// Early-fusion forward pass. With `record == None` every meta token must be
/// masked.
pub fn forward_early_fusion(
    model: &Model,
    tape: &mut Tape,
    image: &Tensor,
    record: Option<&MetaRecord>,
    mask: MetaMask,
) -> Result<ForwardOutput> {
    if model.config.fusion != FusionMode::Early {
        return Err(Error::Config(format!(
            "model is configured for {:?} fusion, not early",
            model.config.fusion
        )));
    }
    let meta = match record {
        Some(rec) => MetaInput::Record { record: rec, mask },
        None if mask.all() => MetaInput::Masked,
        None => {
            return Err(Error::Validation(
                "early fusion needs metadata unless every meta token is masked".into(),
            ))
        }
    };
    model.forward(tape, image, meta)
}

pub fn forward_late_fusion(
    model: &Model,
    tape: &mut Tape,
    image: &Tensor,
    record: &MetaRecord,
) -> Result<ForwardOutput> {
    if model.config.fusion != FusionMode::Late {
        return Err(Error::Config(format!(
            "model is configured for {:?} fusion, not late",
            model.config.fusion
        )));
    }
    model.forward(
        tape,
        image,
        MetaInput::Record {
            record,
            mask: MetaMask::NONE,
        },
    )
}
