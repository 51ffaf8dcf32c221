//! The five-stage hybrid network.
//!
//! S0 is a plain convolutional stem, S1 and S2 stack MBConv blocks with
//! squeeze-and-excitation, and S3 and S4 tokenize their input with an
//! overlapping strided convolution and run relative-bias transformer blocks.
//! Each transformer stage carries its own class token; the two are merged by
//! [`aggregate_class_tokens`] before the classifier head.
//!
//! Convolutional stages normalize each sample's feature map on its own, so a
//! sample's output never depends on the rest of the batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{relative_table_len, relative_transformer_block, BlockParams, TokenLayout, TokenSequence, LN_EPS};
use crate::autodiff::{Padding, Tape, Var};
use crate::config::{FusionMode, ModelConfig};
use crate::error::{Error, Result};
use crate::fusion::{
    aggregate_class_tokens, embed_meta, embed_meta_vector, encode_meta, late_fusion_head, linear,
    MetaMask, MetaRecord, N_META_TOKENS,
};
use crate::params::ParamStore;
use crate::tensor::{shape_str, Tensor};

pub const PROJECTION_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    S0,
    S1,
    S2,
    S3,
    S4,
}

/// A `[C × H × W]` activation tagged with the stage that produced it.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub map: Var,
    pub stage: Stage,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation, resampled outside ±2σ.
    TruncNormal(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

struct Manifest(Vec<ParamSpec>);

impl Manifest {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.0.push(ParamSpec { name, shape, init });
    }

    fn conv(&mut self, prefix: &str, cout: usize, cin_per_group: usize, k: usize) {
        let fan_in = (cin_per_group * k * k) as f64;
        self.add(
            format!("{prefix}.weight"),
            vec![cout, cin_per_group, k, k],
            Init::TruncNormal(fan_in.sqrt().recip()),
        );
        // Small random biases, as in the usual fan-in conv initialization.
        self.add(format!("{prefix}.bias"), vec![cout], Init::Uniform(fan_in.sqrt().recip()));
    }

    fn norm(&mut self, prefix: &str, d: usize) {
        self.add(format!("{prefix}.gamma"), vec![d], Init::Ones);
        self.add(format!("{prefix}.beta"), vec![d], Init::Zeros);
    }

    fn linear(&mut self, prefix: &str, din: usize, dout: usize, std: f64) {
        self.add(format!("{prefix}.weight"), vec![din, dout], Init::TruncNormal(std));
        self.add(format!("{prefix}.bias"), vec![dout], Init::Zeros);
    }

    fn transformer_block(&mut self, prefix: &str, d: usize, heads: usize, grid: usize, ratio: usize) {
        self.norm(&format!("{prefix}.norm1"), d);
        for p in ["q", "k", "v", "proj"] {
            self.linear(&format!("{prefix}.attn.{p}"), d, d, PROJECTION_STD);
        }
        self.add(
            format!("{prefix}.attn.rel_bias_table"),
            vec![heads, relative_table_len(grid)],
            Init::Zeros,
        );
        self.add(format!("{prefix}.attn.shared_bias"), vec![heads], Init::Zeros);
        self.norm(&format!("{prefix}.norm2"), d);
        self.linear(&format!("{prefix}.mlp.fc1"), d, ratio * d, PROJECTION_STD);
        self.linear(&format!("{prefix}.mlp.fc2"), ratio * d, d, PROJECTION_STD);
    }
}

/// Every learnable tensor of a model, in construction order.
pub fn param_manifest(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let mut m = Manifest(Vec::new());
    let h: Vec<usize> = cfg.stages.iter().map(|s| s.hidden).collect();

    for l in 0..cfg.stages[0].blocks {
        let cin = if l == 0 { cfg.in_channels } else { h[0] };
        m.conv(&format!("s0.conv{l}"), h[0], cin, 3);
        m.norm(&format!("s0.norm{l}"), h[0]);
    }

    for s in 1..=2 {
        for b in 0..cfg.stages[s].blocks {
            let cin = if b == 0 { h[s - 1] } else { h[s] };
            let e = cin * cfg.mbconv_expansion;
            let r = e / cfg.se_reduction;
            let p = format!("s{s}.block{b}");
            m.conv(&format!("{p}.expand"), e, cin, 1);
            m.norm(&format!("{p}.expand_norm"), e);
            m.conv(&format!("{p}.dw"), e, 1, 3);
            m.norm(&format!("{p}.dw_norm"), e);
            m.linear(&format!("{p}.se.fc1"), e, r, (e as f64).sqrt().recip());
            m.linear(&format!("{p}.se.fc2"), r, e, (r as f64).sqrt().recip());
            m.conv(&format!("{p}.project"), h[s], e, 1);
            m.norm(&format!("{p}.project_norm"), h[s]);
        }
    }

    let grids = cfg.grids();
    for (i, s) in [3usize, 4].into_iter().enumerate() {
        m.conv(&format!("s{s}.embed"), h[s], h[s - 1], 3);
        m.norm(&format!("s{s}.embed_norm"), h[s]);
        m.add(format!("s{s}.cls_token"), vec![1, h[s]], Init::TruncNormal(PROJECTION_STD));
        for b in 0..cfg.stages[s].blocks {
            m.transformer_block(&format!("s{s}.block{b}"), h[s], cfg.heads[i], grids[i], cfg.mlp_ratio);
        }
    }

    match cfg.fusion {
        FusionMode::VisionOnly => {}
        FusionMode::Early => {
            m.linear("meta.age", 1, h[3], 1.0);
            m.linear("meta.sex", 2, h[3], (2f64).sqrt().recip());
            m.add("s3.meta_null".into(), vec![1, h[3]], Init::TruncNormal(PROJECTION_STD));
            m.linear("s4.meta_proj", h[3], h[4], (h[3] as f64).sqrt().recip());
            m.add("s4.meta_null".into(), vec![1, h[4]], Init::TruncNormal(PROJECTION_STD));
        }
        FusionMode::Late => {
            m.linear("late.meta", cfg.meta_dim, h[4], (cfg.meta_dim as f64).sqrt().recip());
        }
    }

    m.norm("agg.norm", h[3]);
    m.linear("agg.mlp.fc1", h[3], h[4], PROJECTION_STD);
    m.linear("agg.mlp.fc2", h[4], h[4], PROJECTION_STD);
    let fan_in = (2 * h[4]) as f64;
    m.add("agg.conv.weight".into(), vec![h[4], h[4], 2], Init::TruncNormal(fan_in.sqrt().recip()));
    m.add("agg.conv.bias".into(), vec![h[4]], Init::Zeros);
    m.norm("agg.out_norm", h[4]);

    match cfg.fusion {
        FusionMode::Late => {
            m.linear("late.fc1", 2 * h[4], h[4], PROJECTION_STD);
            m.linear("late.fc2", h[4], cfg.num_classes, PROJECTION_STD);
        }
        _ => m.linear("head", h[4], cfg.num_classes, PROJECTION_STD),
    }
    Ok(m.0)
}

/// Number of learnable scalars for `cfg`.
pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    Ok(param_manifest(cfg)?
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum())
}

fn initialize(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = spec.shape.iter().product();
    let data = match spec.init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::TruncNormal(std) => {
            let normal = Normal::new(0.0, std).expect("positive std");
            (0..n)
                .map(|_| loop {
                    let v: f64 = normal.sample(rng);
                    if v.abs() <= 2.0 * std {
                        break v;
                    }
                })
                .collect()
        }
        Init::Uniform(bound) => (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
    };
    Tensor::new(spec.shape.clone(), data).expect("manifest shapes are positive")
}

/// How metadata is supplied to a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum MetaInput<'a> {
    /// Pure vision pipeline: no meta tokens, zero meta vector for late fusion.
    Absent,
    /// Early fusion with every meta token replaced by the null token.
    Masked,
    Record {
        record: &'a MetaRecord,
        mask: MetaMask,
    },
}

pub struct ForwardOutput {
    /// `[num_classes]`
    pub logits: Var,
    pub s2: FeatureMap,
    /// S3 class token `[1 × d3]` and S4 class token `[1 × d4]`.
    pub class_tokens: (Var, Var),
    pub layouts: [TokenLayout; 2],
}

/// Model configuration and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Seeded initialization of every parameter of `cfg`.
pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    let manifest = param_manifest(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamStore::new();
    for spec in &manifest {
        params.insert(spec.name.clone(), initialize(spec, &mut rng))?;
    }
    Ok(Model {
        config: cfg.clone(),
        params,
    })
}

// ---- stage building blocks --------------------------------------------------

/// Per-sample normalization of `x[C × H × W]` over all of its values
/// (group norm with a single group), followed by a per-channel affine map.
pub fn group_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let flat = tape.reshape(x, &[1, n])?;
    let ones = tape.constant(Tensor::ones(&[n]));
    let zeros = tape.constant(Tensor::zeros(&[n]));
    let normed = tape.layer_norm(flat, ones, zeros, LN_EPS)?;
    let normed = tape.reshape(normed, &shape)?;
    let scaled = tape.scale_channels(normed, gamma)?;
    tape.bias_first(scaled, beta)
}

fn conv_norm(
    tape: &mut Tape,
    store: &ParamStore,
    conv: &str,
    norm: &str,
    x: Var,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Var> {
    let w = tape.param(store, &format!("{conv}.weight"))?;
    let b = tape.param(store, &format!("{conv}.bias"))?;
    let y = tape.conv2d_padded(x, w, stride, pad, groups, Padding::Replicate)?;
    let y = tape.bias_first(y, b)?;
    let g = tape.param(store, &format!("{norm}.gamma"))?;
    let be = tape.param(store, &format!("{norm}.beta"))?;
    group_norm(tape, y, g, be)
}

/// Stem: `layers` × (3×3 conv, channel norm, SiLU); the first conv has stride 2.
pub fn conv_stem(
    tape: &mut Tape,
    store: &ParamStore,
    image: Var,
    layers: usize,
) -> Result<FeatureMap> {
    let shape = tape.shape(image).to_vec();
    if shape.len() != 3 || shape[1] % 2 != 0 || shape[2] % 2 != 0 {
        return Err(Error::Config(format!(
            "stem needs a C×H×W image with even sides, got {}",
            shape_str(&shape)
        )));
    }
    let mut x = image;
    for l in 0..layers {
        let stride = if l == 0 { 2 } else { 1 };
        x = conv_norm(tape, store, &format!("s0.conv{l}"), &format!("s0.norm{l}"), x, stride, 1, 1)?;
        x = tape.silu(x)?;
    }
    Ok(FeatureMap {
        map: x,
        stage: Stage::S0,
    })
}

/// Channel gating: global average pool, `C → C/r` SiLU bottleneck, `C/r → C`
/// sigmoid, then rescale each channel of `x`.
pub fn squeeze_excitation(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    reduction: usize,
) -> Result<Var> {
    let c = tape.shape(x)[0];
    if reduction == 0 || c % reduction != 0 {
        return Err(Error::Config(format!(
            "{prefix}: {c} channels not divisible by SE reduction {reduction}"
        )));
    }
    let pooled = tape.mean_trailing(x)?;
    let pooled = tape.reshape(pooled, &[1, c])?;
    let mut p = |n: &str| tape.param(store, &format!("{prefix}.{n}"));
    let (w1, b1, w2, b2) = (p("fc1.weight")?, p("fc1.bias")?, p("fc2.weight")?, p("fc2.bias")?);
    if tape.shape(w1) != [c, c / reduction] {
        return Err(Error::Config(format!(
            "{prefix}: squeeze weights {} do not match {c} channels / {reduction}",
            shape_str(tape.shape(w1))
        )));
    }
    let h = linear(tape, pooled, w1, b1)?;
    let h = tape.silu(h)?;
    let g = linear(tape, h, w2, b2)?;
    let g = tape.sigmoid(g)?;
    let g = tape.reshape(g, &[c])?;
    tape.scale_channels(x, g)
}

/// Inverted bottleneck: 1×1 expand, 3×3 depthwise (stride `stride`), SE,
/// 1×1 project; residual when the stride is 1 and widths match.
pub fn mbconv_block(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    stride: usize,
    se_reduction: usize,
) -> Result<Var> {
    if stride != 1 && stride != 2 {
        return Err(Error::Config(format!("{prefix}: stride must be 1 or 2, got {stride}")));
    }
    let expanded = conv_norm(tape, store, &format!("{prefix}.expand"), &format!("{prefix}.expand_norm"), x, 1, 0, 1)?;
    let expanded = tape.silu(expanded)?;
    let e = tape.shape(expanded)[0];
    let dw = conv_norm(tape, store, &format!("{prefix}.dw"), &format!("{prefix}.dw_norm"), expanded, stride, 1, e)?;
    let dw = tape.silu(dw)?;
    let gated = squeeze_excitation(tape, store, &format!("{prefix}.se"), dw, se_reduction)?;
    let out = conv_norm(tape, store, &format!("{prefix}.project"), &format!("{prefix}.project_norm"), gated, 1, 0, 1)?;
    if stride == 1 && tape.shape(out) == tape.shape(x) {
        tape.add(out, x)
    } else {
        Ok(out)
    }
}

fn mbconv_stage(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    index: usize,
    x: Var,
) -> Result<Var> {
    let mut x = x;
    for b in 0..cfg.stages[index].blocks {
        let stride = if b == 0 { 2 } else { 1 };
        x = mbconv_block(tape, store, &format!("s{index}.block{b}"), x, stride, cfg.se_reduction)?;
    }
    Ok(x)
}

/// 3×3 stride-2 zero-padded convolution followed by a per-token layer norm;
/// returns the `[M² × d]` vision tokens in row-major grid order and `M`.
pub fn overlapping_patch_embed(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: Var,
) -> Result<(Var, usize)> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || shape[1] != shape[2] || shape[1] % 2 != 0 {
        return Err(Error::Config(format!(
            "{prefix}: patch embedding needs a square map with an even side, got {}",
            shape_str(&shape)
        )));
    }
    let w = tape.param(store, &format!("{prefix}.embed.weight"))?;
    let b = tape.param(store, &format!("{prefix}.embed.bias"))?;
    let y = tape.conv2d(x, w, 2, 1)?;
    let y = tape.bias_first(y, b)?;
    let ys = tape.shape(y).to_vec();
    let (d, m) = (ys[0], ys[1]);
    let flat = tape.reshape(y, &[d, m * m])?;
    let tokens = tape.transpose(flat)?;
    let g = tape.param(store, &format!("{prefix}.embed_norm.gamma"))?;
    let be = tape.param(store, &format!("{prefix}.embed_norm.beta"))?;
    let tokens = tape.layer_norm(tokens, g, be, LN_EPS)?;
    Ok((tokens, m))
}

fn transformer_stage(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    index: usize,
    seq: TokenSequence,
) -> Result<TokenSequence> {
    let heads = cfg.heads[index - 3];
    let mut seq = seq;
    for b in 0..cfg.stages[index].blocks {
        let params = BlockParams::bind(tape, store, &format!("s{index}.block{b}"), heads, seq.layout.grid)?;
        seq = relative_transformer_block(tape, &seq, &params)?;
    }
    Ok(seq)
}

impl Model {
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let manifest = param_manifest(&config)?;
        if manifest.len() != params.len() {
            return Err(Error::Config(format!(
                "parameter set has {} tensors, configuration expects {}",
                params.len(),
                manifest.len()
            )));
        }
        for spec in &manifest {
            let t = params
                .get(&spec.name)
                .ok_or_else(|| Error::Config(format!("missing parameter `{}`", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter `{}` has shape {}, configuration expects {}",
                    spec.name,
                    shape_str(t.shape()),
                    shape_str(&spec.shape)
                )));
            }
        }
        Ok(Model { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn check_image(&self, image: &Tensor) -> Result<()> {
        let c = &self.config;
        let expected = [c.in_channels, c.image_size, c.image_size];
        if image.shape() != expected {
            return Err(Error::Validation(format!(
                "image has shape {}, model expects {}",
                shape_str(image.shape()),
                shape_str(&expected)
            )));
        }
        Ok(())
    }

    /// Runs S0 through S4, class-token aggregation and the head.
    pub fn forward(&self, tape: &mut Tape, image: &Tensor, meta: MetaInput<'_>) -> Result<ForwardOutput> {
        self.check_image(image)?;
        let cfg = &self.config;
        let store = &self.params;
        let early = cfg.fusion == FusionMode::Early;

        let (mean, std) = (cfg.input_mean, cfg.input_std);
        let normalized: Vec<f64> = image.data().iter().map(|v| (v - mean) / std).collect();
        let x = tape.constant(Tensor::new(image.shape().to_vec(), normalized)?);
        let s0 = conv_stem(tape, store, x, cfg.stages[0].blocks)?;
        let s1 = mbconv_stage(tape, store, cfg, 1, s0.map)?;
        let s2 = mbconv_stage(tape, store, cfg, 2, s1)?;

        // Encoded metadata, shared by both fusion modes.
        let encoded = match meta {
            MetaInput::Record { record, .. } if cfg.fusion.uses_meta() => {
                let v = encode_meta(record)?;
                Some(tape.constant(Tensor::new(vec![1, 3], v.to_vec())?))
            }
            _ => None,
        };
        let mask = match meta {
            MetaInput::Record { mask, .. } => mask,
            MetaInput::Masked => MetaMask::ALL,
            MetaInput::Absent => MetaMask::NONE,
        };
        let with_meta_tokens = early && !matches!(meta, MetaInput::Absent);

        // S3
        let (vision3, grid3) = overlapping_patch_embed(tape, store, "s3", s2)?;
        let cls3 = tape.param(store, "s3.cls_token")?;
        let mut rows = vec![cls3];
        if with_meta_tokens {
            let embedded = match encoded {
                Some(v) if !mask.all() => Some(embed_meta(tape, store, "meta", v)?),
                _ => None,
            };
            let null = tape.param(store, "s3.meta_null")?;
            for i in 0..N_META_TOKENS {
                match embedded {
                    Some(e) if !mask.is_masked(i) => rows.push(tape.narrow(e, 0, i, 1)?),
                    _ => rows.push(null),
                }
            }
        }
        rows.push(vision3);
        let n_meta = if with_meta_tokens { N_META_TOKENS } else { 0 };
        let layout3 = TokenLayout::new(1, n_meta, grid3);
        let tokens = tape.concat(&rows, 0)?;
        let seq3 = TokenSequence::new(tape, tokens, layout3)?;
        let seq3 = transformer_stage(tape, store, cfg, 3, seq3)?;
        let z1 = tape.narrow(seq3.tokens, 0, 0, 1)?;

        // S4: only the vision tokens are downsampled; meta tokens are projected.
        let d3 = cfg.stages[3].hidden;
        let vision = tape.narrow(seq3.tokens, 0, layout3.vision_start(), layout3.n_vision())?;
        let grid_map = tape.transpose(vision)?;
        let grid_map = tape.reshape(grid_map, &[d3, grid3, grid3])?;
        let (vision4, grid4) = overlapping_patch_embed(tape, store, "s4", grid_map)?;
        let cls4 = tape.param(store, "s4.cls_token")?;
        let mut rows = vec![cls4];
        if with_meta_tokens {
            let null = tape.param(store, "s4.meta_null")?;
            let (pw, pb) = (tape.param(store, "s4.meta_proj.weight")?, tape.param(store, "s4.meta_proj.bias")?);
            for i in 0..N_META_TOKENS {
                if mask.is_masked(i) {
                    rows.push(null);
                } else {
                    let t = tape.narrow(seq3.tokens, 0, layout3.meta_start() + i, 1)?;
                    rows.push(linear(tape, t, pw, pb)?);
                }
            }
        }
        rows.push(vision4);
        let layout4 = TokenLayout::new(1, n_meta, grid4);
        let tokens = tape.concat(&rows, 0)?;
        let seq4 = TokenSequence::new(tape, tokens, layout4)?;
        let seq4 = transformer_stage(tape, store, cfg, 4, seq4)?;
        let z2 = tape.narrow(seq4.tokens, 0, 0, 1)?;

        let y = aggregate_class_tokens(tape, store, z1, z2)?;
        let logits = match cfg.fusion {
            FusionMode::Late => {
                let m = match encoded {
                    Some(v) => embed_meta_vector(tape, store, "late.meta", v)?,
                    None => tape.constant(Tensor::zeros(&[1, cfg.stages[4].hidden])),
                };
                late_fusion_head(tape, store, y, m)?
            }
            _ => {
                let w = tape.param(store, "head.weight")?;
                let b = tape.param(store, "head.bias")?;
                linear(tape, y, w, b)?
            }
        };
        let logits = tape.reshape(logits, &[cfg.num_classes])?;
        Ok(ForwardOutput {
            logits,
            s2: FeatureMap {
                map: s2,
                stage: Stage::S2,
            },
            class_tokens: (z1, z2),
            layouts: [layout3, layout4],
        })
    }

    /// Logits from the image alone.
    pub fn forward_vision(&self, tape: &mut Tape, image: &Tensor) -> Result<ForwardOutput> {
        self.forward(tape, image, MetaInput::Absent)
    }

    /// Inference logits for one sample, using the metadata when the model fuses it.
    pub fn predict(&self, image: &Tensor, record: Option<&MetaRecord>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let meta = match (self.config.fusion, record) {
            (FusionMode::VisionOnly, _) => MetaInput::Absent,
            (_, Some(record)) => MetaInput::Record {
                record,
                mask: MetaMask::NONE,
            },
            (_, None) => {
                return Err(Error::Validation(format!(
                    "{:?}-fusion model needs metadata",
                    self.config.fusion
                )))
            }
        };
        let out = self.forward(&mut tape, image, meta)?;
        Ok(tape.value(out.logits).clone())
    }
}
