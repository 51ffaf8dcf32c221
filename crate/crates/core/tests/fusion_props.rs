//! Metadata fusion: masking invariants, the class-token aggregator contract
//! and the late-fusion head.

use metafuse_core::attention::{TokenLayout, TokenSequence};
use metafuse_core::backbone::{param_manifest, MetaInput};
use metafuse_core::config::VARIANTS;
use metafuse_core::fusion::{
    aggregate_class_tokens, apply_meta_mask, embed_meta, encode_meta, forward_early_fusion,
    forward_late_fusion, mask_probability, sample_meta_mask, MaskSchedule, N_META_TOKENS,
};
use metafuse_core::gradcheck::{finite_diff_check, GradCheckOptions, DEFAULT_TOL};
use metafuse_core::{
    build_model, FusionMode, MetaMask, MetaRecord, ModelConfig, ParamStore, Sex, Tape, Tensor,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_record(rng: &mut ChaCha8Rng) -> MetaRecord {
    let sex = [Sex::Female, Sex::Male, Sex::Unknown][rng.random_range(0..3)];
    MetaRecord::new(rng.random_range(0.0..=19.0), sex).unwrap()
}

fn image(rng: &mut ChaCha8Rng, size: usize) -> Tensor {
    let n = size * size;
    Tensor::new(vec![1, size, size], (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn logits(model: &metafuse_core::Model, img: &Tensor, meta: MetaInput<'_>) -> Tensor {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, img, meta).unwrap();
    tape.value(out.logits).clone()
}

#[test]
fn encoding_examples() {
    let enc = |age, sex| encode_meta(&MetaRecord { age, sex }).unwrap();
    assert_eq!(enc(10.0, Sex::Male), [0.10, 0.0, 1.0]);
    assert_eq!(enc(0.0, Sex::Female), [0.0, 1.0, 0.0]);
    assert_eq!(enc(50.0, Sex::Unknown), [0.50, 0.0, 0.0]);
    assert!(encode_meta(&MetaRecord { age: -1.0, sex: Sex::Male }).is_err());
}

#[test]
fn fully_masked_early_fusion_ignores_the_record() {
    let model = build_model(&ModelConfig::tiny().with_fusion(FusionMode::Early).with_seed(3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let img = image(&mut rng, 32);
    let reference = logits(&model, &img, MetaInput::Masked);
    for _ in 0..50 {
        let (a, b) = (random_record(&mut rng), random_record(&mut rng));
        let la = logits(&model, &img, MetaInput::Record { record: &a, mask: MetaMask::ALL });
        let lb = logits(&model, &img, MetaInput::Record { record: &b, mask: MetaMask::ALL });
        assert!(la.max_abs_diff(&lb) < 1e-12);
        assert!(la.max_abs_diff(&reference) < 1e-12);
    }
}

#[test]
fn early_fusion_depends_on_the_record_when_unmasked() {
    let model = build_model(&ModelConfig::tiny().with_fusion(FusionMode::Early).with_seed(3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = image(&mut rng, 32);
    let a = MetaRecord::new(2.0, Sex::Female).unwrap();
    let b = MetaRecord::new(17.0, Sex::Male).unwrap();
    let la = logits(&model, &img, MetaInput::Record { record: &a, mask: MetaMask::NONE });
    let lb = logits(&model, &img, MetaInput::Record { record: &b, mask: MetaMask::NONE });
    assert!(la.max_abs_diff(&lb) > 1e-9);
}

#[test]
fn early_fusion_token_layout() {
    let model = build_model(&ModelConfig::tiny().with_fusion(FusionMode::Early)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rec = random_record(&mut rng);
    let mut tape = Tape::new();
    let out = forward_early_fusion(&model, &mut tape, &image(&mut rng, 32), Some(&rec), MetaMask::NONE).unwrap();
    let [g3, g4] = model.config.grids();
    assert_eq!(out.layouts, [TokenLayout::new(1, 2, g3), TokenLayout::new(1, 2, g4)]);
    assert_eq!(out.layouts[0].len(), g3 * g3 + 3);
    // Missing metadata is only allowed when everything is masked.
    let mut tape = Tape::new();
    assert!(forward_early_fusion(&model, &mut tape, &image(&mut rng, 32), None, MetaMask::NONE).is_err());
}

#[test]
fn late_fusion_without_meta_path_equals_vision_logits() {
    let mut model = build_model(&ModelConfig::tiny().with_fusion(FusionMode::Late).with_seed(5)).unwrap();
    let d4 = model.config.stages[4].hidden;
    for name in ["late.meta.weight", "late.meta.bias"] {
        let t = model.params.get_mut(name).unwrap();
        t.data_mut().fill(0.0);
    }
    let fc1 = model.params.get_mut("late.fc1.weight").unwrap();
    assert_eq!(fc1.shape(), &[2 * d4, d4]);
    fc1.data_mut()[d4 * d4..].fill(0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = image(&mut rng, 32);
    let vision = logits(&model, &img, MetaInput::Absent);
    for _ in 0..10 {
        let rec = random_record(&mut rng);
        let mut tape = Tape::new();
        let out = forward_late_fusion(&model, &mut tape, &img, &rec).unwrap();
        assert_eq!(tape.value(out.logits), &vision);
    }
}

/// Just the aggregator's parameters for `cfg`, randomly filled.
fn aggregator_params(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut s = ParamStore::new();
    for spec in param_manifest(cfg).unwrap() {
        if spec.name.starts_with("agg.") {
            s.insert(spec.name, random(rng, &spec.shape)).unwrap();
        }
    }
    s
}

fn layer_norm_oracle(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
}

fn set(store: &mut ParamStore, name: &str, f: impl Fn(&mut Tensor)) {
    f(store.get_mut(name).unwrap());
}

#[test]
fn selecting_kernel_reproduces_normalized_second_token() {
    let cfg = ModelConfig::tiny();
    let (d3, d4) = (cfg.stages[3].hidden, cfg.stages[4].hidden);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = aggregator_params(&cfg, &mut rng);
    set(&mut store, "agg.conv.weight", |k| {
        k.data_mut().fill(0.0);
        for c in 0..d4 {
            // kernel[c][c][1]: identity channel map on the second slot.
            k.data_mut()[(c * d4 + c) * 2 + 1] = 1.0;
        }
    });
    set(&mut store, "agg.conv.bias", |b| b.data_mut().fill(0.0));
    set(&mut store, "agg.out_norm.gamma", |g| g.data_mut().fill(1.0));
    set(&mut store, "agg.out_norm.beta", |b| b.data_mut().fill(0.0));

    let z2 = random(&mut rng, &[1, d4]);
    let mut tape = Tape::new();
    let z1v = tape.constant(random(&mut rng, &[1, d3]));
    let z2v = tape.constant(z2.clone());
    let y = aggregate_class_tokens(&mut tape, &store, z1v, z2v).unwrap();
    let ones = tape.constant(Tensor::ones(&[d4]));
    let zeros = tape.constant(Tensor::zeros(&[d4]));
    let direct = tape.layer_norm(z2v, ones, zeros, 1e-5).unwrap();
    assert_eq!(tape.value(y), tape.value(direct));
    let oracle = layer_norm_oracle(z2.data());
    for (a, b) in tape.value(y).data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn averaging_kernel_on_equal_tokens_reproduces_normalized_token() {
    let cfg = ModelConfig::tiny();
    let d4 = cfg.stages[4].hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = aggregator_params(&cfg, &mut rng);
    set(&mut store, "agg.conv.weight", |k| {
        k.data_mut().fill(0.0);
        for c in 0..d4 {
            k.data_mut()[(c * d4 + c) * 2] = 0.5;
            k.data_mut()[(c * d4 + c) * 2 + 1] = 0.5;
        }
    });
    set(&mut store, "agg.conv.bias", |b| b.data_mut().fill(0.0));
    set(&mut store, "agg.out_norm.gamma", |g| g.data_mut().fill(1.0));
    set(&mut store, "agg.out_norm.beta", |b| b.data_mut().fill(0.0));
    let z2 = random(&mut rng, &[1, d4]);
    // Make the projected first token equal z2: zero MLP weights, fc2 bias = z2.
    set(&mut store, "agg.mlp.fc2.weight", |w| w.data_mut().fill(0.0));
    set(&mut store, "agg.mlp.fc2.bias", |b| b.data_mut().copy_from_slice(z2.data()));

    let mut tape = Tape::new();
    let z1 = tape.constant(random(&mut rng, &[1, cfg.stages[3].hidden]));
    let z2v = tape.constant(z2.clone());
    let y = aggregate_class_tokens(&mut tape, &store, z1, z2v).unwrap();
    for (a, b) in tape.value(y).data().iter().zip(layer_norm_oracle(z2.data())) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn aggregate_width_equals_last_stage_width_for_every_variant() {
    for name in VARIANTS {
        let cfg = ModelConfig::variant(name).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let store = aggregator_params(&cfg, &mut rng);
        let mut tape = Tape::new();
        let z1 = tape.constant(random(&mut rng, &[1, cfg.stages[3].hidden]));
        let z2 = tape.constant(random(&mut rng, &[1, cfg.stages[4].hidden]));
        let y = aggregate_class_tokens(&mut tape, &store, z1, z2).unwrap();
        assert_eq!(tape.shape(y), &[1, cfg.stages[4].hidden], "{name}");
    }
}

#[test]
fn aggregator_gradients_match_finite_differences() {
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = aggregator_params(&cfg, &mut rng);
    // Weights at the scale of a fan-in initialization keep every gradient
    // well above finite-difference round-off.
    for (_, t) in store.iter_mut() {
        let fan_in = t.shape()[0] as f64;
        for v in t.data_mut() {
            *v /= fan_in.sqrt();
        }
    }
    let z1 = random(&mut rng, &[1, cfg.stages[3].hidden]);
    let z2 = random(&mut rng, &[1, cfg.stages[4].hidden]);
    let report = finite_diff_check(
        |tape, p| {
            let a = tape.constant(z1.clone());
            let b = tape.constant(z2.clone());
            let y = aggregate_class_tokens(tape, p, a, b)?;
            let y2 = tape.mul(y, y)?;
            let w = tape.constant(Tensor::new(vec![1, z2.numel()], (0..z2.numel()).map(|i| i as f64 * 0.1).collect())?);
            let yw = tape.mul(y2, w)?;
            tape.sum(yw)
        },
        &store,
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passes(DEFAULT_TOL), "{report:?}");
}

#[test]
fn zero_embedding_gives_zero_tokens() {
    let mut store = ParamStore::new();
    store.insert("m.age.weight", Tensor::zeros(&[1, 32])).unwrap();
    store.insert("m.age.bias", Tensor::zeros(&[32])).unwrap();
    store.insert("m.sex.weight", Tensor::zeros(&[2, 32])).unwrap();
    store.insert("m.sex.bias", Tensor::zeros(&[32])).unwrap();
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::new(vec![1, 3], vec![0.3, 0.0, 1.0]).unwrap());
    let t = embed_meta(&mut tape, &store, "m", v).unwrap();
    assert_eq!(tape.shape(t), &[N_META_TOKENS, 32]);
    assert!(tape.value(t).data().iter().all(|&x| x == 0.0));
}

#[test]
fn masking_replaces_only_meta_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let layout = TokenLayout::new(1, 2, 2);
    let mut tape = Tape::new();
    let x = random(&mut rng, &[layout.len(), 4]);
    let xv = tape.constant(x.clone());
    let null = tape.constant(Tensor::full(&[1, 4], 9.0));
    let seq = TokenSequence::new(&tape, xv, layout).unwrap();
    let same = apply_meta_mask(&mut tape, &seq, null, MetaMask::NONE).unwrap();
    assert_eq!(tape.value(same.tokens), &x);
    let masked = apply_meta_mask(&mut tape, &seq, null, MetaMask([false, true])).unwrap();
    let y = tape.value(masked.tokens);
    for r in 0..layout.len() {
        for c in 0..4 {
            let expected = if r == 2 { 9.0 } else { x.get(&[r, c]) };
            assert_eq!(y.get(&[r, c]), expected);
        }
    }
}

#[test]
fn mask_schedule_endpoints_and_midpoint() {
    let s = MaskSchedule::new(0.0, 0.5, 100).unwrap();
    assert_eq!(mask_probability(&s, 0).unwrap(), 0.0);
    assert_eq!(mask_probability(&s, 99).unwrap(), 0.5);
    assert!((mask_probability(&s, 50).unwrap() - 0.5 * 50.0 / 99.0).abs() < 1e-15);
    assert!(mask_probability(&s, 100).is_err());
    let one = MaskSchedule::new(0.2, 0.9, 1).unwrap();
    assert_eq!(mask_probability(&one, 0).unwrap(), 0.2);
    assert!(MaskSchedule::new(0.6, 0.5, 10).is_err());
}

#[test]
fn mask_rate_matches_probability() {
    for p in [0.0, 1.0] {
        for seed in 0..100 {
            let m = sample_meta_mask(p, seed);
            assert_eq!(m, if p == 1.0 { MetaMask::ALL } else { MetaMask::NONE });
        }
    }
    let mut counts = [0usize; N_META_TOKENS];
    for seed in 0..1000 {
        let m = sample_meta_mask(0.5, seed);
        for (i, c) in counts.iter_mut().enumerate() {
            *c += m.is_masked(i) as usize;
        }
    }
    for c in counts {
        let rate = c as f64 / 1000.0;
        assert!((0.45..=0.55).contains(&rate), "rate {rate}");
    }
}

proptest! {
    #[test]
    fn mask_probability_is_monotone(start in 0.0f64..1.0, span in 0.0f64..1.0, epochs in 1usize..60) {
        let end = (start + span).min(1.0);
        let s = MaskSchedule::new(start, end, epochs).unwrap();
        let mut prev = -1.0;
        for e in 0..epochs {
            let p = mask_probability(&s, e).unwrap();
            prop_assert!(p >= prev && (start..=end).contains(&p));
            prev = p;
        }
    }
}
