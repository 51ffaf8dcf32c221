//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Run with `cargo test -p metafuse-cli --test acceptance`. The directional and
//! saliency criteria train three small models, which takes several minutes.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use metafuse_core::attention::{assemble_bias, attention, relative_table_len, RelPosBias};
use metafuse_core::backbone::{param_manifest, MetaInput};
use metafuse_core::config::VARIANTS;
use metafuse_core::dataset::{generate_synthetic_with_truth, DatasetSpec, Split};
use metafuse_core::fusion::{aggregate_class_tokens, mask_probability, MaskSchedule};
use metafuse_core::metrics::{precision, roc_auc, sensitivity, specificity, ConfusionMatrix, Rate};
use metafuse_core::saliency::{gradcam, mass_inside};
use metafuse_core::{
    build_model, checkpoint, FusionMode, MetaMask, MetaRecord, ModelConfig, ParamStore, Sex, Tape,
    Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_metafuse"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> Result<Output, String> {
    let out = run(args);
    if out.status.success() {
        Ok(out)
    } else {
        Err(format!(
            "`metafuse {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Every file under `dir`, keyed by relative path.
fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

const COMPONENTS: [&str; 10] = [
    "conv stem",
    "squeeze-excitation",
    "mbconv",
    "relative bias",
    "attention",
    "transformer block",
    "class-token aggregation",
    "meta embedding",
    "late-fusion head",
    "linear head",
];

fn gradient_fidelity() -> Check {
    let start = Instant::now();
    let out = run(&["gradcheck", "--seed", "7", "--tol", "1e-4"]);
    let elapsed = start.elapsed();
    let stdout = String::from_utf8_lossy(&out.stdout);
    ensure!(out.status.success(), "gradcheck exited with {:?}:\n{stdout}", out.status.code());
    for c in COMPONENTS {
        ensure!(stdout.contains(&format!("  {c} ")), "component `{c}` not covered");
    }
    let worst = stdout
        .lines()
        .filter_map(|l| l.split("max rel error ").nth(1))
        .filter_map(|r| r.split_whitespace().next()?.parse::<f64>().ok())
        .fold(0.0, f64::max);
    ensure!(worst < 1e-4, "max relative error {worst:e}");
    ensure!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    let sabotaged = run(&["gradcheck", "--seed", "7", "--max-coords", "2", "--sabotage", "matmul"]);
    ensure!(sabotaged.status.code() == Some(2), "sabotaged build exited with {:?}", sabotaged.status.code());
    Ok(format!("max relative error {worst:.2e} over 3 fusion modes in {:.0}s; sabotaged adjoint exits 2", elapsed.as_secs_f64()))
}

fn bias_structure() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut cases = 0;
    for m in 1..=4 {
        for n in [0, 1, 3] {
            let heads = 2;
            let mut tape = Tape::new();
            let table = tape.constant(random(&mut rng, &[heads, relative_table_len(m)]));
            let shared = tape.constant(random(&mut rng, &[heads]));
            let rpb = RelPosBias::new(&tape, table, shared, m).unwrap();
            let b = assemble_bias(&mut tape, &rpb, n).unwrap();
            let bt = tape.value(b).clone();
            let sh = tape.value(rpb.shared).clone();
            let total = m * m + n;
            let cell = |i: usize| (((i - n) / m) as isize, ((i - n) % m) as isize);
            for h in 0..heads {
                for i in 0..total {
                    for j in 0..total {
                        if i < n || j < n {
                            ensure!(bt.get(&[h, i, j]) == sh.data()[h], "M={m} N={n}: non-visual entry ({i},{j}) not shared");
                            continue;
                        }
                        for i2 in n..total {
                            for j2 in n..total {
                                let (a, b2, c, d) = (cell(i), cell(j), cell(i2), cell(j2));
                                if (a.0 - b2.0, a.1 - b2.1) == (c.0 - d.0, c.1 - d.1) {
                                    ensure!(bt.get(&[h, i, j]) == bt.get(&[h, i2, j2]), "M={m} N={n}: translation broken");
                                }
                            }
                        }
                    }
                }
            }
            cases += 1;
        }
    }
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, d) = (rng.random_range(1..7), rng.random_range(1..5));
        let (q, k, v) = (random(&mut rng, &[t, d]), random(&mut rng, &[t, d]), random(&mut rng, &[t, d]));
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let zero = tape.constant(Tensor::zeros(&[t, t]));
        let y = attention(&mut tape, qv, kv, vv, zero).unwrap();
        for i in 0..t {
            let s: Vec<f64> = (0..t)
                .map(|j| (0..d).map(|c| q.get(&[i, c]) * k.get(&[j, c])).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..d {
                let o: f64 = (0..t).map(|j| e[j] / z * v.get(&[j, c])).sum();
                worst = worst.max((tape.value(y).get(&[i, c]) - o).abs());
            }
        }
    }
    ensure!(worst < 1e-12, "zero-bias attention differs from oracle by {worst:e}");
    Ok(format!("{cases} (M, N) layouts exhaustive; zero-bias attention within {worst:.1e} over 100 seeds"))
}

fn aggregator_store(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut s = ParamStore::new();
    for spec in param_manifest(cfg).unwrap() {
        if spec.name.starts_with("agg.") {
            s.insert(spec.name, random(rng, &spec.shape)).unwrap();
        }
    }
    s
}

fn aggregation_contract() -> Check {
    let cfg = ModelConfig::tiny();
    let d4 = cfg.stages[4].hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = aggregator_store(&cfg, &mut rng);
    let k = store.get_mut("agg.conv.weight").unwrap();
    k.data_mut().fill(0.0);
    for c in 0..d4 {
        k.data_mut()[(c * d4 + c) * 2 + 1] = 1.0;
    }
    store.get_mut("agg.conv.bias").unwrap().data_mut().fill(0.0);
    store.get_mut("agg.out_norm.gamma").unwrap().data_mut().fill(1.0);
    store.get_mut("agg.out_norm.beta").unwrap().data_mut().fill(0.0);
    let z2 = random(&mut rng, &[1, d4]);
    let mut tape = Tape::new();
    let z1v = tape.constant(random(&mut rng, &[1, cfg.stages[3].hidden]));
    let z2v = tape.constant(z2.clone());
    let y = aggregate_class_tokens(&mut tape, &store, z1v, z2v).unwrap();
    let ones = tape.constant(Tensor::ones(&[d4]));
    let zeros = tape.constant(Tensor::zeros(&[d4]));
    let ln = tape.layer_norm(z2v, ones, zeros, 1e-5).unwrap();
    ensure!(tape.value(y) == tape.value(ln), "selecting kernel output differs from LN(z2)");
    let n = d4 as f64;
    let mean = z2.data().iter().sum::<f64>() / n;
    let var = z2.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    for (a, v) in tape.value(y).data().iter().zip(z2.data()) {
        ensure!((a - (v - mean) / (var + 1e-5).sqrt()).abs() < 1e-12, "LN oracle mismatch");
    }
    for name in VARIANTS {
        let cfg = ModelConfig::variant(name).unwrap();
        let store = aggregator_store(&cfg, &mut rng);
        let mut tape = Tape::new();
        let z1 = tape.constant(random(&mut rng, &[1, cfg.stages[3].hidden]));
        let z2 = tape.constant(random(&mut rng, &[1, cfg.stages[4].hidden]));
        let y = aggregate_class_tokens(&mut tape, &store, z1, z2).unwrap();
        ensure!(tape.shape(y) == [1, cfg.stages[4].hidden], "{name}: width {:?}", tape.shape(y));
    }
    Ok(format!("selecting kernel gives LN(z2) exactly; width = S4 hidden for {}", VARIANTS.join(", ")))
}

fn masking_invariant() -> Check {
    let model = build_model(&ModelConfig::tiny().with_classes(2).with_fusion(FusionMode::Early).with_seed(3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let img = Tensor::new(vec![1, 32, 32], (0..1024).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let logits = |meta: MetaInput<'_>| {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &img, meta).unwrap();
        tape.value(out.logits).clone()
    };
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let sexes = [Sex::Female, Sex::Male, Sex::Unknown];
        let a = MetaRecord::new(rng.random_range(0.0..=19.0), sexes[rng.random_range(0..3)]).unwrap();
        let b = MetaRecord::new(rng.random_range(0.0..=19.0), sexes[rng.random_range(0..3)]).unwrap();
        let la = logits(MetaInput::Record { record: &a, mask: MetaMask::ALL });
        let lb = logits(MetaInput::Record { record: &b, mask: MetaMask::ALL });
        worst = worst.max(la.max_abs_diff(&lb));
    }
    ensure!(worst < 1e-12, "masked logits move by {worst:e}");
    let s = MaskSchedule::new(0.0, 0.5, 10).unwrap();
    let (first, last) = (mask_probability(&s, 0).unwrap(), mask_probability(&s, 9).unwrap());
    ensure!(first == 0.0 && last == 0.5, "schedule endpoints {first}, {last}");
    Ok(format!("max |Δlogit| {worst:.1e} over 50 record pairs; schedule endpoints 0 and 0.5 exact"))
}

fn registry() -> Check {
    let expected = [
        ("FG-0", [(3, 64), (2, 96), (3, 192), (5, 384), (2, 768)]),
        ("FG-1", [(3, 64), (2, 96), (6, 192), (14, 384), (3, 768)]),
        ("FG-2", [(3, 128), (2, 128), (6, 256), (14, 512), (3, 1024)]),
    ];
    let mut count = 0;
    for (name, stages) in expected {
        let cfg = ModelConfig::variant(name).unwrap();
        for (i, (b, h)) in stages.into_iter().enumerate() {
            let got = (cfg.stages[i].blocks, cfg.stages[i].hidden);
            ensure!(got == (b, h), "{name} S{i}: {got:?} != {:?}", (b, h));
            count += 1;
        }
    }
    Ok(format!("{count} stage (B, H) assertions"))
}

fn metrics_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..1000 {
        let k = rng.random_range(2..5);
        let n = rng.random_range(1..40);
        let pairs: Vec<(usize, usize)> = (0..n).map(|_| (rng.random_range(0..k), rng.random_range(0..k))).collect();
        let cm = ConfusionMatrix::from_pairs(k, pairs.iter().copied()).unwrap();
        for c in 0..k {
            let count = |f: &dyn Fn(usize, usize) -> bool| pairs.iter().filter(|&&(t, p)| f(t, p)).count() as u64;
            let tp = count(&|t, p| t == c && p == c);
            let fp = count(&|t, p| t != c && p == c);
            let fn_ = count(&|t, p| t == c && p != c);
            let tn = count(&|t, p| t != c && p != c);
            ensure!(sensitivity(&cm, c) == Rate::ratio(tp, tp + fn_), "trial {trial}: sensitivity");
            ensure!(specificity(&cm, c) == Rate::ratio(tn, tn + fp), "trial {trial}: specificity");
            ensure!(precision(&cm, c) == Rate::ratio(tp, tp + fp), "trial {trial}: precision");
        }
    }
    for trial in 0..1000 {
        let n = rng.random_range(2..=60);
        let levels = rng.random_range(1..20);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let (mut wins, mut total) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if labels[i] && !labels[j] {
                    total += 1.0;
                    wins += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                }
            }
        }
        let auc = roc_auc(&scores, &labels).unwrap().auc;
        ensure!(auc == wins / total, "trial {trial}: AUC {auc} vs pairwise {}", wins / total);
    }
    let cm = ConfusionMatrix::from_rows(vec![vec![2, 2], vec![1, 5]]).unwrap();
    ensure!(sensitivity(&cm, 0) == Rate::Defined(0.5), "worked sensitivity");
    ensure!(specificity(&cm, 0) == Rate::Defined(5.0 / 6.0), "worked specificity");
    ensure!(precision(&cm, 0) == Rate::Defined(2.0 / 3.0), "worked precision");
    let auc = roc_auc(&[0.9, 0.4, 0.6, 0.1], &[true, true, false, false]).unwrap().auc;
    ensure!(auc == 0.75, "worked AUC {auc}");
    Ok("1000 confusion and 1000 AUC instances agree exactly; worked examples reproduce".into())
}

fn determinism(work: &Path) -> Check {
    let spec = work.join("det_spec.json");
    fs::write(&spec, r#"{"train": 40, "val": 16, "test": 16, "seed": 3}"#).unwrap();
    let config = work.join("det_config.json");
    fs::write(&config, r#"{"seed": 4, "model": {"fusion": "early"}, "train": {"epochs": 2}}"#).unwrap();
    let mut trees = Vec::new();
    for rep in 0..2 {
        let root = work.join(format!("det{rep}"));
        let data = root.join("data");
        let out = root.join("run");
        run_ok(&["synth", "--spec", path(&spec), "--out", path(&data)])?;
        run_ok(&["train", "--config", path(&config), "--data", path(&data), "--out", path(&out)])?;
        run_ok(&["eval", "--model", path(&out.join("best.ckpt")), "--data", path(&data), "--split", "test", "--report", path(&root.join("report.json"))])?;
        let mut t = tree(&root);
        // The echoed config records the data path, which differs per repetition.
        t.remove(Path::new("run/config.json"));
        trees.push(t);
    }
    ensure!(trees[0].len() > 40, "expected dataset, run and report files");
    for (name, bytes) in &trees[0] {
        ensure!(trees[1].get(name) == Some(bytes), "{} differs between runs", name.display());
    }
    Ok(format!("{} files byte-identical across two synth/train/eval runs", trees[0].len()))
}

fn test_accuracy(report: &Path) -> f64 {
    let v: serde_json::Value = serde_json::from_slice(&fs::read(report).unwrap()).unwrap();
    v["accuracy"].as_f64().unwrap()
}

fn directional(work: &Path) -> Check {
    let start = Instant::now();
    let spec = work.join("dir_spec.json");
    fs::write(&spec, r#"{"train": 2000, "val": 400, "test": 400, "beta": 1.0, "seed": 0}"#).unwrap();
    let data = work.join("dir_data");
    run_ok(&["synth", "--spec", path(&spec), "--out", path(&data)])?;
    let mut acc = BTreeMap::new();
    for fusion in ["vision-only", "early", "late"] {
        let config = work.join(format!("{fusion}.json"));
        fs::write(&config, format!(r#"{{"seed": 0, "model": {{"fusion": "{fusion}"}}}}"#)).unwrap();
        let out = work.join(format!("run_{fusion}"));
        run_ok(&["train", "--config", path(&config), "--data", path(&data), "--out", path(&out)])?;
        let report = work.join(format!("report_{fusion}.json"));
        run_ok(&["eval", "--model", path(&out.join("best.ckpt")), "--data", path(&data), "--split", "test", "--report", path(&report)])?;
        acc.insert(fusion, test_accuracy(&report));
    }
    let elapsed = start.elapsed();
    let (v, e, l) = (acc["vision-only"], acc["early"], acc["late"]);
    let detail = format!(
        "test accuracy vision-only {:.1}%, early {:.1}%, late {:.1}% in {:.0}s",
        100.0 * v, 100.0 * e, 100.0 * l, elapsed.as_secs_f64()
    );
    ensure!(e - v >= 0.10 || l - v >= 0.10, "gap below 10 points: {detail}");
    ensure!(elapsed < Duration::from_secs(30 * 60), "too slow: {detail}");
    Ok(detail)
}

fn saliency(work: &Path) -> Check {
    let ckpt = work.join("run_early").join("best.ckpt");
    ensure!(ckpt.exists(), "needs the early-fusion model from the directional run");
    let model = checkpoint::load(&ckpt).map_err(|e| e.to_string())?;
    let target = model.config.num_classes - 1;
    let spec = DatasetSpec { beta: 1.0, seed: 0, ..DatasetSpec::new(2000, 400, 400) };
    let data = generate_synthetic_with_truth(&spec).map_err(|e| e.to_string())?;
    let (mut hits, mut total) = (0, 0);
    for (s, truth) in data.iter().filter(|(s, _)| s.split == Some(Split::Test)) {
        let meta = MetaInput::Record { record: &s.meta, mask: MetaMask::NONE };
        let h = gradcam(&model, &s.image, meta, target).map_err(|e| e.to_string())?;
        total += 1;
        if mass_inside(&h.full, &truth.ridge).is_some_and(|f| f > 0.5) {
            hits += 1;
        }
    }
    let frac = hits as f64 / total as f64;
    let detail = format!("{hits}/{total} test heatmaps ({:.1}%) put > 50% of their mass on the ridge", 100.0 * frac);
    ensure!(frac >= 0.70, "{detail}");
    Ok(detail)
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let w = work.path();
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Check + '_>)> = vec![
        ("gradient fidelity", Box::new(gradient_fidelity)),
        ("bias structure", Box::new(bias_structure)),
        ("class-token aggregation contract", Box::new(aggregation_contract)),
        ("masking invariant", Box::new(masking_invariant)),
        ("variant registry", Box::new(registry)),
        ("metrics oracle", Box::new(metrics_oracle)),
        ("determinism", Box::new(move || determinism(w))),
        ("directional metadata effect", Box::new(move || directional(w))),
        ("saliency sanity", Box::new(move || saliency(w))),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match result {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
