use std::fs;
use std::path::{Path, PathBuf};

use metafuse_core::checkpoint;
use metafuse_core::dataset::{
    generate_synthetic, load_dataset, read_pgm, save_dataset, split_of, summarize, DatasetSpec,
    Sample, Split,
};
use metafuse_core::gradcheck::{check_model, component_of, GradCheckOptions};
use metafuse_core::metrics::write_roc_csv;
use metafuse_core::run_config::DataSection;
use metafuse_core::saliency::{gradcam, write_heatmap};
use metafuse_core::train::{evaluate, predict_proba, train as run_training, write_history};
use metafuse_core::{build_model, Error, FusionMode, MetaInput, MetaMask, MetaRecord, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),

    #[error("gradient check failed: {component} ({fusion:?}) has relative error {error:.3e}, tolerance {tol:e}")]
    GradCheck {
        fusion: FusionMode,
        component: String,
        error: f64,
        tol: f64,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_validation() => 1,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        context: path.display().to_string(),
        source: e,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    Ok(())
}

pub fn synth(spec_path: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec_path).map_err(|e| Error::Io { path: spec_path.to_path_buf(), source: e })?;
    let spec: DatasetSpec = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", spec_path.display())))?;
    spec.validate()?;
    let samples = generate_synthetic(&spec)?;
    create_dir(out)?;
    save_dataset(out, &samples)?;
    write_json(&out.join("summary.json"), &summarize(&samples)?)?;
    eprintln!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn load_samples(run: &RunConfig, data: Option<&Path>, num_classes: usize) -> Result<(Vec<Sample>, DataSection)> {
    if let Some(dir) = data {
        let section = DataSection { path: Some(dir.to_path_buf()), synthetic: None };
        return Ok((load_dataset(dir, num_classes)?, section));
    }
    let section = run.data.clone().ok_or_else(|| {
        Error::Config("no data: pass --data DIR or add a `data` section to the config".into())
    })?;
    section.validate()?;
    let samples = match (&section.path, &section.synthetic) {
        (Some(dir), _) => load_dataset(dir, num_classes)?,
        (None, Some(spec)) => {
            if spec.num_classes != num_classes {
                return Err(Error::Config(format!(
                    "data.synthetic.num_classes is {} but model.num_classes is {num_classes}",
                    spec.num_classes
                ))
                .into());
            }
            generate_synthetic(spec)?
        }
        (None, None) => unreachable!("validated"),
    };
    Ok((samples, section))
}

pub fn train(config: &Path, data: Option<&Path>, out: &Path) -> Result<()> {
    let mut run = RunConfig::load(config)?;
    let model_cfg = run.model_config()?;
    let train_cfg = run.train_config()?;
    let (samples, section) = load_samples(&run, data, model_cfg.num_classes)?;
    run.data = Some(section);

    create_dir(out)?;
    write_json(&out.join("config.json"), &run.resolved()?)?;
    let model = build_model(&model_cfg)?;
    eprintln!(
        "training {} ({:?}, {} parameters) on {} samples",
        model_cfg.variant,
        model_cfg.fusion,
        model.param_count(),
        samples.len()
    );
    let history_path = out.join("history.jsonl");
    let mut history = Vec::new();
    let outcome = run_training(&model, &samples, &train_cfg, |record, current| {
        eprintln!(
            "epoch {:>3}  train loss {:.4} acc {:.3}  val loss {:.4} acc {:.3}  mask p {:.3}",
            record.epoch, record.train_loss, record.train_acc, record.val_loss, record.val_acc, record.mask_p
        );
        history.push(record.clone());
        write_history(&history_path, &history)?;
        let every = train_cfg.checkpoint_every;
        if every > 0 && (record.epoch + 1) % every == 0 {
            checkpoint::save(&out.join(format!("epoch_{}.ckpt", record.epoch)), current)?;
        }
        Ok(())
    })?;
    checkpoint::save(&out.join("best.ckpt"), &outcome.best)?;
    checkpoint::save(&out.join("last.ckpt"), &outcome.last)?;
    let best = &outcome.history[outcome.best_epoch];
    eprintln!("best epoch {} (val acc {:.3}); wrote {}", outcome.best_epoch, best.val_acc, out.display());
    Ok(())
}

fn roc_path(report: &Path, class: usize) -> PathBuf {
    let stem = report.file_stem().unwrap_or_default().to_string_lossy();
    report.with_file_name(format!("{stem}_roc_class{class}.csv"))
}

pub fn eval(model_path: &Path, data: &Path, split: &str, report_path: &Path) -> Result<()> {
    let split: Split = split.parse()?;
    let model = checkpoint::load(model_path)?;
    let samples = load_dataset(data, model.config.num_classes)?;
    let chosen = split_of(&samples, split);
    if chosen.is_empty() {
        return Err(Error::Validation(format!("{}: split `{split}` has no samples", data.display())).into());
    }
    let report = evaluate(&model, &chosen)?;
    write_json(report_path, &report)?;
    for class in &report.per_class {
        if !class.roc.is_empty() {
            write_roc_csv(&roc_path(report_path, class.class), &class.roc)?;
        }
    }
    println!("{split}: {} samples, accuracy {:.4}, loss {:.4}", report.num_samples, report.accuracy, report.loss);
    Ok(())
}

pub fn gradcheck(config: Option<&Path>, tol: f64, seed: u64, max_coords: usize, sabotage: Option<String>) -> Result<()> {
    if !(tol > 0.0) {
        return Err(Error::Validation(format!("--tol must be positive, got {tol}")).into());
    }
    let run = match config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let modes = match run.model.fusion {
        Some(mode) => vec![mode],
        None => vec![FusionMode::VisionOnly, FusionMode::Early, FusionMode::Late],
    };
    let base = run.model_config()?.with_seed(seed);
    let spec = DatasetSpec {
        num_classes: base.num_classes,
        image_size: base.image_size,
        seed,
        ..DatasetSpec::new(1, 1, 1)
    };
    let sample = generate_synthetic(&spec)?.swap_remove(0);
    let opts = GradCheckOptions { max_coords, seed, sabotage, ..GradCheckOptions::default() };

    let mut failure = None;
    for fusion in modes {
        let model = build_model(&base.clone().with_fusion(fusion))?;
        let report = check_model(&model, &sample.image, Some(&sample.meta), sample.label, &opts)?;
        println!("{fusion:?}: {} coordinates", report.coords_checked);
        for (component, err) in report.grouped(|p| component_of(p).to_string()) {
            let ok = err < tol;
            println!("  {component:<24} max rel error {err:.3e}  {}", if ok { "ok" } else { "FAIL" });
            if !ok && failure.is_none() {
                failure = Some(CliError::GradCheck { fusion, component, error: err, tol });
            }
        }
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn saliency(model_path: &Path, image_path: &Path, meta: Option<&str>, class: Option<usize>, out: &Path) -> Result<()> {
    let model = checkpoint::load(model_path)?;
    let image = read_pgm(image_path)?;
    model.check_image(&image)?;
    let record = meta.map(MetaRecord::parse_inline).transpose()?;
    let input = match (model.config.fusion.uses_meta(), &record) {
        (false, _) => {
            if record.is_some() {
                eprintln!("note: vision-only model; --meta ignored");
            }
            MetaInput::Absent
        }
        (true, Some(record)) => MetaInput::Record { record, mask: MetaMask::NONE },
        (true, None) => {
            return Err(Error::Validation(format!(
                "this {:?}-fusion model needs --meta age=<years>,sex=<F|M|U>",
                model.config.fusion
            ))
            .into())
        }
    };
    let probs = predict_proba(&model, &image, input)?;
    let target = match class {
        Some(k) => k,
        None => (0..probs.len()).max_by(|&a, &b| probs[a].total_cmp(&probs[b])).expect("classes"),
    };
    let heatmap = gradcam(&model, &image, input, target)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_heatmap(out, &heatmap)?;
    let probs: Vec<String> = probs.iter().map(|p| format!("{p:.4}")).collect();
    println!("class {target}; probabilities [{}]", probs.join(", "));
    Ok(())
}
