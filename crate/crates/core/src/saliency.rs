//! GradCAM over the last S2 activations.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Tape;
use crate::backbone::{MetaInput, Model};
use crate::dataset::{write_pgm, BoundingBox};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Class-activation map at S2 resolution plus its nearest-neighbor
/// upsampling to the input resolution. Values lie in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// `[h × w]`
    pub s2: Tensor,
    /// `[H × W]`
    pub full: Tensor,
}

/// `ReLU(Σ_c w_c · A_c)` with `w_c` the spatial mean of `grad[c]`, scaled to
/// a maximum of 1 (left at zero when nothing contributes).
pub fn cam_from_activations(activations: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let s = activations.shape();
    if s.len() != 3 || grad.shape() != s {
        return Err(Error::shape(
            "gradcam",
            format!("activations {:?} and gradients {:?} must be equal C×H×W", s, grad.shape()),
        ));
    }
    let (c, hw) = (s[0], s[1] * s[2]);
    let mut cam = vec![0.0; hw];
    for ch in 0..c {
        let g = &grad.data()[ch * hw..(ch + 1) * hw];
        let w = g.iter().sum::<f64>() / hw as f64;
        for (o, a) in cam.iter_mut().zip(&activations.data()[ch * hw..(ch + 1) * hw]) {
            *o += w * a;
        }
    }
    for v in cam.iter_mut() {
        *v = v.max(0.0);
    }
    let max = cam.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        for v in cam.iter_mut() {
            *v = (*v / max).min(1.0);
        }
    }
    Tensor::new(vec![s[1], s[2]], cam)
}

/// Nearest-neighbor upsampling of `[h × w]` to `[H × W]`.
pub fn upsample_nearest(map: &Tensor, height: usize, width: usize) -> Tensor {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        let sr = r * h / height;
        for c in 0..width {
            out.push(map.data()[sr * w + c * w / width]);
        }
    }
    Tensor::new(vec![height, width], out).expect("positive size")
}

/// GradCAM heatmap for logit `target`.
pub fn gradcam(model: &Model, image: &Tensor, meta: MetaInput<'_>, target: usize) -> Result<Heatmap> {
    let k = model.config.num_classes;
    if target >= k {
        return Err(Error::Validation(format!(
            "target class {target} out of range for {k} classes"
        )));
    }
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, image, meta)?;
    let logit = tape.pick(out.logits, target)?;
    let grads = tape.backward(logit)?;
    let activations = tape.value(out.s2.map).clone();
    let s2 = cam_from_activations(&activations, &grads.wrt(out.s2.map))?;
    let full = upsample_nearest(&s2, image.shape()[1], image.shape()[2]);
    Ok(Heatmap { s2, full })
}

/// Fraction of the heatmap's total mass inside `bbox`; `None` for an all-zero map.
pub fn mass_inside(map: &Tensor, bbox: &BoundingBox) -> Option<f64> {
    let w = map.shape()[1];
    let total: f64 = map.data().iter().sum();
    if total <= 0.0 {
        return None;
    }
    let inside: f64 = map
        .data()
        .iter()
        .enumerate()
        .filter(|(i, _)| bbox.contains(i / w, i % w))
        .map(|(_, v)| v)
        .sum();
    Some(inside / total)
}

/// One row of comma-separated values per heatmap row.
pub fn write_heatmap_csv(path: &Path, map: &Tensor) -> Result<()> {
    let w = map.shape()[1];
    let mut out = String::new();
    for row in map.data().chunks(w) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", cells.join(",")).expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes `<prefix>.pgm`/`.csv` at input resolution and
/// `<prefix>_s2.pgm`/`.csv` at S2 resolution.
pub fn write_heatmap(prefix: &Path, heatmap: &Heatmap) -> Result<()> {
    let with = |suffix: &str| {
        let mut name = prefix.file_name().unwrap_or_default().to_os_string();
        name.push(suffix);
        prefix.with_file_name(name)
    };
    write_pgm(&with(".pgm"), &heatmap.full)?;
    write_heatmap_csv(&with(".csv"), &heatmap.full)?;
    write_pgm(&with("_s2.pgm"), &heatmap.s2)?;
    write_heatmap_csv(&with("_s2.csv"), &heatmap.s2)
}
